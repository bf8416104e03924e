"""Latent-moment models for recurrent binary outcomes.

Binary panel outcomes are modeled as threshold crossings of a latent
sinh-arcsinh variable whose location, scale, skewness and tail weight
each follow their own regression.  The package provides:

- ``sas``: the sinh-arcsinh distribution family
- ``panel``: panel data containers and the latent regression structure
- ``hmc``: a self-contained Hamiltonian Monte Carlo sampler + diagnostics
- ``bayes``: the fully Bayesian threshold model (exact likelihood)
- ``surface``: the simulation-calibrated probability surface and the
  pseudo-likelihood model built on it
- ``baselines``: GEE and logistic random-intercept GLMM reference fits
- ``simstudy``: data generators and the replication harness
- ``metrics``: discrimination / calibration / recovery scoring
- ``cli``: command-line workflows tying everything together
"""

__version__ = "0.1.0"
