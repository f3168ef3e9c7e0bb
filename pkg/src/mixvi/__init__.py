"""Mixture variational inference laboratory.

Jointly adapted mixtures of variational components under a shared-
denominator importance-weighted bound, the model cookbook combining them
with hierarchies, autoregressive flows and a pseudo-input prior, the
population Monte Carlo counterpart, and latent-representation
diagnostics — all at desk scale on a small float64 autodiff core.
"""

__version__ = "0.1.0"
