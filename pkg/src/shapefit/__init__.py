"""Interpretable additive models for insurance pricing.

Each covariate (or covariate pair) gets its own shape function, either a
small feedforward network or a monotonicity-constrained lattice. Terms sum
into a link-transformed predictor, are trained by penalized projected
gradient descent, and can be selected through a staged screening pipeline.
"""

__version__ = "0.1.0"
