"""flowlab: stochastic flows, their variational processes and flow-difference decompositions."""

__version__ = "0.1.0"
