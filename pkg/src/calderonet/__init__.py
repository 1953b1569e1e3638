"""Operator learning for the 2-D conductivity equation: FEM DtN maps, boundary
Sobolev spaces, Gaussian measures and DeepONet surrogates."""

__version__ = "0.1.0"
