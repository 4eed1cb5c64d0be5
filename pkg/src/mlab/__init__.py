"""Monte Carlo laboratory for rank-n martingales on rotationally symmetric
Cartan-Hadamard manifolds."""

__version__ = "0.1.0"
