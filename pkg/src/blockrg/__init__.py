"""Block-averaging renormalization group on lattice tori: lattices, regions, actions, multiscale
Green's functions, fluctuation covariances, the RG step and polymer-gas algebra."""

__version__ = "0.1.0"
