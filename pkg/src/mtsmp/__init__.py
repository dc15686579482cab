"""Maximum-principle toolkit for stochastic control with multi-time state costs."""

__version__ = "0.1.0"
