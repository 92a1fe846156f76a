"""Multi-agent flocking control with demonstration pretraining."""

__version__ = "0.1.0"
