"""Time-varying GP bandits with a set of candidate priors."""

__version__ = "0.1.0"
