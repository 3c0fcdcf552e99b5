"""Lifetime-value aware ranking: a synthetic market, a recurrent actor-critic
trained itemwise over episodes, and the offline evaluation around it."""

__version__ = "0.1.0"
