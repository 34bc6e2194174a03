"""Component-aware transformer for one-stage whole-body mesh recovery, at desk scale."""

__version__ = "0.1.0"
