"""Cross-domain imitation from state-only demonstrations on toy line domains."""

__version__ = "0.1.0"
