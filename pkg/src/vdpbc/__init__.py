"""Virtual differential passivity based control of flexible-joint robots."""

__version__ = "0.1.0"
