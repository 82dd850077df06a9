"""Online continual learning by learning a distribution over classifier weights."""
__version__ = "0.1.0"
