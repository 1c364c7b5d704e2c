"""Multi-specialist face presentation attack detection toolkit."""

__version__ = "0.1.0"
