"""Chain-based secure aggregation: learners in an encrypted ring, a broker-only controller."""

__version__ = "0.1.0"
