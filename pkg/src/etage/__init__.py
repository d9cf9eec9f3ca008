"""Online test-time adaptation with entropy, gradient-norm and PLPD sample selection."""

__version__ = "0.1.0"
