"""Layer-wise teacher-student training of spiking networks from ANN features."""

__version__ = "0.1.0"
