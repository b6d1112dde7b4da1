"""semid: learnable item tokenization and desk-scale generative recommendation."""

__version__ = "0.1.0"
