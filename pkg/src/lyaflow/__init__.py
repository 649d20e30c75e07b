"""Day-5 to Year-1 CT prediction with a Lyapunov-guided flow student on synthetic phantoms."""

__version__ = "0.1.0"
