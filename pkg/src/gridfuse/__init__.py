"""Two-stage (event classifier, then amount regressor) fusion of gridded
multi-source precipitation products."""

__version__ = "0.1.0"
