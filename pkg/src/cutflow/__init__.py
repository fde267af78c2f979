"""Space-time cut finite element solver for 2D two-phase incompressible flow."""

__version__ = "0.1.0"
