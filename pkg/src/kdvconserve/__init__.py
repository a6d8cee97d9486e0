"""Conservative DG solvers for the generalized KdV equation and the
Hirota-Satsuma coupled KdV system, with penalty parameters in the numerical
traces determined implicitly by discrete conservation constraints."""

__version__ = "0.1.0"
