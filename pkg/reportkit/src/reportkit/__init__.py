"""Figure generation for the lattice SHE/KPZ laboratory's CSV/JSON outputs.

Consumes only the documented file formats of the simulation package (never
its code): rate fits become log-log plots with target reference lines,
pairing ensembles become scatter plots with the effective-variance slope,
noise checks become covariance overlays, and replica samples become normal
quantile plots.  Captions are machine-written from the same numbers that
appear in the figures, so the two can never disagree.
"""

from .plots import PlotSpec, render

__all__ = ["PlotSpec", "render"]

__version__ = "0.1.0"
