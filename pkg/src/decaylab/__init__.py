"""decaylab: a desk-scale laboratory for weighted resolvent estimates,
meromorphic continuation, Gevrey frequency cutoffs, and local energy decay
of waves driven by magnetic Schrodinger operators.

Submodules
----------
weights     Carleman weight profiles, exponential weights, field specs.
lattice     Grids and sparse operator assembly (magnetic / exterior / radial).
freekernel  Free-resolvent kernels via Hankel functions and their continuation.
resolvent   Limiting-absorption solves, sweeps, Carleman ratios, continuation.
cutoffs     Frequency cutoff families and Helffer-Sjostrand calculus.
wavelab     Spectral wave propagation and decay measurements.
cli         Reproducible experiment runner with CSV/JSON artifacts.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
