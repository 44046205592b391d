"""decaylab-plots: render the experiment runner's CSV/manifest artifacts.

Figures never recompute science: they display CSV columns and the fits
declared in the manifests, so the primary package stays the single source of
numerical truth.
"""

__version__ = "0.1.0"

SUPPORTED_FORMAT_VERSION = 1
