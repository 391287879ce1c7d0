"""Analysis figures rendered from asymct metrics CSVs.

The package reads only the documented CSV schemas (round records, co-teaching
records, ablation comparison) and never touches checkpoints or raw data: the
boundary between training and plotting is a file contract.
"""

from actplots.render import FIGURE_KINDS, PlotSpec, SchemaError, render

__version__ = "0.1.0"

__all__ = ["FIGURE_KINDS", "PlotSpec", "SchemaError", "render", "__version__"]
