"""BundleFlow: flow-based menus for single-bidder combinatorial auctions."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
