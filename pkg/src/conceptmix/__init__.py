"""conceptmix: few-shot concept-prototype classification with gated
low-rank expert adapters and multi-level feature aggregation.

The numeric core is a small numpy tape (``conceptmix.autodiff``); the hot
kernels have a compiled backend with a pure-numpy fallback
(``conceptmix.kernels``). Everything is deterministic given seeds.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
