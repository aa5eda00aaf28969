"""Hot numeric kernels with a compiled core and a numpy fallback.

The backend is chosen once at import time. Set ``CONCEPTMIX_KERNELS`` to
``compiled`` or ``fallback`` to force one; the default ``auto`` uses the
compiled extension when it was built and silently falls back otherwise.
Both backends implement identical semantics (see ``fallback.py``).
"""

from __future__ import annotations

import os

from . import fallback as _fb

_choice = os.environ.get("CONCEPTMIX_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "fallback"):
    raise RuntimeError(f"CONCEPTMIX_KERNELS must be auto|compiled|fallback, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import compiled as _impl
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError("CONCEPTMIX_KERNELS=compiled but the extension is not built")
        _impl = None
if _impl is None:
    _impl = _fb

BACKEND = "fallback" if _impl is _fb else "compiled"

dwconv3x3_forward = _impl.dwconv3x3_forward
dwconv3x3_backward = _impl.dwconv3x3_backward
gate_filter_forward = _impl.gate_filter_forward
gate_filter_backward = _impl.gate_filter_backward
importance_normalize_forward = _impl.importance_normalize_forward
importance_normalize_backward = _impl.importance_normalize_backward
