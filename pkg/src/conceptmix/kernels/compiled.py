"""Wrappers over the compiled extension, shape-compatible with fallback.py.

Importing this module raises ImportError when the extension is not
built; the package __init__ treats that as the cue to use the fallback.
"""

from __future__ import annotations

import numpy as np

from . import _core


def _c(a: np.ndarray) -> np.ndarray:
    # typed memoryviews need contiguous writable buffers; broadcast views are neither
    a = np.ascontiguousarray(a)
    return a if a.flags.writeable else a.copy()


def dwconv3x3_forward(x, weight, bias):
    x, weight, bias = _c(x), _c(weight), _c(bias)
    out = np.empty_like(x)
    _core.dwconv3x3_fwd(x, weight, bias, out)
    return out


def dwconv3x3_backward(gy, x, weight):
    gy, x, weight = _c(gy), _c(x), _c(weight)
    gx = np.empty_like(x)
    gw = np.zeros_like(weight)
    gb = np.zeros(weight.shape[0], dtype=weight.dtype)
    _core.dwconv3x3_bwd(gy, x, weight, gx, gw, gb)
    return gx, gw, gb


def gate_filter_forward(gates, cutoff):
    flat = _c(gates).reshape(-1, gates.shape[-1])
    cut = _c(np.broadcast_to(cutoff, gates.shape[:-1] + (1,))).reshape(-1)
    out = np.empty_like(flat)
    active = np.empty(flat.shape, dtype=np.uint8)
    _core.gate_filter_fwd(flat, cut, out, active)
    return out.reshape(gates.shape), active.reshape(gates.shape).astype(bool)


def gate_filter_backward(gy, active):
    flat = _c(gy).reshape(-1, gy.shape[-1])
    act = _c(active).astype(np.uint8).reshape(flat.shape)
    ggates = np.empty_like(flat)
    gcut = np.empty(flat.shape[:1], dtype=gy.dtype)
    _core.gate_filter_bwd(flat, act, ggates, gcut)
    return ggates.reshape(gy.shape), gcut.reshape(gy.shape[:-1] + (1,))


def importance_normalize_forward(imp):
    flat = _c(imp).reshape(-1, imp.shape[-1])
    weights = np.empty_like(flat)
    denom = np.empty(flat.shape[:1], dtype=imp.dtype)
    _core.importance_normalize_fwd(flat, weights, denom)
    return weights.reshape(imp.shape), denom.reshape(imp.shape[:-1] + (1,))


def importance_normalize_backward(gw, weights, denom):
    flat = _c(gw).reshape(-1, gw.shape[-1])
    wf = _c(weights).reshape(flat.shape)
    df = _c(denom).reshape(-1)
    out = np.empty_like(flat)
    _core.importance_normalize_bwd(flat, wf, df, out)
    return out.reshape(gw.shape)
