"""Pure-numpy reference implementations of the hot kernels.

These are the semantics of record: the compiled extension must match them
(tests compare both backends). Shapes follow the op docstrings in
``conceptmix.autodiff``.
"""

from __future__ import annotations

import numpy as np


def dwconv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    out = np.broadcast_to(bias.astype(x.dtype), x.shape).copy()
    for di in range(3):
        for dj in range(3):
            out += weight[:, di, dj] * xp[:, di:di + h, dj:dj + w, :]
    return out


def dwconv3x3_backward(gy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    b, h, w, c = x.shape
    gyp = np.zeros((b, h + 2, w + 2, c), dtype=gy.dtype)
    gyp[:, 1:-1, 1:-1, :] = gy
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    gx = np.zeros_like(x)
    gw = np.zeros_like(weight)
    for di in range(3):
        for dj in range(3):
            gx += weight[:, di, dj] * gyp[:, 2 - di:2 - di + h, 2 - dj:2 - dj + w, :]
            gw[:, di, dj] = (gy * xp[:, di:di + h, dj:dj + w, :]).sum(axis=(0, 1, 2))
    gb = gy.sum(axis=(0, 1, 2))
    return gx, gw, gb


def gate_filter_forward(gates: np.ndarray, cutoff: np.ndarray):
    active = gates >= cutoff
    out = np.where(active, gates - cutoff, np.zeros((), dtype=gates.dtype))
    return out, active


def gate_filter_backward(gy: np.ndarray, active: np.ndarray):
    ggates = np.where(active, gy, np.zeros((), dtype=gy.dtype))
    gcut = -ggates.sum(axis=-1, keepdims=True)
    return ggates, gcut


def importance_normalize_forward(imp: np.ndarray):
    denom = imp.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, np.ones((), dtype=imp.dtype))
    weights = np.where(denom > 0, imp / safe, np.zeros((), dtype=imp.dtype))
    return weights, denom


def importance_normalize_backward(gw: np.ndarray, weights: np.ndarray, denom: np.ndarray):
    # d(w_k)/d(e_i) = (delta_ki - w_k) / S on S > 0, zero elsewhere
    inner = (gw * weights).sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, np.ones((), dtype=gw.dtype))
    return np.where(denom > 0, (gw - inner) / safe, np.zeros((), dtype=gw.dtype))
