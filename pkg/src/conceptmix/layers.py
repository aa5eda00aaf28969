"""Small learned maps: linear layers, two-layer perceptrons, layer norm.

Each container owns its parameter tensors and reports them through
``named_params()`` so optimizers and checkpoints see one flat dict of
hierarchical names. Default dtype is float32; set ``CONCEPTMIX_FP64=1``
for the 64-bit verification mode.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad


def default_dtype() -> np.dtype:
    flag = os.environ.get("CONCEPTMIX_FP64", "").lower()
    return np.dtype(np.float64 if flag in ("1", "true", "yes", "on") else np.float32)


def prefixed(prefix: str, params: dict[str, ad.Tensor]) -> dict[str, ad.Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    """y = x W^T + b with uniform(-1/sqrt(d_in), 1/sqrt(d_in)) init."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, dtype=None):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = ad.parameter(
            rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype))
        self.bias = ad.parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named_params(self) -> dict[str, ad.Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class MLP:
    """Stacked linear layers with GELU between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, dims: tuple[int, ...], dtype=None):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(rng, dims[i], dims[i + 1], dtype=dtype)
                       for i in range(len(dims) - 1)]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x

    def named_params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{i}", layer.named_params()))
        return out


class LayerNorm:
    """Normalization over the last axis with learned gain and offset."""

    def __init__(self, dim: int, dtype=None, eps: float = 1e-6):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.gain = ad.parameter(np.ones(dim, dtype=dtype))
        self.offset = ad.parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.gain, self.offset, axis=-1, eps=self.eps)

    def named_params(self) -> dict[str, ad.Tensor]:
        return {"gain": self.gain, "offset": self.offset}
