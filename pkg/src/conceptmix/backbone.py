"""Frozen multi-depth feature extractors with optional adapter hooks.

Two desk-scale backbones (a patch-token transformer without positional
encoding and a convolutional stack without pooling) expose features at
three tapped depths plus the final block, all shaped (batch, R, D). Base
parameters are plain constants: they never collect gradients, so the
parameter-efficient contract (only adapters train) holds by construction.
A third kind, ``precomputed``, is a placeholder for datasets that carry
ready-made multi-depth features.

Adapters attach to the query and value projections of each transformer
block (or the channel-mixing map of each conv block) and compute
``base(x) + alpha * mixture_update(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import default_dtype

TOY_VIT = "toy-vit-no-posenc"
TOY_CNN = "toy-cnn-no-pool"
PRECOMPUTED_KIND = "precomputed"

# adapter attachment sites per block, by backbone kind
ADAPTER_SITES = {TOY_VIT: ("query", "value"), TOY_CNN: ("pointwise",)}


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = TOY_VIT
    depth: int = 6
    width: int = 32
    patch_grid: tuple[int, int] = (4, 4)
    tap_points: tuple[int, int, int] | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in (TOY_VIT, TOY_CNN, PRECOMPUTED_KIND):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == PRECOMPUTED_KIND:
            return
        if self.depth < 2 or self.width < 1:
            raise ValueError("depth must be >= 2 and width positive")
        taps = self.taps
        if list(taps) != sorted(set(taps)):
            raise ValueError("taps not increasing")
        if taps[-1] >= self.depth or taps[0] < 0:
            raise ValueError(f"taps {taps} out of range for depth {self.depth}")

    @property
    def taps(self) -> tuple[int, int, int]:
        if self.tap_points is not None:
            return tuple(self.tap_points)
        return (self.depth // 4, self.depth // 2, (3 * self.depth) // 4)

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]


@dataclass
class MultiDepthFeatures:
    """Tapped feature maps; all four share one (batch, R, D) shape."""

    low: ad.Tensor
    mid: ad.Tensor
    high: ad.Tensor
    out: ad.Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.low, self.mid, self.high, self.out)}
        if len(shapes) != 1:
            raise ValueError(f"tap shapes disagree: {shapes}")

    def as_dict(self) -> dict[str, ad.Tensor]:
        return {"low": self.low, "mid": self.mid, "high": self.high, "out": self.out}


def _const(rng, shape, fan_in, dtype) -> ad.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Backbone:
    """Parameter store for one frozen feature extractor."""

    def __init__(self, config: BackboneConfig, seed: int, input_dim: int,
                 dtype=None):
        if config.kind == PRECOMPUTED_KIND:
            raise ValueError("precomputed features carry no backbone parameters")
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.config = config
        self.input_dim = int(input_dim)
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        d = config.width
        self.embed_weight = _const(rng, (d, input_dim), input_dim, dtype)
        self.embed_bias = ad.Tensor(np.zeros(d, dtype=dtype))
        self.blocks: list[dict[str, ad.Tensor]] = []
        for _ in range(config.depth):
            blk = {"ln1.gain": ad.Tensor(np.ones(d, dtype=dtype)),
                   "ln1.offset": ad.Tensor(np.zeros(d, dtype=dtype))}
            if config.kind == TOY_VIT:
                for name in ("query", "key", "value", "output"):
                    blk[f"{name}.weight"] = _const(rng, (d, d), d, dtype)
                    blk[f"{name}.bias"] = ad.Tensor(np.zeros(d, dtype=dtype))
                blk["ln2.gain"] = ad.Tensor(np.ones(d, dtype=dtype))
                blk["ln2.offset"] = ad.Tensor(np.zeros(d, dtype=dtype))
                blk["mlp1.weight"] = _const(rng, (2 * d, d), d, dtype)
                blk["mlp1.bias"] = ad.Tensor(np.zeros(2 * d, dtype=dtype))
                blk["mlp2.weight"] = _const(rng, (d, 2 * d), 2 * d, dtype)
                blk["mlp2.bias"] = ad.Tensor(np.zeros(d, dtype=dtype))
            else:
                blk["spatial.kernel"] = _const(rng, (d, 3, 3), 9, dtype)
                blk["spatial.bias"] = ad.Tensor(np.zeros(d, dtype=dtype))
                blk["pointwise.weight"] = _const(rng, (d, d), d, dtype)
                blk["pointwise.bias"] = ad.Tensor(np.zeros(d, dtype=dtype))
            self.blocks.append(blk)

    def named_tensors(self) -> dict[str, ad.Tensor]:
        out = {"embed.weight": self.embed_weight, "embed.bias": self.embed_bias}
        for i, blk in enumerate(self.blocks):
            for k, t in blk.items():
                out[f"block{i}.{k}"] = t
        return out

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def adapter_sites(self) -> list[tuple[int, str]]:
        return [(i, site) for i in range(self.config.depth)
                for site in ADAPTER_SITES[self.config.kind]]


def build_backbone(config: BackboneConfig, seed: int, input_dim: int,
                   dtype=None) -> Backbone:
    """Deterministically initialized frozen parameter store."""
    return Backbone(config, seed, input_dim, dtype=dtype)


def extract_features(backbone: Backbone, inputs, adapters: dict | None = None,
                     training: bool = False,
                     rng: np.random.Generator | None = None,
                     trace: list | None = None) -> MultiDepthFeatures:
    """Run the frozen forward, collecting the three taps and the output.

    ``adapters`` maps (block_index, site) to a mixture adapter replacing
    that site's plain linear map.
    """
    cfg = backbone.config
    x = inputs if isinstance(inputs, ad.Tensor) else ad.Tensor(
        np.asarray(inputs, dtype=backbone.dtype))
    if x.ndim != 3 or x.shape[1] != cfg.num_patches or x.shape[2] != backbone.input_dim:
        raise ValueError(f"inputs must be (batch, {cfg.num_patches}, "
                         f"{backbone.input_dim}), got {x.shape}")
    adapters = adapters or {}

    def site_linear(i: int, site: str, z: ad.Tensor, w: ad.Tensor,
                    b: ad.Tensor) -> ad.Tensor:
        adapter = adapters.get((i, site))
        if adapter is None:
            return ad.linear(z, w, b)
        return adapter(z, w, b, training=training, rng=rng, trace=trace)

    tokens = ad.linear(x, backbone.embed_weight, backbone.embed_bias)
    taps: dict[int, ad.Tensor] = {}
    drop = cfg.dropout if training else 0.0
    for i, blk in enumerate(backbone.blocks):
        normed = ad.layer_norm(tokens, blk["ln1.gain"], blk["ln1.offset"])
        if cfg.kind == TOY_VIT:
            q = site_linear(i, "query", normed, blk["query.weight"], blk["query.bias"])
            k = ad.linear(normed, blk["key.weight"], blk["key.bias"])
            v = site_linear(i, "value", normed, blk["value.weight"], blk["value.bias"])
            scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(cfg.width))
            ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
            tokens = tokens + ad.linear(ctx, blk["output.weight"], blk["output.bias"])
            normed2 = ad.layer_norm(tokens, blk["ln2.gain"], blk["ln2.offset"])
            hidden = ad.gelu(ad.linear(normed2, blk["mlp1.weight"], blk["mlp1.bias"]))
            if drop > 0.0:
                hidden = ad.dropout(hidden, drop, rng)
            tokens = tokens + ad.linear(hidden, blk["mlp2.weight"], blk["mlp2.bias"])
        else:
            gh, gw = cfg.patch_grid
            planes = ad.reshape(normed, (-1, gh, gw, cfg.width))
            spatial = ad.dwconv3x3(planes, blk["spatial.kernel"], blk["spatial.bias"])
            mixed = ad.gelu(ad.reshape(spatial, (-1, cfg.num_patches, cfg.width)))
            if drop > 0.0:
                mixed = ad.dropout(mixed, drop, rng)
            update = site_linear(i, "pointwise", mixed,
                                 blk["pointwise.weight"], blk["pointwise.bias"])
            tokens = tokens + update
        if i in cfg.taps or i == cfg.depth - 1:
            taps[i] = tokens
    low, mid, high = (taps[t] for t in cfg.taps)
    return MultiDepthFeatures(low=low, mid=mid, high=high, out=taps[cfg.depth - 1])
