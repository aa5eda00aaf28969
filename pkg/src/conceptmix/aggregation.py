"""Multi-level feature aggregation: recalibrate tapped depths, then fuse.

Each tapped feature map is recalibrated against the final backbone output
through two sigmoid attention maps computed from their channel concat:

    cat  = [Z_level ; Z_out]                       (B, R, 2D)
    U^c  = sigmoid(W_c . mean_R(cat))              (B, 1, D)   channel map
    U^s  = sigmoid(conv3x3(mean_D(cat) as HxW))    (B, R, 1)   spatial map
    E    = Z_level + (U^s * U^c) . Z_level

The three recalibrated levels are concatenated channelwise, average-pooled
over patches, pushed through a shared MLP onto concept space, layer
normalized, and added to the per-image concept feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import MLP, LayerNorm, Linear, default_dtype, prefixed

LEVELS = ("low", "mid", "high")


class LevelRecalibration:
    """Per-level parameters: channel 1x1 conv (2D -> D) and spatial 3x3 conv."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype=None):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.channel_map = Linear(rng, 2 * dim, dim, dtype=dtype)
        self.spatial_kernel = ad.parameter(
            rng.uniform(-1.0 / 3.0, 1.0 / 3.0, size=(1, 3, 3)).astype(dtype))
        self.spatial_bias = ad.parameter(np.zeros(1, dtype=dtype))

    def named_params(self) -> dict[str, ad.Tensor]:
        out = prefixed("channel", self.channel_map.named_params())
        out["spatial.kernel"] = self.spatial_kernel
        out["spatial.bias"] = self.spatial_bias
        return out


def recalibrate(z_level: ad.Tensor, z_out: ad.Tensor, params: LevelRecalibration,
                grid: tuple[int, int], u_override: float | None = None) -> ad.Tensor:
    """Context-gated residual enhancement of one tapped level: (B, R, D).

    ``u_override`` replaces the learned gate U with a constant (test hook;
    0 yields the bare residual path E = Z_level).
    """
    if z_level.shape != z_out.shape:
        raise ValueError(f"level/output shapes differ: {z_level.shape} vs {z_out.shape}")
    b, r, d = z_level.shape
    h, w = grid
    if h * w != r:
        raise ValueError(f"grid {grid} does not factor {r} patches")
    if u_override is not None:
        return z_level + float(u_override) * z_level
    cat = ad.concat([z_level, z_out], axis=-1)
    channel_gate = ad.sigmoid(params.channel_map(cat.mean(axis=1)))  # (B, D)
    channel_gate = ad.reshape(channel_gate, (b, 1, d))
    plane = ad.reshape(cat.mean(axis=-1), (b, h, w, 1))
    spatial_gate = ad.sigmoid(
        ad.dwconv3x3(plane, params.spatial_kernel, params.spatial_bias))
    spatial_gate = ad.reshape(spatial_gate, (b, r, 1))
    gate = spatial_gate * channel_gate  # (B, R, D), entries in (0, 1)
    return z_level + gate * z_level


class MultiLevelAggregator:
    """Three per-level recalibrations plus the shared projection head."""

    def __init__(self, rng: np.random.Generator, dim: int, num_concepts: int,
                 dtype=None):
        self.levels = {name: LevelRecalibration(rng, dim, dtype=dtype)
                       for name in LEVELS}
        self.project = MLP(rng, (3 * dim, dim, num_concepts), dtype=dtype)
        self.norm = LayerNorm(num_concepts, dtype=dtype)

    def recalibrate_level(self, name: str, z_level: ad.Tensor, z_out: ad.Tensor,
                          grid: tuple[int, int],
                          u_override: float | None = None) -> ad.Tensor:
        return recalibrate(z_level, z_out, self.levels[name], grid,
                           u_override=u_override)

    def aggregate(self, e_low: ad.Tensor, e_mid: ad.Tensor,
                  e_high: ad.Tensor) -> ad.Tensor:
        return aggregate(e_low, e_mid, e_high, self.project, self.norm)

    def zero_projection(self):
        """Zero the MLP's final layer (ablation hook: output becomes 0)."""
        last = self.project.layers[-1]
        last.weight.data[...] = 0.0
        if last.bias is not None:
            last.bias.data[...] = 0.0

    def named_params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for name in LEVELS:
            out.update(prefixed(name, self.levels[name].named_params()))
        out.update(prefixed("project", self.project.named_params()))
        out.update(prefixed("norm", self.norm.named_params()))
        return out


def aggregate(e_low: ad.Tensor, e_mid: ad.Tensor, e_high: ad.Tensor,
              project: MLP, norm: LayerNorm) -> ad.Tensor:
    """Concat three levels, pool patches, project to concept space: (B, C)."""
    if not (e_low.shape == e_mid.shape == e_high.shape):
        raise ValueError("level shapes must match")
    cat = ad.concat([e_low, e_mid, e_high], axis=-1)  # (B, R, 3D)
    pooled = cat.mean(axis=1)  # (B, 3D)
    return norm(project(pooled))


def fuse(concept_feature: ad.Tensor, aggregated: ad.Tensor) -> ad.Tensor:
    """Final per-image representation: elementwise sum, (B, C)."""
    if concept_feature.shape != aggregated.shape:
        raise ValueError(f"fuse shapes differ: {concept_feature.shape} "
                         f"vs {aggregated.shape}")
    return concept_feature + aggregated
