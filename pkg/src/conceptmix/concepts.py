"""Concept bank, activation scoring, and prototype-based classification.

Per-patch features are scored against a learnable bank of concept vectors,
smoothed into per-patch concept distributions, refined by per-concept
(depthwise) convolutions over the patch grid, and max-pooled into one
concept vector per image:

    scores      A[n,r,c] = cos(F[n,r], P[c])            (standard mode)
    smoothed    At = softmax(A / tau)                   over concepts
    features    h = maxpool_{H,W}( LN( conv1x1(At) + conv3x3(At) ) )
    prototypes  CP[i] = mean_k h_support[i,k]
    similarity  M[q,i] = cos(h_query[q], CP[i])
    prediction  argmax_i M[q,i]

The literal scoring mode divides the inner product by the product of
squared norms instead of plain norms; it is an alternative normalization
kept behind a flag (unbounded, not scale-invariant, off by default).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import LayerNorm, default_dtype, prefixed

STANDARD_COSINE = "standard-cosine"
LITERAL_SQUARED = "literal-squared-norm"


class ConceptBank:
    """The learnable concept matrix (C, D); rows are concept vectors."""

    def __init__(self, rng: np.random.Generator, num_concepts: int, dim: int,
                 dtype=None):
        if num_concepts < 1 or dim < 1:
            raise ValueError("num_concepts and dim must be positive")
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.matrix = ad.parameter(
            (rng.normal(size=(num_concepts, dim)) / np.sqrt(dim)).astype(dtype))
        self._rng = rng

    @property
    def num_concepts(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def reinit_degenerate_rows(self, floor: float = 1e-8) -> int:
        """Re-draw any concept row whose norm collapsed below ``floor``."""
        m = self.matrix.data
        norms = np.linalg.norm(m, axis=1)
        bad = np.flatnonzero(norms < floor)
        for i in bad:
            m[i] = (self._rng.normal(size=self.dim) / np.sqrt(self.dim)).astype(m.dtype)
        return int(bad.size)

    def named_params(self) -> dict[str, ad.Tensor]:
        return {"matrix": self.matrix}


def activation_scores(features: ad.Tensor, concept_bank: ad.Tensor,
                      mode: str = STANDARD_COSINE) -> ad.Tensor:
    """Score patches against concepts: (..., R, D) x (C, D) -> (..., R, C)."""
    if mode == STANDARD_COSINE:
        return ad.cosine_rows(features, concept_bank)
    if mode == LITERAL_SQUARED:
        num = ad.matmul(features, ad.transpose(concept_bank))
        nf = ad.l2_norm(features, axis=-1)
        nc = ad.reshape(ad.l2_norm(concept_bank, axis=-1), (1, concept_bank.shape[0]))
        return num / ((nf * nf) * (nc * nc))
    raise ValueError(f"unknown activation mode {mode!r}")


def smooth_activations(scores: ad.Tensor, tau: float) -> ad.Tensor:
    """Temperature softmax over the concept axis."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return ad.softmax(scores * (1.0 / tau), axis=-1)


class ConceptRefiner:
    """Depthwise 1x1 + 3x3 convolutions and layer norm for concept maps.

    The 1x1 depthwise kernel is one scale and bias per concept; it starts
    at identity (scale 1, bias 0) and the 3x3 kernel starts small so the
    initial refinement is close to a pass-through.
    """

    def __init__(self, rng: np.random.Generator, num_concepts: int, dtype=None):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.point_scale = ad.parameter(np.ones(num_concepts, dtype=dtype))
        self.point_bias = ad.parameter(np.zeros(num_concepts, dtype=dtype))
        self.spatial_kernel = ad.parameter(
            rng.uniform(-1.0 / 3.0, 1.0 / 3.0, size=(num_concepts, 3, 3)).astype(dtype))
        self.spatial_bias = ad.parameter(np.zeros(num_concepts, dtype=dtype))
        self.norm = LayerNorm(num_concepts, dtype=dtype)

    def __call__(self, smoothed: ad.Tensor, grid: tuple[int, int],
                 use_norm: bool = True) -> ad.Tensor:
        return concept_features(smoothed, grid, self, use_norm=use_norm)

    def named_params(self) -> dict[str, ad.Tensor]:
        out = {"point.scale": self.point_scale, "point.bias": self.point_bias,
               "spatial.kernel": self.spatial_kernel, "spatial.bias": self.spatial_bias}
        out.update(prefixed("norm", self.norm.named_params()))
        return out


def concept_feature_sites(smoothed: ad.Tensor, grid: tuple[int, int],
                          refiner: ConceptRefiner,
                          use_norm: bool = True) -> ad.Tensor:
    """Refined per-site concept maps before pooling: (..., R, C) -> (-1, R, C)."""
    h, w = grid
    r, c = smoothed.shape[-2], smoothed.shape[-1]
    if h * w != r:
        raise ValueError(f"grid {grid} does not factor {r} patches")
    planes = ad.reshape(smoothed, (-1, h, w, c))
    pointwise = planes * refiner.point_scale + refiner.point_bias
    spatial = ad.dwconv3x3(planes, refiner.spatial_kernel, refiner.spatial_bias)
    mixed = pointwise + spatial
    if use_norm:
        mixed = refiner.norm(mixed)
    return ad.reshape(mixed, (-1, r, c))


def concept_features(smoothed: ad.Tensor, grid: tuple[int, int],
                     refiner: ConceptRefiner, use_norm: bool = True) -> ad.Tensor:
    """Pool refined concept maps into per-image vectors: (..., R, C) -> (..., C).

    ``use_norm=False`` bypasses layer normalization (test hook for the
    constructed-kernel identities).
    """
    lead = smoothed.shape[:-2]
    c = smoothed.shape[-1]
    sites = concept_feature_sites(smoothed, grid, refiner, use_norm=use_norm)
    pooled = sites.max(axis=-2)
    return ad.reshape(pooled, lead + (c,))


def pool_gap(sites: np.ndarray) -> float:
    """Smallest top-two margin any max pool sees: boundary-closeness probe."""
    if sites.shape[-2] < 2:
        return float("inf")
    top = np.sort(sites, axis=-2)
    return float(np.min(top[..., -1, :] - top[..., -2, :]))


def class_prototypes(h_support: ad.Tensor) -> ad.Tensor:
    """Mean the support axis away: (N, K, C) -> (N, C)."""
    if h_support.ndim != 3:
        raise ValueError("h_support must be (n_way, k_shot, concepts)")
    return h_support.mean(axis=1)


def similarity(h_query: ad.Tensor, prototypes: ad.Tensor) -> ad.Tensor:
    """Cosine similarity matrix: (Q, C) x (N, C) -> (Q, N), entries in [-1, 1]."""
    return ad.cosine_rows(h_query, prototypes)


def predict(similarity_matrix: np.ndarray) -> np.ndarray:
    """Argmax class per query row; ties resolve to the lowest class index."""
    m = similarity_matrix.data if isinstance(similarity_matrix, ad.Tensor) else similarity_matrix
    if not np.all(np.isfinite(m)):
        raise ValueError("similarity matrix contains non-finite entries")
    return np.argmax(m, axis=-1)
