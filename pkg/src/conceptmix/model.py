"""Full few-shot model: adapted backbone, concept scoring, aggregation.

One episode forward runs support and query through the frozen backbone
(with mixture adapters on its linear maps), scores every patch against
the learnable concept bank, pools to per-image concept vectors, enriches
them with the recalibrated multi-depth aggregate, and compares queries
to class prototypes by cosine similarity.

Component toggles exist for ablations: ``use_guidance`` drops the
concept-attention refinement of the gates, ``use_mfa`` drops the
multi-depth branch entirely (predictions then come from the concept
pooling path alone).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import MultiLevelAggregator, fuse
from .backbone import (
    PRECOMPUTED_KIND,
    Backbone,
    BackboneConfig,
    MultiDepthFeatures,
    build_backbone,
    extract_features,
)
from .concepts import (
    STANDARD_COSINE,
    ConceptBank,
    ConceptRefiner,
    class_prototypes,
    concept_features,
    activation_scores,
    predict,
    similarity,
    smooth_activations,
)
from .experts import SUM_IMPORTANCE, MixtureAdapter
from .guidance import ConceptAttention
from .layers import default_dtype
from .losses import POOLED_PER_IMAGE, PER_PATCH_MEAN


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_experts: int = 3
    num_concepts: int = 312
    rank: int = 8
    alpha: float = 32.0
    adapter_dropout: float = 0.1
    tau: float = 0.1
    activation_mode: str = STANDARD_COSINE
    denominator: str = SUM_IMPORTANCE
    use_guidance: bool = True
    use_mfa: bool = True
    attention_dim: int = 16

    def __post_init__(self):
        if self.num_experts < 1 or self.num_concepts < 2:
            raise ValueError("need at least 1 expert and 2 concepts")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class EpisodeOutput:
    """Everything one episode forward produces, pre-loss."""

    n_way: int
    k_shot: int
    q_queries: int
    smoothed_support: ad.Tensor   # (N*K, R, C) patch-concept distributions
    smoothed_query: ad.Tensor     # (N*Q, R, C)
    concept_support: ad.Tensor    # (N*K, C) pooled, pre-fusion
    concept_query: ad.Tensor      # (N*Q, C)
    fused_support: ad.Tensor      # (N*K, C)
    fused_query: ad.Tensor        # (N*Q, C)
    prototypes: ad.Tensor         # (N, C)
    similarity: ad.Tensor         # (N*Q, N)
    query_labels: np.ndarray      # (N*Q,) int64, class-major order
    cd_vectors: ad.Tensor         # discrimination-loss input, (samples, C)

    def predictions(self) -> np.ndarray:
        return predict(self.similarity)

    def accuracy(self) -> float:
        return float(np.mean(self.predictions() == self.query_labels))


class FewShotConceptModel:
    """Owns every trainable tensor; the backbone stays frozen."""

    def __init__(self, config: ModelConfig, seed: int, input_dim: int,
                 dtype=None):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.config = config
        self.dtype = dtype
        bb_cfg = config.backbone
        self.grid = bb_cfg.patch_grid
        width = bb_cfg.width
        # independent init streams so toggling one component never
        # shifts another component's initial parameters
        def stream(tag: int, *rest: int) -> np.random.Generator:
            return np.random.default_rng(np.random.SeedSequence((seed, tag) + rest))

        self.concepts = ConceptBank(stream(3), config.num_concepts, width,
                                    dtype=dtype)
        if bb_cfg.kind == PRECOMPUTED_KIND:
            self.backbone: Backbone | None = None
            self.adapters: dict[tuple[int, str], MixtureAdapter] = {}
        else:
            self.backbone = build_backbone(bb_cfg, seed, input_dim, dtype=dtype)
            self.adapters = {}
            for j, site in enumerate(self.backbone.adapter_sites()):
                guide = None
                if config.use_guidance:
                    guide = ConceptAttention(stream(5, j), config.num_experts,
                                             self.concepts.matrix,
                                             d_k=config.attention_dim,
                                             d_v=config.attention_dim,
                                             dtype=dtype)
                self.adapters[site] = MixtureAdapter(
                    stream(4, j), width, width, config.num_experts,
                    config.rank, config.alpha, dropout=config.adapter_dropout,
                    dtype=dtype, guide=guide, denominator=config.denominator)
        self.refiner = ConceptRefiner(stream(6), config.num_concepts, dtype=dtype)
        self.aggregator = MultiLevelAggregator(stream(7), width,
                                               config.num_concepts, dtype=dtype)

    # ------------------------------------------------------------ params

    def named_params(self) -> dict[str, ad.Tensor]:
        out = {f"concepts.{k}": t for k, t in self.concepts.named_params().items()}
        for (b, site), adapter in self.adapters.items():
            for k, t in adapter.named_params().items():
                out[f"adapters.block{b}.{site}.{k}"] = t
        for k, t in self.refiner.named_params().items():
            out[f"refiner.{k}"] = t
        if self.config.use_mfa:
            for k, t in self.aggregator.named_params().items():
                out[f"aggregator.{k}"] = t
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All tensors a checkpoint must carry, trainable and frozen."""
        out = {f"trainable.{k}": t.data for k, t in self.named_params().items()}
        if self.backbone is not None:
            for k, t in self.backbone.named_tensors().items():
                out[f"backbone.{k}"] = t.data
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        targets = {f"trainable.{k}": t for k, t in self.named_params().items()}
        if self.backbone is not None:
            targets.update({f"backbone.{k}": t
                            for k, t in self.backbone.named_tensors().items()})
        missing = sorted(set(targets) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint missing arrays: {missing[:4]}")
        for name, tensor in targets.items():
            src = arrays[name]
            if src.shape != tensor.shape:
                raise ValueError(f"{name}: shape {src.shape} != {tensor.shape}")
            tensor.data[...] = src

    # ----------------------------------------------------------- forward

    def _multi_depth(self, inputs, training: bool,
                     rng: np.random.Generator | None,
                     trace: list | None) -> MultiDepthFeatures:
        if isinstance(inputs, dict):
            taps = {k: ad.Tensor(np.asarray(v, dtype=self.dtype))
                    for k, v in inputs.items()}
            return MultiDepthFeatures(low=taps["low"], mid=taps["mid"],
                                      high=taps["high"], out=taps["out"])
        if self.backbone is None:
            raise ValueError("precomputed model needs tap dictionaries, "
                             "not raw inputs")
        return extract_features(self.backbone, inputs, adapters=self.adapters,
                                training=training, rng=rng, trace=trace)

    def features(self, inputs, training: bool = False,
                 rng: np.random.Generator | None = None,
                 trace: list | None = None):
        """(smoothed activations, pooled concept vector, fused vector)."""
        feats = self._multi_depth(inputs, training, rng, trace)
        raw = activation_scores(feats.out, self.concepts.matrix,
                                mode=self.config.activation_mode)
        smoothed = smooth_activations(raw, self.config.tau)
        pooled = concept_features(smoothed, self.grid, self.refiner)
        if self.config.use_mfa:
            enriched = [self.aggregator.recalibrate_level(name, z, feats.out,
                                                          self.grid)
                        for name, z in (("low", feats.low), ("mid", feats.mid),
                                        ("high", feats.high))]
            fused = fuse(pooled, self.aggregator.aggregate(*enriched))
        else:
            fused = pooled
        return smoothed, pooled, fused

    def episode_forward(self, support, query, training: bool = False,
                        rng: np.random.Generator | None = None,
                        trace: list | None = None,
                        cd_input: str = POOLED_PER_IMAGE) -> EpisodeOutput:
        """Score one episode.

        ``support`` is (N, K, R, d) and ``query`` (N, Q, R, d), or tap
        dictionaries of the same leading shape for precomputed features.
        Both halves run as one batch so any dropout draw covers them in a
        single deterministic sequence.
        """
        if isinstance(support, dict):
            n, k = support["out"].shape[:2]
            q = query["out"].shape[1]

            def flat(part, lead):
                return {key: np.asarray(v).reshape((lead,) + v.shape[2:])
                        for key, v in part.items()}

            s_flat, q_flat = flat(support, n * k), flat(query, n * q)
            batch = {key: np.concatenate([s_flat[key], q_flat[key]], axis=0)
                     for key in ("low", "mid", "high", "out")}
        else:
            support = np.asarray(support)
            query = np.asarray(query)
            n, k = support.shape[:2]
            q = query.shape[1]
            batch = np.concatenate([support.reshape((n * k,) + support.shape[2:]),
                                    query.reshape((n * q,) + query.shape[2:])],
                                   axis=0)
        smoothed, pooled, fused = self.features(batch, training=training,
                                                rng=rng, trace=trace)
        nk = n * k
        sm_s, sm_q = smoothed[:nk], smoothed[nk:]
        h_s, h_q = pooled[:nk], pooled[nk:]
        f_s, f_q = fused[:nk], fused[nk:]
        protos = class_prototypes(ad.reshape(f_s, (n, k, -1)))
        sim = similarity(f_q, protos)
        labels = np.repeat(np.arange(n, dtype=np.int64), q)
        if cd_input == POOLED_PER_IMAGE:
            cd = pooled
        elif cd_input == PER_PATCH_MEAN:
            cd = ad.tmean(smoothed, axis=1)
        else:
            raise ValueError(f"unknown cd_input {cd_input!r}")
        return EpisodeOutput(n_way=n, k_shot=k, q_queries=q,
                             smoothed_support=sm_s, smoothed_query=sm_q,
                             concept_support=h_s, concept_query=h_q,
                             fused_support=f_s, fused_query=f_q,
                             prototypes=protos, similarity=sim,
                             query_labels=labels, cd_vectors=cd)
