"""Concept-guided gate refinement for the expert mixture.

Routing gates attend over the rows of the shared concept bank through a
scaled dot-product attention (queries from gates, keys/values from
concepts), and the attended result is projected back to expert space and
softmaxed:

    g' = softmax(out_proj(Attn(q(g), k(P), v(P))))      over experts
    fused = g + g'                                       sums to 2 per row

The fused gates feed the same cutoff/filter/combine path as the plain
mixture. Because each fused row sums to 2 over E experts, its largest
entry is at least 2/E while the cutoff stays below 1/E, so at least one
expert always survives filtering: the zero-update fallback is unreachable
on the guided path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .experts import ExpertBank, adapted_forward
from .layers import MLP, Linear, prefixed


class ConceptAttention:
    """Per-layer attention parameters over a shared concept bank."""

    def __init__(self, rng: np.random.Generator, num_experts: int,
                 concept_bank: ad.Tensor, d_k: int = 16, d_v: int = 16,
                 dtype=None):
        if d_k < 1 or d_v < 1:
            raise ValueError("attention widths must be positive")
        dim = concept_bank.shape[1]
        self.concept_bank = concept_bank
        self.query_proj = Linear(rng, num_experts, d_k, dtype=dtype)
        self.key_proj = Linear(rng, dim, d_k, dtype=dtype)
        self.value_proj = Linear(rng, dim, d_v, dtype=dtype)
        self.out_proj = Linear(rng, d_v, num_experts, dtype=dtype)
        self.scale = 1.0 / np.sqrt(d_k)

    def attention_weights(self, gates: ad.Tensor) -> ad.Tensor:
        """Distribution over concept rows per position: (..., C)."""
        q = self.query_proj(gates)
        k = self.key_proj(self.concept_bank)
        scores = ad.matmul(q, ad.transpose(k)) * self.scale
        return ad.softmax(scores, axis=-1)

    def refine(self, gates: ad.Tensor) -> ad.Tensor:
        """Concept-aligned gates g': rows are probability vectors."""
        attn = self.attention_weights(gates)
        context = ad.matmul(attn, self.value_proj(self.concept_bank))
        return ad.softmax(self.out_proj(context), axis=-1)

    def named_params(self) -> dict[str, ad.Tensor]:
        # the concept bank is owned (and registered) by the concept module
        out = prefixed("query", self.query_proj.named_params())
        out.update(prefixed("key", self.key_proj.named_params()))
        out.update(prefixed("value", self.value_proj.named_params()))
        out.update(prefixed("out", self.out_proj.named_params()))
        return out


def fuse_gates(gates: ad.Tensor, refined: ad.Tensor) -> ad.Tensor:
    """Elementwise sum of the two gate distributions (rows sum to 2)."""
    if gates.shape != refined.shape:
        raise ValueError(f"gate shapes differ: {gates.shape} vs {refined.shape}")
    return gates + refined


def guided_forward(z: ad.Tensor, base_weight: ad.Tensor, base_bias,
                   bank: ExpertBank, gate_net: MLP, thr_net: MLP,
                   attention: ConceptAttention,
                   denominator: str = "sum-importance",
                   training: bool = False,
                   rng: np.random.Generator | None = None,
                   trace: list | None = None) -> ad.Tensor:
    """Adapted forward with concept-guided gates (the full guided path)."""
    return adapted_forward(z, base_weight, base_bias, bank, gate_net, thr_net,
                           guide=attention, denominator=denominator,
                           training=training, rng=rng, trace=trace)


def alignment_matrix(gates: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Expert-to-concept alignment (E, C) from detached routing records.

    Entry (i, c) is the attention mass on concept c averaged over
    positions, weighted by expert i's gate: how much each expert's routing
    co-occurs with each concept.
    """
    g = gates.reshape(-1, gates.shape[-1])
    a = attention.reshape(-1, attention.shape[-1])
    weights = g.sum(axis=0)
    out = g.T @ a
    safe = np.where(weights > 0, weights, 1.0)
    return out / safe[:, None]
