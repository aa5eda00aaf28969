"""Mixture of low-rank adaptation experts with learned, thresholded routing.

The layer keeps a frozen base map W0 and E rank-r updates; per patch, a
gating perceptron produces softmax routing weights, a threshold perceptron
produces a trainable cutoff in (0, 1/E), gates below the cutoff are dropped,
and the surviving importances are renormalized to combine expert outputs:

    gates      g = softmax(G(z))                 over the expert axis
    cutoff     eps = sigmoid(T(z)) / E
    importance e_i = g_i - eps where g_i >= eps, else 0
    combined   sum_i (e_i / sum_j e_j) * B_i A_i z
    output     W0 z + alpha * combined

Positions where every importance is zero contribute a zero update (the
base path passes through untouched); this fallback is counted in the
routing trace. An optional guide object refines gates against the concept
bank before thresholding (see the guidance module); the fused gates sum
to 2 along the expert axis, which provably keeps at least one expert
above any reachable cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import MLP, default_dtype, prefixed

# sigmoid outputs are clipped into [1e-12, 1 - 1e-7] so the cutoff stays
# strictly inside (0, 1/E) even for saturating threshold logits
_SIG_LO = 1e-12
_SIG_HI_GAP = 1e-7

SUM_IMPORTANCE = "sum-importance"
IMPORTANCE_TIMES_GATE = "importance-times-gate"


@dataclass
class RoutingTrace:
    """Detached per-position routing record for one adapted map."""

    gates: np.ndarray  # (..., E) softmax gates (pre-guidance)
    fused_gates: np.ndarray  # (..., E) gates the cutoff actually sees
    cutoff: np.ndarray  # (..., 1)
    importance: np.ndarray  # (..., E) post-filter importances
    active: np.ndarray  # (..., E) bool, fused gate >= cutoff
    fallback_positions: int  # positions where all importances are zero

    @property
    def positions(self) -> int:
        return int(np.prod(self.gates.shape[:-1], dtype=np.int64))

    def expert_frequency(self) -> np.ndarray:
        """Fraction of positions each expert survives filtering at."""
        flat = self.active.reshape(-1, self.active.shape[-1])
        return flat.mean(axis=0)


class ExpertBank:
    """E low-rank updates B_i A_i sharing (rank, d_in, d_out)."""

    def __init__(self, rng: np.random.Generator, num_experts: int, d_in: int,
                 d_out: int, rank: int, alpha: float, dropout: float = 0.0,
                 dtype=None):
        if num_experts < 1:
            raise ValueError("need at least one expert")
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        std = 1.0 / np.sqrt(rank)
        self.down = [ad.parameter(rng.normal(0.0, std, size=(rank, d_in)).astype(dtype))
                     for _ in range(num_experts)]
        # zero-initialized up-projections make the initial update vanish
        self.up = [ad.parameter(np.zeros((d_out, rank), dtype=dtype))
                   for _ in range(num_experts)]
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout = float(dropout)

    @property
    def num_experts(self) -> int:
        return len(self.down)

    def expert_update(self, z: ad.Tensor, i: int) -> ad.Tensor:
        return ad.matmul(ad.matmul(z, ad.transpose(self.down[i])),
                         ad.transpose(self.up[i]))

    def named_params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for i in range(self.num_experts):
            out[f"expert{i}.down"] = self.down[i]
            out[f"expert{i}.up"] = self.up[i]
        return out


def make_gate_network(rng: np.random.Generator, d_in: int, num_experts: int,
                      dtype=None) -> MLP:
    return MLP(rng, (d_in, max(1, d_in // 4), num_experts), dtype=dtype)


def make_threshold_network(rng: np.random.Generator, d_in: int, dtype=None) -> MLP:
    return MLP(rng, (d_in, max(1, d_in // 4), 1), dtype=dtype)


def gate(z: ad.Tensor, gate_net: MLP) -> ad.Tensor:
    """Softmax routing weights over the expert axis: (..., E)."""
    return ad.softmax(gate_net(z), axis=-1)


def threshold(z: ad.Tensor, thr_net: MLP, num_experts: int) -> ad.Tensor:
    """Trainable cutoff strictly inside (0, 1/E): (..., 1)."""
    s = ad.sigmoid(thr_net(z))
    s = ad.clamp_min(s, _SIG_LO)
    s = 1.0 - ad.clamp_min(1.0 - s, _SIG_HI_GAP)
    return s * (1.0 / num_experts)


def filter_gates(gates: ad.Tensor, cutoff: ad.Tensor) -> ad.Tensor:
    """Importance e = gate - cutoff where gate >= cutoff, else 0."""
    return ad.gate_filter(gates, cutoff)


def combine_experts(z: ad.Tensor, bank: ExpertBank, importance: ad.Tensor,
                    gates: ad.Tensor | None = None,
                    denominator: str = "sum-importance",
                    training: bool = False,
                    rng: np.random.Generator | None = None) -> ad.Tensor:
    """Importance-weighted sum of expert updates: (..., d_out).

    ``denominator`` selects the normalizer: "sum-importance" divides by
    the sum of importances; "importance-times-gate" divides by the sum of
    importance*gate products instead (an alternative normalization that
    does not make the weights sum to 1). Both fall back to a zero update
    where the denominator vanishes.
    """
    if denominator == SUM_IMPORTANCE:
        weights = ad.importance_normalize(importance)
    elif denominator == IMPORTANCE_TIMES_GATE:
        if gates is None:
            raise ValueError("importance-times-gate normalization needs the gates")
        denom = ad.tsum(importance * gates, axis=-1, keepdims=True)
        mask = ad.Tensor((denom.data > 0).astype(denom.dtype))
        weights = importance * ad.power(ad.clamp_min(denom, 1e-30), -1.0) * mask
    else:
        raise ValueError(f"unknown denominator rule {denominator!r}")
    if training and bank.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        z = ad.dropout(z, bank.dropout, rng)
    out = None
    for i in range(bank.num_experts):
        term = weights[..., i:i + 1] * bank.expert_update(z, i)
        out = term if out is None else out + term
    return out


def adapted_forward(z: ad.Tensor, base_weight: ad.Tensor, base_bias,
                    bank: ExpertBank, gate_net: MLP, thr_net: MLP,
                    guide=None, denominator: str = "sum-importance",
                    training: bool = False,
                    rng: np.random.Generator | None = None,
                    trace: list | None = None) -> ad.Tensor:
    """Frozen base map plus the gated expert update.

    ``guide.refine(gates)`` (when given) returns concept-aligned gates
    g' that are added onto g before thresholding; the cutoff formula is
    unchanged, so disabling the guide reproduces the plain mixture path
    bit for bit.
    """
    base = ad.linear(z, base_weight, base_bias)
    g = gate(z, gate_net)
    g_eff = g + guide.refine(g) if guide is not None else g
    eps = threshold(z, thr_net, bank.num_experts)
    imp = filter_gates(g_eff, eps)
    update = combine_experts(z, bank, imp, gates=g_eff, denominator=denominator,
                             training=training, rng=rng)
    if trace is not None:
        active = g_eff.data >= eps.data
        imp_sum = imp.data.sum(axis=-1)
        trace.append(RoutingTrace(
            gates=g.data.copy(), fused_gates=g_eff.data.copy(),
            cutoff=eps.data.copy(), importance=imp.data.copy(), active=active,
            fallback_positions=int((imp_sum <= 0).sum())))
    return base + bank.alpha * update


class MixtureAdapter:
    """Everything one adapted linear map owns: experts plus G/T networks.

    The gating and threshold perceptrons are per-layer (not shared); the
    optional guide holds this layer's attention parameters and a shared
    concept bank.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 num_experts: int, rank: int, alpha: float,
                 dropout: float = 0.0, dtype=None, guide=None,
                 denominator: str = "sum-importance"):
        self.bank = ExpertBank(rng, num_experts, d_in, d_out, rank, alpha,
                               dropout, dtype=dtype)
        self.gate_net = make_gate_network(rng, d_in, num_experts, dtype=dtype)
        self.thr_net = make_threshold_network(rng, d_in, dtype=dtype)
        self.guide = guide
        self.denominator = denominator

    def __call__(self, z: ad.Tensor, base_weight: ad.Tensor, base_bias,
                 training: bool = False, rng: np.random.Generator | None = None,
                 trace: list | None = None) -> ad.Tensor:
        return adapted_forward(z, base_weight, base_bias, self.bank,
                               self.gate_net, self.thr_net, guide=self.guide,
                               denominator=self.denominator, training=training,
                               rng=rng, trace=trace)

    def named_params(self) -> dict[str, ad.Tensor]:
        out = prefixed("bank", self.bank.named_params())
        out.update(prefixed("gate", self.gate_net.named_params()))
        out.update(prefixed("threshold", self.thr_net.named_params()))
        if self.guide is not None:
            out.update(prefixed("guide", self.guide.named_params()))
        return out
