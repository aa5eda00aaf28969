"""Episodic optimization, evaluation protocol, checkpoints, verification.

Training walks a fixed grid of (epoch, episode) steps. Every random
choice is derived from the config seed plus the step coordinates, so a
run is reproducible from its config alone and "resume" state is just the
next step coordinate. Only the model's registered trainable tensors are
updated; backbone base weights never enter the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import PRECOMPUTED_KIND, TOY_VIT, BackboneConfig
from .concepts import STANDARD_COSINE, concept_feature_sites, pool_gap
from .container import read_container, write_container
from .episodes import (
    PRECOMPUTED,
    DatasetIndex,
    Episode,
    materialize_inputs,
    materialize_taps,
    sample_episode,
)
from .experts import SUM_IMPORTANCE
from .losses import (
    POOLED_PER_IMAGE,
    classification_loss,
    concept_discrimination_loss,
    default_lambda,
    total_loss,
)
from .model import EpisodeOutput, FewShotConceptModel, ModelConfig
from .verify import (
    DEFAULT_STEP,
    DEFAULT_TOLERANCE,
    GradCheckReport,
    compare_gradients,
    finite_difference,
)

CHECKPOINT_KIND = "conceptmix-checkpoint"
# distance-to-cutoff below which a gate sample is too close to the
# importance filter's kink for finite differences to be trusted
GATE_MARGIN = 1e-4
POOL_MARGIN = 1e-6
_RESAMPLE_LIMIT = 10


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-shape settings; defaults follow the method's
    reference operating point."""

    epochs: int = 80
    episodes_per_epoch: int = 500
    warmup_epochs: int = 15
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    num_experts: int = 3
    num_concepts: int = 312
    lambda_cd: float | None = None  # None: shot-count rule
    kappa: float = 0.07
    tau: float = 0.1
    logit_scale: float = 10.0
    cd_input: str = POOLED_PER_IMAGE
    seed: int = 0
    backbone_kind: str = TOY_VIT
    backbone_depth: int = 6
    backbone_width: int = 32
    activation_mode: str = STANDARD_COSINE
    denominator: str = SUM_IMPORTANCE
    use_guidance: bool = True
    use_mfa: bool = True

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        positives = {"epochs": self.epochs,
                     "episodes_per_epoch": self.episodes_per_epoch,
                     "base_lr": self.base_lr, "k_shot": self.k_shot,
                     "q_queries": self.q_queries, "rank": self.rank,
                     "num_experts": self.num_experts, "kappa": self.kappa,
                     "tau": self.tau, "logit_scale": self.logit_scale}
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.lambda_cd is not None and self.lambda_cd < 0:
            raise ValueError("lambda_cd must be nonnegative")

    @property
    def resolved_lambda(self) -> float:
        if self.lambda_cd is not None:
            return self.lambda_cd
        return default_lambda(self.k_shot)

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.episodes_per_epoch

    @property
    def total_steps(self) -> int:
        return self.epochs * self.episodes_per_epoch


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to exactly zero."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    warm, total = config.warmup_steps, config.total_steps
    if step < warm:
        return config.base_lr * (step + 1) / warm
    t = min(step, total)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (t - warm) / (total - warm)))


def model_config_for(config: TrainConfig, index: DatasetIndex) -> ModelConfig:
    if index.source_kind == PRECOMPUTED:
        bb = BackboneConfig(kind=PRECOMPUTED_KIND, patch_grid=index.patch_grid,
                            width=index.input_dim)
    else:
        bb = BackboneConfig(kind=config.backbone_kind,
                            depth=config.backbone_depth,
                            width=config.backbone_width,
                            patch_grid=index.patch_grid)
    return ModelConfig(backbone=bb, num_experts=config.num_experts,
                       num_concepts=config.num_concepts, rank=config.rank,
                       alpha=config.alpha, adapter_dropout=config.dropout,
                       tau=config.tau, activation_mode=config.activation_mode,
                       denominator=config.denominator,
                       use_guidance=config.use_guidance,
                       use_mfa=config.use_mfa)


def episode_tensors(index: DatasetIndex, episode: Episode):
    if index.source_kind == PRECOMPUTED:
        return (materialize_taps(index, episode.support),
                materialize_taps(index, episode.query))
    return (materialize_inputs(index, episode.support),
            materialize_inputs(index, episode.query))


def episode_loss(out: EpisodeOutput, config: TrainConfig):
    """(total, classification, discrimination) tensors for one episode."""
    l_cls = classification_loss(out.similarity, out.query_labels,
                                config.logit_scale)
    l_cd = concept_discrimination_loss(out.cd_vectors, config.kappa)
    return total_loss(l_cls, l_cd, config.resolved_lambda), l_cls, l_cd


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Normalization gains/offsets and the concept matrix are exempt from
    decay; shrinking either distorts scale-sensitive statistics rather
    than regularizing capacity.
    """

    def __init__(self, params: dict[str, ad.Tensor], weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    @staticmethod
    def decays(name: str) -> bool:
        return not (name.endswith(".gain") or name.endswith(".offset")
                    or name == "concepts.matrix")

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay > 0.0 and self.decays(name):
                t.data -= lr * self.weight_decay * t.data
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: FewShotConceptModel
    config: TrainConfig
    input_dim: int
    loss_history: list[float]
    epoch_means: list[float]
    next_step: tuple[int, int]  # (epoch, episode) a resumed run would take


def train(config: TrainConfig, base_index: DatasetIndex,
          progress=None) -> TrainResult:
    """Run the episodic loop; deterministic given the config seed."""
    model = FewShotConceptModel(model_config_for(config, base_index),
                                seed=config.seed,
                                input_dim=base_index.input_dim)
    frozen_before = None
    if model.backbone is not None:
        frozen_before = {k: t.data.copy()
                         for k, t in model.backbone.named_tensors().items()}
    opt = AdamW(model.named_params(), weight_decay=config.weight_decay)
    history: list[float] = []
    epoch_means: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for i in range(config.episodes_per_epoch):
            ep_seed = config.seed * 1_000_003 + epoch * config.episodes_per_epoch + i
            episode = sample_episode(base_index, config.n_way, config.k_shot,
                                     config.q_queries, seed=ep_seed)
            support, query = episode_tensors(base_index, episode)
            drop_rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 8, epoch, i)))
            out = model.episode_forward(support, query, training=True,
                                        rng=drop_rng, cd_input=config.cd_input)
            loss, _, _ = episode_loss(out, config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise RuntimeError(
                    f"loss diverged at epoch {epoch} episode {i}: {value}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, config))
            history.append(value)
            epoch_losses.append(value)
            step += 1
        epoch_means.append(float(np.mean(epoch_losses)))
        if progress is not None:
            progress(epoch, epoch_means[-1])
    if frozen_before is not None:
        for k, t in model.backbone.named_tensors().items():
            if not np.array_equal(frozen_before[k], t.data):
                raise RuntimeError(f"frozen backbone tensor {k} changed")
    return TrainResult(model=model, config=config,
                       input_dim=base_index.input_dim, loss_history=history,
                       epoch_means=epoch_means,
                       next_step=(config.epochs, 0))


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, result: TrainResult) -> None:
    arrays = {f"model.{k}": v for k, v in result.model.state_arrays().items()}
    arrays["history.loss"] = np.asarray(result.loss_history, dtype=np.float64)
    metadata = {
        "kind": CHECKPOINT_KIND,
        "train_config": asdict(result.config),
        "model_config": _model_config_dict(result.model.config),
        "input_dim": result.input_dim,
        "dtype": str(np.dtype(result.model.dtype)),
        "seed": result.config.seed,
        "rng_state": {"next_epoch": result.next_step[0],
                      "next_episode": result.next_step[1]},
    }
    write_container(path, arrays, metadata)


def _model_config_dict(mc: ModelConfig) -> dict:
    d = asdict(mc)
    d["backbone"]["patch_grid"] = list(mc.backbone.patch_grid)
    taps = mc.backbone.tap_points
    d["backbone"]["tap_points"] = None if taps is None else list(taps)
    return d


def _model_config_from(d: dict) -> ModelConfig:
    bb = dict(d["backbone"])
    bb["patch_grid"] = tuple(bb["patch_grid"])
    if bb.get("tap_points") is not None:
        bb["tap_points"] = tuple(bb["tap_points"])
    return ModelConfig(backbone=BackboneConfig(**bb),
                       **{k: v for k, v in d.items() if k != "backbone"})


def load_checkpoint(path) -> tuple[FewShotConceptModel, dict]:
    arrays, metadata = read_container(path)
    if metadata.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"not a checkpoint container: {metadata.get('kind')!r}")
    mc = _model_config_from(metadata["model_config"])
    model = FewShotConceptModel(mc, seed=int(metadata["seed"]),
                                input_dim=int(metadata["input_dim"]),
                                dtype=np.dtype(metadata["dtype"]))
    model.load_state({k[len("model."):]: v for k, v in arrays.items()
                      if k.startswith("model.")})
    return model, metadata


def train_config_from(d: dict) -> TrainConfig:
    return TrainConfig(**d)


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalProtocol:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15
    episodes: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 2:
            raise ValueError("need at least 2 episodes for a CI")


@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    ci95: float  # percent half-width, 1.96 * stddev / sqrt(episodes)
    episode_count: int
    accuracies: list[float]

    def __post_init__(self):
        acc = np.asarray(self.accuracies, dtype=np.float64)
        if acc.size != self.episode_count:
            raise ValueError("episode_count does not match accuracies")
        if np.any(acc < 0.0) or np.any(acc > 100.0):
            raise ValueError("accuracies must lie in [0, 100]")
        want_ci = 1.96 * float(np.std(acc, ddof=1)) / math.sqrt(acc.size)
        if abs(self.ci95 - want_ci) > 1e-9 or abs(self.mean_accuracy - acc.mean()) > 1e-9:
            raise ValueError("report statistics do not match accuracies")

    def line(self, label: str = "model") -> str:
        return (f"{label}: {self.mean_accuracy:.2f} ± {self.ci95:.2f} "
                f"({self.episode_count} episodes)")


def evaluate(model: FewShotConceptModel, index: DatasetIndex,
             protocol: EvalProtocol) -> EvalReport:
    """Frozen-parameter episodic accuracy; pure in all inputs."""
    accs = []
    with ad.no_grad():
        for i in range(protocol.episodes):
            episode = sample_episode(index, protocol.n_way, protocol.k_shot,
                                     protocol.q_queries,
                                     seed=protocol.seed * 1_000_003 + i)
            support, query = episode_tensors(index, episode)
            out = model.episode_forward(support, query, training=False)
            accs.append(100.0 * out.accuracy())
    arr = np.asarray(accs)
    return EvalReport(mean_accuracy=float(arr.mean()),
                      ci95=1.96 * float(np.std(arr, ddof=1)) / math.sqrt(arr.size),
                      episode_count=len(accs), accuracies=accs)


def format_eval_table(rows: dict[str, dict[int, EvalReport]]) -> str:
    """Accuracy grid: one row per method, one column per shot count."""
    shots = sorted({k for by_shot in rows.values() for k in by_shot})
    header = ["method".ljust(16)] + [f"{k}-shot".center(16) for k in shots]
    lines = ["".join(header)]
    for name, by_shot in rows.items():
        cells = [name.ljust(16)]
        for k in shots:
            rep = by_shot.get(k)
            cell = "-" if rep is None else f"{rep.mean_accuracy:.2f} ± {rep.ci95:.2f}"
            cells.append(cell.center(16))
        lines.append("".join(cells))
    return "\n".join(lines)


# ------------------------------------------------------- gradient checks


def _fd_report(component: str, loss_fn, params: dict[str, ad.Tensor],
               tolerance: float, resamples: int) -> GradCheckReport:
    """Backprop vs central differences for one built instance."""
    for t in params.values():
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks need float64 parameters")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in params.items()}

    def value() -> float:
        with ad.no_grad():
            return float(loss_fn().data)

    numeric = finite_difference(value, {k: t.data for k, t in params.items()},
                                step=DEFAULT_STEP)
    return compare_gradients(component, analytic, numeric,
                             tolerance=tolerance, resamples=resamples)


def _routing_margin(trace: list) -> float:
    return min(float(np.min(np.abs(rec.fused_gates - rec.cutoff)))
               for rec in trace) if trace else float("inf")


def _check_mole(seed: int, tolerance: float) -> GradCheckReport:
    from .experts import ExpertBank, adapted_forward, make_gate_network, make_threshold_network

    for attempt in range(_RESAMPLE_LIMIT):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, 0)))
        d = 5
        bank = ExpertBank(rng, 2, d, d, rank=2, alpha=1.3, dtype=np.float64)
        for u in bank.up:
            u.data[:] = rng.normal(size=u.shape) * 0.4
        gate_net = make_gate_network(rng, d, 2, dtype=np.float64)
        thr_net = make_threshold_network(rng, d, dtype=np.float64)
        w = ad.Tensor(rng.normal(size=(d, d)))
        b = ad.Tensor(rng.normal(size=d))
        z = ad.parameter(rng.normal(size=(3, d)))
        params = {"input": z, **bank.named_params(),
                  **{f"gate.{k}": t for k, t in gate_net.named_params().items()},
                  **{f"threshold.{k}": t for k, t in thr_net.named_params().items()}}

        def loss_fn():
            out = adapted_forward(z, w, b, bank, gate_net, thr_net)
            return ad.tsum(out * out)

        trace: list = []
        with ad.no_grad():
            adapted_forward(z, w, b, bank, gate_net, thr_net, trace=trace)
        if _routing_margin(trace) < GATE_MARGIN:
            continue
        return _fd_report("mole", loss_fn, params, tolerance, attempt)
    raise RuntimeError("could not sample a boundary-clear mole instance")


def _check_pcm(seed: int, tolerance: float) -> GradCheckReport:
    from .experts import ExpertBank, make_gate_network, make_threshold_network
    from .guidance import ConceptAttention, guided_forward

    for attempt in range(_RESAMPLE_LIMIT):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, 1)))
        d, experts, concepts = 4, 2, 3
        bank = ExpertBank(rng, experts, d, d, rank=2, alpha=0.9, dtype=np.float64)
        for u in bank.up:
            u.data[:] = rng.normal(size=u.shape) * 0.4
        gate_net = make_gate_network(rng, d, experts, dtype=np.float64)
        thr_net = make_threshold_network(rng, d, dtype=np.float64)
        concept_bank = ad.parameter(rng.normal(size=(concepts, d)))
        guide = ConceptAttention(rng, experts, concept_bank, d_k=3, d_v=3,
                                 dtype=np.float64)
        w = ad.Tensor(rng.normal(size=(d, d)))
        b = ad.Tensor(rng.normal(size=d))
        z = ad.parameter(rng.normal(size=(3, d)))
        params = {"input": z, "concept_bank": concept_bank,
                  **bank.named_params(),
                  **{f"gate.{k}": t for k, t in gate_net.named_params().items()},
                  **{f"threshold.{k}": t for k, t in thr_net.named_params().items()},
                  **{f"attention.{k}": t for k, t in guide.named_params().items()}}

        def loss_fn():
            out = guided_forward(z, w, b, bank, gate_net, thr_net, guide)
            return ad.tsum(out * out)

        trace: list = []
        with ad.no_grad():
            guided_forward(z, w, b, bank, gate_net, thr_net, guide, trace=trace)
        if _routing_margin(trace) < GATE_MARGIN:
            continue
        return _fd_report("pcm", loss_fn, params, tolerance, attempt)
    raise RuntimeError("could not sample a boundary-clear pcm instance")


def _check_pcl(seed: int, tolerance: float) -> GradCheckReport:
    from .concepts import (ConceptBank, ConceptRefiner, activation_scores,
                           concept_features, smooth_activations)

    for attempt in range(_RESAMPLE_LIMIT):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, 2)))
        concepts = ConceptBank(rng, 4, 5, dtype=np.float64)
        refiner = ConceptRefiner(rng, 4, dtype=np.float64)
        x = ad.parameter(rng.normal(size=(2, 4, 5)))
        grid = (2, 2)

        def smoothed():
            return smooth_activations(activation_scores(x, concepts.matrix), 0.7)

        def loss_fn():
            h = concept_features(smoothed(), grid, refiner)
            return ad.tsum(h * h)

        with ad.no_grad():
            sites = concept_feature_sites(smoothed(), grid, refiner).data
        if pool_gap(sites) < POOL_MARGIN:
            continue
        params = {"input": x, "concepts.matrix": concepts.matrix,
                  **{f"refiner.{k}": t for k, t in refiner.named_params().items()}}
        return _fd_report("pcl", loss_fn, params, tolerance, attempt)
    raise RuntimeError("could not sample a boundary-clear pcl instance")


def _check_mfa(seed: int, tolerance: float) -> GradCheckReport:
    from .aggregation import MultiLevelAggregator

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, 3)))
    agg = MultiLevelAggregator(rng, dim=3, num_concepts=4, dtype=np.float64)
    grid = (2, 2)
    taps = {name: ad.parameter(rng.normal(size=(2, 4, 3)))
            for name in ("low", "mid", "high", "out")}

    def loss_fn():
        levels = [agg.recalibrate_level(name, taps[name], taps["out"], grid)
                  for name in ("low", "mid", "high")]
        e_all = agg.aggregate(*levels)
        penalty = ad.tsum(levels[0] * levels[0]) + ad.tsum(levels[1] * levels[1])
        return ad.tsum(e_all * e_all) + 0.5 * penalty

    params = {f"tap.{k}": t for k, t in taps.items()}
    params.update({f"aggregator.{k}": t for k, t in agg.named_params().items()})
    return _fd_report("mfa", loss_fn, params, tolerance, 0)  # smooth: no resampling


def _check_losses(seed: int, tolerance: float) -> GradCheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, 4)))
    activations = ad.parameter(rng.normal(size=(4, 6)))
    similarity = ad.parameter(rng.normal(size=(3, 4)))
    labels = np.array([0, 1, 3])

    def loss_fn():
        l_cls = classification_loss(similarity, labels, 3.0)
        l_cd = concept_discrimination_loss(activations, 0.3)
        return total_loss(l_cls, l_cd, 0.7)

    params = {"activations": activations, "similarity": similarity}
    return _fd_report("losses", loss_fn, params, tolerance, 0)


def _check_full(seed: int, tolerance: float) -> GradCheckReport:
    bb = BackboneConfig(kind=TOY_VIT, depth=3, width=6, patch_grid=(2, 2),
                        tap_points=(0, 1, 2))
    mc = ModelConfig(backbone=bb, num_experts=2, num_concepts=5, rank=2,
                     alpha=1.1, adapter_dropout=0.0, tau=0.6, attention_dim=3)
    config = TrainConfig(epochs=2, episodes_per_epoch=1, warmup_epochs=1,
                         n_way=2, k_shot=1, q_queries=1, rank=2,
                         num_experts=2, num_concepts=5, tau=0.6,
                         lambda_cd=0.7, kappa=0.4, logit_scale=3.0)
    for attempt in range(_RESAMPLE_LIMIT):
        model = FewShotConceptModel(mc, seed=seed + 17 * attempt, input_dim=4,
                                    dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, 5)))
        for adapter in model.adapters.values():
            for u in adapter.bank.up:
                u.data[:] = rng.normal(size=u.shape) * 0.3
        support = rng.normal(size=(2, 1, 4, 4))
        query = rng.normal(size=(2, 1, 4, 4))

        def loss_fn():
            out = model.episode_forward(support, query)
            return episode_loss(out, config)[0]

        trace: list = []
        with ad.no_grad():
            out = model.episode_forward(support, query, trace=trace)
            sites = concept_feature_sites(
                ad.concat([out.smoothed_support, out.smoothed_query], axis=0),
                model.grid, model.refiner).data
        if _routing_margin(trace) < GATE_MARGIN or pool_gap(sites) < POOL_MARGIN:
            continue
        return _fd_report("full", loss_fn, model.named_params(),
                          tolerance, attempt)
    raise RuntimeError("could not sample a boundary-clear full-model instance")


GRAD_CHECK_COMPONENTS = ("mole", "pcm", "pcl", "mfa", "losses", "full")


def grad_check(component: str, seed: int = 0,
               tolerance: float = DEFAULT_TOLERANCE) -> GradCheckReport:
    """Finite-difference audit of one component's parameter groups."""
    checks = {"mole": _check_mole, "pcm": _check_pcm, "pcl": _check_pcl,
              "mfa": _check_mfa, "losses": _check_losses, "full": _check_full}
    if component not in checks:
        raise ValueError(f"unknown component {component!r}; "
                         f"choose from {sorted(checks)}")
    return checks[component](seed, tolerance)
