"""Command-line toolchain: train, eval, explain, verify, sample-episode.

Every run resolves its settings from an optional JSON config file plus
flag overrides, writes the resolved values to ``resolved-config.json``
in the output directory, and echoes every artifact path it produces.
Exit codes: 0 success, 1 runtime failure, 2 bad flags.

Config file shape (all blocks optional)::

    {
      "train":   { ... TrainConfig fields ... },
      "dataset": {"kind": "synthetic-generator", "num_classes": 20, ...},
      "split":   {"novel_fraction": 0.25, "seed": 0}
    }

The dataset block also accepts {"kind": "image-directory", "root": ...,
"patch_grid": [H, W], "patch_size": P} and {"kind":
"precomputed-features", "path": ...}. Setting the environment variable
CONCEPTMIX_FP64=1 switches freshly built models to 64-bit floats.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .episodes import (
    IMAGE_DIRECTORY,
    PRECOMPUTED,
    SYNTHETIC,
    DatasetIndex,
    SyntheticSpec,
    load_dataset,
    sample_episode,
    split_base_novel,
)
from .explain import explain_episode, render
from .trainer import (
    GRAD_CHECK_COMPONENTS,
    EvalProtocol,
    TrainConfig,
    evaluate,
    format_eval_table,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train,
    train_config_from,
)

_DEFAULT_DATASET = {"kind": SYNTHETIC, "num_classes": 20,
                    "samples_per_class": 30, "patch_grid": [4, 4],
                    "feature_dim": 32, "class_margin": 2.0,
                    "noise_sigma": 0.5, "seed": 0}
_DEFAULT_SPLIT = {"novel_fraction": 0.25, "seed": 0}

# maps flag destination -> TrainConfig field it overrides
_OVERRIDES = {"seed": "seed", "n_way": "n_way", "k_shot": "k_shot",
              "queries": "q_queries", "episodes": "episodes_per_epoch",
              "lambda_cd": "lambda_cd", "kappa": "kappa",
              "experts": "num_experts", "concepts": "num_concepts",
              "rank": "rank", "alpha": "alpha"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptmix",
        description="Few-shot concept learning with a mixture of low-rank "
                    "adaptation experts.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, default=None, help="run seed")
    common.add_argument("--out", type=Path, default=Path("conceptmix-out"),
                        help="output directory (created on demand)")
    episode = argparse.ArgumentParser(add_help=False)
    episode.add_argument("--n-way", type=int, default=None,
                         help="classes per episode")
    episode.add_argument("--k-shot", type=int, default=None,
                         help="support samples per class")
    episode.add_argument("--queries", type=int, default=None,
                         help="query samples per class")
    episode.add_argument("--episodes", type=int, default=None,
                         help="episode count (per epoch when training)")
    shape = argparse.ArgumentParser(add_help=False)
    shape.add_argument("--lambda", dest="lambda_cd", type=float, default=None,
                       help="concept-discrimination loss weight")
    shape.add_argument("--kappa", type=float, default=None,
                       help="discrimination loss temperature")
    shape.add_argument("--experts", type=int, default=None,
                       help="experts per adapted layer")
    shape.add_argument("--concepts", type=int, default=None,
                       help="concept bank size")
    shape.add_argument("--rank", type=int, default=None,
                       help="adapter rank")
    shape.add_argument("--alpha", type=float, default=None,
                       help="adapter update scale")

    sub = parser.add_subparsers(dest="command", required=True)
    p_train = sub.add_parser("train", parents=[common, episode, shape],
                             help="episodic training run")
    p_train.set_defaults(handler=_cmd_train)
    p_eval = sub.add_parser("eval", parents=[common, episode],
                            help="frozen evaluation on the novel split")
    p_eval.add_argument("checkpoint", type=Path, help="trained checkpoint")
    p_eval.set_defaults(handler=_cmd_eval)
    p_explain = sub.add_parser("explain", parents=[common, episode],
                               help="emit an explanation bundle for one query")
    p_explain.add_argument("checkpoint", type=Path, help="trained checkpoint")
    p_explain.add_argument("--top-k", type=int, default=5,
                           help="concepts per explanation")
    p_explain.set_defaults(handler=_cmd_explain)
    p_verify = sub.add_parser("verify", parents=[common],
                              help="finite-difference gradient audit")
    p_verify.add_argument("--component",
                          choices=GRAD_CHECK_COMPONENTS + ("all",),
                          default="all", help="which module to audit")
    p_verify.set_defaults(handler=_cmd_verify)
    p_sample = sub.add_parser("sample-episode", parents=[common, episode],
                              help="print one sampled episode's layout")
    p_sample.set_defaults(handler=_cmd_sample)
    return parser


# ------------------------------------------------------------- resolution


def _load_config(path: Path | None) -> dict:
    merged = {"train": {}, "dataset": dict(_DEFAULT_DATASET),
              "split": dict(_DEFAULT_SPLIT)}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(merged)
        if unknown:
            raise ValueError(f"unknown config blocks: {sorted(unknown)}")
        merged["train"].update(raw.get("train", {}))
        merged["dataset"].update(raw.get("dataset", {}))
        merged["split"].update(raw.get("split", {}))
    return merged


def _train_config(config: dict, args) -> TrainConfig:
    fields = dict(config["train"])
    for flag, field in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            fields[field] = value
    return TrainConfig(**fields)


def _dataset(config: dict) -> DatasetIndex:
    block = dict(config["dataset"])
    kind = block.pop("kind")
    if kind == SYNTHETIC:
        block["patch_grid"] = tuple(block.get("patch_grid", (4, 4)))
        return load_dataset(SyntheticSpec(**block), SYNTHETIC)
    if kind == IMAGE_DIRECTORY:
        return load_dataset(block["root"], IMAGE_DIRECTORY,
                            patch_grid=tuple(block.get("patch_grid", (4, 4))),
                            patch_size=block.get("patch_size", 4))
    if kind == PRECOMPUTED:
        return load_dataset(block["path"], PRECOMPUTED)
    raise ValueError(f"unknown dataset kind {kind!r}")


def _split(config: dict, index: DatasetIndex):
    block = config["split"]
    return split_base_novel(index, block["novel_fraction"], block["seed"])


def _snapshot(out_dir: Path, command: str, config: dict,
              train_config: TrainConfig | None, extra: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "dataset": config["dataset"],
               "split": config["split"], "extra": extra}
    if train_config is not None:
        payload["train"] = asdict(train_config)
    path = out_dir / "resolved-config.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def _echo(path: Path) -> None:
    print(f"wrote {path}")


# --------------------------------------------------------------- handlers


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    tc = _train_config(config, args)
    index = _dataset(config)
    base, _ = _split(config, index)
    print(f"training on {base.num_classes} base classes "
          f"({len(base.items)} samples), seed {tc.seed}")
    result = train(tc, base, progress=lambda e, m: print(f"epoch {e}: mean loss {m:.6f}"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, result)
    _echo(ckpt)
    curve = out / "loss-curve.txt"
    curve.write_text("".join(f"epoch {e} mean-loss {m:.10f}\n"
                             for e, m in enumerate(result.epoch_means)))
    _echo(curve)
    _echo(_snapshot(out, "train", config, tc, {"checkpoint": str(ckpt)}))
    return 0


def _protocol(args, tc: TrainConfig) -> EvalProtocol:
    return EvalProtocol(
        n_way=args.n_way if args.n_way is not None else tc.n_way,
        k_shot=args.k_shot if args.k_shot is not None else tc.k_shot,
        q_queries=args.queries if args.queries is not None else tc.q_queries,
        episodes=args.episodes if args.episodes is not None else 600,
        seed=args.seed if args.seed is not None else 0)


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    model, meta = load_checkpoint(args.checkpoint)
    tc = train_config_from(meta["train_config"])
    index = _dataset(config)
    _, novel = _split(config, index)
    protocol = _protocol(args, tc)
    report = evaluate(model, novel, protocol)
    print(format_eval_table({"full-model": {protocol.k_shot: report}}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval-report.json"
    path.write_text(json.dumps(
        {"mean_accuracy": report.mean_accuracy, "ci95": report.ci95,
         "episode_count": report.episode_count,
         "protocol": asdict(protocol), "accuracies": report.accuracies},
        sort_keys=True, indent=1) + "\n")
    _echo(path)
    _echo(_snapshot(out, "eval", config, tc, {"checkpoint": str(args.checkpoint)}))
    return 0


def _cmd_explain(args) -> int:
    config = _load_config(args.config)
    model, meta = load_checkpoint(args.checkpoint)
    tc = train_config_from(meta["train_config"])
    index = _dataset(config)
    _, novel = _split(config, index)
    protocol = _protocol(args, tc)
    episode = sample_episode(novel, protocol.n_way, protocol.k_shot,
                             protocol.q_queries, seed=protocol.seed)
    bundle = explain_episode(model, novel, episode, query_position=0,
                             k=args.top_k)
    out = Path(args.out)
    print(f"query {bundle.query_id}: predicted {bundle.predicted_class} "
          f"(similarity {bundle.similarity_score:.4f})")
    print("top concepts: "
          + ", ".join(str(c) for c in bundle.concept_ids()))
    for path in render(bundle, out):
        _echo(path)
    _echo(_snapshot(out, "explain", config, tc,
                    {"checkpoint": str(args.checkpoint), "top_k": args.top_k}))
    return 0


def _cmd_verify(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    components = (GRAD_CHECK_COMPONENTS if args.component == "all"
                  else (args.component,))
    reports = [grad_check(c, seed=seed) for c in components]
    lines = [r.summary() for r in reports]
    print("\n".join(lines))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "verify-report.txt"
    path.write_text("\n".join(lines) + "\n")
    _echo(path)
    _echo(_snapshot(out, "verify", config, None,
                    {"components": list(components), "seed": seed}))
    return 0 if all(r.passed for r in reports) else 1


def _cmd_sample(args) -> int:
    config = _load_config(args.config)
    index = _dataset(config)
    tc = _train_config(config, args)
    n_way, k_shot = tc.n_way, tc.k_shot
    queries, seed = tc.q_queries, tc.seed
    episode = sample_episode(index, n_way, k_shot, queries, seed=seed)
    ids = np.array([it.sample_id for it in index.items])
    payload = {
        "n_way": n_way, "k_shot": k_shot, "q_queries": queries, "seed": seed,
        "class_labels": list(episode.class_labels),
        "support": ids[episode.support].tolist(),
        "query": ids[episode.query].tolist(),
    }
    print(json.dumps(payload, sort_keys=True, indent=1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "episode.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    _echo(path)
    _echo(_snapshot(out, "sample-episode", config, None,
                    {"episode_seed": seed}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # runtime failures: diagnostic, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
