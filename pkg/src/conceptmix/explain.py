""""This looks like that" explanation bundles and their file renderer.

A bundle pairs one query with one support sample and reports the k most
important concepts of the query: per-concept patch heatmaps on both
images (min-max normalized per map, so intensities compare within a map
but not across maps), the pooled contribution each concept made, and the
cosine score used for classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .concepts import similarity
from .episodes import DatasetIndex, Episode
from .model import FewShotConceptModel
from .trainer import episode_tensors

_HEATMAP_EPS = 0.0  # a constant map has no contrast; it renders as zeros


def top_concepts(vector, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken toward lower index."""
    v = np.asarray(vector).reshape(-1)
    if not 1 <= k <= v.size:
        raise ValueError(f"k must be in [1, {v.size}], got {k}")
    order = np.argsort(-v, kind="stable")  # stable: equal values keep index order
    return order[:k].astype(np.int64)


def minmax_heatmap(values: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Reshape patch scores to H x W and scale the span onto [0, 1]."""
    h, w = grid
    m = np.asarray(values, dtype=np.float64).reshape(h, w)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= _HEATMAP_EPS:
        return np.zeros((h, w))
    return (m - lo) / (hi - lo)


@dataclass(frozen=True)
class ConceptExplanation:
    concept_id: int
    contribution: float
    query_heatmap: np.ndarray  # (H, W) in [0, 1]
    support_heatmap: np.ndarray


@dataclass(frozen=True)
class ExplanationBundle:
    query_id: str
    support_id: str
    predicted_class: str | None
    similarity_score: float
    top_concepts: tuple[ConceptExplanation, ...]

    def __post_init__(self):
        contribs = [e.contribution for e in self.top_concepts]
        if any(b > a for a, b in zip(contribs, contribs[1:])):
            raise ValueError("top_concepts must be sorted by contribution")
        for e in self.top_concepts:
            for m in (e.query_heatmap, e.support_heatmap):
                if m.min() < 0.0 or m.max() > 1.0:
                    raise ValueError("heatmap values must lie in [0, 1]")

    def concept_ids(self) -> tuple[int, ...]:
        return tuple(int(e.concept_id) for e in self.top_concepts)


def _single(model: FewShotConceptModel, sample):
    """Eval-mode features for one sample: adds and strips the batch axis."""
    if isinstance(sample, dict):
        batch = {k: np.asarray(v)[None] for k, v in sample.items()}
    else:
        batch = np.asarray(sample)[None]
    smoothed, pooled, fused = model.features(batch)
    return smoothed.data[0], pooled.data[0], fused.data[0]


def _entries(model, ids, pooled_q, smoothed_q, smoothed_s):
    out = []
    for cid in ids:
        out.append(ConceptExplanation(
            concept_id=int(cid),
            contribution=float(pooled_q[cid]),
            query_heatmap=minmax_heatmap(smoothed_q[:, cid], model.grid),
            support_heatmap=minmax_heatmap(smoothed_s[:, cid], model.grid)))
    return tuple(out)


def explanation_bundle(model: FewShotConceptModel, query, support, k: int,
                       query_id: str = "query", support_id: str = "support",
                       predicted_class: str | None = None) -> ExplanationBundle:
    """Explain one query against one support sample.

    The support sample doubles as its class prototype (a one-element
    mean), so the score is the same cosine the classifier would use.
    """
    smoothed_q, pooled_q, fused_q = _single(model, query)
    smoothed_s, _, fused_s = _single(model, support)
    score = float(similarity(fused_q[None], fused_s[None]).data[0, 0])
    ids = top_concepts(pooled_q, k)
    return ExplanationBundle(
        query_id=query_id, support_id=support_id,
        predicted_class=predicted_class, similarity_score=score,
        top_concepts=_entries(model, ids, pooled_q, smoothed_q, smoothed_s))


def explain_episode(model: FewShotConceptModel, index: DatasetIndex,
                    episode: Episode, query_position: int,
                    k: int) -> ExplanationBundle:
    """Explain one episode query against its predicted class's first support."""
    total = episode.n_way * episode.q_queries
    if not 0 <= query_position < total:
        raise ValueError(f"query_position must be in [0, {total})")
    support_x, query_x = episode_tensors(index, episode)
    out = model.episode_forward(support_x, query_x)
    pred = int(out.predictions()[query_position])
    support_flat = pred * episode.k_shot  # first support item of that class
    query_item = index.items[int(episode.query.reshape(-1)[query_position])]
    support_item = index.items[int(episode.support.reshape(-1)[support_flat])]
    ids = top_concepts(out.concept_query.data[query_position], k)
    return ExplanationBundle(
        query_id=query_item.sample_id, support_id=support_item.sample_id,
        predicted_class=episode.class_labels[pred],
        similarity_score=float(out.similarity.data[query_position, pred]),
        top_concepts=_entries(model, ids,
                              out.concept_query.data[query_position],
                              out.smoothed_query.data[query_position],
                              out.smoothed_support.data[support_flat]))


# --------------------------------------------------------------- rendering


def _safe(name: str) -> str:
    return "".join(ch if (ch.isalnum() or ch in "._-") else "-" for ch in name)


def _raster(path: Path, heatmap: np.ndarray) -> None:
    pixels = np.round(heatmap * 255.0).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


def render(bundle: ExplanationBundle, out_dir) -> list[Path]:
    """Write the bundle as JSON plus one grayscale PNG per heatmap.

    Returns every written path; rerunning writes byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = _safe(bundle.query_id)
    payload = {
        "query_id": bundle.query_id,
        "support_id": bundle.support_id,
        "predicted_class": bundle.predicted_class,
        "similarity_score": bundle.similarity_score,
        "top_concepts": [
            {"concept_id": e.concept_id,
             "contribution": e.contribution,
             "query_heatmap": e.query_heatmap.tolist(),
             "support_heatmap": e.support_heatmap.tolist()}
            for e in bundle.top_concepts
        ],
    }
    bundle_path = out_dir / f"{stem}.bundle.json"
    bundle_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    paths = [bundle_path]
    for e in bundle.top_concepts:
        for role, hm in (("query", e.query_heatmap),
                         ("support", e.support_heatmap)):
            p = out_dir / f"{stem}.concept{e.concept_id:04d}.{role}.png"
            _raster(p, hm)
            paths.append(p)
    return paths
