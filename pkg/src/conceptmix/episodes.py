"""Dataset ingestion, base/novel class splits, and episodic task sampling.

Three source kinds share one index type:

* ``image-directory``: ``root/<class_name>/<files>``; images are converted
  to grayscale, resized to the patch grid times ``patch_size``, and cut
  into flattened pixel patches.
* ``synthetic-generator``: features drawn on demand from a
  :class:`SyntheticSpec`; every sample is a pure function of the spec seed
  and the sample's (class, item) position, so indexes never store data.
* ``precomputed-features``: a manifest+blob container holding per-sample
  feature maps at the four tap depths.

Everything here is deterministic given its explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container

IMAGE_DIRECTORY = "image-directory"
SYNTHETIC = "synthetic-generator"
PRECOMPUTED = "precomputed-features"

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff"}
_TAP_NAMES = ("low", "mid", "high", "out")


@dataclass(frozen=True)
class SyntheticSpec:
    """Controllable-difficulty feature generator.

    Each sample of class ``c`` is ``class_margin * u_c + noise_sigma * eps``
    per patch, where ``u_c`` is a unit class direction; ``class_margin``
    is the separability knob. ``seed`` pins the whole dataset.
    """

    num_classes: int
    samples_per_class: int
    patch_grid: tuple[int, int] = (4, 4)
    feature_dim: int = 32
    class_margin: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes and samples_per_class must be positive")
        if self.class_margin < 0:
            raise ValueError("class_margin must be nonnegative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    def class_direction(self, class_idx: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0, class_idx)))
        v = rng.normal(size=self.feature_dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def sample_features(self, class_idx: int, item_idx: int) -> np.ndarray:
        """Patch features (R, D) for one sample; pure in all arguments."""
        rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, 1, class_idx, item_idx)))
        noise = rng.normal(size=(self.num_patches, self.feature_dim))
        mean = self.class_margin * self.class_direction(class_idx)
        return (mean[None, :] + self.noise_sigma * noise).astype(np.float32)


@dataclass(frozen=True)
class IndexItem:
    sample_id: str
    class_label: str
    locator: object


@dataclass
class DatasetIndex:
    """Immutable listing of samples grouped by class."""

    items: list[IndexItem]
    classes: list[str]
    source_kind: str
    patch_grid: tuple[int, int]
    input_dim: int
    source: object = None
    _by_class: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [it.sample_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("sample_ids must be unique")
        if sorted(self.classes) != list(self.classes):
            raise ValueError("classes must be sorted")
        groups: dict[str, list[int]] = {c: [] for c in self.classes}
        for i, it in enumerate(self.items):
            groups[it.class_label].append(i)
        for c, idxs in groups.items():
            if not idxs:
                raise ValueError(f"class {c!r} has no items")
            self._by_class[c] = np.array(idxs, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_items(self, label: str) -> np.ndarray:
        return self._by_class[label]

    def restricted_to(self, class_subset: list[str]) -> "DatasetIndex":
        keep = set(class_subset)
        return DatasetIndex(
            items=[it for it in self.items if it.class_label in keep],
            classes=sorted(keep),
            source_kind=self.source_kind,
            patch_grid=self.patch_grid,
            input_dim=self.input_dim,
            source=self.source,
        )


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task. Row ``i`` of support/query is local class ``i``."""

    n_way: int
    k_shot: int
    q_queries: int
    support: np.ndarray  # (N, K) item indices into the index
    query: np.ndarray  # (N, Q) item indices
    class_labels: tuple[str, ...]  # global label of each local class
    episode_seed: int

    def __post_init__(self):
        if self.support.shape != (self.n_way, self.k_shot):
            raise ValueError("support shape mismatch")
        if self.query.shape != (self.n_way, self.q_queries):
            raise ValueError("query shape mismatch")
        s, q = set(self.support.ravel()), set(self.query.ravel())
        if s & q:
            raise ValueError("support and query overlap")
        if len(s) != self.support.size or len(q) != self.query.size:
            raise ValueError("duplicate items inside support or query")
        if len(set(self.class_labels)) != self.n_way:
            raise ValueError("class labels must be distinct")


def load_dataset(source, kind: str, patch_grid: tuple[int, int] = (4, 4),
                 patch_size: int = 4) -> DatasetIndex:
    """Build a :class:`DatasetIndex` from one of the three source kinds."""
    if kind == SYNTHETIC:
        return _load_synthetic(source)
    if kind == IMAGE_DIRECTORY:
        return _load_image_directory(Path(source), patch_grid, patch_size)
    if kind == PRECOMPUTED:
        return _load_precomputed(Path(source))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _load_synthetic(spec: SyntheticSpec) -> DatasetIndex:
    if not isinstance(spec, SyntheticSpec):
        raise TypeError("synthetic-generator needs a SyntheticSpec source")
    width = len(str(spec.num_classes - 1))
    items = []
    classes = []
    for c in range(spec.num_classes):
        label = f"class_{c:0{width}d}"
        classes.append(label)
        for i in range(spec.samples_per_class):
            items.append(IndexItem(f"{label}/{i:04d}", label, (c, i)))
    return DatasetIndex(items=items, classes=sorted(classes), source_kind=SYNTHETIC,
                        patch_grid=spec.patch_grid, input_dim=spec.feature_dim,
                        source=spec)


def _load_image_directory(root: Path, patch_grid: tuple[int, int],
                          patch_size: int) -> DatasetIndex:
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class subdirectories under {root}")
    items = []
    for label in classes:
        files = sorted(p for p in (root / label).iterdir()
                       if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {label!r} has no images")
        for p in files:
            items.append(IndexItem(f"{label}/{p.name}", label, p))
    return DatasetIndex(items=items, classes=classes, source_kind=IMAGE_DIRECTORY,
                        patch_grid=patch_grid, input_dim=patch_size * patch_size,
                        source={"root": root, "patch_size": patch_size})


def _load_precomputed(root: Path) -> DatasetIndex:
    arrays, meta = read_container(root)
    labels: dict[str, str] = meta.get("labels", {})
    grid = tuple(meta.get("patch_grid", ()))
    if not labels or len(grid) != 2:
        raise ValueError("precomputed container needs 'labels' and 'patch_grid' metadata")
    samples: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        sample_id, sep, tap = name.rpartition(":")
        if not sep or tap not in _TAP_NAMES:
            raise ValueError(f"array name {name!r} is not '<sample_id>:<tap>'")
        samples.setdefault(sample_id, {})[tap] = arr
    dims = set()
    for sid, taps in samples.items():
        if set(taps) != set(_TAP_NAMES):
            raise ValueError(f"sample {sid!r} is missing tap entries")
        if sid not in labels:
            raise ValueError(f"sample {sid!r} has no class label in metadata")
        for arr in taps.values():
            if arr.ndim != 2 or arr.shape[0] != grid[0] * grid[1]:
                raise ValueError(f"sample {sid!r}: tap shape {arr.shape} does not "
                                 f"match patch grid {grid}")
            dims.add(arr.shape[1])
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dim across entries: {sorted(dims)}")
    items = [IndexItem(sid, labels[sid], sid) for sid in sorted(samples)]
    classes = sorted({it.class_label for it in items})
    return DatasetIndex(items=items, classes=classes, source_kind=PRECOMPUTED,
                        patch_grid=(int(grid[0]), int(grid[1])),
                        input_dim=dims.pop(), source=samples)


def split_base_novel(index: DatasetIndex, novel_fraction: float,
                     seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Partition the class set into (base, novel); pure in all arguments."""
    if index.num_classes < 2:
        raise ValueError("need at least 2 classes to split")
    if not 0.0 < novel_fraction < 1.0:
        raise ValueError("novel_fraction must be in (0, 1)")
    n_novel = int(round(novel_fraction * index.num_classes))
    if n_novel == 0 or n_novel == index.num_classes:
        raise ValueError(f"novel_fraction {novel_fraction} leaves one side empty")
    rng = np.random.default_rng(np.random.SeedSequence((seed, index.num_classes)))
    order = rng.permutation(index.num_classes)
    novel = [index.classes[i] for i in order[:n_novel]]
    base = [index.classes[i] for i in order[n_novel:]]
    return index.restricted_to(base), index.restricted_to(novel)


def sample_episode(index: DatasetIndex, n_way: int, k_shot: int,
                   q_queries: int, seed: int) -> Episode:
    """Draw one N-way K-shot episode; byte-identical for identical inputs."""
    if n_way < 2:
        raise ValueError("n_way must be at least 2")
    if k_shot < 1 or q_queries < 1:
        raise ValueError("k_shot and q_queries must be positive")
    if index.num_classes < n_way:
        raise ValueError(f"index has {index.num_classes} classes, need {n_way}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, n_way, k_shot, q_queries)))
    chosen = rng.choice(index.num_classes, size=n_way, replace=False)
    support = np.empty((n_way, k_shot), dtype=np.int64)
    query = np.empty((n_way, q_queries), dtype=np.int64)
    labels = []
    for local, ci in enumerate(chosen):
        label = index.classes[ci]
        pool = index.class_items(label)
        need = k_shot + q_queries
        if pool.size < need:
            raise ValueError(f"class {label!r} has {pool.size} items, "
                             f"need {need} for {k_shot}-shot + {q_queries} queries")
        picked = pool[rng.permutation(pool.size)[:need]]
        support[local] = picked[:k_shot]
        query[local] = picked[k_shot:]
        labels.append(label)
    return Episode(n_way=n_way, k_shot=k_shot, q_queries=q_queries,
                   support=support, query=query, class_labels=tuple(labels),
                   episode_seed=seed)


def materialize_inputs(index: DatasetIndex, item_indices: np.ndarray) -> np.ndarray:
    """Model inputs (B, R, input_dim) float32 for the given item indices.

    Not valid for precomputed indexes, whose samples carry ready-made
    multi-depth features instead (see :func:`materialize_taps`).
    """
    flat = np.asarray(item_indices).reshape(-1)
    r = index.patch_grid[0] * index.patch_grid[1]
    out = np.empty((flat.size, r, index.input_dim), dtype=np.float32)
    if index.source_kind == SYNTHETIC:
        spec: SyntheticSpec = index.source
        for j, idx in enumerate(flat):
            c, i = index.items[idx].locator
            out[j] = spec.sample_features(c, i)
    elif index.source_kind == IMAGE_DIRECTORY:
        ps = index.source["patch_size"]
        for j, idx in enumerate(flat):
            out[j] = _image_patches(index.items[idx].locator, index.patch_grid, ps)
    else:
        raise ValueError("precomputed indexes carry features, not inputs")
    return out.reshape(tuple(np.shape(item_indices)) + (r, index.input_dim))


def materialize_taps(index: DatasetIndex, item_indices: np.ndarray) -> dict[str, np.ndarray]:
    """Stored multi-depth features for a precomputed index: tap -> (B, R, D)."""
    if index.source_kind != PRECOMPUTED:
        raise ValueError("materialize_taps needs a precomputed-features index")
    flat = np.asarray(item_indices).reshape(-1)
    lead = tuple(np.shape(item_indices))
    result = {}
    for tap in _TAP_NAMES:
        stack = np.stack([index.source[index.items[idx].sample_id][tap] for idx in flat])
        result[tap] = stack.reshape(lead + stack.shape[1:]).astype(np.float32)
    return result


def _image_patches(path: Path, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    from PIL import Image

    gh, gw = grid
    with Image.open(path) as im:
        gray = im.convert("L").resize((gw * patch_size, gh * patch_size),
                                      Image.Resampling.BILINEAR)
    px = np.asarray(gray, dtype=np.float32) / 255.0
    patches = px.reshape(gh, patch_size, gw, patch_size).swapaxes(1, 2)
    return patches.reshape(gh * gw, patch_size * patch_size)
