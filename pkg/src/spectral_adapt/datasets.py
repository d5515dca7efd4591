"""Dataset directories, train/val/test splits and a planted-partition generator.

Directory layout::

    edges.tsv      u<TAB>v per line, 0-based, '#' comments
    labels.tsv     node<TAB>class per line
    features.tsv   n rows of m whitespace-separated floats
    features.bin   alternative: b"SAFB" + 4 pad bytes + uint32 n + uint32 m, then
                   little-endian float32, row-major
    manifest.json  optional declared stats {"name", "n", "edges", "features", "classes"}
    splits.json    optional {"splits": [{"train": [...], "val": [...], "test": [...]}]}

Random splits use numpy's PCG64 generator seeded with
``SeedSequence([seed, split_index])`` and a uniform permutation per split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, GraphError, LabeledGraph, build_undirected, read_edges, write_edges

_FEATURE_MAGIC = b"SAFB"


class DatasetError(ValueError):
    """Invalid or inconsistent dataset files."""


@dataclass(frozen=True)
class DatasetBundle:
    name: str
    labeled: LabeledGraph
    features: np.ndarray = field(repr=False)

    @property
    def graph(self) -> Graph:
        return self.labeled.graph

    @property
    def labels(self) -> np.ndarray:
        return self.labeled.labels

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def num_classes(self) -> int:
        return self.labeled.num_classes

    def stats(self) -> dict:
        return {"name": self.name, "n": self.n, "edges": self.graph.num_edges,
                "features": int(self.features.shape[1]), "classes": self.num_classes}


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int | None = None

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def validate(self, n: int) -> "SplitSpec":
        parts = {"train": self.train, "val": self.val, "test": self.test}
        for name, idx in parts.items():
            if idx.size == 0:
                raise DatasetError(f"split has an empty {name} set")
            if idx.min() < 0 or idx.max() >= n:
                raise DatasetError(f"{name} index out of range [0, {n})")
            if np.unique(idx).size != idx.size:
                raise DatasetError(f"duplicate index inside the {name} set")
        allidx = np.concatenate(list(parts.values()))
        if np.unique(allidx).size != allidx.size:
            raise DatasetError("train/val/test sets overlap")
        return self

    def to_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(),
                "test": self.test.tolist()}


# ---------------------------------------------------------------------------
# loading / saving

def _read_labels(path):
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'node<TAB>class', got {line!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    if not pairs:
        raise DatasetError(f"{path}: no labels")
    arr = np.asarray(pairs, dtype=np.int64)
    n = int(arr[:, 0].max()) + 1
    if np.unique(arr[:, 0]).size != arr.shape[0] or arr.shape[0] != n:
        raise DatasetError(f"{path}: node ids must be exactly 0..n-1, each once")
    if arr[:, 1].min() < 0:
        raise DatasetError(f"{path}: negative class id")
    labels = np.empty(n, dtype=np.int64)
    labels[arr[:, 0]] = arr[:, 1]
    return labels


def _read_features_tsv(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(x) for x in line.split()]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric feature value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(
                    f"{path}:{lineno}: expected {width} features, got {len(row)}")
            rows.append(row)
    X = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DatasetError(f"{path}: non-finite feature values")
    return X


def read_features_bin(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    n, m = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * n * m:
        raise DatasetError(f"{path}: expected {n}x{m} float32 payload")
    X = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, m)
    return X.astype(np.float64)


def write_features_bin(X, path) -> None:
    X = np.asarray(X)
    n, m = X.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC + b"\0" * 4 + struct.pack("<II", n, m))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def load_dataset(directory) -> DatasetBundle:
    directory = Path(directory)
    for required in ("edges.tsv", "labels.tsv"):
        if not (directory / required).exists():
            raise DatasetError(f"{directory}: missing {required}")
    labels = _read_labels(directory / "labels.tsv")
    n = labels.shape[0]
    if (directory / "features.tsv").exists():
        X = _read_features_tsv(directory / "features.tsv")
    elif (directory / "features.bin").exists():
        X = read_features_bin(directory / "features.bin")
    else:
        raise DatasetError(f"{directory}: missing features.tsv or features.bin")
    if X.shape[0] != n:
        raise DatasetError(f"features have {X.shape[0]} rows but labels cover {n} nodes")
    try:
        graph = read_edges(directory / "edges.tsv", n)
    except GraphError as exc:
        raise DatasetError(str(exc)) from exc

    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
    num_classes = int(manifest.get("classes", labels.max() + 1))
    if labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} out of range for {num_classes} classes")
    bundle = DatasetBundle(name=manifest.get("name", directory.name),
                           labeled=LabeledGraph(graph, labels, num_classes), features=X)
    if manifest:
        actual = bundle.stats()
        for key in ("n", "edges", "features", "classes"):
            if key in manifest and int(manifest[key]) != actual[key]:
                raise DatasetError(
                    f"manifest declares {key}={manifest[key]} but files give {actual[key]}")
    return bundle


def save_dataset(bundle: DatasetBundle, directory, binary_features: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_edges(bundle.graph, directory / "edges.tsv")
    with open(directory / "labels.tsv", "w") as fh:
        for i, y in enumerate(bundle.labels):
            fh.write(f"{i}\t{int(y)}\n")
    if binary_features:
        write_features_bin(bundle.features, directory / "features.bin")
    else:
        with open(directory / "features.tsv", "w") as fh:
            for row in bundle.features:
                fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    (directory / "manifest.json").write_text(json.dumps(bundle.stats(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# splits

def generate_splits(n: int, ratios=(0.48, 0.32, 0.20), seed: int = 0,
                    count: int = 10) -> list:
    """Random splits: floor(train), floor(val), remainder (or floor) test."""
    r_train, r_val, r_test = ratios
    total = r_train + r_val + r_test
    if total > 1 + 1e-9 or min(ratios) < 0:
        raise DatasetError(f"split ratios {ratios} must be nonnegative and sum to <= 1")
    n_train = int(np.floor(r_train * n))
    n_val = int(np.floor(r_val * n))
    if abs(total - 1.0) < 1e-9:
        n_test = n - n_train - n_val
    else:
        n_test = int(np.floor(r_test * n))
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"n={n} is too small for nonempty splits with ratios {ratios}")
    out = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        perm = rng.permutation(n)
        out.append(SplitSpec(train=np.sort(perm[:n_train]),
                             val=np.sort(perm[n_train:n_train + n_val]),
                             test=np.sort(perm[n_train + n_val:n_train + n_val + n_test]),
                             seed=seed))
    return out


def load_splits(path, n: int | None = None) -> list:
    obj = json.loads(Path(path).read_text())
    entries = obj["splits"] if isinstance(obj, dict) else obj
    out = []
    for i, entry in enumerate(entries):
        try:
            split = SplitSpec(*(np.asarray(entry[k], dtype=np.int64) for k in ("train", "val", "test")))
        except KeyError as exc:
            raise DatasetError(f"split {i} is missing {exc.args[0]!r}") from None
        bound = n if n is not None else int(max(
            (a.max() for a in (split.train, split.val, split.test) if a.size), default=-1)) + 1
        try:
            out.append(split.validate(bound))
        except DatasetError as exc:
            raise DatasetError(f"split {i}: {exc}") from None
    if not out:
        raise DatasetError(f"{path}: no splits")
    return out


def save_splits(splits, path) -> None:
    Path(path).write_text(json.dumps({"splits": [s.to_dict() for s in splits]}) + "\n")


def subsample_train(split: SplitSpec, fraction: float, seed: int) -> SplitSpec:
    """Keep a seeded prefix of a fixed shuffle of the train set (nested across fractions)."""
    if not 0 < fraction <= 1:
        raise DatasetError("train fraction must lie in (0, 1]")
    k = int(np.floor(fraction * len(split.train)))
    if k < 1:
        raise DatasetError(f"fraction {fraction} leaves an empty train set")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7A1])))
    order = rng.permutation(len(split.train))
    return SplitSpec(train=np.sort(split.train[order[:k]]), val=split.val, test=split.test,
                     seed=split.seed)


# ---------------------------------------------------------------------------
# synthetic data

def synth_heterophily(n: int, classes: int = 2, p_intra: float = 0.01, p_inter: float = 0.1,
                      feature_noise: float = 1.0, seed: int = 0, num_features: int = 16,
                      informative: bool = False, name: str = "synthetic") -> DatasetBundle:
    """Planted-partition graph with balanced classes.

    Same-class pairs connect with probability ``p_intra`` and cross-class pairs
    with ``p_inter``. Features are Gaussian noise of scale ``feature_noise``;
    with ``informative`` a one-hot class signal is added to the first
    ``classes`` columns.
    """
    if not (0 <= p_intra <= 1 and 0 <= p_inter <= 1):
        raise DatasetError("edge probabilities must lie in [0, 1]")
    if classes < 1 or n < classes:
        raise DatasetError("need at least one node per class")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_intra, p_inter)
    hit = rng.random(iu.shape[0]) < prob
    graph = build_undirected(np.stack([iu[hit], ju[hit]], axis=1), n)
    X = feature_noise * rng.standard_normal((n, num_features))
    if informative:
        if num_features < classes:
            raise DatasetError("informative features need num_features >= classes")
        X[np.arange(n), labels] += 1.0
    return DatasetBundle(name=name, labeled=LabeledGraph(graph, labels, classes), features=X)
