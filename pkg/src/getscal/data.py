"""Dataset directories, seeded 20/10/70 splits and a stochastic block model.

A dataset directory holds UTF-8 text files with LF line endings::

    meta.json           {"name", "num_nodes", "num_features", "num_classes"}
    edges.tsv           one undirected edge per line: "u<TAB>v" (0-indexed)
    features.csv        N lines of F comma-separated floats
    labels.csv          N lines, one integer class id in [0, K)
    splits/seed_<s>.csv optional, N lines of "train" | "val" | "test"
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .graph import GraphDataset, GraphError, build_graph

META_KEYS = ("name", "num_nodes", "num_features", "num_classes")
SPLIT_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        t, v, s = (np.asarray(m, dtype=bool) for m in (self.train, self.val, self.test))
        if not (t.shape == v.shape == s.shape):
            raise ValueError("split masks must have equal length")
        if np.any(t.astype(int) + v.astype(int) + s.astype(int) != 1):
            raise ValueError("split masks must be disjoint and cover every node")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return int(self.train.sum()), int(self.val.sum()), int(self.test.sum())


def split_sizes(n: int) -> tuple[int, int, int]:
    # Python's round() is half-to-even, so round(2.5) == 2; use half-up instead
    train = int(np.floor(0.2 * n + 0.5))
    val = int(np.floor(0.1 * n + 0.5))
    return train, val, n - train - val


def generate_splits(n: int, seed: int) -> SplitMasks:
    """Seeded permutation of the nodes cut into train/val/test by 20/10/70."""
    if n < 10:
        raise ValueError(f"need at least 10 nodes for a 20/10/70 split, got {n}")
    perm = rngmod.stream(seed, "splits").permutation(n)
    n_train, n_val, _ = split_sizes(n)
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][perm[:n_train]] = True
    masks[1][perm[n_train:n_train + n_val]] = True
    masks[2][perm[n_train + n_val:]] = True
    return SplitMasks(*masks, seed=seed)


@dataclass(frozen=True)
class SbmConfig:
    num_blocks: int = 4
    nodes_per_block: int = 100
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int = 16
    feature_signal: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.num_blocks < 2 or self.nodes_per_block < 1 or self.feature_dim < 1:
            raise ValueError("need >= 2 blocks, >= 1 node per block and >= 1 feature")


def generate_sbm(cfg: SbmConfig) -> GraphDataset:
    """Sample a planted-partition graph with Gaussian class-mean features.

    Random draws, in order, from the ``sbm`` stream of ``cfg.seed``: one
    uniform per node pair ``i < j`` in row-major upper-triangle order (nodes
    are numbered block by block), then an N x F standard-normal noise matrix.
    Node features are ``feature_signal * onehot(block mod F) + noise``.
    """
    n = cfg.num_blocks * cfg.nodes_per_block
    labels = np.repeat(np.arange(cfg.num_blocks), cfg.nodes_per_block)
    gen = rngmod.stream(cfg.seed, "sbm")
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], cfg.p_in, cfg.p_out)
    hit = gen.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    features = gen.standard_normal((n, cfg.feature_dim))
    features[np.arange(n), labels % cfg.feature_dim] += cfg.feature_signal
    name = f"sbm-{cfg.num_blocks}x{cfg.nodes_per_block}-s{cfg.seed}"
    return build_graph(edges, n, features, labels, cfg.num_blocks, name=name)


# ------------------------------------------------------------------- file io

def _fmt_float(v: float) -> str:
    return repr(float(v))


def save_dataset(g: GraphDataset, directory, force: bool = False) -> Path:
    d = Path(directory)
    if (d / "meta.json").exists() and not force:
        raise FileExistsError(f"{d} already holds a dataset; pass force=True to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    meta = {"name": g.name, "num_nodes": g.num_nodes, "num_features": g.num_features,
            "num_classes": g.num_classes}
    _write(d / "meta.json", json.dumps(meta, indent=2) + "\n")
    _write(d / "edges.tsv", "".join(f"{u}\t{v}\n" for u, v in g.edges.tolist()))
    _write(d / "features.csv", "".join(",".join(map(_fmt_float, row)) + "\n" for row in g.features.tolist()))
    _write(d / "labels.csv", "".join(f"{y}\n" for y in g.labels.tolist()))
    return d


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _lines(path: Path) -> list[str]:
    if not path.exists():
        raise DatasetFormatError(f"missing file {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_dataset(directory) -> GraphDataset:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}:{exc.lineno}: {exc.msg}") from None
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise DatasetFormatError(f"{meta_path}: missing keys {missing}")
    n, f, k = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])

    path = d / "features.csv"
    rows = _lines(path)
    if len(rows) != n:
        raise DatasetFormatError(f"{path}: expected {n} rows, found {len(rows)}")
    features = np.empty((n, f))
    for i, line in enumerate(rows):
        parts = line.split(",") if f else []
        if len(parts) != f:
            raise DatasetFormatError(f"{path}:{i + 1}: expected {f} values, found {len(parts)}")
        try:
            features[i] = [float(p) for p in parts]
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 1}: malformed number") from None

    path = d / "labels.csv"
    rows = _lines(path)
    if len(rows) != n:
        raise DatasetFormatError(f"{path}: expected {n} rows, found {len(rows)}")
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(rows):
        try:
            labels[i] = int(line.strip())
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 1}: malformed integer {line!r}") from None
        if not 0 <= labels[i] < k:
            raise DatasetFormatError(f"{path}:{i + 1}: label {labels[i]} outside [0, {k})")

    path = d / "edges.tsv"
    edges = []
    for i, line in enumerate(_lines(path)):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            u, v = (int(p) for p in parts)
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 1}: expected 'u<TAB>v', got {line!r}") from None
        edges.append((u, v))
    try:
        return build_graph(edges, n, features, labels, k, name=str(meta["name"]))
    except GraphError as exc:
        raise DatasetFormatError(f"{d}: {exc}") from None


def save_splits(masks: SplitMasks, directory) -> Path:
    path = Path(directory) / "splits" / f"seed_{masks.seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    names = np.where(masks.train, "train", np.where(masks.val, "val", "test"))
    _write(path, "".join(f"{s}\n" for s in names))
    return path


def load_splits(directory, seed: int, num_nodes: int) -> SplitMasks | None:
    """Read ``splits/seed_<seed>.csv`` if the dataset ships one, else ``None``."""
    path = Path(directory) / "splits" / f"seed_{seed}.csv"
    if not path.exists():
        return None
    rows = _lines(path)
    if len(rows) != num_nodes:
        raise DatasetFormatError(f"{path}: expected {num_nodes} rows, found {len(rows)}")
    bad = [i for i, r in enumerate(rows) if r.strip() not in SPLIT_NAMES]
    if bad:
        raise DatasetFormatError(f"{path}:{bad[0] + 1}: expected one of {SPLIT_NAMES}")
    arr = np.array([r.strip() for r in rows])
    return SplitMasks(arr == "train", arr == "val", arr == "test", seed=seed)
