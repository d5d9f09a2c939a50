"""TU-format graph classification datasets.

Graphs are held densely: a node-feature matrix plus a 0/1 adjacency matrix.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MODES = ("raw", "one-hot-label", "degree-one-hot", "degree-scalar", "constant")


class DataError(Exception):
    pass


class LoadError(DataError):
    pass


class FormatError(DataError):
    pass


class EncodingError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass
class Graph:
    features: np.ndarray
    adjacency: np.ndarray
    label: int
    directed: bool = False
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int8)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.adjacency.shape[0]
        if n == 0:
            raise FormatError("graph with 0 nodes")
        if self.adjacency.shape != (n, n):
            raise FormatError(f"adjacency must be square, got {self.adjacency.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise FormatError(f"features need {n} rows, got shape {self.features.shape}")

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def same_as(self, other: "Graph") -> bool:
        return (
            self.label == other.label
            and self.directed == other.directed
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
        )


@dataclass
class DatasetMeta:
    name: str
    num_classes: int
    feature_mode: str
    feature_dim: int
    avg_node_count: float
    max_degree: int
    directed: bool = False
    label_map: list = field(default_factory=list)  # original label of class index k
    node_label_vocab: list = field(default_factory=list)

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise DataError(f"unknown feature mode {self.feature_mode!r}")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise DataError("feature_dim must be >= 1")
        if not self.avg_node_count > 0:
            raise DataError("avg_node_count must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "feature_mode": self.feature_mode,
            "feature_dim": self.feature_dim,
            "avg_node_count": self.avg_node_count,
            "max_degree": self.max_degree,
            "directed": self.directed,
            "label_map": list(self.label_map),
            "node_label_vocab": list(self.node_label_vocab),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        return cls(**d)


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


def compute_degrees(adjacency: np.ndarray) -> np.ndarray:
    """Row sums of a binary adjacency matrix."""
    return np.asarray(adjacency).sum(axis=-1).astype(np.int64)


def feature_dim_for(mode: str, meta: DatasetMeta) -> int:
    if mode == "one-hot-label":
        return len(meta.node_label_vocab)
    if mode == "degree-one-hot":
        return meta.max_degree + 1
    if mode == "raw":
        return meta.feature_dim
    return 1


def degree_features(adjacency: np.ndarray, mode: str, max_degree: int) -> tuple[np.ndarray, int]:
    """Features derived from structure alone. Returns (features, n_clamped)."""
    deg = compute_degrees(adjacency)
    if mode == "degree-scalar":
        return deg[:, None].astype(np.float64), 0
    if mode == "constant":
        return np.ones((len(deg), 1)), 0
    if mode == "degree-one-hot":
        clamped = int((deg > max_degree).sum())
        out = np.zeros((len(deg), max_degree + 1))
        out[np.arange(len(deg)), np.minimum(deg, max_degree)] = 1.0
        return out, clamped
    raise EncodingError(f"mode {mode!r} is not structure-derived")


def _read_int_rows(path: Path, width: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != width:
                raise FormatError(f"{path.name}:{lineno}: expected {width} values, got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise FormatError(f"{path.name}:{lineno}: non-integer value in {line!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, width)


def _find_name(dir_path: Path) -> str:
    hits = sorted(dir_path.glob("*_graph_indicator.txt"))
    if not hits:
        raise LoadError(f"missing file: {dir_path / '<name>_graph_indicator.txt'}")
    return hits[0].name[: -len("_graph_indicator.txt")]


def load_tu_dataset(dir_path, meta_overrides: dict | None = None) -> tuple[list[Graph], DatasetMeta]:
    """Load a TU-layout directory into dense graphs.

    ``meta_overrides`` may set ``name``, ``feature_mode``, ``max_degree`` and
    ``directed``. Without an explicit mode, datasets with node labels get
    one-hot node-label features and the rest a constant feature.
    """
    dir_path = Path(dir_path)
    overrides = dict(meta_overrides or {})
    name = overrides.pop("name", None) or _find_name(dir_path)
    directed = bool(overrides.pop("directed", False))

    def path_of(suffix, required=True):
        p = dir_path / f"{name}_{suffix}.txt"
        if required and not p.exists():
            raise LoadError(f"missing file: {p}")
        return p if p.exists() else None

    edges = _read_int_rows(path_of("A"), 2)
    indicator = _read_int_rows(path_of("graph_indicator"), 1)[:, 0]
    labels_path = path_of("graph_labels")
    graph_labels = _read_int_rows(labels_path, 1)[:, 0]
    nl_path = path_of("node_labels", required=False)
    node_labels = _read_int_rows(nl_path, 1)[:, 0] if nl_path else None

    num_nodes = len(indicator)
    num_graphs = len(graph_labels)
    if node_labels is not None and len(node_labels) != num_nodes:
        raise FormatError(f"{nl_path.name}: {len(node_labels)} rows for {num_nodes} nodes")
    bad = np.flatnonzero((indicator < 1) | (indicator > num_graphs))
    if bad.size:
        raise FormatError(f"{name}_graph_indicator.txt:{bad[0] + 1}: graph id {indicator[bad[0]]} out of range")
    if np.any(np.diff(indicator) < 0):
        raise FormatError(f"{name}_graph_indicator.txt: node blocks are not contiguous")
    bad_edge = np.flatnonzero((edges < 1).any(axis=1) | (edges > num_nodes).any(axis=1))
    if bad_edge.size:
        raise FormatError(
            f"{name}_A.txt:{bad_edge[0] + 1}: node index out of range 1..{num_nodes}: {edges[bad_edge[0]].tolist()}"
        )

    counts = np.bincount(indicator, minlength=num_graphs + 1)[1:]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise FormatError(f"graph {empty[0] + 1} has 0 nodes")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    src, dst = edges[:, 0] - 1, edges[:, 1] - 1
    gs, gd = indicator[src], indicator[dst]
    cross = np.flatnonzero(gs != gd)
    if cross.size:
        raise FormatError(f"{name}_A.txt:{cross[0] + 1}: edge joins different graphs")

    label_map = sorted(set(graph_labels.tolist()))
    label_index = {v: k for k, v in enumerate(label_map)}
    vocab = sorted(set(node_labels.tolist())) if node_labels is not None else []

    adjs = [np.zeros((c, c), dtype=np.int8) for c in counts]
    for s, d, g in zip(src, dst, gs):
        off = starts[g - 1]
        adjs[g - 1][s - off, d - off] = 1
        if not directed:
            adjs[g - 1][d - off, s - off] = 1

    graphs = []
    for g in range(num_graphs):
        sl = slice(starts[g], starts[g] + counts[g])
        graphs.append(
            Graph(
                features=np.ones((counts[g], 1)),
                adjacency=adjs[g],
                label=label_index[int(graph_labels[g])],
                directed=directed,
                node_labels=None if node_labels is None else node_labels[sl].copy(),
            )
        )

    max_degree = int(max(compute_degrees(a).max() for a in adjs))
    mode = overrides.pop("feature_mode", None) or ("one-hot-label" if vocab else "constant")
    meta = DatasetMeta(
        name=name,
        num_classes=len(label_map),
        feature_mode="constant",
        feature_dim=1,
        avg_node_count=float(counts.mean()),
        max_degree=int(overrides.pop("max_degree", max_degree)),
        directed=directed,
        label_map=label_map,
        node_label_vocab=vocab,
    )
    if overrides:
        raise DataError(f"unknown meta overrides: {sorted(overrides)}")
    graphs = encode_features(graphs, mode, meta)
    meta = replace(meta, feature_mode=mode, feature_dim=graphs[0].feature_dim)
    return graphs, meta


def encode_features(graphs: Sequence[Graph], mode: str, meta: DatasetMeta) -> list[Graph]:
    """Re-encode node features of every graph under ``mode``."""
    if mode not in FEATURE_MODES:
        raise EncodingError(f"unknown feature mode {mode!r}")
    out, clamped = [], 0
    if mode == "one-hot-label":
        if not meta.node_label_vocab:
            raise EncodingError("one-hot-label mode needs node labels")
        index = {v: k for k, v in enumerate(meta.node_label_vocab)}
        for g in graphs:
            if g.node_labels is None:
                raise EncodingError("graph has no node labels")
            try:
                cols = [index[int(v)] for v in g.node_labels]
            except KeyError as e:
                raise EncodingError(f"node label {e.args[0]} outside vocabulary") from None
            feats = np.zeros((g.node_count, len(index)))
            feats[np.arange(g.node_count), cols] = 1.0
            out.append(replace(g, features=feats))
    elif mode == "raw":
        out = list(graphs)
    else:
        for g in graphs:
            feats, c = degree_features(g.adjacency, mode, meta.max_degree)
            clamped += c
            out.append(replace(g, features=feats))
    if clamped:
        warnings.warn(f"{clamped} node degrees above max_degree={meta.max_degree} clamped to top bucket")
    return out


def split_dataset(graphs: Sequence[Graph], train_ratio: float, seed: int) -> DatasetSplit:
    """Stratified shuffle split; per-class train counts by largest remainder."""
    if not 0 < train_ratio < 1:
        raise SplitError(f"train_ratio must be in (0, 1), got {train_ratio}")
    labels = np.array([g.label for g in graphs])
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise SplitError(f"class {classes[np.argmin(counts)]} has fewer than 2 graphs")
    want = train_ratio * counts
    take = np.floor(want).astype(int)
    extra = int(round(train_ratio * len(graphs))) - take.sum()
    order = np.argsort(-(want - take), kind="stable")
    take[order[: max(extra, 0)]] += 1
    take = np.clip(take, 1, counts - 1)

    rng = np.random.default_rng(seed)
    train_idx = []
    for c, k in zip(classes, take):
        members = np.flatnonzero(labels == c)
        train_idx.extend(rng.permutation(members)[:k].tolist())
    train_set = set(train_idx)
    train = [graphs[i] for i in sorted(train_set)]
    test = [g for i, g in enumerate(graphs) if i not in train_set]
    return DatasetSplit(train=train, test=test, seed=seed)


def write_tu_dataset(graphs: Sequence[Graph], dir_path, name: str) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(dir_path / f"{name}_A.txt", "w") as fa, \
         open(dir_path / f"{name}_graph_indicator.txt", "w") as fi, \
         open(dir_path / f"{name}_graph_labels.txt", "w") as fl:
        for gid, g in enumerate(graphs, 1):
            for i, j in zip(*np.nonzero(g.adjacency)):
                fa.write(f"{i + offset + 1}, {j + offset + 1}\n")
            fi.write(f"{gid}\n" * g.node_count)
            fl.write(f"{g.label}\n")
            offset += g.node_count
    if all(g.node_labels is not None for g in graphs):
        with open(dir_path / f"{name}_node_labels.txt", "w") as fn:
            for g in graphs:
                fn.writelines(f"{int(v)}\n" for v in g.node_labels)


def graph_to_record(g: Graph) -> dict:
    a = g.adjacency
    if g.directed:
        ii, jj = np.nonzero(a)
    else:
        ii, jj = np.nonzero(np.triu(a))
    rec = {
        "n": g.node_count,
        "edges": [[int(i), int(j)] for i, j in zip(ii, jj)],
        "features": g.features.tolist(),
        "label": int(g.label),
    }
    if g.directed:
        rec["directed"] = True
    return rec


def record_to_graph(rec: dict) -> Graph:
    n = int(rec["n"])
    directed = bool(rec.get("directed", False))
    a = np.zeros((n, n), dtype=np.int8)
    for i, j in rec["edges"]:
        if not (0 <= i < n and 0 <= j < n):
            raise FormatError(f"edge [{i}, {j}] out of range for n={n}")
        a[i, j] = 1
        if not directed:
            a[j, i] = 1
    feats = np.asarray(rec["features"], dtype=np.float64).reshape(n, -1)
    return Graph(features=feats, adjacency=a, label=int(rec["label"]), directed=directed)


def write_jsonl(graphs: Iterable[Graph], path, extras: Sequence[dict] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k, g in enumerate(graphs):
            rec = graph_to_record(g)
            if extras is not None:
                rec.update(extras[k])
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> tuple[list[Graph], list[dict]]:
    """Returns graphs and the full raw records (for extra fields)."""
    graphs, records = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                graphs.append(record_to_graph(rec))
            except (KeyError, ValueError, FormatError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            records.append(rec)
    return graphs, records


def default_data_root() -> Path:
    return Path(os.environ.get("GFKD_DATA_ROOT", "data"))
