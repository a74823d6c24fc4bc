"""Dataset bundles: disk ingestion, split generation, and synthetic
stochastic block model graphs for desk-scale experiments.

On-disk layout of a dataset directory:

    edges.tsv      one `src<TAB>dst` pair per line, `#` comments ignored
    features.csv   one comma-separated row of reals per node
    labels.tsv     one integer class id per line
    masks.tsv      optional; three 0/1 columns per line: train, val, test
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InputError
from .graph import Graph, build_graph, read_edge_list, write_edge_list

STANDARD_SPLIT = "standard"          # 20 per class train, 500 val, 1000 test
PROPORTIONAL_SPLIT = "proportional"  # 60/20/20 within each class


@dataclass(frozen=True)
class Labels:
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        y = self.y
        if y.min() < 0 or y.max() >= self.num_classes:
            raise InputError("label out of range")
        present = np.unique(y)
        if len(present) != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise InputError(f"classes {missing} never appear")


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if (self.train & self.val).any() or (self.train & self.test).any() \
                or (self.val & self.test).any():
            raise InputError("split masks overlap")
        if not self.train.any():
            raise InputError("training mask is empty")

    @property
    def m(self) -> int:
        """Training set size."""
        return int(self.train.sum())


@dataclass
class DatasetBundle:
    graph: Graph
    features: np.ndarray  # float32, n x d
    labels: Labels
    masks: SplitMasks
    name: str = "dataset"
    provenance: str = ""

    def __post_init__(self):
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n \
                or self.features.shape[1] < 1:
            raise InputError(f"features must be ({n}, d>=1), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise InputError("non-finite feature entries")
        if len(self.labels.y) != n:
            raise InputError("label count != node count")
        for mask in (self.masks.train, self.masks.val, self.masks.test):
            if mask.shape != (n,):
                raise InputError("mask length != node count")


def standard_split(labels: Labels, seed: int, per_class: int = 20,
                   val_size: int = 500, test_size: int = 1000) -> SplitMasks:
    """Fixed-size split: `per_class` training nodes per class, then val and
    test drawn from the shuffled remainder."""
    rng = np.random.default_rng(seed)
    n = len(labels.y)
    train = np.zeros(n, dtype=bool)
    for cls in range(labels.num_classes):
        members = np.nonzero(labels.y == cls)[0]
        if len(members) < per_class:
            raise ConfigError(
                f"class {cls} has {len(members)} nodes, fewer than "
                f"per_class={per_class}; use the proportional split")
        train[rng.choice(members, size=per_class, replace=False)] = True
    rest = np.nonzero(~train)[0]
    if len(rest) < val_size + test_size:
        raise ConfigError(
            f"{len(rest)} nodes left after training selection, need "
            f"{val_size + test_size}; use the proportional split")
    rest = rng.permutation(rest)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:val_size]] = True
    test[rest[val_size:val_size + test_size]] = True
    return SplitMasks(train=train, val=val, test=test)


def proportional_split(labels: Labels, seed: int,
                       fractions=(0.6, 0.2, 0.2)) -> SplitMasks:
    """Random class-wise split into train/val/test fractions."""
    rng = np.random.default_rng(seed)
    n = len(labels.y)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for cls in range(labels.num_classes):
        members = rng.permutation(np.nonzero(labels.y == cls)[0])
        k = len(members)
        cut1 = int(round(fractions[0] * k))
        cut2 = cut1 + int(round(fractions[1] * k))
        train[members[:cut1]] = True
        val[members[cut1:cut2]] = True
        test[members[cut2:]] = True
    return SplitMasks(train=train, val=val, test=test)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise InputError(f"ragged row: {len(parts)} values, expected {width}",
                                 path=path, line=lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise InputError("non-numeric feature value", path=path,
                                 line=lineno) from None
    if not rows:
        raise InputError("empty feature file", path=path)
    return np.asarray(rows, dtype=np.float32)


def _read_labels(path: Path) -> Labels:
    values = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise InputError(f"non-integer label {line!r}", path=path,
                                 line=lineno) from None
    y = np.asarray(values, dtype=np.int64)
    if y.min() < 0:
        raise InputError("negative label", path=path)
    return Labels(y=y, num_classes=int(y.max()) + 1)


def _read_masks(path: Path, n: int) -> SplitMasks:
    cols = np.zeros((n, 3), dtype=bool)
    count = 0
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or any(p not in ("0", "1") for p in parts):
                raise InputError("mask rows must be three 0/1 columns",
                                 path=path, line=lineno)
            if count >= n:
                raise InputError("more mask rows than nodes", path=path, line=lineno)
            cols[count] = [p == "1" for p in parts]
            count += 1
    if count != n:
        raise InputError(f"{count} mask rows for {n} nodes", path=path)
    return SplitMasks(train=cols[:, 0], val=cols[:, 1], test=cols[:, 2])


def load_dataset(directory, split: str = STANDARD_SPLIT, seed: int = 0,
                 name: str | None = None) -> DatasetBundle:
    """Load and validate a dataset directory.

    When masks.tsv is absent a split is generated (seeded): the fixed-size
    protocol for homophilous benchmarks or the proportional 60/20/20
    protocol for heterophilous ones. Generated splits are noted in the
    provenance, they do not reproduce any historical fixed split.
    """
    directory = Path(directory)
    for fname in ("edges.tsv", "features.csv", "labels.tsv"):
        if not (directory / fname).exists():
            raise InputError(f"missing {fname}", path=directory)
    features = _read_features(directory / "features.csv")
    n = features.shape[0]
    labels = _read_labels(directory / "labels.tsv")
    if len(labels.y) != n:
        raise InputError(f"{len(labels.y)} labels for {n} feature rows",
                         path=directory / "labels.tsv")
    graph = build_graph(read_edge_list(directory / "edges.tsv"), n)
    mask_path = directory / "masks.tsv"
    if mask_path.exists():
        masks = _read_masks(mask_path, n)
        provenance = f"loaded from {directory}; masks from masks.tsv"
    else:
        if split == STANDARD_SPLIT:
            masks = standard_split(labels, seed)
        elif split == PROPORTIONAL_SPLIT:
            masks = proportional_split(labels, seed)
        else:
            raise ConfigError(f"unknown split protocol {split!r}")
        provenance = (f"loaded from {directory}; masks generated "
                      f"({split} split, seed {seed})")
    return DatasetBundle(graph=graph, features=features, labels=labels,
                         masks=masks, name=name or directory.name,
                         provenance=provenance)


def save_dataset(bundle: DatasetBundle, directory) -> None:
    """Write a bundle back in the canonical directory layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_edge_list(bundle.graph, directory / "edges.tsv")
    with (directory / "features.csv").open("w") as fh:
        for row in bundle.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with (directory / "labels.tsv").open("w") as fh:
        for v in bundle.labels.y:
            fh.write(f"{int(v)}\n")
    with (directory / "masks.tsv").open("w") as fh:
        for t, v, s in zip(bundle.masks.train, bundle.masks.val, bundle.masks.test):
            fh.write(f"{int(t)}\t{int(v)}\t{int(s)}\n")


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with Gaussian cluster features."""

    n: int
    blocks: int
    p_in: float
    p_out: float
    feature_dim: int = 32
    separation: float = 1.0
    labels_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_in <= 1.0 and 0.0 <= self.p_out <= 1.0):
            raise ConfigError("edge probabilities must lie in [0, 1]")
        if self.blocks < 2 or self.n < 2 * self.blocks:
            raise ConfigError("need at least two blocks and two nodes per block")


def generate_sbm(spec: SbmSpec) -> DatasetBundle:
    """Sample a block-model bundle; labels are block ids, features are the
    block mean plus unit Gaussian noise, splits are seeded per class."""
    rng = np.random.default_rng(spec.seed)
    block = (np.arange(spec.n) * spec.blocks) // spec.n
    prob = np.where(block[:, None] == block[None, :], spec.p_in, spec.p_out)
    draw = rng.random((spec.n, spec.n))
    upper = np.triu(draw < prob, k=1)
    edges = np.argwhere(upper)
    graph = build_graph(edges, spec.n)
    means = spec.separation * rng.standard_normal((spec.blocks, spec.feature_dim))
    features = (means[block] + rng.standard_normal((spec.n, spec.feature_dim)))
    labels = Labels(y=block.astype(np.int64), num_classes=spec.blocks)
    train = np.zeros(spec.n, dtype=bool)
    for cls in range(spec.blocks):
        members = np.nonzero(block == cls)[0]
        train[rng.choice(members, size=min(spec.labels_per_class, len(members) - 2),
                         replace=False)] = True
    rest = rng.permutation(np.nonzero(~train)[0])
    half = len(rest) // 2
    val = np.zeros(spec.n, dtype=bool)
    test = np.zeros(spec.n, dtype=bool)
    val[rest[:half]] = True
    test[rest[half:]] = True
    components = sp.csgraph.connected_components(
        sp.csr_matrix((np.ones(len(graph.col_indices)), graph.col_indices,
                       graph.row_offsets), shape=(spec.n, spec.n)),
        directed=False, return_labels=False)
    note = "" if components == 1 else f"; {components} connected components"
    return DatasetBundle(
        graph=graph, features=features.astype(np.float32), labels=labels,
        masks=SplitMasks(train=train, val=val, test=test),
        name=f"sbm-n{spec.n}-b{spec.blocks}",
        provenance=f"generated {spec}{note}")


def edge_homophily(graph: Graph, labels: Labels) -> float:
    """Fraction of edges whose endpoints share a label."""
    pairs = graph.edge_pairs()
    if len(pairs) == 0:
        return 0.0
    return float(np.mean(labels.y[pairs[:, 0]] == labels.y[pairs[:, 1]]))
