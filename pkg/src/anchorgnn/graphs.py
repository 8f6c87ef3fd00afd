"""Graph containers, synthetic benchmarks with controlled shifts, and dataset I/O.

Motif benchmark: each graph is a base structure (path, cycle, tree, ladder)
with one motif attached; the label is the motif's index in the config. The
last feature column is a spurious channel holding a class index that agrees
with the label at a configurable rate.

Node benchmark: a stochastic block model whose blocks are the classes, with
class-conditional Gaussian features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "id_val", "id_test", "ood_test")
SHIFT_KINDS = ("none", "size", "covariate", "concept")
TASKS = ("graph_classification", "node_classification")
BASE_STRUCTURES = ("path", "cycle", "tree", "ladder")
MOTIFS = ("house", "triangle", "clique4", "star")
MOTIF_SIZE = {"house": 5, "triangle": 3, "clique4": 4, "star": 4}


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Graph:
    x: np.ndarray
    a: np.ndarray
    graph_label: int | None = None
    node_labels: np.ndarray | None = None
    graph_id: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.x.ndim != 2:
            raise DatasetError(f"node features must be N x d, got shape {self.x.shape}")
        n = self.x.shape[0]
        if self.a.shape != (n, n):
            raise DatasetError(f"adjacency shape {self.a.shape} does not match {n} nodes")
        if (self.graph_label is None) == (self.node_labels is None):
            raise DatasetError("a graph carries exactly one of graph_label / node_labels")
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
            if self.node_labels.shape != (n,):
                raise DatasetError(f"node_labels must have length {n}")

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.node_labels is None) != (other.node_labels is None):
            return False
        return (
            self.graph_id == other.graph_id
            and self.graph_label == other.graph_label
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.a, other.a)
            and (self.node_labels is None or np.array_equal(self.node_labels, other.node_labels))
        )


@dataclass(eq=False)
class DatasetSplits:
    train: list[Graph]
    id_val: list[Graph]
    id_test: list[Graph]
    ood_test: list[Graph]
    shift_kind: str
    num_classes: int
    task: str
    # node task only: split role -> node indices into the single shared graph
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.shift_kind not in SHIFT_KINDS:
            raise DatasetError(f"unknown shift kind {self.shift_kind!r}")
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")
        dims = {g.feature_dim for g in self.all_graphs()}
        if len(dims) > 1:
            raise DatasetError(f"graphs disagree on feature dimension: {sorted(dims)}")
        self.masks = {k: np.asarray(v, dtype=np.int64) for k, v in self.masks.items()}

    def split(self, name: str) -> list[Graph]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all_graphs(self) -> list[Graph]:
        return [g for s in SPLITS for g in getattr(self, s)]

    @property
    def feature_dim(self) -> int:
        return self.all_graphs()[0].feature_dim

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSplits):
            return NotImplemented
        if (self.shift_kind, self.num_classes, self.task) != (other.shift_kind, other.num_classes, other.task):
            return False
        if self.masks.keys() != other.masks.keys():
            return False
        if any(not np.array_equal(self.masks[k], other.masks[k]) for k in self.masks):
            return False
        return all(getattr(self, s) == getattr(other, s) for s in SPLITS)


@dataclass
class GeneratorConfig:
    task: str = "graph_classification"
    shift: str = "size"
    num_graphs: int = 600
    base_structures: list[str] = field(default_factory=lambda: list(BASE_STRUCTURES))
    motifs: list[str] = field(default_factory=lambda: ["house", "triangle", "clique4"])
    size_range: tuple[int, int] = (8, 40)
    feature_dim: int = 4
    spurious_feature_strength: float = 0.0
    ood_spurious_strength: float = 0.0
    seed: int = 0
    # node task
    num_nodes: int = 400
    num_blocks: int = 2
    p_in: float = 0.05
    p_out: float = 0.01
    class_sep: float = 1.0
    covariate_shift: float = 3.0
    # size shift quantiles
    train_q: float = 0.5
    test_q: float = 0.9

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DatasetError(f"task: unknown {self.task!r}")
        if self.shift not in SHIFT_KINDS:
            raise DatasetError(f"shift: unknown {self.shift!r}")
        for s in (self.spurious_feature_strength, self.ood_spurious_strength):
            if not 0.0 <= s <= 1.0:
                raise DatasetError(f"spurious_feature_strength / ood_spurious_strength: must lie in [0, 1], got {s}")
        if self.task == "node_classification":
            if self.feature_dim < 2:
                raise DatasetError("feature_dim: must be >= 2 for the node benchmark")
            if self.num_blocks < 2:
                raise DatasetError("num_blocks: must be >= 2")
            if self.shift == "size":
                raise DatasetError("shift: size shift is defined for graph classification only")
            return
        unknown = [m for m in self.motifs if m not in MOTIF_SIZE]
        if unknown:
            raise DatasetError(f"motifs: unknown {unknown}")
        if len(set(self.motifs)) < 2:
            raise DatasetError("motifs: need at least two distinct motifs to form a classification task")
        bad = [b for b in self.base_structures if b not in BASE_STRUCTURES]
        if bad or not self.base_structures:
            raise DatasetError(f"base_structures: invalid {bad or '[]'}")
        lo, hi = self.size_range
        need = max(MOTIF_SIZE[m] for m in self.motifs) + 2
        if lo < need or hi < lo:
            raise DatasetError(f"size_range: min_nodes must be >= {need} and <= max_nodes, got {self.size_range}")
        if self.feature_dim < 2:
            raise DatasetError("feature_dim: must be >= 2 (one informative and one spurious channel)")
        if self.shift == "covariate" and len(set(self.base_structures)) < 2:
            raise DatasetError("base_structures: covariate shift holds out one base structure; training would be empty")


# -- structure builders ------------------------------------------------------

def _edges_base(kind: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if kind == "path":
        return [(i, i + 1) for i in range(n - 1)]
    if kind == "cycle":
        return [(i, (i + 1) % n) for i in range(n)] if n >= 3 else [(0, 1)]
    if kind == "tree":
        # random recursive tree
        return [(int(rng.integers(0, i)), i) for i in range(1, n)]
    if kind == "ladder":
        half = n // 2
        edges = [(i, i + 1) for i in range(half - 1)]
        edges += [(half + i, half + i + 1) for i in range(half - 1)]
        edges += [(i, half + i) for i in range(half)]
        if n % 2:
            edges.append((n - 1, n - 2))
        return edges
    raise DatasetError(f"unknown base structure {kind!r}")


def _edges_motif(kind: str) -> list[tuple[int, int]]:
    if kind == "house":
        return [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)]
    if kind == "triangle":
        return [(0, 1), (1, 2), (2, 0)]
    if kind == "clique4":
        return [(i, j) for i in range(4) for j in range(i + 1, 4)]
    if kind == "star":
        return [(0, 1), (0, 2), (0, 3)]
    raise DatasetError(f"unknown motif {kind!r}")


def _adjacency(n: int, edges) -> np.ndarray:
    a = np.zeros((n, n))
    for i, j in edges:
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return a


def _spurious_class(label: int, q: int, strength: float, rng: np.random.Generator) -> int:
    if rng.random() < strength:
        return label
    others = [c for c in range(q) if c != label]
    return int(others[int(rng.integers(0, len(others)))])


def _motif_graph(cfg: GeneratorConfig, label: int, base: str, n_total: int, strength: float,
                 gid: str, rng: np.random.Generator) -> Graph:
    motif = cfg.motifs[label]
    m = MOTIF_SIZE[motif]
    n_base = n_total - m
    edges = _edges_base(base, n_base, rng)
    edges += [(n_base + i, n_base + j) for i, j in _edges_motif(motif)]
    edges.append((int(rng.integers(0, n_base)), n_base))
    a = _adjacency(n_total, edges)
    q = len(cfg.motifs)
    d = cfg.feature_dim
    x = np.empty((n_total, d))
    x[:, 0] = 1.0
    if d > 2:
        x[:, 1:d - 1] = rng.normal(0.0, 0.1, size=(n_total, d - 2))
    x[:, d - 1] = float(_spurious_class(label, q, strength, rng))
    return Graph(x=x, a=a, graph_label=label, graph_id=gid)


def _partition(items: list, fracs, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    out, start = [], 0
    for k, f in enumerate(fracs):
        stop = len(items) if k == len(fracs) - 1 else start + int(round(f * len(items)))
        out.append([items[i] for i in order[start:stop]])
        start = stop
    return out


def gen_motif_dataset(cfg: GeneratorConfig) -> DatasetSplits:
    """Generate the motif graph-classification benchmark with the configured shift."""
    cfg.validate()
    if cfg.task != "graph_classification":
        raise DatasetError("gen_motif_dataset builds graph classification data")
    rng = np.random.default_rng(cfg.seed)
    q = len(cfg.motifs)
    lo, hi = cfg.size_range
    graphs: list[tuple[Graph, str, bool]] = []
    bases = list(cfg.base_structures)
    held_out = bases[-1] if cfg.shift == "covariate" else None
    n_ood_concept = cfg.num_graphs // 4 if cfg.shift == "concept" else 0
    for i in range(cfg.num_graphs):
        label = i % q
        base = bases[int(rng.integers(0, len(bases)))]
        n_total = int(rng.integers(lo, hi + 1))
        is_ood = i >= cfg.num_graphs - n_ood_concept
        strength = cfg.ood_spurious_strength if is_ood else cfg.spurious_feature_strength
        g = _motif_graph(cfg, label, base, n_total, strength, f"g{i}", rng)
        graphs.append((g, base, is_ood))

    if cfg.shift == "size":
        return make_size_shift_splits([g for g, _, _ in graphs], cfg.train_q, cfg.test_q,
                                      seed=cfg.seed, num_classes=q)
    if cfg.shift == "covariate":
        ood = [g for g, b, _ in graphs if b == held_out]
        rest = [g for g, b, _ in graphs if b != held_out]
        train, val, test = _partition(rest, (0.6, 0.2, 0.2), rng)
    elif cfg.shift == "concept":
        ood = [g for g, _, o in graphs if o]
        rest = [g for g, _, o in graphs if not o]
        train, val, test = _partition(rest, (0.6, 0.2, 0.2), rng)
    else:
        train, val, test, ood = _partition([g for g, _, _ in graphs], (0.6, 0.15, 0.15, 0.1), rng)
    if not train or not ood:
        raise DatasetError("generated split leaves train or ood_test empty; increase num_graphs")
    return DatasetSplits(train, val, test, ood, cfg.shift, q, "graph_classification")


def nearest_rank(sorted_values, p: float):
    """Nearest-rank p-quantile of an ascending sequence."""
    n = len(sorted_values)
    k = max(1, math.ceil(p * n))
    return sorted_values[k - 1]


def make_size_shift_splits(graphs: list[Graph], train_q: float = 0.5, test_q: float = 0.9,
                           seed: int = 0, num_classes: int | None = None) -> DatasetSplits:
    """Train on small graphs, test out-of-distribution on the largest ones.

    Graphs between the two thresholds are halved into id_val / id_test by a
    seeded shuffle.
    """
    if len(graphs) < 10:
        raise DatasetError(f"size-shift splits need at least 10 graphs, got {len(graphs)}")
    if not 0.0 < train_q < test_q < 1.0:
        raise DatasetError(f"need 0 < train_q < test_q < 1, got train_q={train_q}, test_q={test_q}")
    sizes = sorted(g.num_nodes for g in graphs)
    t_train = nearest_rank(sizes, train_q)
    t_test = nearest_rank(sizes, test_q)
    if t_train >= t_test:
        raise DatasetError(f"size thresholds coincide ({t_train} >= {t_test}); ood_test would overlap train")
    train = [g for g in graphs if g.num_nodes <= t_train]
    ood = [g for g in graphs if g.num_nodes >= t_test]
    middle = [g for g in graphs if t_train < g.num_nodes < t_test]
    if not train or not ood:
        raise DatasetError("size-shift split leaves train or ood_test empty")
    order = np.random.default_rng(seed).permutation(len(middle))
    half = len(middle) // 2
    val = [middle[i] for i in order[:half]]
    test = [middle[i] for i in order[half:]]
    if num_classes is None:
        num_classes = 1 + max(g.graph_label for g in graphs)
    return DatasetSplits(train, val, test, ood, "size", num_classes, "graph_classification")


def gen_node_dataset(cfg: GeneratorConfig) -> DatasetSplits:
    """Stochastic block model: one block per class, Gaussian features per class.

    Class ``c`` has mean ``class_sep * (2c - (q - 1))`` on feature 0 and unit
    noise elsewhere. Under covariate shift the ood nodes' informative
    features are shifted by ``covariate_shift`` standard deviations; under
    concept shift the last (spurious) channel agrees with the label at a
    different rate on ood nodes.
    """
    cfg.validate()
    if cfg.task != "node_classification":
        raise DatasetError("gen_node_dataset builds node classification data")
    rng = np.random.default_rng(cfg.seed)
    q, n, d = cfg.num_blocks, cfg.num_nodes, cfg.feature_dim
    labels = np.arange(n) % q
    same = labels[:, None] == labels[None, :]
    probs = np.where(same, cfg.p_in, cfg.p_out)
    upper = np.triu(rng.random((n, n)) < probs, k=1)
    a = (upper | upper.T).astype(np.float64)

    roles = np.empty(n, dtype=object)
    perm = rng.permutation(n)
    cuts = [int(round(f * n)) for f in (0.45, 0.6, 0.75)]
    for name, idx in zip(SPLITS, np.split(perm, cuts)):
        roles[idx] = name
    is_ood = roles == "ood_test"

    x = rng.normal(0.0, 1.0, size=(n, d))
    x[:, 0] += cfg.class_sep * (2 * labels - (q - 1))
    if cfg.shift == "covariate":
        x[is_ood, : d - 1] += cfg.covariate_shift
    strengths = np.where(is_ood & (cfg.shift == "concept"), cfg.ood_spurious_strength,
                         cfg.spurious_feature_strength)
    x[:, d - 1] = [_spurious_class(int(labels[i]), q, float(strengths[i]), rng) for i in range(n)]

    g = Graph(x=x, a=a, node_labels=labels, graph_id="sbm")
    masks = {s: np.sort(np.flatnonzero(roles == s)) for s in SPLITS}
    return DatasetSplits([g], [g], [g], [g], cfg.shift, q, "node_classification", masks=masks)


def generate(cfg: GeneratorConfig) -> DatasetSplits:
    if cfg.task == "node_classification":
        return gen_node_dataset(cfg)
    return gen_motif_dataset(cfg)


# -- serialization -----------------------------------------------------------
#
# Line 1 is a header object {"format", "v", "task", "shift_kind", "num_classes"}.
# Every following line is one graph:
#   {"split": str, "id": str, "x": [[...]], "a": [[...]], "y": int | [int], "mask_role": [int]?}
# "y" is an int for graph tasks and a per-node list for node tasks.
# "mask_role" lists the node indices of that split (node tasks only).

FORMAT_TAG = "anchorgnn-dataset"


def _graph_line(split: str, g: Graph, mask=None) -> str:
    obj = {
        "split": split,
        "id": g.graph_id,
        "x": g.x.tolist(),
        "a": g.a.tolist(),
        "y": g.graph_label if g.node_labels is None else g.node_labels.tolist(),
    }
    if mask is not None:
        obj["mask_role"] = [int(i) for i in mask]
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(splits: DatasetSplits, path) -> None:
    header = {"format": FORMAT_TAG, "v": 1, "task": splits.task,
              "shift_kind": splits.shift_kind, "num_classes": splits.num_classes}
    lines = [json.dumps(header, separators=(",", ":"))]
    for s in SPLITS:
        for g in splits.split(s):
            lines.append(_graph_line(s, g, splits.masks.get(s) if splits.masks else None))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> DatasetSplits:
    text = Path(path).read_text(encoding="utf-8")
    raw = [ln for ln in text.splitlines()]
    if not any(ln.strip() for ln in raw):
        raise DatasetError("no graphs")
    parsed = []
    for lineno, ln in enumerate(raw, start=1):
        if not ln.strip():
            continue
        try:
            parsed.append((lineno, json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    header_line, header = parsed[0]
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise DatasetError(f"line {header_line}: missing dataset header")
    if len(parsed) == 1:
        raise DatasetError("no graphs")
    task = header["task"]
    by_split: dict[str, list[Graph]] = {s: [] for s in SPLITS}
    masks: dict[str, np.ndarray] = {}
    shared: dict[str, Graph] = {}
    dim = None
    for lineno, obj in parsed[1:]:
        try:
            split = obj["split"]
            if split not in SPLITS:
                raise DatasetError(f"line {lineno}: unknown split {split!r}")
            x = np.array(obj["x"], dtype=np.float64)
            if x.ndim != 2:
                raise DatasetError(f"line {lineno}: node features must be a nested N x d list")
            a = np.array(obj["a"], dtype=np.float64)
            if dim is None:
                dim = x.shape[1]
            elif x.shape[1] != dim:
                raise DatasetError(f"line {lineno}: feature dimension {x.shape[1]} differs from {dim}")
            y = obj["y"]
            gid = str(obj["id"])
            if task == "node_classification":
                g = shared.get(gid)
                if g is None:
                    g = Graph(x=x, a=a, node_labels=np.array(y, dtype=np.int64), graph_id=gid)
                    shared[gid] = g
                if "mask_role" in obj:
                    masks[split] = np.array(obj["mask_role"], dtype=np.int64)
            else:
                g = Graph(x=x, a=a, graph_label=int(y), graph_id=gid)
        except DatasetError as exc:
            if str(exc).startswith("line "):
                raise
            raise DatasetError(f"line {lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DatasetError(f"line {lineno}: invalid graph record ({exc})") from None
        by_split[split].append(g)
    return DatasetSplits(by_split["train"], by_split["id_val"], by_split["id_test"], by_split["ood_test"],
                         header["shift_kind"], int(header["num_classes"]), task, masks=masks)
