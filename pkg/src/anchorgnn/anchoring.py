"""Anchor distributions, anchored training and K-anchor inference.

Training draws fresh anchors for every batch: per-node Gaussian samples for
node-feature anchoring, a batch-wide row shuffle of the anchored
representation for hidden-layer and readout anchoring. Inference uses a
fixed set of K anchors and aggregates the K member predictions into a mean,
a per-class standard deviation and an uncertainty-modulated prediction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import DatasetSplits, Graph
from .model import (
    Batch,
    ModelError,
    ModelSpec,
    Params,
    backbone_digest,
    backbone_names,
    copy_params,
    forward,
    head_from_pooled,
    unanchored,
    init_head,
    init_params,
    make_batch,
    mp_layer,
    pooled,
)

STD_FLOOR = 1e-6


class AnchorError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass
class AnchorSource:
    """Either a diagonal Gaussian over input features or a frozen set of K representations."""

    kind: str  # "gaussian" | "frozen_set"
    rng_seed: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    num_anchors: int = 10
    # frozen_set: one anchor vector per member, plus provenance
    anchors: np.ndarray | None = None
    mode: str | None = None  # "readout" | "hidden_layer"
    members: list = field(default_factory=list)  # chosen validation graph (or node) indices
    rows: list = field(default_factory=list)  # hidden_layer: broadcast row within each member
    matrices: list = field(default_factory=list)  # hidden_layer: layer r-1 node matrices
    backbone_digest: str | None = None
    _cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "gaussian":
            self.mean = _frozen(self.mean)
            self.std = _frozen(np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR))
        elif self.kind == "frozen_set":
            self.anchors = _frozen(self.anchors)
            self.matrices = [_frozen(m) for m in self.matrices]
            self.num_anchors = self.anchors.shape[0]
        else:
            raise AnchorError(f"unknown anchor source kind {self.kind!r}")

    @property
    def K(self) -> int:
        return self.num_anchors

    def inference_anchors(self) -> np.ndarray:
        """The K anchor vectors used at inference (drawn once for a Gaussian source)."""
        if self.kind == "frozen_set":
            return self.anchors
        if self._cache is None:
            rng = np.random.default_rng(self.rng_seed)
            self._cache = _frozen(rng.normal(self.mean, self.std, size=(self.num_anchors, self.mean.shape[0])))
        return self._cache

    def with_eval(self, num_anchors: int, rng_seed: int) -> "AnchorSource":
        """Copy of a Gaussian source with a fresh inference-anchor cache."""
        if self.kind != "gaussian":
            if num_anchors != self.num_anchors:
                raise AnchorError(f"frozen set holds {self.num_anchors} anchors, {num_anchors} requested")
            return self
        return AnchorSource("gaussian", rng_seed=rng_seed, mean=self.mean, std=self.std, num_anchors=num_anchors)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "rng_seed": int(self.rng_seed), "num_anchors": int(self.num_anchors)}
        if self.kind == "gaussian":
            d.update(mean=self.mean.tolist(), std=self.std.tolist())
        else:
            d.update(anchors=self.anchors.tolist(), mode=self.mode, members=[int(m) for m in self.members],
                     rows=[int(r) for r in self.rows], matrices=[m.tolist() for m in self.matrices],
                     backbone_digest=self.backbone_digest)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AnchorSource":
        d = dict(d)
        if d["kind"] == "gaussian":
            return cls("gaussian", rng_seed=d["rng_seed"], mean=np.array(d["mean"]), std=np.array(d["std"]),
                       num_anchors=d["num_anchors"])
        return cls("frozen_set", rng_seed=d["rng_seed"], anchors=np.array(d["anchors"]), mode=d["mode"],
                   members=d["members"], rows=d["rows"],
                   matrices=[np.array(m) for m in d["matrices"]], backbone_digest=d["backbone_digest"])


# -- anchor construction -----------------------------------------------------

def fit_node_feature_gaussian(train: list[Graph], num_anchors: int = 10, rng_seed: int = 0) -> AnchorSource:
    """Per-dimension mean and sample std over all training node-feature rows."""
    if not train:
        raise AnchorError("cannot fit an anchoring Gaussian to an empty training set")
    return gaussian_from_rows(np.concatenate([g.x for g in train], axis=0), num_anchors, rng_seed)


def gaussian_from_rows(x: np.ndarray, num_anchors: int = 10, rng_seed: int = 0) -> AnchorSource:
    if x.shape[0] < 2:
        raise AnchorError("need at least two training nodes to fit an anchoring Gaussian")
    return AnchorSource("gaussian", rng_seed=rng_seed, mean=x.mean(axis=0), std=x.std(axis=0, ddof=1),
                        num_anchors=num_anchors)


def sample_training_anchors(src: AnchorSource, n: int, rng: np.random.Generator) -> np.ndarray:
    if src.kind != "gaussian":
        raise AnchorError("training anchors are sampled from a Gaussian source")
    if n <= 0:
        raise AnchorError("need at least one node to anchor")
    return rng.normal(src.mean, src.std, size=(n, src.mean.shape[0]))


def broadcast_inference_anchor(src: AnchorSource, k: int, n: int) -> np.ndarray:
    cs = src.inference_anchors()
    if not 0 <= k < cs.shape[0]:
        raise AnchorError(f"anchor index {k} out of range for K={cs.shape[0]}")
    return np.repeat(cs[k][None, :], n, axis=0)


def shuffle_anchor_batch(node_matrix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform random row permutation (Fisher-Yates, swaps drawn from ``rng``)."""
    m = node_matrix.shape[0]
    perm = np.arange(m)
    if m > 1:
        js = rng.integers(0, np.arange(m, 1, -1))
        for i, j in zip(range(m - 1, 0, -1), js):
            perm[i], perm[j] = perm[j], perm[i]
    return node_matrix[perm]


def layer_representation(spec: ModelSpec, params: Params, batch: Batch, upto: int) -> np.ndarray:
    """Unanchored node representations after message-passing layers 1..upto."""
    h = Tensor(batch.x)
    for i in range(1, upto + 1):
        h = mp_layer(spec, params, i, h, batch)
    return h.data


def build_frozen_anchor_set(spec: ModelSpec, params: Params, id_val: list[Graph], K: int,
                            rng: np.random.Generator, previous: AnchorSource | None = None,
                            val_nodes: np.ndarray | None = None) -> AnchorSource:
    """K anchors drawn without replacement from validation graphs (or validation nodes for node tasks).

    Readout anchors are the pooled graph representations; hidden-layer
    anchors are one seeded row of the layer r-1 node matrix, broadcast at
    inference.
    """
    mode = spec.anchoring.variant
    if mode not in ("readout", "hidden_layer"):
        raise AnchorError(f"frozen anchor sets serve readout / hidden_layer anchoring, not {mode!r}")
    digest = backbone_digest(params)
    if spec.anchoring.pretrained_frozen_backbone and previous is not None \
            and previous.backbone_digest != digest:
        raise AnchorError("backbone parameters changed under a frozen pretrained backbone")
    if not id_val:
        raise AnchorError("anchor set needs a nonempty validation split")
    seed = int(rng.integers(0, 2**63 - 1))
    if spec.task == "node":
        if mode != "hidden_layer":
            raise AnchorError("node tasks support hidden-layer frozen anchors only")
        pool = np.arange(id_val[0].num_nodes) if val_nodes is None else np.asarray(val_nodes)
        if K > len(pool):
            raise AnchorError(f"K={K} exceeds {len(pool)} validation nodes")
        chosen = rng.choice(len(pool), size=K, replace=False)
        nodes = pool[chosen]
        rep = layer_representation(spec, params, make_batch(id_val[:1]), spec.anchoring.layer - 1)
        return AnchorSource("frozen_set", rng_seed=seed, anchors=rep[nodes], mode=mode,
                            members=[int(n) for n in nodes], rows=[int(n) for n in nodes],
                            backbone_digest=digest)
    if K > len(id_val):
        raise AnchorError(f"K={K} exceeds {len(id_val)} validation graphs (sampling without replacement)")
    chosen = [int(i) for i in rng.choice(len(id_val), size=K, replace=False)]
    if mode == "readout":
        b = make_batch([id_val[i] for i in chosen])
        base = unanchored(spec)
        g = pooled(base, params, b).data
        return AnchorSource("frozen_set", rng_seed=seed, anchors=g, mode=mode, members=chosen,
                            backbone_digest=digest)
    r = spec.anchoring.layer
    mats, rows, vecs = [], [], []
    for i in chosen:
        rep = layer_representation(spec, params, make_batch([id_val[i]]), r - 1)
        row = int(rng.integers(0, rep.shape[0]))
        mats.append(rep)
        rows.append(row)
        vecs.append(rep[row])
    return AnchorSource("frozen_set", rng_seed=seed, anchors=np.array(vecs), mode=mode, members=chosen,
                        rows=rows, matrices=mats, backbone_digest=digest)


# -- aggregation -------------------------------------------------------------

@dataclass
class EnsemblePrediction:
    mu: np.ndarray
    sigma: np.ndarray
    mu_calib: np.ndarray
    per_anchor_probs: np.ndarray

    @property
    def K(self) -> int:
        return self.per_anchor_probs.shape[0]


def aggregate(per_anchor_probs) -> EnsemblePrediction:
    """Mean, per-class sample std (divisor K-1) and mu * (1 - sigma) renormalized.

    ``per_anchor_probs`` has shape (K, q) or (K, n, q).
    """
    p = np.asarray(per_anchor_probs, dtype=np.float64)
    k = p.shape[0]
    if k < 1:
        raise AnchorError("need at least one anchor")
    mu = p.mean(axis=0)
    if k == 1:
        return EnsemblePrediction(mu, np.zeros_like(mu), mu.copy(), p)
    sigma = p.std(axis=0, ddof=1)
    raw = np.clip(mu * (1.0 - sigma), 0.0, None)
    s = raw.sum(axis=-1, keepdims=True)
    mu_calib = np.where(s > 0, raw / np.where(s > 0, s, 1.0), mu)
    return EnsemblePrediction(mu, sigma, mu_calib, p)


def member_probs(spec: ModelSpec, params: Params, batch: Batch, src: AnchorSource | None) -> np.ndarray:
    """Softmax outputs under each inference anchor: (K, rows, q)."""
    v = spec.anchoring.variant
    if v == "none":
        return ad.softmax(forward(spec, params, batch))[None]
    if src is None:
        raise AnchorError(f"{v} anchoring needs an anchor source at inference")
    if spec.anchoring.pretrained_frozen_backbone and src.backbone_digest != backbone_digest(params):
        raise AnchorError("anchor set was built for a different backbone")
    cs = src.inference_anchors()
    if v == "readout":
        base = unanchored(spec)
        g = pooled(base, params, batch)
        return np.stack([ad.softmax(head_from_pooled(spec, params, g, c)) for c in cs])
    if v == "node_feature" and src.kind != "gaussian":
        raise AnchorError("node-feature anchoring needs a Gaussian anchor source")
    return np.stack([ad.softmax(forward(spec, params, batch, c)) for c in cs])


def infer(spec: ModelSpec, params: Params, graph: Graph, src: AnchorSource | None = None,
          K: int | None = None) -> EnsemblePrediction:
    """K-anchor prediction for one graph (graph task: q-vectors; node task: N x q)."""
    if K is not None and K < 1:
        raise AnchorError("K must be >= 1")
    if src is not None and K is not None and K != src.K:
        src = src.with_eval(K, src.rng_seed)
    pred = infer_many(spec, params, [graph], src)
    if spec.task == "graph":
        return EnsemblePrediction(pred.mu[0], pred.sigma[0], pred.mu_calib[0], pred.per_anchor_probs[:, 0])
    return pred


def infer_many(spec: ModelSpec, params: Params, graphs: list[Graph], src: AnchorSource | None = None,
               chunk: int = 256) -> EnsemblePrediction:
    parts = [member_probs(spec, params, make_batch(graphs[i:i + chunk]), src)
             for i in range(0, len(graphs), chunk)]
    return aggregate(np.concatenate(parts, axis=1))


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None


@dataclass
class TrainResult:
    params: Params
    losses: list[float]  # mean batch loss per epoch
    gaussian: AnchorSource | None = None
    seconds: float = 0.0


def rng_streams(seed: int) -> tuple[np.random.SeedSequence, np.random.Generator, np.random.Generator]:
    """(init seed sequence, batch-order rng, anchor rng) derived from one training seed."""
    init_ss, order_ss, anchor_ss = np.random.SeedSequence(seed).spawn(3)
    return init_ss, np.random.default_rng(order_ss), np.random.default_rng(anchor_ss)


def _check_task(spec: ModelSpec, splits: DatasetSplits) -> None:
    want = "graph_classification" if spec.task == "graph" else "node_classification"
    if splits.task != want:
        raise ModelError(f"model task {spec.task!r} does not match dataset task {splits.task!r}")
    if spec.num_classes != splits.num_classes or spec.input_dim != splits.feature_dim:
        raise ModelError("model input_dim / num_classes disagree with the dataset")


def training_anchors(spec: ModelSpec, gaussian: AnchorSource | None, rng: np.random.Generator):
    v = spec.anchoring.variant
    if v == "none":
        return None
    if v == "node_feature":
        return lambda rep: sample_training_anchors(gaussian, rep.shape[0], rng)
    return lambda rep: shuffle_anchor_batch(rep, rng)


def train(spec: ModelSpec, splits: DatasetSplits, cfg: TrainConfig,
          backbone: Params | None = None) -> TrainResult:
    """Anchored training with Adam and a fresh anchor draw per batch.

    With ``pretrained_frozen_backbone`` the given ``backbone`` parameters are
    kept fixed and only a freshly initialized (double-width) head is trained.
    """
    spec.validate()
    _check_task(spec, splits)
    t0 = time.perf_counter()
    if spec.anchoring.pretrained_frozen_backbone:
        if backbone is None:
            raise ModelError("frozen-backbone training needs pretrained backbone parameters")
        return _train_head(spec, splits, cfg, backbone, t0)
    init_ss, order_rng, anchor_rng = rng_streams(cfg.seed)
    params = init_params(spec, init_ss)
    gaussian = None
    if spec.anchoring.variant == "node_feature":
        k = spec.anchoring.num_inference_anchors
        if spec.task == "node":
            rows = splits.train[0].x[splits.masks["train"]]
            gaussian = gaussian_from_rows(rows, k, cfg.seed)
        else:
            gaussian = fit_node_feature_gaussian(splits.train, k, cfg.seed)
    anchors = training_anchors(spec, gaussian, anchor_rng)
    opt = ad.Adam(lr=cfg.lr)
    losses: list[float] = []
    steps = 0
    for _ in range(cfg.epochs):
        batch_losses = []
        for batch, labels, rows in _batches(spec, splits, cfg.batch_size, order_rng):
            logits = forward(spec, params, batch, anchors)
            if rows is not None:
                logits = ad.take_rows(logits, rows)
            loss = ad.softmax_cross_entropy(logits, labels)
            ad.zero_grads(params.values())
            ad.backward(loss)
            opt.step(params)
            batch_losses.append(loss.item())
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        losses.append(float(np.mean(batch_losses)))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainResult(params, losses, gaussian, time.perf_counter() - t0)


def _batches(spec: ModelSpec, splits: DatasetSplits, batch_size: int, rng: np.random.Generator):
    if spec.task == "node":
        g = splits.train[0]
        idx = splits.masks["train"]
        yield make_batch([g]), g.node_labels[idx], idx
        return
    graphs = splits.train
    order = rng.permutation(len(graphs))
    for s in range(0, len(graphs), batch_size):
        chunk = [graphs[i] for i in order[s:s + batch_size]]
        b = make_batch(chunk)
        yield b, b.graph_labels, None


def _train_head(spec: ModelSpec, splits: DatasetSplits, cfg: TrainConfig, backbone: Params,
                t0: float) -> TrainResult:
    if spec.anchoring.variant != "readout" or spec.task != "graph":
        raise ModelError("frozen-backbone training is defined for readout anchoring on graph tasks")
    init_ss, order_rng, anchor_rng = rng_streams(cfg.seed)
    frozen = copy_params({n: backbone[n] for n in backbone_names(backbone)})
    for t in frozen.values():
        t.requires_grad = False
    head = init_head(spec, np.random.default_rng(init_ss))
    for n, t in head.items():
        t.name = n
    base = unanchored(spec)
    graphs = splits.train
    # the backbone is fixed, so pooled representations are computed once
    g_all = np.concatenate([pooled(base, frozen, make_batch(graphs[i:i + 256])).data
                            for i in range(0, len(graphs), 256)])
    y_all = np.array([g.graph_label for g in graphs], dtype=np.int64)
    opt = ad.Adam(lr=cfg.lr)
    anchors = training_anchors(spec, None, anchor_rng)
    losses: list[float] = []
    steps = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(graphs))
        batch_losses = []
        for s in range(0, len(graphs), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = head_from_pooled(spec, head, Tensor(g_all[idx]), anchors)
            loss = ad.softmax_cross_entropy(logits, y_all[idx])
            ad.zero_grads(head.values())
            ad.backward(loss)
            opt.step(head)
            batch_losses.append(loss.item())
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        losses.append(float(np.mean(batch_losses)))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    params = {**frozen, **head}
    return TrainResult(params, losses, None, time.perf_counter() - t0)

