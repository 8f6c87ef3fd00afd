"""GCN / GIN message passing, mean readout, MLP head, and anchored forward passes.

Graphs are batched block-diagonally: node features are stacked into one
M x d matrix, adjacency becomes a sparse block-diagonal operator and mean
readout is a sparse B x M pooling operator. Per-graph results are identical
to running each graph alone.

Anchored forward passes take an ``anchors`` argument that is either a fixed
array or a callable mapping the (detached) representation being anchored to
its anchor matrix. The anchor never carries gradient.

Checkpoint layout (one directory per model)::

    manifest.json      {"format": "anchorgnn-checkpoint", "v": 1, "spec": {...},
                        "tensors": {name: {"shape": [r, c], "file": "<name>.f64"}},
                        "anchor_source": {...} | null, "extra": {...}}
    <name>.f64         raw little-endian float64, row-major

Tensor names: ``mp{i}.w`` / ``mp{i}.b`` for GCN layer i (1-based);
``mp{i}.w1``, ``mp{i}.b1``, ``mp{i}.w2``, ``mp{i}.b2``, ``mp{i}.eps`` for GIN
layer i; ``head{j}.w`` / ``head{j}.b`` for head layer j (1-based).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Graph

VARIANTS = ("none", "node_feature", "hidden_layer", "readout")

Params = dict  # name -> Tensor, insertion-ordered
AnchorArg = Union[np.ndarray, Callable[[np.ndarray], np.ndarray], None]


class ModelError(ValueError):
    pass


@dataclass
class AnchoringMode:
    variant: str = "none"
    layer: int | None = None  # r, for hidden_layer
    num_inference_anchors: int = 10
    pretrained_frozen_backbone: bool = False
    # node_feature concatenation: "original" -> [X - C || X], "anchor" -> [X - C || C]
    nfa_concat: str = "original"

    def validate(self, num_mp_layers: int, task: str) -> None:
        if self.variant not in VARIANTS:
            raise ModelError(f"anchoring.variant: unknown {self.variant!r}")
        if self.num_inference_anchors < 1:
            raise ModelError("anchoring.num_inference_anchors must be >= 1")
        if self.nfa_concat not in ("original", "anchor"):
            raise ModelError(f"anchoring.nfa_concat: unknown {self.nfa_concat!r}")
        if self.variant == "hidden_layer":
            if self.layer is None or not 2 <= self.layer <= num_mp_layers:
                raise ModelError(f"hidden-layer anchoring needs 2 <= r <= {num_mp_layers}, got r={self.layer}")
        if self.variant == "readout" and task != "graph":
            raise ModelError("readout anchoring applies to graph classification only")
        if self.pretrained_frozen_backbone and self.variant != "readout":
            raise ModelError("a frozen pretrained backbone is only supported with readout anchoring")


@dataclass
class ModelSpec:
    input_dim: int
    num_classes: int
    backbone: str = "GIN"
    num_mp_layers: int = 3
    hidden_dim: int = 32
    mlp_head_layers: int = 2
    task: str = "graph"
    anchoring: AnchoringMode = field(default_factory=AnchoringMode)

    def __post_init__(self):
        if isinstance(self.anchoring, dict):
            self.anchoring = AnchoringMode(**self.anchoring)

    def validate(self) -> None:
        if self.backbone not in ("GCN", "GIN"):
            raise ModelError(f"backbone: unknown {self.backbone!r}")
        if self.num_mp_layers < 1 or self.hidden_dim < 1 or self.mlp_head_layers < 1:
            raise ModelError("num_mp_layers, hidden_dim and mlp_head_layers must be >= 1")
        if self.task not in ("graph", "node"):
            raise ModelError(f"task: unknown {self.task!r}")
        if self.num_classes < 2 or self.input_dim < 1:
            raise ModelError("num_classes must be >= 2 and input_dim >= 1")
        self.anchoring.validate(self.num_mp_layers, self.task)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def without_anchoring(self) -> "ModelSpec":
        return ModelSpec(**{**self.to_dict(), "anchoring": {"variant": "none"}})

    def layer_input_dim(self, i: int) -> int:
        """Input width of message-passing layer ``i`` (1-based), doubled if it consumes anchors."""
        base = self.input_dim if i == 1 else self.hidden_dim
        v = self.anchoring.variant
        if (v == "node_feature" and i == 1) or (v == "hidden_layer" and i == self.anchoring.layer):
            return 2 * base
        return base

    def head_input_dim(self) -> int:
        return 2 * self.hidden_dim if self.anchoring.variant == "readout" else self.hidden_dim


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    adj: sp.csr_matrix
    pool: sp.csr_matrix  # B x M, row b averages graph b's nodes
    sizes: np.ndarray
    graph_labels: np.ndarray | None
    node_labels: np.ndarray | None
    _gcn: sp.csr_matrix | None = None

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    def gcn_operator(self) -> sp.csr_matrix:
        if self._gcn is None:
            self._gcn = gcn_normalize(self.adj)
        return self._gcn


def gcn_normalize(adj) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with exactly one self-loop per node."""
    a = sp.csr_matrix(adj, dtype=np.float64)
    a = a - sp.diags(a.diagonal()) + sp.identity(a.shape[0], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = sp.diags(1.0 / np.sqrt(deg))
    return sp.csr_matrix(inv @ a @ inv)


def make_batch(graphs: list[Graph]) -> Batch:
    if not graphs:
        raise ModelError("cannot batch an empty graph list")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    x = np.concatenate([g.x for g in graphs], axis=0)
    adj = sp.block_diag([sp.csr_matrix(g.a) for g in graphs], format="csr")
    rows = np.repeat(np.arange(len(graphs)), sizes)
    vals = np.repeat(1.0 / sizes, sizes)
    pool = sp.csr_matrix((vals, (rows, np.arange(x.shape[0]))), shape=(len(graphs), x.shape[0]))
    if graphs[0].node_labels is not None:
        return Batch(x, adj, pool, sizes, None, np.concatenate([g.node_labels for g in graphs]))
    return Batch(x, adj, pool, sizes, np.array([g.graph_label for g in graphs], dtype=np.int64), None)


# -- parameters --------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _linear(rng, name: str, fan_in: int, fan_out: int, suffix: str = "") -> dict[str, Tensor]:
    return {
        f"{name}.w{suffix}": Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True),
        f"{name}.b{suffix}": Tensor(np.zeros((1, fan_out)), requires_grad=True),
    }


def init_backbone(spec: ModelSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    h = spec.hidden_dim
    for i in range(1, spec.num_mp_layers + 1):
        d_in = spec.layer_input_dim(i)
        if spec.backbone == "GCN":
            params.update(_linear(rng, f"mp{i}", d_in, h))
        else:
            params.update(_linear(rng, f"mp{i}", d_in, h, "1"))
            params.update(_linear(rng, f"mp{i}", h, h, "2"))
            params[f"mp{i}.eps"] = Tensor(np.zeros((1, 1)), requires_grad=True)
    return params


def init_head(spec: ModelSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    widths = [spec.head_input_dim()] + [spec.hidden_dim] * (spec.mlp_head_layers - 1) + [spec.num_classes]
    for j in range(1, spec.mlp_head_layers + 1):
        params.update(_linear(rng, f"head{j}", widths[j - 1], widths[j]))
    return params


def init_params(spec: ModelSpec, seed: int) -> Params:
    spec.validate()
    rng = np.random.default_rng(seed)
    params = init_backbone(spec, rng)
    params.update(init_head(spec, rng))
    for name, t in params.items():
        t.name = name
    return params


def unanchored(spec: ModelSpec) -> ModelSpec:
    return spec.without_anchoring()


def backbone_names(params: Params) -> list[str]:
    return [n for n in params if n.startswith("mp")]


def head_names(params: Params) -> list[str]:
    return [n for n in params if n.startswith("head")]


def backbone_digest(params: Params) -> str:
    h = hashlib.sha256()
    for n in sorted(backbone_names(params)):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())
    return h.hexdigest()


def copy_params(params: Params) -> Params:
    out = {}
    for n, t in params.items():
        c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        c.name = n
        out[n] = c
    return out


# -- layers ------------------------------------------------------------------

def _check_in(x: Tensor, w: Tensor, what: str) -> None:
    if x.cols != w.rows:
        raise ad.ShapeError(f"{what}: input width {x.cols} does not match weight {w.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def gcn_layer(x: Tensor, op, w: Tensor, b: Tensor) -> Tensor:
    """ReLU(op @ x @ w + b) where ``op`` is the normalized adjacency (see :func:`gcn_normalize`)."""
    _check_in(x, w, "gcn_layer")
    return ad.relu(ad.add(ad.propagate(op, ad.matmul(x, w)), b))


def gin_layer(x: Tensor, adj, eps: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """MLP((1 + eps) x + adj @ x), MLP = Linear-ReLU-Linear-ReLU."""
    _check_in(x, w1, "gin_layer")
    agg = ad.add(ad.add(x, ad.mul_scalar(x, eps)), ad.propagate(adj, x))
    return ad.relu(linear(ad.relu(linear(agg, w1, b1)), w2, b2))


def readout_mean(x: Tensor, pool=None) -> Tensor:
    """Column means of node features; with ``pool`` (B x N) one row per graph."""
    if pool is None:
        return ad.row_mean(x)
    return ad.propagate(pool, x)


def mp_layer(spec: ModelSpec, params: Params, i: int, h: Tensor, batch: Batch) -> Tensor:
    if spec.backbone == "GCN":
        return gcn_layer(h, batch.gcn_operator(), params[f"mp{i}.w"], params[f"mp{i}.b"])
    return gin_layer(h, batch.adj, params[f"mp{i}.eps"], params[f"mp{i}.w1"], params[f"mp{i}.b1"],
                     params[f"mp{i}.w2"], params[f"mp{i}.b2"])


def head(spec: ModelSpec, params: Params, z: Tensor) -> Tensor:
    for j in range(1, spec.mlp_head_layers + 1):
        z = linear(z, params[f"head{j}.w"], params[f"head{j}.b"])
        if j < spec.mlp_head_layers:
            z = ad.relu(z)
    return z


def _resolve(anchors: AnchorArg, rep: np.ndarray, what: str) -> Tensor:
    if anchors is None:
        raise ModelError(f"{what} anchoring needs anchors")
    c = anchors(rep) if callable(anchors) else np.asarray(anchors, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, rep.shape)
    if c.shape != rep.shape:
        raise ModelError(f"{what} anchor shape {c.shape} incompatible with representation {rep.shape}")
    return Tensor(np.array(c))


def anchor_concat(x: Tensor, c: Tensor, second: Tensor | None = None) -> Tensor:
    """[x - c || second], with ``second`` defaulting to the anchor itself."""
    return ad.concat_cols(ad.sub(x, c), c if second is None else second)


def embed(spec: ModelSpec, params: Params, batch: Batch, anchors: AnchorArg = None) -> Tensor:
    """Node representations after the last message-passing layer."""
    v = spec.anchoring.variant
    h = Tensor(batch.x)
    if v == "node_feature":
        c = _resolve(anchors, batch.x, "node-feature")
        h = anchor_concat(h, c, h if spec.anchoring.nfa_concat == "original" else None)
    for i in range(1, spec.num_mp_layers + 1):
        if v == "hidden_layer" and i == spec.anchoring.layer:
            c = _resolve(anchors, h.data, "hidden-layer")
            h = anchor_concat(h, c)
        h = mp_layer(spec, params, i, h, batch)
    return h


def pooled(spec: ModelSpec, params: Params, batch: Batch, anchors: AnchorArg = None) -> Tensor:
    return readout_mean(embed(spec, params, batch, anchors), batch.pool)


def forward(spec: ModelSpec, params: Params, batch: Batch, anchors: AnchorArg = None) -> Tensor:
    """Logits: B x q for graph tasks, M x q for node tasks."""
    v = spec.anchoring.variant
    if v == "none" and anchors is not None:
        raise ModelError("anchors given to an unanchored model")
    if spec.task == "node":
        return head(spec, params, embed(spec, params, batch, anchors))
    if v == "readout":
        g = readout_mean(embed(spec, params, batch), batch.pool)
        return head_from_pooled(spec, params, g, anchors)
    return head(spec, params, pooled(spec, params, batch, anchors))


def head_from_pooled(spec: ModelSpec, params: Params, g: Tensor, anchors: AnchorArg = None) -> Tensor:
    if spec.anchoring.variant == "readout":
        c = _resolve(anchors, g.data, "readout")
        g = anchor_concat(g, c)
    return head(spec, params, g)


# -- checkpoints -------------------------------------------------------------

CKPT_TAG = "anchorgnn-checkpoint"


def save_checkpoint(path, spec: ModelSpec, params: Params, anchor_source: dict | None = None,
                    extra: dict | None = None) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in params.items():
        fname = f"{name}.f64"
        (d / fname).write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        tensors[name] = {"shape": list(t.shape), "file": fname}
    manifest = {"format": CKPT_TAG, "v": 1, "spec": spec.to_dict(), "tensors": tensors, "order": list(params),
                "anchor_source": anchor_source, "extra": extra or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelSpec, Params, dict | None, dict]:
    d = Path(path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("format") != CKPT_TAG:
        raise ModelError(f"{mf} is not a checkpoint manifest")
    spec = ModelSpec.from_dict(manifest["spec"])
    params: Params = {}
    for name in manifest.get("order", list(manifest["tensors"])):
        meta = manifest["tensors"][name]
        arr = np.frombuffer((d / meta["file"]).read_bytes(), dtype="<f8").astype(np.float64)
        t = Tensor(arr.reshape(meta["shape"]), requires_grad=True)
        t.name = name
        params[name] = t
    return spec, params, manifest.get("anchor_source"), manifest.get("extra", {})
