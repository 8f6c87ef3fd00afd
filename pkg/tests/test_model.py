import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorgnn import autodiff as ad
from anchorgnn.autodiff import Tensor
from anchorgnn.graphs import Graph
from anchorgnn.model import (
    AnchoringMode,
    ModelError,
    ModelSpec,
    anchor_concat,
    backbone_digest,
    embed,
    forward,
    gcn_layer,
    gcn_normalize,
    gin_layer,
    init_params,
    load_checkpoint,
    make_batch,
    readout_mean,
    save_checkpoint,
)

from oracles import gcn_dense, gradcheck


def random_graph(rng, n, d=3, label=0, p=0.4):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    a = (upper | upper.T).astype(float)
    return Graph(x=rng.normal(size=(n, d)), a=a, graph_label=label)


def spec_for(variant="none", backbone="GIN", task="graph", layer=None, **kw):
    return ModelSpec(input_dim=3, num_classes=3, backbone=backbone, num_mp_layers=3, hidden_dim=5, task=task,
                     anchoring=AnchoringMode(variant=variant, layer=layer, **kw))


# -- GCN -------------------------------------------------------------------------

def test_gcn_matches_dense_oracle(rng):
    for _ in range(10):
        g = random_graph(rng, 5)
        w, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        out = gcn_layer(Tensor(g.x), gcn_normalize(g.a), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, gcn_dense(g.x, g.a, w, b), rtol=0, atol=1e-12)


def test_gcn_self_loops_added_once(rng):
    a = np.array([[1.0, 1.0], [1.0, 0.0]])
    x, w, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), np.zeros((1, 2))
    out = gcn_layer(Tensor(x), gcn_normalize(a), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, gcn_dense(x, a, w, b), atol=1e-12)


def test_gcn_isolated_node_is_relu():
    x = np.array([[-1.5, 2.0]])
    out = gcn_layer(Tensor(x), gcn_normalize(np.zeros((1, 1))), Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))
    np.testing.assert_array_equal(out.data, [[0.0, 2.0]])


def test_gcn_automorphic_pair_equal(rng):
    x = np.tile(rng.normal(size=(1, 3)), (2, 1))
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = gcn_layer(Tensor(x), gcn_normalize(a), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))))
    np.testing.assert_array_equal(out.data[0], out.data[1])


# -- GIN -------------------------------------------------------------------------

def _identity_gin(d):
    eye, zero = Tensor(np.eye(d)), Tensor(np.zeros((1, d)))
    return Tensor(np.zeros((1, 1))), eye, zero, eye, zero


def test_gin_identity_mlp_without_edges(rng):
    x = np.abs(rng.normal(size=(4, 3)))
    out = gin_layer(Tensor(x), sp.csr_matrix((4, 4)), *_identity_gin(3))
    np.testing.assert_array_equal(out.data, x)


def test_gin_star_center_sums_leaves():
    x = np.array([[1.0, 0.5], [2.0, 0.0], [3.0, 1.0], [4.0, 2.0]])
    a = np.zeros((4, 4))
    a[0, 1:] = a[1:, 0] = 1.0
    out = gin_layer(Tensor(x), sp.csr_matrix(a), *_identity_gin(2))
    np.testing.assert_array_equal(out.data[0], x[0] + x[1] + x[2] + x[3])
    np.testing.assert_array_equal(out.data[2], x[2] + x[0])


@settings(max_examples=25)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_gin_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    params = [Tensor(rng.normal(size=(1, 1))), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))),
              Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(1, 4)))]
    perm = rng.permutation(n)
    out = gin_layer(Tensor(g.x), sp.csr_matrix(g.a), *params).data
    out_p = gin_layer(Tensor(g.x[perm]), sp.csr_matrix(g.a[perm][:, perm]), *params).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


# -- readout ---------------------------------------------------------------------

def test_readout_examples(rng):
    v = rng.normal(size=(1, 3))
    np.testing.assert_array_equal(readout_mean(Tensor(v)).data, v)
    np.testing.assert_array_equal(readout_mean(Tensor(np.vstack([v, -v]))).data, np.zeros((1, 3)))
    m = rng.normal(size=(6, 3))
    direct = [[sum(m[i, j] for i in range(6)) / 6 for j in range(3)]]
    np.testing.assert_allclose(readout_mean(Tensor(m)).data, direct, atol=1e-15)


# -- forward ---------------------------------------------------------------------

def test_batched_forward_equals_per_graph(rng):
    graphs = [random_graph(rng, n, label=n % 3) for n in (3, 6, 1, 4)]
    for backbone in ("GCN", "GIN"):
        spec = spec_for(backbone=backbone)
        params = init_params(spec, 0)
        together = forward(spec, params, make_batch(graphs)).data
        alone = np.vstack([forward(spec, params, make_batch([g])).data for g in graphs])
        np.testing.assert_allclose(together, alone, atol=1e-12)


def test_readout_anchoring_reduces_to_plain_head(rng):
    """Head weights [W; W] on [G - c || c] give W G for any anchor c."""
    graphs = [random_graph(rng, 5) for _ in range(3)]
    plain = spec_for()
    anchored = spec_for("readout")
    p0 = init_params(plain, 1)
    p1 = {k: Tensor(v.data.copy()) for k, v in p0.items()}
    w = p0["head1.w"].data
    p1["head1.w"] = Tensor(np.vstack([w, w]))
    b = make_batch(graphs)
    c = rng.normal(size=(3, 5))
    np.testing.assert_allclose(forward(anchored, p1, b, c).data, forward(plain, p0, b).data, atol=1e-12)
    # zero anchor block weights and a zero anchor also reproduce the plain head
    p1["head1.w"] = Tensor(np.vstack([w, np.zeros_like(w)]))
    np.testing.assert_allclose(forward(anchored, p1, b, np.zeros((3, 5))).data, forward(plain, p0, b).data,
                               atol=1e-12)


def test_hidden_anchor_with_itself_gives_zero_residual(rng):
    spec = spec_for("hidden_layer", layer=2)
    params = init_params(spec, 2)
    b = make_batch([random_graph(rng, 6)])
    seen = {}

    def identity_anchor(rep):
        seen["rep"] = rep.copy()
        return rep

    embed(spec, params, b, identity_anchor)
    h = Tensor(seen["rep"])
    out = anchor_concat(h, Tensor(seen["rep"])).data
    np.testing.assert_array_equal(out[:, :5], 0.0)
    np.testing.assert_array_equal(out[:, 5:], seen["rep"])


def test_node_task_single_node_shape():
    spec = ModelSpec(input_dim=2, num_classes=4, task="node", anchoring=AnchoringMode("node_feature"))
    params = init_params(spec, 0)
    g = Graph(x=np.ones((1, 2)), a=np.zeros((1, 1)), node_labels=np.array([0]))
    assert forward(spec, params, make_batch([g]), np.zeros((1, 2))).shape == (1, 4)


def test_anchor_arguments_are_checked(rng):
    b = make_batch([random_graph(rng, 4)])
    with pytest.raises(ModelError):
        forward(spec_for(), init_params(spec_for(), 0), b, np.zeros((4, 3)))
    nfa = spec_for("node_feature")
    with pytest.raises(ModelError, match="needs anchors"):
        forward(nfa, init_params(nfa, 0), b)
    with pytest.raises(ModelError, match="incompatible"):
        forward(nfa, init_params(nfa, 0), b, np.zeros((3, 3)))


@pytest.mark.parametrize("mode, kw", [
    (AnchoringMode("hidden_layer", layer=1), {}),
    (AnchoringMode("hidden_layer", layer=4), {}),
    (AnchoringMode("readout"), {"task": "node"}),
    (AnchoringMode("node_feature", pretrained_frozen_backbone=True), {}),
])
def test_invalid_anchoring_modes(mode, kw):
    spec = ModelSpec(input_dim=3, num_classes=2, num_mp_layers=3, anchoring=mode, **kw)
    with pytest.raises(ModelError):
        spec.validate()


@pytest.mark.parametrize("variant, layer", [("none", None), ("node_feature", None), ("hidden_layer", 2),
                                            ("hidden_layer", 3), ("readout", None)])
@pytest.mark.parametrize("backbone", ["GCN", "GIN"])
def test_anchored_forward_gradients(variant, layer, backbone):
    rng = np.random.default_rng(zlib.crc32(f"{variant}{layer}{backbone}".encode()))
    spec = ModelSpec(input_dim=2, num_classes=3, backbone=backbone, num_mp_layers=3, hidden_dim=3,
                     anchoring=AnchoringMode(variant, layer=layer))
    graphs = [random_graph(rng, n, d=2, label=n % 3, p=0.6) for n in (3, 4)]
    b = make_batch(graphs)
    params = init_params(spec, int(rng.integers(1000)))
    names = list(params)
    arrays = [params[n].data + 0.01 * rng.normal(size=params[n].shape) for n in names]
    anchor_rows = {"node_feature": (7, 2), "hidden_layer": (7, 3), "readout": (2, 3)}.get(variant)
    c = rng.normal(size=anchor_rows) if anchor_rows else None

    def loss(*ts):
        return ad.softmax_cross_entropy(forward(spec, dict(zip(names, ts)), b, c), b.graph_labels)

    assert gradcheck(loss, arrays) <= 1.0


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    spec = spec_for("readout")
    params = init_params(spec, 5)
    save_checkpoint(tmp_path / "ck", spec, params, {"kind": "x"}, {"seed": 5})
    spec2, params2, src, extra = load_checkpoint(tmp_path / "ck")
    assert spec2 == spec and src == {"kind": "x"} and extra == {"seed": 5}
    assert list(params2) == list(params)
    for n in params:
        assert params2[n].data.tobytes() == params[n].data.tobytes()
    raw = (tmp_path / "ck" / "head1.w.f64").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8"), params["head1.w"].data.ravel())
    assert backbone_digest(params2) == backbone_digest(params)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")
