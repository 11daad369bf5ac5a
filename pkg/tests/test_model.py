import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_propagation, softmax_row

from mde.data import TRAIN, InteractionDataset, ModalityFeatures, generate_synthetic, split_dataset
from mde.errors import DataError
from mde.graph import GraphBundle, SparseAdjacency, build_graphs
from mde.model import (
    forward,
    fuse,
    full_scores,
    init_params,
    iter_scores,
    layer_average,
    load_checkpoint,
    project_items,
    propagate_hetero,
    propagate_homo,
    save_checkpoint,
    score,
    softmax,
    xavier_uniform,
)

DIMS = {"visual": 6, "textual": 5}


def _instance(M=20, N=30, seed=0, L=2, k_item=4, k_user=5):
    ds, fv, ft = generate_synthetic(M, N, DIMS["visual"], DIMS["textual"], 3, seed=seed)
    ds = split_dataset(ds, seed=seed)
    feats = {"visual": fv, "textual": ft}
    graphs = build_graphs(ds, feats, k_item=k_item, k_user=k_user)
    params = init_params(M, N, DIMS, d=8, seed=seed)
    return ds, feats, graphs, params


def test_zero_logits_give_half_preferences():
    ds, feats, graphs, params = _instance()
    st_ = forward(params, feats, graphs)
    assert np.all(st_.P_user == 0.5) and np.all(st_.P_item == 0.5)


def test_init_deterministic_and_bounds():
    a = init_params(4, 5, DIMS, d=3, seed=11)
    b = init_params(4, 5, DIMS, d=3, seed=11)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    W = xavier_uniform((300, 200), np.random.default_rng(0))
    bound = math.sqrt(6 / 500)
    assert np.abs(W).max() <= bound and np.abs(W).max() > 0.99 * bound
    assert np.all(a["proj_bias.visual"] == 0)
    with pytest.raises(DataError):
        init_params(4, 5, DIMS, d=0)


def test_layer_average_L0():
    E0 = np.random.default_rng(0).normal(size=(4, 3))
    A = SparseAdjacency.from_dense(np.ones((4, 4)))
    np.testing.assert_array_equal(layer_average(A, E0, 0), E0)
    with pytest.raises(DataError):
        layer_average(A, E0, -1)


def test_layer_average_isolated_node():
    D = np.zeros((3, 3))
    D[0, 1] = D[1, 0] = 1.0
    E0 = np.random.default_rng(1).normal(size=(3, 2))
    out = layer_average(SparseAdjacency.from_dense(D), E0, 2)
    np.testing.assert_allclose(out[2], E0[2] / 3, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_propagation_dense_oracle(seed):
    ds, feats, graphs, params = _instance(seed=seed)
    item_embed = project_items(params, feats)
    hbar = propagate_hetero(params, item_embed, graphs, L=2)
    hs_u, hs_i = propagate_homo(hbar, graphs)
    u, i = ds.pairs("train")
    ue = {m: params[f"user_embed.{m}"] for m in DIMS}
    X = {m: feats[m].matrix for m in DIMS}
    o_hbar, o_u, o_i = dense_propagation(ue, item_embed, list(zip(u.tolist(), i.tolist())), X, 4, 5, 2)
    for m in DIMS:
        np.testing.assert_allclose(hbar[m], o_hbar[m], rtol=0, atol=1e-10 * np.abs(o_hbar[m]).max())
        np.testing.assert_allclose(hs_u[m], o_u[m], rtol=0, atol=1e-10 * np.abs(o_u[m]).max())
        np.testing.assert_allclose(hs_i[m], o_i[m], rtol=0, atol=1e-10 * np.abs(o_i[m]).max())


def _bundle(M, N, user_homo, item_homo):
    return GraphBundle(SparseAdjacency.empty(M + N, M + N), {"visual": item_homo, "textual": item_homo}, user_homo)


def test_homo_empty_graph_is_zero():
    hbar = {m: np.ones((5, 2)) for m in DIMS}
    hs_u, hs_i = propagate_homo(hbar, _bundle(2, 3, SparseAdjacency.empty(2, 2), SparseAdjacency.empty(3, 3)))
    for m in DIMS:
        assert not hs_u[m].any() and not hs_i[m].any()


def test_homo_single_neighbour_copies_row():
    hbar = {m: np.arange(10.0).reshape(5, 2) + k for k, m in enumerate(DIMS)}
    users = SparseAdjacency.from_dense(np.array([[0, 1.0], [1.0, 0]]))
    items = SparseAdjacency.from_dense(np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0]]))
    hs_u, hs_i = propagate_homo(hbar, _bundle(2, 3, users, items))
    for m in DIMS:
        np.testing.assert_array_equal(hs_u[m][0], hbar[m][1])
        np.testing.assert_array_equal(hs_i[m][0], hbar[m][4])


def test_fuse_half_and_saturated():
    xv, xt = np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])
    hs = {"visual": xv, "textual": xt}
    np.testing.assert_array_equal(fuse(hs, softmax(np.zeros((1, 2)))), [[0.5, 1.0, 1.5, 2.0]])
    out = fuse(hs, softmax(np.array([[20.0, -20.0]])))
    np.testing.assert_allclose(out, [[1.0, 2.0, 0.0, 0.0]], atol=1e-15)


def test_softmax_scalar_oracle():
    L = np.random.default_rng(2).normal(scale=5, size=(200, 2))
    ref = np.array([softmax_row(row.tolist()) for row in L])
    np.testing.assert_allclose(softmax(L), ref, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=2))
def test_softmax_rows_are_distributions(row):
    P = softmax(np.array([row]))
    assert np.all(P >= 0) and abs(P.sum() - 1) < 1e-12


def test_score_cases():
    e = np.eye(3)
    assert score(e, e, 1, 1) == 1.0
    assert score(e, e, 0, 2) == 0.0
    rng = np.random.default_rng(0)
    Hu, Hi = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    assert score(Hu, Hi, 2, 3) == pytest.approx(sum(a * b for a, b in zip(Hu[2], Hi[3])), abs=1e-12)
    with pytest.raises(IndexError):
        score(Hu, Hi, 4, 0)


def test_full_scores():
    Hu, Hi = np.array([[2.0]]), np.array([[3.0]])
    assert full_scores(Hu, Hi)[0, 0] == score(Hu, Hi, 0, 0)
    rng = np.random.default_rng(1)
    Hu, Hi = rng.normal(size=(50, 8)), rng.normal(size=(100, 8))
    S = full_scores(Hu, Hi)
    np.testing.assert_allclose(S, Hu @ Hi.T, rtol=0, atol=1e-10)
    assert [score(Hu, Hi, 7, i) for i in range(100)] == pytest.approx(S[7].tolist(), abs=1e-12)
    chunks = list(iter_scores(Hu, Hi, chunk=16))
    assert [s for s, _ in chunks] == [0, 16, 32, 48]
    np.testing.assert_allclose(np.vstack([b for _, b in chunks]), S, atol=1e-12)


def test_forward_shapes_and_fixed_pref():
    ds, feats, graphs, params = _instance()
    st_ = forward(params, feats, graphs, fixed_pref=0.3)
    assert st_.H_user.shape == (20, 16) and st_.H_item.shape == (30, 16)
    np.testing.assert_array_equal(st_.P_item, np.tile([0.7, 0.3], (30, 1)))
    np.testing.assert_allclose(st_.H_item[:, :8], 0.7 * st_.hstar_item["visual"])


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(3, 4, DIMS, d=2, seed=0)
    save_checkpoint(tmp_path / "c.npz", params, {"graph_hash": "x", "layers": 2})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"graph_hash": "x", "layers": 2}
    assert back.keys() == params.keys()
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.npz")


def test_forward_uses_train_edges_only():
    # moving an edge from train to test changes the graph, so the output changes
    ds = InteractionDataset(2, 2, np.array([0, 1, 1]), np.array([0, 0, 1]), np.array([TRAIN] * 3, np.int8))
    feats = {m: ModalityFeatures(m, np.eye(2, DIMS[m])) for m in DIMS}
    params = init_params(2, 2, DIMS, d=3, seed=0)
    a = forward(params, feats, build_graphs(ds, feats, 1, 1))
    ds2 = ds.with_splits(np.array([TRAIN, TRAIN, 2], np.int8))
    b = forward(params, feats, build_graphs(ds2, feats, 1, 1))
    assert not np.allclose(a.hbar["visual"], b.hbar["visual"])
