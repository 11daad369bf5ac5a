import json
import math

import numpy as np
import pytest
from conftest import make_tiny
from oracles import adam_scalar

from mde.data import TripletBatch
from mde.errors import ConfigError
from mde.graph import GraphBundle, SparseAdjacency
from mde.losses import LossConfig
from mde.optim import AdamState, Objective, adam_step, grad_check, gradients

ALL_ON = LossConfig(sigma_diff=0.1, sigma_cl=0.01, sigma_reg=1e-4, tau=0.2)


def _detached_batch(ds):
    # pos == neg makes every ranking margin identically zero
    u, i = ds.pairs("train")
    return TripletBatch(u[:1], i[:1], i[:1])


def test_reg_only_gradient_is_2_sigma_theta(tiny):
    ds, feats, graphs, params, _ = tiny
    obj = Objective(feats, graphs, LossConfig(sigma_diff=0, sigma_cl=0, sigma_reg=0.37))
    br, grads = gradients(params, obj, _detached_batch(ds))
    assert br.L_g == pytest.approx(math.log(2))
    for k in params:
        np.testing.assert_allclose(grads[k], 2 * 0.37 * params[k], rtol=0, atol=1e-15)


def test_zero_adjacency_gradient_is_local(tiny):
    ds, feats, _, params, _ = tiny
    M, N = ds.num_users, ds.num_items
    eye = lambda n: SparseAdjacency.from_dense(np.eye(n))  # noqa: E731
    graphs = GraphBundle(SparseAdjacency.empty(M + N, M + N), {"visual": eye(N), "textual": eye(N)}, eye(M))
    obj = Objective(feats, graphs, LossConfig(sigma_diff=0, sigma_cl=0, sigma_reg=0))
    batch = TripletBatch(np.array([1, 3]), np.array([0, 2]), np.array([5, 6]))
    _, grads = gradients(params, obj, batch)
    for m in ("visual", "textual"):
        g = grads[f"user_embed.{m}"]
        assert not g[[0, 2, 4]].any()
        assert g[[1, 3]].any()


@pytest.mark.parametrize("seed", [0, 1])
def test_grad_check_all_terms(seed):
    ds, feats, graphs, params, batch = make_tiny(seed)
    report = grad_check(params, Objective(feats, graphs, ALL_ON), batch, sample=200, h=1e-5)
    assert report.passed, report.table()
    assert report.max_rel_err < 1e-4
    assert set(report.per_tensor()) == set(params)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(tradeoff="constant"),
        dict(tradeoff="independent"),
        dict(fixed_pref=0.3),
        dict(L=0),
        dict(L=3),
    ],
)
def test_grad_check_variants(tiny, kwargs):
    _, feats, graphs, params, batch = tiny
    report = grad_check(params, Objective(feats, graphs, ALL_ON, **kwargs), batch, sample=60)
    assert report.passed, report.table()


@pytest.mark.parametrize(
    "loss",
    [
        LossConfig(sigma_diff=0.5, sigma_cl=0.2, cl_scope="in_batch"),
        LossConfig(sigma_diff=0.5, sigma_cl=0.2, mda_form="squared_norm"),
        LossConfig(sigma_diff=0.0, sigma_cl=0.0),
    ],
)
def test_grad_check_loss_variants(tiny, loss):
    _, feats, graphs, params, batch = tiny
    report = grad_check(params, Objective(feats, graphs, loss), batch, sample=60)
    assert report.passed, report.table()


def test_grad_check_constant_loss_vacuous(tiny):
    ds, feats, graphs, params, _ = tiny
    obj = Objective(feats, graphs, LossConfig(sigma_diff=0, sigma_cl=0, sigma_reg=0))
    report = grad_check(params, obj, _detached_batch(ds), atol=1e-8)
    assert report.passed
    assert all(abs(r["analytic"]) < 1e-8 and abs(r["numeric"]) < 1e-8 for r in report.rows)


def test_grad_check_flags_corruption(tiny, tmp_path):
    _, feats, graphs, params, batch = tiny
    obj = Objective(feats, graphs, ALL_ON)
    _, grads = gradients(params, obj, batch)
    grads["proj_weight.textual"][2, 1] += 1.0
    report = grad_check(params, obj, batch, grads=grads)
    assert not report.passed
    assert [(r["tensor"], r["index"]) for r in report.failures] == [("proj_weight.textual", [2, 1])]
    assert report.table().endswith("FAIL")
    report.to_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["passed"] is False


def test_grad_check_table_pass_line(tiny):
    _, feats, graphs, params, batch = tiny
    table = grad_check(params, Objective(feats, graphs, ALL_ON), batch, sample=10).table()
    assert table.splitlines()[-1] == "max rel err < 0.0001: PASS"


def test_objective_rejects_bad_modes(tiny):
    _, feats, graphs, _, _ = tiny
    with pytest.raises(ConfigError):
        Objective(feats, graphs, tradeoff="learned")
    with pytest.raises(ConfigError):
        Objective(feats, graphs, fixed_pref=1.5)


# --- Adam ---


def test_adam_first_step_is_lr_sign():
    p = {"x": np.array([1.0, -2.0, 3.0])}
    g = {"x": np.array([0.3, -5.0, 1e-3])}
    adam_step(p, g, AdamState(lr=0.01))
    np.testing.assert_allclose(p["x"], [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], rtol=0, atol=1e-7)


def test_adam_zero_gradient():
    p = {"x": np.array([1.0, 2.0])}
    state = AdamState(lr=0.1)
    adam_step(p, {"x": np.array([1.0, 1.0])}, state)
    before = p["x"].copy()
    m0, v0 = state.m["x"].copy(), state.v["x"].copy()
    # zero gradient: moments decay; the update is driven only by the old momentum
    adam_step(p, {"x": np.zeros(2)}, state)
    np.testing.assert_allclose(state.m["x"], 0.9 * m0)
    np.testing.assert_allclose(state.v["x"], 0.999 * v0)
    fresh = {"x": np.array([4.0])}
    adam_step(fresh, {"x": np.zeros(1)}, AdamState())
    assert fresh["x"][0] == 4.0
    assert np.all(p["x"] < before)


def test_adam_quadratic_trajectory():
    p = {"x": np.array([1.0])}
    state = AdamState(lr=0.1)
    traj = []
    for _ in range(3):
        adam_step(p, {"x": 2 * p["x"]}, state)
        traj.append(float(p["x"][0]))
    ref = adam_scalar(1.0, lambda x: 2 * x, 3, 0.1)
    assert traj == pytest.approx(ref, abs=1e-12)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step({"x": np.ones(2)}, {"x": np.ones(3)}, AdamState())
