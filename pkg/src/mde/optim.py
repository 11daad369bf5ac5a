"""Exact gradients of the training objective, Adam, and a finite-difference checker."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import losses as lo
from .data import MODALITIES, ModalityFeatures, TripletBatch
from .errors import ConfigError, NumericalError
from .graph import GraphBundle, spmm
from .model import Params, forward, layer_average

TRADEOFF_MODES = ("preference", "constant", "independent")


@dataclass
class Objective:
    """Everything the loss depends on except parameters and the batch.

    ``tradeoff`` selects where the two loss weights come from:
    ``preference`` derives them from the item preference softmax,
    ``constant`` fixes both to 1, ``independent`` squashes the free
    ``tradeoff_logits.item`` parameter. ``fixed_pref`` replaces the learned
    preferences of every node by ``(1 - fixed_pref, fixed_pref)``.
    """

    features: dict[str, ModalityFeatures]
    graphs: GraphBundle
    loss: lo.LossConfig = field(default_factory=lo.LossConfig)
    L: int = 2
    fixed_pref: float | None = None
    tradeoff: str = "preference"

    def __post_init__(self):
        if self.tradeoff not in TRADEOFF_MODES:
            raise ConfigError(f"tradeoff must be one of {TRADEOFF_MODES}")
        if self.fixed_pref is not None and not 0.0 <= self.fixed_pref <= 1.0:
            raise ConfigError("fixed preference weight must lie in [0, 1]")

    def weights(self, params: Params, P_item: np.ndarray) -> lo.TradeoffWeights:
        if self.tradeoff == "constant":
            ones = np.ones(len(P_item))
            return lo.TradeoffWeights(ones, ones.copy())
        if self.tradeoff == "independent":
            w = expit(params["tradeoff_logits.item"])
            return lo.TradeoffWeights(w, 1.0 - w)
        return lo.tradeoff_weights(P_item)

    def _batch_items(self, batch):
        return batch.pos if self.loss.cl_scope == "in_batch" else None

    def __call__(self, params: Params, batch: TripletBatch) -> lo.LossBreakdown:
        return self.evaluate(params, batch)[0]

    def evaluate(self, params: Params, batch: TripletBatch, grad: bool = False):
        cfg = self.loss
        st = forward(params, self.features, self.graphs, self.L, self.fixed_pref)
        tw = self.weights(params, st.P_item)
        hv, ht = (st.hstar_item[m] for m in MODALITIES)
        items = self._batch_items(batch)
        terms = dict(
            L_g=lo.bpr_loss(st.H_user, st.H_item, batch),
            L_v=lo.modality_bpr_loss(st.hstar_user["visual"], hv, batch),
            L_t=lo.modality_bpr_loss(st.hstar_user["textual"], ht, batch),
            L_diff=lo.mda_loss(hv, ht, tw.w_diff, cfg.sigma_diff, cfg.mda_form),
            L_cl=(lo.msa_loss(hv, ht, tw.w_cl, cfg.sigma_cl, cfg.tau, cfg.cl_scope, items)
                  if cfg.sigma_cl > 0 else 0.0),
            reg=lo.l2_penalty(params, cfg.sigma_reg),
        )
        breakdown = lo.total_loss(**terms)
        if not grad:
            return breakdown, None
        return breakdown, self._backward(params, batch, st, tw, items)

    def _backward(self, params, batch, st, tw, items) -> Params:
        cfg = self.loss
        g = self.graphs
        d = st.hstar_item["visual"].shape[1]
        d_hs_user = {m: np.zeros_like(st.hstar_user[m]) for m in MODALITIES}
        d_hs_item = {m: np.zeros_like(st.hstar_item[m]) for m in MODALITIES}

        # fused ranking loss -> per-modality blocks and preferences
        dHu, dHi = lo.bpr_backward(st.H_user, st.H_item, batch)
        dP_user = np.zeros_like(st.P_user)
        dP_item = np.zeros_like(st.P_item)
        for k, m in enumerate(MODALITIES):
            bu, bi = dHu[:, k * d : (k + 1) * d], dHi[:, k * d : (k + 1) * d]
            d_hs_user[m] += st.P_user[:, k : k + 1] * bu
            d_hs_item[m] += st.P_item[:, k : k + 1] * bi
            dP_user[:, k] = np.sum(bu * st.hstar_user[m], axis=1)
            dP_item[:, k] = np.sum(bi * st.hstar_item[m], axis=1)

        for m in MODALITIES:
            du, di = lo.modality_bpr_backward(st.hstar_user[m], st.hstar_item[m], batch)
            d_hs_user[m] += du
            d_hs_item[m] += di

        hv, ht = st.hstar_item["visual"], st.hstar_item["textual"]
        dv, dt, d_wdiff = lo.mda_backward(hv, ht, tw.w_diff, cfg.sigma_diff, cfg.mda_form)
        d_hs_item["visual"] += dv
        d_hs_item["textual"] += dt
        d_wcl = np.zeros(len(hv))
        if cfg.sigma_cl > 0:
            dv, dt, d_wcl = lo.msa_backward(hv, ht, tw.w_cl, cfg.sigma_cl, cfg.tau, cfg.cl_scope, items)
            d_hs_item["visual"] += dv
            d_hs_item["textual"] += dt

        grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
        if self.tradeoff == "preference":
            dP_item += lo.tradeoff_backward(st.P_item, d_wdiff, d_wcl)
        elif self.tradeoff == "independent":
            w = tw.w_diff
            grads["tradeoff_logits.item"] += (d_wdiff - d_wcl) * w * (1.0 - w)

        if self.fixed_pref is None:
            for name, P, dP in (("user", st.P_user, dP_user), ("item", st.P_item, dP_item)):
                grads[f"pref_logits.{name}"] += P * (dP - np.sum(P * dP, axis=1, keepdims=True))

        hetero_T = g.hetero.T
        for m in MODALITIES:
            d_hbar = np.vstack([
                spmm(g.user_homo.T, d_hs_user[m]),
                spmm(g.item_homo[m].T, d_hs_item[m]),
            ])
            dE0 = layer_average(hetero_T, d_hbar, self.L)
            M = g.num_users
            grads[f"user_embed.{m}"] += dE0[:M]
            d_items = dE0[M:]
            grads[f"proj_weight.{m}"] += self.features[m].matrix.T @ d_items
            grads[f"proj_bias.{m}"] += d_items.sum(axis=0)

        for k, p in params.items():
            grads[k] += 2.0 * cfg.sigma_reg * p
            if not np.all(np.isfinite(grads[k])):
                raise NumericalError(f"non-finite gradient for {k}")
        return grads


def gradients(params: Params, objective: Objective, batch: TripletBatch):
    """Return ``(LossBreakdown, grads)`` with one gradient per parameter tensor."""
    return objective.evaluate(params, batch, grad=True)


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        p -= state.lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)


# --- finite-difference check --------------------------------------------------


@dataclass
class GradCheckReport:
    rows: list[dict]
    rtol: float
    atol: float

    @property
    def max_rel_err(self) -> float:
        return max((r["rel_err"] for r in self.rows), default=0.0)

    @property
    def mean_rel_err(self) -> float:
        return float(np.mean([r["rel_err"] for r in self.rows])) if self.rows else 0.0

    @property
    def failures(self) -> list[dict]:
        return [r for r in self.rows if not r["ok"]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def per_tensor(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for r in self.rows:
            t = out.setdefault(r["tensor"], {"checked": 0, "max_rel_err": 0.0, "failed": 0})
            t["checked"] += 1
            t["max_rel_err"] = max(t["max_rel_err"], r["rel_err"])
            t["failed"] += not r["ok"]
        return out

    def table(self) -> str:
        lines = [f"{'tensor':<24}{'checked':>9}{'max_rel_err':>14}{'failed':>8}"]
        for name, t in self.per_tensor().items():
            lines.append(f"{name:<24}{t['checked']:>9}{t['max_rel_err']:>14.3e}{t['failed']:>8}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max rel err {self.max_rel_err:.3e} (mean {self.mean_rel_err:.3e})")
        lines.append(f"max rel err < {self.rtol:g}: {verdict}")
        return "\n".join(lines)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "max_rel_err": self.max_rel_err,
            "mean_rel_err": self.mean_rel_err,
            "rtol": self.rtol,
            "atol": self.atol,
            "passed": self.passed,
            "per_tensor": self.per_tensor(),
            "failures": self.failures,
        }
        Path(path).write_text(json.dumps(payload, indent=2))


def grad_check(
    params: Params,
    objective: Objective,
    batch: TripletBatch,
    sample: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    grads: Params | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Up to ``sample`` coordinates are drawn from every tensor. Relative error is
    ``|a - n| / max(|a|, |n|)``; pairs where both are below ``atol`` count as
    exact. Pass ``grads`` to check externally supplied (e.g. corrupted) values.
    """
    if grads is None:
        _, grads = gradients(params, objective, batch)
    rng = np.random.default_rng(seed)
    work = {k: v.copy() for k, v in params.items()}
    rows = []
    for name in sorted(work):
        p = work[name]
        flat = p.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= sample else rng.choice(flat.size, sample, replace=False)
        for j in np.sort(picks):
            orig = flat[j]
            flat[j] = orig + h
            up = objective(work, batch).total
            flat[j] = orig - h
            down = objective(work, batch).total
            flat[j] = orig
            num = (up - down) / (2 * h)
            ana = float(grads[name].reshape(-1)[j])
            scale = max(abs(ana), abs(num))
            rel = 0.0 if scale < atol else abs(ana - num) / scale
            rows.append({
                "tensor": name,
                "index": [int(x) for x in np.unravel_index(j, p.shape)],
                "analytic": ana,
                "numeric": num,
                "rel_err": rel,
                "ok": rel < rtol,
            })
    return GradCheckReport(rows, rtol, atol)
