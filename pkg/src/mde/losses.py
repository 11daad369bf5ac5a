"""Loss terms of the training objective and their input gradients.

Every ``*_loss`` returns a float; the matching ``*_backward`` returns the
gradient of that float with respect to the loss inputs. Batch- and
anchor-level terms are means, so the sigma coefficients do not depend on
batch size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .data import TripletBatch
from .errors import ConfigError, DataError, NumericalError

NORM_EPS = 1e-12
CL_SCOPES = ("full", "in_batch")
MDA_FORMS = ("mean_abs", "squared_norm")
TERMS = ("L_g", "L_v", "L_t", "L_diff", "L_cl", "reg")


@dataclass
class LossConfig:
    sigma_diff: float = 0.1
    sigma_cl: float = 0.01
    sigma_reg: float = 1e-4
    tau: float = 0.2
    cl_scope: str = "full"
    # "squared_norm" is the literal squared norm of the negated weighted
    # difference; it penalises (not rewards) modality differences.
    mda_form: str = "mean_abs"

    def __post_init__(self):
        for name in ("sigma_diff", "sigma_cl", "sigma_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.cl_scope not in CL_SCOPES:
            raise ConfigError(f"cl_scope must be one of {CL_SCOPES}")
        if self.mda_form not in MDA_FORMS:
            raise ConfigError(f"mda_form must be one of {MDA_FORMS}")


@dataclass
class TradeoffWeights:
    w_diff: np.ndarray
    w_cl: np.ndarray


def tradeoff_weights(P_item: np.ndarray) -> TradeoffWeights:
    gap = np.abs(P_item[:, 0] - P_item[:, 1])
    return TradeoffWeights(gap, 1.0 - gap)


def tradeoff_backward(P_item: np.ndarray, d_wdiff: np.ndarray, d_wcl: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``P_item`` (sign(0) taken as 0)."""
    g = (d_wdiff - d_wcl) * np.sign(P_item[:, 0] - P_item[:, 1])
    return np.stack([g, -g], axis=1)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DataError(f"modality matrices differ in shape: {a.shape} vs {b.shape}")


# --- modality difference amplification ---------------------------------------


def mda_loss(hv, ht, w_diff, sigma_diff, form="mean_abs") -> float:
    """Mean over entries of ``-w_diff[i] * |hv - ht|``, times sigma_diff."""
    _check_pair(hv, ht)
    if hv.size == 0:
        return 0.0
    q = w_diff[:, None] * np.abs(hv - ht)
    if form == "squared_norm":
        return float(sigma_diff * np.mean(q * q))
    return float(-sigma_diff * np.mean(q))


def mda_backward(hv, ht, w_diff, sigma_diff, form="mean_abs"):
    _check_pair(hv, ht)
    diff = hv - ht
    c = sigma_diff / max(hv.size, 1)
    if form == "squared_norm":
        g = 2 * c * (w_diff**2)[:, None] * diff
        d_w = 2 * c * w_diff * np.sum(diff * diff, axis=1)
    else:
        g = -c * w_diff[:, None] * np.sign(diff)
        d_w = -c * np.abs(diff).sum(axis=1)
    return g, -g, d_w


# --- modality similarity alignment -------------------------------------------


def _normalize(h):
    r = np.linalg.norm(h, axis=1, keepdims=True)
    return h / (r + NORM_EPS), r


def _normalize_backward(h, r, dz):
    inv = 1.0 / (r + NORM_EPS)
    safe_r = np.where(r > 0, r, 1.0)
    radial = np.where(r > 0, np.sum(h * dz, axis=1, keepdims=True) / safe_r, 0.0)
    return dz * inv - h * radial * inv**2


def anchor_items(num_items: int, scope: str, batch_items=None) -> np.ndarray:
    if scope == "full":
        return np.arange(num_items)
    if batch_items is None or len(batch_items) == 0:
        raise DataError("in_batch contrastive scope needs a non-empty item batch")
    return np.unique(np.asarray(batch_items, dtype=np.int64))


def _msa_parts(hv, ht, idx, tau):
    zv, rv = _normalize(hv[idx])
    zt, rt = _normalize(ht[idx])
    S = zv @ zt.T / tau
    diag = np.diag(S)
    l_vt = logsumexp(S, axis=1) - diag
    l_tv = logsumexp(S, axis=0) - diag
    return zv, rv, zt, rt, S, l_vt, l_tv


def msa_loss(hv, ht, w_cl, sigma_cl, tau, scope="full", batch_items=None) -> float:
    """Symmetric weighted InfoNCE between the two modality views of each item.

    Rows are l2-normalised; row i of one modality is the positive for row i
    of the other, every other candidate item in the scope is a negative. Each
    anchor's term is weighted by ``w_cl`` and averaged per direction.
    """
    _check_pair(hv, ht)
    idx = anchor_items(len(hv), scope, batch_items)
    *_, l_vt, l_tv = _msa_parts(hv, ht, idx, tau)
    w = w_cl[idx]
    return float(sigma_cl * (np.mean(w * l_vt) + np.mean(w * l_tv)))


def msa_backward(hv, ht, w_cl, sigma_cl, tau, scope="full", batch_items=None):
    _check_pair(hv, ht)
    idx = anchor_items(len(hv), scope, batch_items)
    zv, rv, zt, rt, S, l_vt, l_tv = _msa_parts(hv, ht, idx, tau)
    n = len(idx)
    w = w_cl[idx]
    row_sm = np.exp(S - logsumexp(S, axis=1, keepdims=True))
    col_sm = np.exp(S - logsumexp(S, axis=0, keepdims=True))
    eye = np.eye(n)
    dS = (sigma_cl / n) * (w[:, None] * (row_sm - eye) + (col_sm - eye) * w[None, :])
    dzv = dS @ zt / tau
    dzt = dS.T @ zv / tau
    d_hv = np.zeros_like(hv)
    d_ht = np.zeros_like(ht)
    d_hv[idx] = _normalize_backward(hv[idx], rv, dzv)
    d_ht[idx] = _normalize_backward(ht[idx], rt, dzt)
    d_w = np.zeros_like(w_cl)
    d_w[idx] = (sigma_cl / n) * (l_vt + l_tv)
    return d_hv, d_ht, d_w


# --- ranking losses ----------------------------------------------------------


def _margins(Hu, Hi, batch: TripletBatch):
    if len(batch) == 0:
        raise DataError("empty triplet batch")
    hu = Hu[batch.users]
    return np.sum(hu * (Hi[batch.pos] - Hi[batch.neg]), axis=1)


def bpr_loss(H_user, H_item, batch: TripletBatch) -> float:
    """Mean of ``-log sigmoid(s(u,i) - s(u,i'))``, computed as softplus."""
    x = _margins(H_user, H_item, batch)
    return float(np.mean(np.logaddexp(0.0, -x)))


def bpr_backward(H_user, H_item, batch: TripletBatch):
    x = _margins(H_user, H_item, batch)
    g = -expit(-x) / len(batch)
    d_u = np.zeros_like(H_user)
    d_i = np.zeros_like(H_item)
    np.add.at(d_u, batch.users, g[:, None] * (H_item[batch.pos] - H_item[batch.neg]))
    gu = g[:, None] * H_user[batch.users]
    np.add.at(d_i, batch.pos, gu)
    np.add.at(d_i, batch.neg, -gu)
    return d_u, d_i


# Per-modality ranking loss: same form on the pre-fusion d-dim representations.
modality_bpr_loss = bpr_loss
modality_bpr_backward = bpr_backward


# --- regulariser and total ---------------------------------------------------


def l2_penalty(params: dict[str, np.ndarray], sigma_reg: float) -> float:
    return float(sigma_reg * sum(np.sum(p * p) for p in params.values()))


@dataclass
class LossBreakdown:
    L_g: float
    L_v: float
    L_t: float
    L_diff: float
    L_cl: float
    reg: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def total_loss(L_g, L_v, L_t, L_diff, L_cl, reg) -> LossBreakdown:
    terms = dict(L_g=L_g, L_v=L_v, L_t=L_t, L_diff=L_diff, L_cl=L_cl, reg=reg)
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericalError(f"loss term {name} is not finite ({v})")
    return LossBreakdown(**terms, total=L_g + L_v + L_t + L_diff + L_cl + reg)
