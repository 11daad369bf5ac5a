"""Parameters, forward pass and scoring.

Parameters live in a flat ``dict[str, ndarray]`` keyed by tensor name, e.g.
``user_embed.visual`` or ``pref_logits.item``. Modality order is fixed to
``MODALITIES`` = (visual, textual); column 0 of the preference matrices is
the visual preference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MODALITIES, ModalityFeatures
from .errors import DataError
from .graph import GraphBundle, SparseAdjacency, spmm

Params = dict[str, np.ndarray]


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    num_users: int,
    num_items: int,
    feature_dims: dict[str, int],
    d: int = 64,
    seed: int | np.random.Generator = 0,
    tradeoff_logits: bool = False,
) -> Params:
    """Xavier-uniform embeddings/projections, zero biases and preference logits.

    ``tradeoff_logits`` adds a free per-item trade-off parameter (used by the
    independent-weights ablation).
    """
    if d <= 0:
        raise DataError(f"embedding size must be positive, got {d}")
    rng = np.random.default_rng(seed)
    p: Params = {}
    for m in MODALITIES:
        p[f"user_embed.{m}"] = xavier_uniform((num_users, d), rng)
    for m in MODALITIES:
        p[f"proj_weight.{m}"] = xavier_uniform((feature_dims[m], d), rng)
        p[f"proj_bias.{m}"] = np.zeros(d)
    p["pref_logits.user"] = np.zeros((num_users, 2))
    p["pref_logits.item"] = np.zeros((num_items, 2))
    if tradeoff_logits:
        p["tradeoff_logits.item"] = np.zeros(num_items)
    return p


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_average(A: SparseAdjacency, E0: np.ndarray, L: int) -> np.ndarray:
    """Mean of ``A^l E0`` over l = 0..L."""
    if L < 0:
        raise DataError(f"number of layers must be >= 0, got {L}")
    acc = E0.copy()
    E = E0
    for _ in range(L):
        E = spmm(A, E)
        acc += E
    return acc / (L + 1)


def project_items(params: Params, features: dict[str, ModalityFeatures]) -> dict[str, np.ndarray]:
    return {
        m: features[m].matrix @ params[f"proj_weight.{m}"] + params[f"proj_bias.{m}"]
        for m in MODALITIES
    }


def propagate_hetero(
    params: Params, item_embed: dict[str, np.ndarray], graphs: GraphBundle, L: int = 2
) -> dict[str, np.ndarray]:
    return {
        m: layer_average(graphs.hetero, np.vstack([params[f"user_embed.{m}"], item_embed[m]]), L)
        for m in MODALITIES
    }


def propagate_homo(hbar: dict[str, np.ndarray], graphs: GraphBundle):
    """Split each layer-averaged matrix into user/item blocks and convolve them
    with the user co-occurrence graph and the modality's item kNN graph."""
    M = graphs.num_users
    hs_user, hs_item = {}, {}
    for m in MODALITIES:
        hs_user[m] = spmm(graphs.user_homo, hbar[m][:M])
        hs_item[m] = spmm(graphs.item_homo[m], hbar[m][M:])
    return hs_user, hs_item


def fuse(hstar: dict[str, np.ndarray], P: np.ndarray) -> np.ndarray:
    return np.hstack([P[:, k : k + 1] * hstar[m] for k, m in enumerate(MODALITIES)])


def fixed_preferences(n: int, w_t: float) -> np.ndarray:
    return np.tile([1.0 - w_t, w_t], (n, 1))


@dataclass(eq=False)
class ForwardState:
    item_embed: dict[str, np.ndarray]
    hbar: dict[str, np.ndarray]
    hstar_user: dict[str, np.ndarray]
    hstar_item: dict[str, np.ndarray]
    P_user: np.ndarray
    P_item: np.ndarray
    H_user: np.ndarray
    H_item: np.ndarray


def forward(
    params: Params,
    features: dict[str, ModalityFeatures],
    graphs: GraphBundle,
    L: int = 2,
    fixed_pref: float | None = None,
) -> ForwardState:
    item_embed = project_items(params, features)
    hbar = propagate_hetero(params, item_embed, graphs, L)
    hs_user, hs_item = propagate_homo(hbar, graphs)
    if fixed_pref is None:
        P_user = softmax(params["pref_logits.user"])
        P_item = softmax(params["pref_logits.item"])
    else:
        P_user = fixed_preferences(graphs.num_users, fixed_pref)
        P_item = fixed_preferences(graphs.num_items, fixed_pref)
    return ForwardState(
        item_embed, hbar, hs_user, hs_item, P_user, P_item,
        fuse(hs_user, P_user), fuse(hs_item, P_item),
    )


def score(H_user: np.ndarray, H_item: np.ndarray, u: int, i: int) -> float:
    if not (0 <= u < len(H_user)) or not (0 <= i < len(H_item)):
        raise IndexError(f"(user {u}, item {i}) out of range")
    return float(H_user[u] @ H_item[i])


def iter_scores(H_user: np.ndarray, H_item: np.ndarray, chunk: int = 1024):
    """Yield ``(start, block)`` with ``block = H_user[start:start+chunk] @ H_item.T``."""
    for start in range(0, len(H_user), chunk):
        yield start, H_user[start : start + chunk] @ H_item.T


def full_scores(H_user: np.ndarray, H_item: np.ndarray) -> np.ndarray:
    out = np.empty((len(H_user), len(H_item)))
    for start, block in iter_scores(H_user, H_item):
        out[start : start + len(block)] = block
    return out


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, params: Params, meta: dict) -> None:
    """npz container: one float64 array per tensor plus a JSON ``__meta__`` entry."""
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode()) if "__meta__" in z else {}
        params = {k: z[k].copy() for k in z.files if k != "__meta__"}
    return params, meta
