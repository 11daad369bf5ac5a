"""Training loop, full-sort top-K evaluation and ablation runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import stream_seed
from .data import MODALITIES, InteractionDataset, ModalityFeatures, NegativeSampler
from .errors import ConfigError, DataError, NumericalError
from .graph import GraphBundle
from .losses import LossConfig
from .model import Params, forward, init_params, save_checkpoint
from .optim import AdamState, Objective, adam_step, gradients

log = logging.getLogger(__name__)

# --- metrics -----------------------------------------------------------------


@dataclass
class MetricReport:
    K: int
    recall: float
    precision: float
    map: float
    ndcg: float
    num_evaluated_users: int

    def as_dict(self) -> dict:
        k = self.K
        return {
            f"rec@{k}": self.recall,
            f"prec@{k}": self.precision,
            f"map@{k}": self.map,
            f"ndcg@{k}": self.ndcg,
            "num_evaluated_users": self.num_evaluated_users,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))

    def to_tsv(self, path: str | Path) -> None:
        d = self.as_dict()
        width = max(len(k) for k in d)
        lines = [f"{k:<{width}}\t{v}" for k, v in d.items()]
        Path(path).write_text("\n".join(lines) + "\n")


def top_k(scores: np.ndarray, K: int, exclude=None) -> np.ndarray:
    """Indices of the K highest scores per row; ties go to the lower index.

    ``exclude`` is a boolean mask (or sparse 0/1 matrix) of entries that may
    not be ranked; they are pushed below every admissible item.
    """
    s = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        if hasattr(exclude, "tocoo"):
            c = exclude.tocoo()
            s[c.row, c.col] = -np.inf
        else:
            s[exclude] = -np.inf
    K = min(K, s.shape[1])
    return np.argsort(-s, axis=1, kind="stable")[:, :K]


def ranking_metrics(ranked: np.ndarray, relevant: list[set[int]] | list[np.ndarray], K: int):
    """Per-user recall, precision, AP and NDCG at K from ranked item lists.

    AP is normalised by min(K, |relevant|); NDCG uses binary gains with the
    ideal DCG over min(K, |relevant|) positions.
    """
    ranked = ranked[:, :K]
    n = len(ranked)
    hits = np.zeros((n, K))
    n_rel = np.zeros(n)
    for r in range(n):
        rel = relevant[r]
        rel = rel if isinstance(rel, set) else set(np.asarray(rel).tolist())
        n_rel[r] = len(rel)
        row = ranked[r]
        hits[r, : len(row)] = [x in rel for x in row.tolist()]
    pos = np.arange(1, K + 1)
    discount = 1.0 / np.log2(pos + 1)
    n_hits = hits.sum(axis=1)
    cap = np.minimum(K, n_rel)
    recall = n_hits / n_rel
    precision = n_hits / K
    ap = np.sum(hits * np.cumsum(hits, axis=1) / pos, axis=1) / cap
    dcg = hits @ discount
    idcg = np.cumsum(discount)[cap.astype(int) - 1]
    return recall, precision, ap, dcg / idcg


def _split_code(split: str) -> int:
    codes = {"train": 0, "val": 1, "test": 2}
    if split not in codes:
        raise DataError(f"unknown evaluation split {split!r}")
    return codes[split]


def evaluate_embeddings(
    H_user: np.ndarray, H_item: np.ndarray, ds: InteractionDataset, split: str = "test", K: int = 5
) -> MetricReport:
    """Full-sort evaluation. Train items are excluded from the ranking except
    when evaluating on the train split itself."""
    code = _split_code(split)
    gt = ds.matrix(code)
    users = np.flatnonzero(np.diff(gt.indptr) > 0)
    if len(users) == 0:
        raise DataError(f"split {split!r} has no interactions")
    exclude = ds.matrix("train") if split != "train" else None
    sums = np.zeros(4)
    chunk = 1024
    for start in range(0, len(users), chunk):
        batch_users = users[start : start + chunk]
        scores = H_user[batch_users] @ H_item.T
        ex = exclude[batch_users] if exclude is not None else None
        ranked = top_k(scores, K, ex)
        rel = [gt.indices[gt.indptr[u] : gt.indptr[u + 1]] for u in batch_users]
        for k, m in enumerate(ranking_metrics(ranked, rel, K)):
            sums[k] += m.sum()
    rec, prec, ap, ndcg = (sums / len(users)).tolist()
    return MetricReport(K, rec, prec, ap, ndcg, len(users))


# --- ablation specs ----------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    disable_mda: bool = False
    disable_msa: bool = False
    disable_nlt: bool = False
    fixed_pref_wt: float | None = None
    independent_weights: bool = False

    def __post_init__(self):
        if self.fixed_pref_wt is not None and self.independent_weights:
            raise ConfigError("fixed_pref_wt and independent_weights are mutually exclusive")
        if self.disable_nlt and self.independent_weights:
            raise ConfigError("disable_nlt and independent_weights both define the trade-off weights")
        if self.fixed_pref_wt is not None and not 0.0 <= self.fixed_pref_wt <= 1.0:
            raise ConfigError("fixed_pref_wt must lie in [0, 1]")

    @classmethod
    def parse(cls, name: str) -> AblationSpec:
        """``no_mda``, ``no_msa``, ``no_nlt``, ``fixed:<w_t>``, ``independent``,
        or several joined by ``+``."""
        kw: dict = {}
        for part in name.split("+"):
            part = part.strip()
            if part in ("no_mda", "no_msa", "no_nlt"):
                kw["disable_" + part[3:]] = True
            elif part == "independent":
                kw["independent_weights"] = True
            elif part.startswith("fixed:"):
                try:
                    kw["fixed_pref_wt"] = float(part[6:])
                except ValueError:
                    raise ConfigError(f"bad fixed preference weight in {name!r}") from None
            elif part != "full":
                raise ConfigError(f"unknown ablation variant {part!r}")
        return cls(**kw)

    def label(self) -> str:
        parts = []
        if self.disable_mda:
            parts.append("w/o MDA")
        if self.disable_msa:
            parts.append("w/o MSA")
        if self.disable_nlt:
            parts.append("w/o NLT")
        if self.fixed_pref_wt is not None:
            parts.append(f"fixed w_t={self.fixed_pref_wt:g}")
        if self.independent_weights:
            parts.append("independent weights")
        return " + ".join(parts) or "MDE"

    def apply(self, loss: LossConfig) -> tuple[LossConfig, str, float | None]:
        loss = replace(
            loss,
            sigma_diff=0.0 if self.disable_mda else loss.sigma_diff,
            sigma_cl=0.0 if self.disable_msa else loss.sigma_cl,
        )
        tradeoff = "constant" if self.disable_nlt else "independent" if self.independent_weights else "preference"
        return loss, tradeoff, self.fixed_pref_wt


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    d: int = 64
    layers: int = 2
    lr: float = 1e-3
    batch_size: int = 2048
    patience: int = 20
    max_epochs: int = 1000
    early_stop_k: int = 5
    early_stop_split: str = "val"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    # Independent seeds for init / negatives / shuffling; default derives from seed.
    init_seed: int | None = None
    neg_seed: int | None = None
    shuffle_seed: int | None = None


@dataclass
class TrainResult:
    params: Params
    best_epoch: int
    best_metric: float
    epochs_run: int
    history: list[dict]
    steps: list[dict]
    objective: Objective


def make_objective(cfg: TrainConfig, features, graphs) -> Objective:
    loss, tradeoff, fixed = cfg.ablation.apply(cfg.loss)
    return Objective(features, graphs, loss, cfg.layers, fixed, tradeoff)


def model_embeddings(params: Params, obj: Objective):
    st = forward(params, obj.features, obj.graphs, obj.L, obj.fixed_pref)
    return st.H_user, st.H_item


def _seed(explicit, seed, name):
    return explicit if explicit is not None else stream_seed(seed, name)


def train(
    ds: InteractionDataset,
    features: dict[str, ModalityFeatures],
    graphs: GraphBundle,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Mini-batch BPR training with per-epoch early stopping on Recall@K.

    Stops once ``patience`` + 1 consecutive epochs fail to beat the best
    metric, and returns the parameters of the best epoch. With
    ``checkpoint_path`` the best parameters are written after every
    improvement; a non-finite loss aborts after that file is in place.
    """
    obj = make_objective(cfg, features, graphs)
    dims = {m: features[m].dim for m in MODALITIES}
    params = init_params(ds.num_users, ds.num_items, dims, cfg.d,
                         _seed(cfg.init_seed, cfg.seed, "init"),
                         tradeoff_logits=cfg.ablation.independent_weights)
    neg_rng = np.random.default_rng(_seed(cfg.neg_seed, cfg.seed, "negatives"))
    shuf_rng = np.random.default_rng(_seed(cfg.shuffle_seed, cfg.seed, "shuffle"))
    sampler = NegativeSampler(ds)
    tr_u, tr_i = ds.pairs("train")
    if len(tr_u) == 0:
        raise DataError("no train edges")
    _split_code(cfg.early_stop_split)
    state = AdamState(lr=cfg.lr)
    meta = dict(checkpoint_meta or {})

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    best, best_epoch, best_params, stale = -math.inf, -1, None, 0
    history, steps = [], []
    step = 0
    epoch = 0
    try:
        for epoch in range(cfg.max_epochs):
            order = shuf_rng.permutation(len(tr_u))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = sampler.sample(tr_u[idx], tr_i[idx], neg_rng)
                try:
                    breakdown, grads = gradients(params, obj, batch)
                except NumericalError:
                    log.error("numerical failure at epoch %d step %d", epoch, step)
                    raise
                adam_step(params, grads, state)
                step += 1
                rec = {"step": step, "epoch": epoch, **breakdown.as_dict()}
                steps.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            Hu, Hi = model_embeddings(params, obj)
            metric = evaluate_embeddings(Hu, Hi, ds, cfg.early_stop_split, cfg.early_stop_k).recall
            history.append({"epoch": epoch, f"{cfg.early_stop_split}_recall@{cfg.early_stop_k}": metric})
            if metric > best:
                best, best_epoch, stale = metric, epoch, 0
                best_params = {k: v.copy() for k, v in params.items()}
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, best_params,
                                    {**meta, "epoch": epoch, "metric": metric})
            else:
                stale += 1
                if stale > cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_params, best_epoch, best, epoch + 1, history, steps, obj)


def evaluate_params(params: Params, obj: Objective, ds: InteractionDataset, split="test", K=5):
    Hu, Hi = model_embeddings(params, obj)
    return evaluate_embeddings(Hu, Hi, ds, split, K)


# --- ablations ---------------------------------------------------------------


@dataclass
class AblationRow:
    label: str
    spec: AblationSpec
    report: MetricReport
    per_seed: list[float]


def run_ablation(
    ds: InteractionDataset,
    features: dict[str, ModalityFeatures],
    graphs: GraphBundle,
    base: TrainConfig,
    specs: list[AblationSpec],
    seeds: list[int] = (0,),
    K: int = 5,
) -> list[AblationRow]:
    """Train the full model and each variant under every seed; average test metrics.

    The full model (no ablation) is always the first row.
    """
    rows = []
    for spec in [AblationSpec(), *specs]:
        reports = []
        for s in seeds:
            cfg = replace(base, seed=s, ablation=spec)
            res = train(ds, features, graphs, cfg)
            reports.append(evaluate_params(res.params, res.objective, ds, "test", K))
        mean = MetricReport(
            K,
            float(np.mean([r.recall for r in reports])),
            float(np.mean([r.precision for r in reports])),
            float(np.mean([r.map for r in reports])),
            float(np.mean([r.ndcg for r in reports])),
            reports[0].num_evaluated_users,
        )
        rows.append(AblationRow(spec.label(), spec, mean, [r.recall for r in reports]))
        log.info("%s: rec@%d=%.4f", spec.label(), K, mean.recall)
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    if not rows:
        return ""
    K = rows[0].report.K
    cols = [f"rec@{K}", f"prec@{K}", f"map@{K}", f"ndcg@{K}"]
    lines = ["config\t" + "\t".join(cols)]
    for r in rows:
        d = r.report.as_dict()
        lines.append(r.label + "\t" + "\t".join(f"{d[c]:.6f}" for c in cols))
    return "\n".join(lines) + "\n"
