"""Interaction data, modality features, splitting and negative sampling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError

log = logging.getLogger(__name__)

TRAIN, VAL, TEST, UNSPLIT = 0, 1, 2, 3
SPLIT_NAMES = ("train", "val", "test", "unsplit")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}
MODALITIES = ("visual", "textual")


@dataclass(eq=False)
class InteractionDataset:
    """Implicit-feedback edges with a split tag per edge.

    Edges are stored column-wise: ``users[k], items[k], splits[k]`` is edge k.
    ``user_ids`` / ``item_ids`` hold the raw identifiers when the data came
    from a file (position = dense index).
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    splits: np.ndarray
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None
    duplicates: int = 0
    dropped_users: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int8)
        if not (len(self.users) == len(self.items) == len(self.splits)):
            raise DataError("edge arrays differ in length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
            if self.splits.min() < 0 or self.splits.max() > UNSPLIT:
                raise DataError("unknown split code")
        keys = self.users * self.num_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise DataError("duplicate (user, item) pairs")

    @property
    def num_edges(self) -> int:
        return len(self.users)

    def pairs(self, split: str | int) -> tuple[np.ndarray, np.ndarray]:
        code = SPLIT_CODES[split] if isinstance(split, str) else split
        m = self.splits == code
        return self.users[m], self.items[m]

    def matrix(self, split: str | int | None = None) -> sp.csr_matrix:
        """Binary user x item matrix of one split (all edges if None)."""
        if split is None:
            u, i = self.users, self.items
        else:
            u, i = self.pairs(split)
        data = np.ones(len(u), dtype=np.float64)
        return sp.csr_matrix((data, (u, i)), shape=(self.num_users, self.num_items))

    def is_split(self) -> bool:
        return not np.any(self.splits == UNSPLIT)

    def with_splits(self, splits: np.ndarray) -> InteractionDataset:
        return replace(self, splits=np.asarray(splits, dtype=np.int8))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        for arr in (self.users, self.items):
            h.update(arr.astype("<i8").tobytes())
        h.update(self.splits.astype("<i1").tobytes())
        return h.hexdigest()


@dataclass(eq=False)
class ModalityFeatures:
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataError(f"{self.modality} features must be a 2-d matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError(f"{self.modality} features contain NaN/Inf")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0]


@dataclass(eq=False)
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()))


# --- file IO ---------------------------------------------------------------


def _dense_order(ids: set[str]) -> list[str]:
    # Integer ids keep their numeric order, so ids 0..N-1 map to themselves
    # and feature rows exported by id stay aligned.
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def load_interactions(path: str | Path, map_dir: str | Path | None = None) -> InteractionDataset:
    """Read ``user<TAB>item[<TAB>split]`` lines into a dense-indexed dataset.

    Duplicate pairs keep their first occurrence. If a split column is present,
    users without any train edge are dropped. When ``map_dir`` is given the
    id maps are written there as ``users.map.tsv`` / ``items.map.tsv``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    rows: list[tuple[str, str, int]] = []
    seen: set[tuple[str, str]] = set()
    duplicates = 0
    has_split = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) not in (2, 3) or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{lineno}: malformed line {line!r}")
            if has_split is None:
                has_split = len(parts) == 3
            elif has_split != (len(parts) == 3):
                raise DataError(f"{path}:{lineno}: inconsistent split column")
            tag = UNSPLIT
            if has_split:
                if parts[2] not in ("train", "val", "test"):
                    raise DataError(f"{path}:{lineno}: unknown split {parts[2]!r}")
                tag = SPLIT_CODES[parts[2]]
            key = (parts[0], parts[1])
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            rows.append((parts[0], parts[1], tag))
    if not rows:
        raise DataError(f"{path}: no interactions")

    # Items are indexed before dropping users so feature rows keep their slot.
    item_ids = _dense_order({i for _, i, _ in rows})
    dropped = 0
    if has_split:
        with_train = {u for u, _, t in rows if t == TRAIN}
        all_users = {u for u, _, _ in rows}
        dropped = len(all_users - with_train)
        if dropped:
            log.warning("dropped %d users without train edges", dropped)
            rows = [r for r in rows if r[0] in with_train]

    user_ids = _dense_order({u for u, _, _ in rows})
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    ds = InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        users=np.array([uidx[u] for u, _, _ in rows], dtype=np.int64),
        items=np.array([iidx[i] for _, i, _ in rows], dtype=np.int64),
        splits=np.array([t for _, _, t in rows], dtype=np.int8),
        user_ids=user_ids,
        item_ids=item_ids,
        duplicates=duplicates,
        dropped_users=dropped,
    )
    if map_dir is not None:
        save_id_maps(ds, map_dir)
    return ds


def save_interactions(ds: InteractionDataset, path: str | Path) -> None:
    uids = ds.user_ids or [str(k) for k in range(ds.num_users)]
    iids = ds.item_ids or [str(k) for k in range(ds.num_items)]
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, s in zip(ds.users.tolist(), ds.items.tolist(), ds.splits.tolist()):
            if s == UNSPLIT:
                fh.write(f"{uids[u]}\t{iids[i]}\n")
            else:
                fh.write(f"{uids[u]}\t{iids[i]}\t{SPLIT_NAMES[s]}\n")


def save_id_maps(ds: InteractionDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ids, n in (("users", ds.user_ids, ds.num_users), ("items", ds.item_ids, ds.num_items)):
        ids = ids or [str(k) for k in range(n)]
        with open(directory / f"{name}.map.tsv", "w", encoding="utf-8") as fh:
            for k, raw in enumerate(ids):
                fh.write(f"{raw}\t{k}\n")


def load_id_map(path: str | Path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: malformed id map line")
            out[parts[0]] = int(parts[1])
    return out


def save_features(feat: ModalityFeatures, path: str | Path) -> None:
    """Write a feature matrix. ``.npz`` gives a binary container, anything else TSV."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, matrix=feat.matrix, modality=np.array(feat.modality))
        return
    n, d = feat.matrix.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# modality={feat.modality} rows={n} cols={d}\n")
        for row in feat.matrix:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")


def load_features(path: str | Path, modality: str | None = None) -> ModalityFeatures:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as z:
            name = str(z["modality"])
            mat = z["matrix"]
    else:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#"):
                raise DataError(f"{path}: missing feature header")
            meta = dict(tok.split("=", 1) for tok in header[1:].split() if "=" in tok)
            try:
                name, n, d = meta["modality"], int(meta["rows"]), int(meta["cols"])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}: bad feature header {header.strip()!r}") from exc
            try:
                mat = np.loadtxt(fh, delimiter="\t", dtype=np.float64, ndmin=2)
            except ValueError as exc:
                raise DataError(f"{path}: {exc}") from exc
        if mat.size == 0:
            mat = mat.reshape(0, d)
        if mat.shape != (n, d):
            raise DataError(f"{path}: header says {n}x{d}, body is {mat.shape[0]}x{mat.shape[1]}")
    if modality is not None and name != modality:
        raise DataError(f"{path}: expected modality {modality!r}, file says {name!r}")
    return ModalityFeatures(name, mat)


def check_features(ds: InteractionDataset, feats: list[ModalityFeatures]) -> None:
    for f in feats:
        if f.num_items != ds.num_items:
            raise DataError(
                f"{f.modality} features have {f.num_items} rows, dataset has {ds.num_items} items"
            )


# --- splitting and sampling --------------------------------------------------


def split_dataset(
    ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0
) -> InteractionDataset:
    """Per-user random train/val/test partition.

    Each user with n edges gets round(n * r_val) val and round(n * r_test)
    test edges (halves round up), the rest train; a user left with no train
    edge takes one back from test (else val).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if np.any(ds.splits != UNSPLIT):
        raise DataError("dataset is already split")
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(ds.num_edges), ds.users))
    users = ds.users[order]
    counts = np.bincount(users, minlength=ds.num_users)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(users)) - starts[users]
    n = counts[users]
    n_test = np.floor(n * ratios[2] + 0.5 + 1e-9).astype(np.int64)
    n_val = np.floor(n * ratios[1] + 0.5 + 1e-9).astype(np.int64)
    n_test = np.minimum(n_test, n - 1)
    n_val = np.minimum(n_val, n - 1 - n_test)
    tags = np.full(len(users), TRAIN, dtype=np.int8)
    tags[rank < n_test + n_val] = VAL
    tags[rank < n_test] = TEST
    splits = np.empty_like(tags)
    splits[order] = tags
    return ds.with_splits(splits)


class NegativeSampler:
    """Uniform negatives with rejection against every split."""

    def __init__(self, ds: InteractionDataset):
        self.num_items = ds.num_items
        self._keys = np.unique(ds.users * ds.num_items + ds.items)
        full = np.bincount(ds.users, minlength=ds.num_users) >= ds.num_items
        self._full_users = set(np.flatnonzero(full).tolist())

    def interacted(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def sample(self, users, pos, rng: np.random.Generator) -> TripletBatch:
        users = np.asarray(users, dtype=np.int64)
        pos = np.asarray(pos, dtype=np.int64)
        bad_users = self._full_users.intersection(users.tolist())
        if bad_users:
            raise DataError(f"user {min(bad_users)} has interacted with every item; no negative exists")
        neg = rng.integers(self.num_items, size=len(users))
        todo = np.flatnonzero(self.interacted(users, neg))
        while len(todo):
            neg[todo] = rng.integers(self.num_items, size=len(todo))
            todo = todo[self.interacted(users[todo], neg[todo])]
        return TripletBatch(users, pos, neg)


def sample_negatives(ds: InteractionDataset, users, pos, rng: np.random.Generator) -> TripletBatch:
    return NegativeSampler(ds).sample(users, pos, rng)


# --- synthetic data ----------------------------------------------------------


def cluster_of(index: np.ndarray, total: int, clusters: int) -> np.ndarray:
    return (np.asarray(index) * clusters) // total


def generate_synthetic(
    num_users: int,
    num_items: int,
    d_v: int,
    d_t: int,
    clusters: int,
    seed: int = 0,
    p_in: float = 0.3,
    p_out: float = 0.01,
    noise: float = 1.0,
) -> tuple[InteractionDataset, ModalityFeatures, ModalityFeatures]:
    """Block-structured interactions plus cluster-centred Gaussian features.

    Users and items are assigned to contiguous clusters. Each user interacts
    with own-cluster items with probability ``p_in`` and other items with
    ``p_out``. Users (then items) left without an edge get one own-cluster
    partner, so every index appears in the edge list.
    """
    if min(num_users, num_items, d_v, d_t, clusters) <= 0:
        raise DataError("synthetic sizes must be positive")
    if clusters > min(num_users, num_items):
        raise DataError(f"cluster count {clusters} exceeds min(users, items)")
    rng = np.random.default_rng(seed)
    ucl = cluster_of(np.arange(num_users), num_users, clusters)
    icl = cluster_of(np.arange(num_items), num_items, clusters)
    same = ucl[:, None] == icl[None, :]
    R = rng.random((num_users, num_items)) < np.where(same, p_in, p_out)
    for u in np.flatnonzero(~R.any(axis=1)):
        R[u, rng.choice(np.flatnonzero(icl == ucl[u]))] = True
    for i in np.flatnonzero(~R.any(axis=0)):
        R[rng.choice(np.flatnonzero(ucl == icl[i])), i] = True
    users, items = np.nonzero(R)
    ds = InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        users=users,
        items=items,
        splits=np.full(len(users), UNSPLIT, dtype=np.int8),
        user_ids=[str(k) for k in range(num_users)],
        item_ids=[str(k) for k in range(num_items)],
    )
    feats = []
    for name, dim in (("visual", d_v), ("textual", d_t)):
        centers = rng.standard_normal((clusters, dim))
        mat = centers[icl] + noise * rng.standard_normal((num_items, dim))
        feats.append(ModalityFeatures(name, mat))
    return ds, feats[0], feats[1]

