"""CSR adjacency type, graph builders and sparse-dense propagation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset, ModalityFeatures
from .errors import DataError

CSR_MAGIC = b"MDECSR01"
_HEADER = struct.Struct("<8sQQQ")


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.row_offsets, dtype=np.int64)
        col = np.asarray(self.col_indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", off)
        object.__setattr__(self, "col_indices", col)
        object.__setattr__(self, "values", val)
        if len(off) != self.num_rows + 1 or off[0] != 0 or off[-1] != len(col):
            raise DataError("row offsets inconsistent with shape / nnz")
        if np.any(np.diff(off) < 0):
            raise DataError("row offsets not monotone")
        if len(val) != len(col):
            raise DataError("values and column indices differ in length")
        if len(col):
            if col.min() < 0 or col.max() >= self.num_cols:
                raise DataError("column index out of bounds")
            # strictly increasing inside a row <=> every in-row step is positive
            steps = np.diff(col)
            row_start = np.zeros(len(col), dtype=bool)
            row_start[off[:-1][np.diff(off) > 0]] = True
            if np.any(steps[~row_start[1:]] <= 0):
                raise DataError("column indices not strictly increasing within a row")
        if not np.all(np.isfinite(val)):
            raise DataError("non-finite adjacency values")

    @classmethod
    def from_scipy(cls, m) -> SparseAdjacency:
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> SparseAdjacency:
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> SparseAdjacency:
        return cls(n_rows, n_cols, np.zeros(n_rows + 1), np.zeros(0), np.zeros(0))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_rows), self.row_nnz())

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    @cached_property
    def T(self) -> SparseAdjacency:
        return SparseAdjacency.from_scipy(self.csr.T.tocsr())

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def equals(self, other: SparseAdjacency) -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(eq=False)
class GraphBundle:
    hetero: SparseAdjacency
    item_homo: dict[str, SparseAdjacency]
    user_homo: SparseAdjacency
    meta: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return self.user_homo.num_rows

    @property
    def num_items(self) -> int:
        return self.hetero.num_rows - self.user_homo.num_rows


def spmm(A: SparseAdjacency, X: np.ndarray) -> np.ndarray:
    """Exact product ``A @ X`` for dense ``X`` (one output row per CSR row)."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != A.num_cols:
        raise DataError(f"spmm shape mismatch: A is {A.shape}, X is {X.shape}")
    return np.asarray(A.csr @ X)


def build_bipartite(ds: InteractionDataset) -> SparseAdjacency:
    """Symmetric 0/1 (M+N)x(M+N) adjacency of train edges, users first."""
    u, i = ds.pairs("train")
    if len(u) == 0:
        raise DataError("dataset has no train edges")
    M, n = ds.num_users, ds.num_users + ds.num_items
    rows = np.concatenate([u, M + i])
    cols = np.concatenate([M + i, u])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return SparseAdjacency.from_scipy(A)


def normalize_symmetric(A: SparseAdjacency) -> SparseAdjacency:
    """``D^-1/2 A D^-1/2``; zero-degree nodes stay all-zero."""
    if A.num_rows != A.num_cols:
        raise DataError("symmetric normalization needs a square matrix")
    if np.any(A.values < 0):
        raise DataError("negative adjacency values")
    deg = np.asarray(A.csr.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    vals = A.values * inv[A.row_ids()] * inv[A.col_indices]
    return SparseAdjacency(A.num_rows, A.num_cols, A.row_offsets, A.col_indices, vals)


def _topk_rows(rows, cols, scores, n, K) -> SparseAdjacency:
    """Keep the K best-scoring entries per row (ties: lower column), weight 1/kept."""
    order = np.lexsort((cols, -scores, rows))
    rows, cols = rows[order], cols[order]
    counts = np.bincount(rows, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    keep = (np.arange(len(rows)) - starts[rows]) < K
    rows, cols = rows[keep], cols[keep]
    kept = np.bincount(rows, minlength=n)
    vals = 1.0 / kept[rows]
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SparseAdjacency.from_scipy(m)


def build_item_knn(features: ModalityFeatures, K: int = 10, chunk: int = 1024) -> SparseAdjacency:
    """Row-normalized top-K cosine neighbour graph over items, self excluded.

    Items with an all-zero feature row neither get nor serve as neighbours.
    """
    if K <= 0:
        raise DataError(f"K must be positive, got {K}")
    X = features.matrix
    n = X.shape[0]
    norms = np.linalg.norm(X, axis=1)
    valid = norms > 0
    Z = np.zeros_like(X)
    Z[valid] = X[valid] / norms[valid, None]
    k_eff = min(K, max(int(valid.sum()) - 1, 0))
    rows_out, cols_out = [], []
    if k_eff > 0:
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            sim = Z[start:stop] @ Z.T
            sim[:, ~valid] = -np.inf
            sim[np.arange(stop - start), np.arange(start, stop)] = -np.inf
            top = np.argsort(-sim, axis=1, kind="stable")[:, :k_eff]
            r = np.repeat(np.arange(start, stop), k_eff)
            c = top.ravel()
            ok = valid[r]
            rows_out.append(r[ok])
            cols_out.append(c[ok])
    if not rows_out:
        return SparseAdjacency.empty(n, n)
    rows = np.concatenate(rows_out)
    cols = np.concatenate(cols_out)
    kept = np.bincount(rows, minlength=n)
    m = sp.csr_matrix((1.0 / kept[rows], (rows, cols)), shape=(n, n))
    return SparseAdjacency.from_scipy(m)


def cooccurrence_counts(ds: InteractionDataset) -> sp.csr_matrix:
    R = ds.matrix("train")
    C = (R @ R.T).tocsr()
    C.setdiag(0)
    C.eliminate_zeros()
    return C


def build_user_cooccurrence(ds: InteractionDataset, K: int = 40) -> SparseAdjacency:
    """Row-normalized graph linking each user to its K most co-occurring users."""
    if K <= 0:
        raise DataError(f"K must be positive, got {K}")
    C = cooccurrence_counts(ds).tocoo()
    if C.nnz == 0:
        return SparseAdjacency.empty(ds.num_users, ds.num_users)
    return _topk_rows(C.row.astype(np.int64), C.col.astype(np.int64),
                      C.data.astype(np.float64), ds.num_users, K)


def build_graphs(
    ds: InteractionDataset, features: dict[str, ModalityFeatures], k_item: int = 10, k_user: int = 40
) -> GraphBundle:
    hetero = normalize_symmetric(build_bipartite(ds))
    item_homo = {m: build_item_knn(f, k_item) for m, f in features.items()}
    return GraphBundle(hetero, item_homo, build_user_cooccurrence(ds, k_user))


# --- cache files -------------------------------------------------------------


def save_csr(A: SparseAdjacency, path: str | Path, meta: dict | None = None) -> None:
    """Binary CSR: magic, rows, cols, nnz, offsets, columns (int64), values (float64).

    All little-endian. ``meta`` goes to a ``.json`` sidecar next to the file.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CSR_MAGIC, A.num_rows, A.num_cols, A.nnz))
        fh.write(A.row_offsets.astype("<i8").tobytes())
        fh.write(A.col_indices.astype("<i8").tobytes())
        fh.write(A.values.astype("<f8").tobytes())
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_csr(path: str | Path) -> SparseAdjacency:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated CSR header")
    magic, n_rows, n_cols, nnz = _HEADER.unpack_from(raw)
    if magic != CSR_MAGIC:
        raise DataError(f"{path}: bad CSR magic {magic!r}")
    expected = _HEADER.size + 8 * (n_rows + 1) + 16 * nnz
    if len(raw) != expected:
        raise DataError(f"{path}: CSR payload is {len(raw)} bytes, expected {expected}")
    pos = _HEADER.size
    off = np.frombuffer(raw, "<i8", n_rows + 1, pos)
    pos += 8 * (n_rows + 1)
    col = np.frombuffer(raw, "<i8", nnz, pos)
    pos += 8 * nnz
    val = np.frombuffer(raw, "<f8", nnz, pos)
    return SparseAdjacency(n_rows, n_cols, off.copy(), col.copy(), val.copy())


def load_sidecar(path: str | Path) -> dict | None:
    side = Path(path).with_suffix(".json")
    if not side.exists():
        return None
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError:
        return None
