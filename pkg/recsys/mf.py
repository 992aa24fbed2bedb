"""
recsys/mf.py

Weighted implicit-feedback matrix factorization by alternating least squares.

Loss (over every row/column pair):
    sum c_rc * (p_rc - x_r . y_c)^2 + reg * (sum ||x_r||^2 + sum ||y_c||^2)
with p = 1 on observed cells and 0 elsewhere, c = 1 + alpha * confidence on observed
cells and 1 elsewhere. Each half-sweep solves every row exactly with a Cholesky
factorization, so the loss never increases.

Used twice: user x item (behaviour embeddings) and user x postcode (location embeddings).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (DimensionMismatchError, EmptyInputError, MissingPostcodeError, NumericalError,
                     UnknownItemError)
from .models import Ad, Event, SignalWeightConfig
from .storage import (expect_kind, read_ids, read_manifest, read_matrix, write_ids,
                      write_manifest, write_matrix)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Sparse confidence matrix; rows and columns carry their external ids."""
    row_ids: Tuple[str, ...]
    col_ids: Tuple[str, ...]
    cells: sp.csr_matrix

    def __post_init__(self):
        if self.cells.shape != (len(self.row_ids), len(self.col_ids)):
            raise DimensionMismatchError(
                f"cell matrix shape {self.cells.shape} != ({len(self.row_ids)}, {len(self.col_ids)})")
        if self.cells.nnz and not np.all(self.cells.data > 0):
            raise ValueError("all confidences must be > 0")
        if not self.cells.has_canonical_format:
            raise ValueError("cells must be in canonical CSR format (no duplicate cells)")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cells.shape

    @property
    def nnz(self) -> int:
        return int(self.cells.nnz)

    def row_index(self) -> Dict[str, int]:
        return {r: n for n, r in enumerate(self.row_ids)}

    def col_index(self) -> Dict[str, int]:
        return {c: n for n, c in enumerate(self.col_ids)}

    def value(self, row_id: str, col_id: str) -> float:
        r = self.row_index().get(row_id)
        c = self.col_index().get(col_id)
        if r is None or c is None:
            return 0.0
        return float(self.cells[r, c])

    def transpose(self) -> "InteractionMatrix":
        t = self.cells.T.tocsr()
        t.sum_duplicates()
        t.sort_indices()
        return InteractionMatrix(self.col_ids, self.row_ids, t)


def build_matrix(events: Sequence[Event], cfg: SignalWeightConfig,
                 column: Optional[Callable[[Event], str]] = None) -> InteractionMatrix:
    """
    Sum signal weights per (user, column) cell. Repeated events all count.
    `column` maps an event to its column id (the item by default).
    """
    if not events:
        raise EmptyInputError("cannot build an interaction matrix from an empty event log")
    column = column or (lambda e: e.item_id)
    row_ids = tuple(sorted({e.user_id for e in events}))
    col_keys = [column(e) for e in events]
    col_ids = tuple(sorted(set(col_keys)))
    r_index = {r: n for n, r in enumerate(row_ids)}
    c_index = {c: n for n, c in enumerate(col_ids)}
    rows = np.fromiter((r_index[e.user_id] for e in events), dtype=np.int64, count=len(events))
    cols = np.fromiter((c_index[c] for c in col_keys), dtype=np.int64, count=len(events))
    data = np.fromiter((cfg.weight(e.signal) for e in events), dtype=np.float64, count=len(events))
    cells = sp.coo_matrix((data, (rows, cols)), shape=(len(row_ids), len(col_ids))).tocsr()
    cells.sum_duplicates()
    cells.sort_indices()
    return InteractionMatrix(row_ids, col_ids, cells)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Dense vectors keyed by id (items, postcodes, ...)."""
    ids: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DimensionMismatchError(
                f"embedding matrix shape {self.matrix.shape} does not match {len(self.ids)} ids")
        object.__setattr__(self, "_index", {i: n for n, i in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, key: str) -> Optional[np.ndarray]:
        row = self._index.get(key)
        return None if row is None else self.matrix[row]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {i: self.matrix[n] for n, i in enumerate(self.ids)}

    def save(self, directory: PathLike, name: str = "embeddings") -> None:
        directory = Path(directory)
        write_manifest(directory, {"kind": "embedding_table", "name": name,
                                   "dim": self.dim, "count": len(self.ids)})
        write_matrix(directory / "vectors.mat", self.matrix)
        write_ids(directory / "ids.txt", self.ids)

    @classmethod
    def load(cls, directory: PathLike) -> "EmbeddingTable":
        directory = Path(directory)
        expect_kind(read_manifest(directory), "embedding_table", directory)
        return cls(read_ids(directory / "ids.txt"),
                   read_matrix(directory / "vectors.mat").astype(np.float64))


@dataclass(frozen=True, eq=False)
class FactorModel:
    rank: int
    row_factors: np.ndarray
    col_factors: np.ndarray
    regularization: float
    alpha: float = 1.0
    seed: int = 0
    row_ids: Tuple[str, ...] = ()
    col_ids: Tuple[str, ...] = ()
    objective_trace: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.row_factors.shape[1] != self.rank or self.col_factors.shape[1] != self.rank:
            raise DimensionMismatchError("factor matrices do not match the rank")
        if not (np.all(np.isfinite(self.row_factors)) and np.all(np.isfinite(self.col_factors))):
            raise NumericalError("factor matrices contain non-finite entries")

    def item_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.col_ids, self.col_factors)

    def score(self, row_id: str, col_id: str) -> float:
        r = self.row_ids.index(row_id)
        c = self.col_ids.index(col_id)
        return float(self.row_factors[r] @ self.col_factors[c])

    def recommend_for_user(self, user_id: str, k: int = 6,
                           seen: Optional[InteractionMatrix] = None) -> List[Tuple[str, float]]:
        """Personalised top-k columns for one row, skipping cells observed in `seen`."""
        try:
            r = self.row_ids.index(user_id)
        except ValueError:
            raise UnknownItemError([user_id], what="user") from None
        scores = self.col_factors @ self.row_factors[r]
        excluded = set()
        if seen is not None:
            sr = seen.row_index().get(user_id)
            if sr is not None:
                start, end = seen.cells.indptr[sr], seen.cells.indptr[sr + 1]
                excluded = {seen.col_ids[c] for c in seen.cells.indices[start:end]}
        ranked = sorted(((c, float(s)) for c, s in zip(self.col_ids, scores) if c not in excluded),
                        key=lambda t: (-t[1], t[0]))
        return ranked[:k]

    def save(self, directory: PathLike, name: str = "als") -> None:
        directory = Path(directory)
        write_manifest(directory, {
            "kind": "factor_model", "name": name, "rank": self.rank,
            "reg": float(self.regularization), "alpha": float(self.alpha), "seed": self.seed,
            "rows": len(self.row_ids), "cols": len(self.col_ids),
        })
        write_matrix(directory / "row_factors.mat", self.row_factors)
        write_matrix(directory / "col_factors.mat", self.col_factors)
        write_ids(directory / "row_ids.txt", self.row_ids)
        write_ids(directory / "col_ids.txt", self.col_ids)

    @classmethod
    def load(cls, directory: PathLike) -> "FactorModel":
        directory = Path(directory)
        manifest = read_manifest(directory)
        expect_kind(manifest, "factor_model", directory)
        return cls(
            rank=int(manifest["rank"]),
            row_factors=read_matrix(directory / "row_factors.mat").astype(np.float64),
            col_factors=read_matrix(directory / "col_factors.mat").astype(np.float64),
            regularization=float(manifest["reg"]),
            alpha=float(manifest["alpha"]),
            seed=int(manifest["seed"]),
            row_ids=read_ids(directory / "row_ids.txt"),
            col_ids=read_ids(directory / "col_ids.txt"),
        )


# -------------------------
# ALS
# -------------------------
def solve_rows(other: np.ndarray, cells: sp.csr_matrix, reg: float, alpha: float,
               rows: Optional[Sequence[int]] = None, out: Optional[np.ndarray] = None,
               gram: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Exact ridge solve of every requested row of `cells` against the fixed `other` factors:
        x_r = (Y'Y + Y_J'(C_J - I)Y_J + reg I)^-1 Y_J' c_J
    Writes into `out` (only the requested rows) and returns it.
    """
    n_rows = cells.shape[0]
    rank = other.shape[1]
    if out is None:
        out = np.zeros((n_rows, rank), dtype=np.float64)
    if gram is None:
        gram = other.T @ other
    reg_eye = reg * np.eye(rank)
    indptr, indices, data = cells.indptr, cells.indices, cells.data
    for r in (range(n_rows) if rows is None else rows):
        start, end = indptr[r], indptr[r + 1]
        if start == end:
            out[r] = 0.0
            continue
        ys = other[indices[start:end]]
        conf = 1.0 + alpha * data[start:end]
        a = gram + (ys.T * (conf - 1.0)) @ ys + reg_eye
        b = ys.T @ conf
        try:
            out[r] = cho_solve(cho_factor(a, lower=False, check_finite=True), b)
        except (LinAlgError, ValueError) as e:
            raise NumericalError(f"row {r}: Cholesky solve failed: {e}") from e
    return out


def _half_sweep(other: np.ndarray, cells: sp.csr_matrix, reg: float, alpha: float,
                workers: int) -> np.ndarray:
    n_rows = cells.shape[0]
    out = np.zeros((n_rows, other.shape[1]), dtype=np.float64)
    gram = other.T @ other
    if workers <= 1 or n_rows < 2 * workers:
        return solve_rows(other, cells, reg, alpha, out=out, gram=gram)
    # each worker writes disjoint rows and reads only `other`; identical to sequential
    chunks = np.array_split(np.arange(n_rows), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda rows: solve_rows(other, cells, reg, alpha, rows=rows, out=out, gram=gram),
                      chunks))
    return out


def _loss(x: np.ndarray, y: np.ndarray, cells: sp.csr_matrix, reg: float, alpha: float) -> float:
    coo = cells.tocoo()
    # every pair with preference 0 and confidence 1, then correct the observed cells
    total = float(np.sum((x.T @ x) * (y.T @ y)))
    if coo.nnz:
        s = np.einsum("ij,ij->i", x[coo.row], y[coo.col])
        c = 1.0 + alpha * coo.data
        total += float(np.sum(c * (1.0 - s) ** 2 - s ** 2))
    total += reg * (float(np.sum(x * x)) + float(np.sum(y * y)))
    return total


def objective(model: FactorModel, m: InteractionMatrix) -> float:
    """Exact regularized weighted loss of `model` on `m`."""
    if model.row_factors.shape[0] != m.shape[0] or model.col_factors.shape[0] != m.shape[1]:
        raise DimensionMismatchError(
            f"model is {model.row_factors.shape[0]}x{model.col_factors.shape[0]}, "
            f"matrix is {m.shape[0]}x{m.shape[1]}")
    return _loss(model.row_factors, model.col_factors, m.cells, model.regularization, model.alpha)


def als_fit(m: InteractionMatrix, rank: int = 100, reg: float = 0.01, iters: int = 15,
            seed: int = 0, alpha: float = 1.0, workers: int = 1,
            track_objective: bool = False) -> FactorModel:
    if m.nnz == 0:
        raise EmptyInputError("interaction matrix has no cells")
    if rank < 1 or iters < 1:
        raise ValueError(f"rank and iters must be >= 1, got rank={rank} iters={iters}")
    if not reg > 0:
        raise ValueError(f"reg must be > 0, got {reg}")
    n_rows, n_cols = m.shape
    if rank > min(n_rows, n_cols):
        logger.warning("ALS rank %d exceeds matrix dimensions %dx%d; proceeding", rank, n_rows, n_cols)

    rng = np.random.default_rng(seed)
    bound = 0.1 / math.sqrt(rank)
    x = rng.uniform(-bound, bound, size=(n_rows, rank))
    y = rng.uniform(-bound, bound, size=(n_cols, rank))
    by_row = m.cells
    by_col = m.transpose().cells

    trace: List[float] = []
    if track_objective:
        trace.append(_loss(x, y, by_row, reg, alpha))
    for it in range(iters):
        x = _half_sweep(y, by_row, reg, alpha, workers)
        if track_objective:
            trace.append(_loss(x, y, by_row, reg, alpha))
        y = _half_sweep(x, by_col, reg, alpha, workers)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise NumericalError(f"non-finite factors after iteration {it + 1}")
        if track_objective:
            trace.append(_loss(x, y, by_row, reg, alpha))
            logger.info("ALS iteration %d/%d objective=%.6g", it + 1, iters, trace[-1])
        else:
            logger.debug("ALS iteration %d/%d", it + 1, iters)

    return FactorModel(rank=rank, row_factors=x, col_factors=y, regularization=reg,
                       alpha=alpha, seed=seed, row_ids=m.row_ids, col_ids=m.col_ids,
                       objective_trace=tuple(trace))


def location_fit(events: Sequence[Event], ads: Mapping[str, Ad], rank: int = 10,
                 reg: float = 0.01, iters: int = 15, seed: int = 0,
                 cfg: Optional[SignalWeightConfig] = None, alpha: float = 1.0) -> EmbeddingTable:
    """Factorize user x postcode and return the postcode factors."""
    if not events:
        raise EmptyInputError("cannot fit location embeddings from an empty event log")
    unknown = {e.item_id for e in events if e.item_id not in ads}
    if unknown:
        raise UnknownItemError(unknown)
    no_postcode = {e.item_id for e in events if not ads[e.item_id].postcode}
    if no_postcode:
        raise MissingPostcodeError(no_postcode)
    m = build_matrix(events, cfg or SignalWeightConfig.default(),
                     column=lambda e: ads[e.item_id].postcode)
    model = als_fit(m, rank=rank, reg=reg, iters=iters, seed=seed, alpha=alpha)
    return model.item_table()
