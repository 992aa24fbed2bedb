"""
recsys/serve.py

Similar-item serving over an immutable snapshot of unit-norm item representations.

Snapshot directory layout:
  manifest      key=value (kind=snapshot, snapshot_id, count, dim, plus refresh metadata)
  ids.txt       item ids, one per line, row order of vectors.mat
  vectors.mat   MAT0 (count x dim)
  active.txt    0|1 per line, same order as ids.txt

A refresh output directory holds snapshots/<id>/ and a CURRENT file naming the
served one; readers accept either form.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import SnapshotError, UnknownItemError
from .models import Ad, ItemRepresentation
from .storage import (MANIFEST_NAME, expect_kind, read_ids, read_manifest, read_matrix,
                      write_ids, write_manifest, write_matrix)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_K = 6
NORM_TOLERANCE = 1e-6
CURRENT_POINTER = "CURRENT"


@dataclass(frozen=True, eq=False)
class Snapshot:
    snapshot_id: str
    item_ids: Tuple[str, ...]
    vectors: np.ndarray  # (n, dim) float64, unit rows
    active: np.ndarray   # (n,) bool

    def __post_init__(self):
        n = len(self.item_ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n or self.active.shape != (n,):
            raise SnapshotError(f"snapshot arrays do not match {n} item ids")
        index = {item: row for row, item in enumerate(self.item_ids)}
        if len(index) != n:
            dupes = sorted({i for i in self.item_ids if self.item_ids.count(i) > 1})
            raise SnapshotError(f"duplicate item ids in snapshot: {', '.join(dupes[:10])}")
        if n:
            norms = np.linalg.norm(self.vectors, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if bad.size:
                raise SnapshotError(
                    f"{bad.size} representation(s) not unit norm, e.g. {self.item_ids[bad[0]]} "
                    f"has norm {norms[bad[0]]:.6f}")
        vectors = np.array(self.vectors, dtype=np.float64)
        active = np.array(self.active, dtype=bool)
        vectors.setflags(write=False)
        active.setflags(write=False)
        # rank of each id in ascending id order, the tie-breaker for equal scores
        id_rank = np.empty(n, dtype=np.int64)
        id_rank[np.argsort(np.array(self.item_ids, dtype=object), kind="stable")] = np.arange(n)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_id_rank", id_rank)

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise UnknownItemError([item_id]) from None

    def vector(self, item_id: str) -> np.ndarray:
        return self.vectors[self.row(item_id)]

    def active_ids(self) -> Tuple[str, ...]:
        return tuple(i for i, a in zip(self.item_ids, self.active) if a)


def build_index(representations: Iterable[ItemRepresentation], ads: Mapping[str, Ad],
                snapshot_id: str) -> Snapshot:
    reps = list(representations)
    unknown = [r.item_id for r in reps if r.item_id not in ads]
    if unknown:
        raise UnknownItemError(unknown)
    ids = tuple(r.item_id for r in reps)
    dim = reps[0].vector.shape[0] if reps else 0
    matrix = np.vstack([r.vector for r in reps]) if reps else np.zeros((0, dim))
    active = np.array([ads[i].active for i in ids], dtype=bool)
    snapshot = Snapshot(snapshot_id, ids, matrix, active)
    logger.info("built index %s: %d items (%d active), dim %d",
                snapshot_id, len(ids), int(active.sum()), dim)
    return snapshot


def recommend(snapshot: Snapshot, item_id: str, k: int = DEFAULT_K) -> List[Tuple[str, float]]:
    """Exact top-k by dot product; never the query itself nor inactive items."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = snapshot.row(item_id)
    scores = snapshot.vectors @ snapshot.vectors[q]
    eligible = snapshot.active.copy()
    eligible[q] = False
    rows = np.flatnonzero(eligible)
    order = rows[np.lexsort((snapshot._id_rank[rows], -scores[rows]))]
    return [(snapshot.item_ids[r], float(scores[r])) for r in order[:k]]


# -------------------------
# Persistence
# -------------------------
def save_snapshot(snapshot: Snapshot, directory: PathLike,
                  extra: Optional[Mapping[str, object]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ids(directory / "ids.txt", snapshot.item_ids)
    write_matrix(directory / "vectors.mat", snapshot.vectors)
    with open(directory / "active.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines("1\n" if a else "0\n" for a in snapshot.active)
    values: Dict[str, object] = {"kind": "snapshot", "snapshot_id": snapshot.snapshot_id,
                                 "count": len(snapshot), "dim": snapshot.dim}
    values.update(extra or {})
    write_manifest(directory, values)
    return directory


def load_snapshot(directory: PathLike) -> Snapshot:
    directory = Path(directory)
    manifest = read_manifest(directory)
    expect_kind(manifest, "snapshot", directory)
    ids = read_ids(directory / "ids.txt")
    matrix = read_matrix(directory / "vectors.mat").astype(np.float64)
    # stored as float32; restore exact unit rows
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    matrix = matrix / np.where(norms > 0, norms, 1.0)
    flags = (directory / "active.txt").read_text(encoding="utf-8").split()
    if len(flags) != len(ids) or any(f not in ("0", "1") for f in flags):
        raise SnapshotError(f"{directory}: active.txt does not match ids.txt")
    return Snapshot(manifest["snapshot_id"], ids, matrix, np.array([f == "1" for f in flags]))


def resolve_snapshot_dir(path: PathLike) -> Path:
    """A snapshot directory itself, or a refresh output directory with a CURRENT pointer."""
    path = Path(path)
    if (path / MANIFEST_NAME).exists():
        return path
    pointer = path / CURRENT_POINTER
    if pointer.exists():
        target = pointer.read_text(encoding="utf-8").strip()
        if not target:
            raise SnapshotError(f"{pointer} is empty")
        resolved = path / target
        if not (resolved / MANIFEST_NAME).exists():
            raise SnapshotError(f"{pointer} points at {resolved}, which is not a snapshot")
        return resolved
    raise SnapshotError(f"no snapshot found at {path}")


class SnapshotHandle:
    """
    The served snapshot. Readers take `handle.snapshot` once per request and use
    that object throughout; swap() replaces the reference under a lock, so a
    request never sees two snapshots.
    """

    def __init__(self, snapshot: Snapshot, source: Optional[Path] = None):
        self._snapshot = snapshot
        self._source = source
        self._lock = threading.Lock()

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    @property
    def source(self) -> Optional[Path]:
        return self._source

    def swap(self, snapshot: Snapshot, source: Optional[Path] = None) -> Snapshot:
        with self._lock:
            old = self._snapshot
            self._snapshot = snapshot
            self._source = source
        logger.info("snapshot swapped: %s -> %s", old.snapshot_id, snapshot.snapshot_id)
        return old

    def reload(self, path: Optional[PathLike] = None) -> Snapshot:
        """Load a snapshot (default: re-resolve the current source) and swap it in."""
        target = path if path is not None else self._source
        if target is None:
            raise SnapshotError("no snapshot directory to reload from")
        directory = resolve_snapshot_dir(target)
        fresh = load_snapshot(directory)
        self.swap(fresh, Path(target))
        return fresh

    @classmethod
    def open(cls, path: PathLike) -> "SnapshotHandle":
        return cls(load_snapshot(resolve_snapshot_dir(path)), Path(path))


def serve_http(snapshot_dir: PathLike, port: int, host: str = "0.0.0.0", debug: bool = False) -> None:
    from . import create_app

    app = create_app({"RECSYS_SNAPSHOT_DIR": str(snapshot_dir)})
    logger.info("serving snapshot %s on %s:%d",
                app.extensions["recsys"].snapshot.snapshot_id, host, port)
    app.run(host=host, port=port, debug=debug, threaded=True, use_reloader=False)
