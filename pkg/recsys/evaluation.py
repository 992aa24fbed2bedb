"""
recsys/evaluation.py

Offline evaluation: held-out pair splits, HR@n over sampled distractors,
single-module baseline scorers, feature-group importance and the eval report.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import (Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence,
                    Tuple, Union)

import numpy as np

from .config import write_keyvalue_file
from .datamodel import load_ads, load_image_features
from .errors import EmptyInputError
from .hybrid import GROUPS, HybridModel, load_pairs
from .imagepipe import ImageProjector, image_embed_many
from .mf import EmbeddingTable, FactorModel
from .models import Event, EventLog, ItemRepresentation, PairExample
from .synthgen import ADS_FILE, IMAGES_FILE
from .textpipe import TextClassifier, WordVectors, text_embed_many

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

Scorer = Callable[[str, str], float]

DEFAULT_NS: Tuple[int, ...] = (1, 5, 10)
DEFAULT_DISTRACTORS = 100


def _stable_hash(*parts: object) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


# -------------------------
# Splits
# -------------------------
def split_pairs(positives: Sequence[PairExample], holdout_fraction: float,
                seed: int = 0) -> Tuple[Tuple[PairExample, ...], Tuple[PairExample, ...]]:
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = len(positives)
    if n < 2:
        raise EmptyInputError(f"need at least 2 pairs to split, got {n}")
    # decimal fractions like 0.29 are taken at face value, not as the nearest binary float
    n_test = max(1, math.floor(Fraction(str(float(holdout_fraction))) * n))
    if n_test > n - 1:
        raise EmptyInputError(f"holdout of {n_test} leaves no training pairs out of {n}")
    rng = np.random.default_rng(seed)
    test_rows = set(int(i) for i in rng.permutation(n)[:n_test])
    train = tuple(p for i, p in enumerate(positives) if i not in test_rows)
    test = tuple(p for i, p in enumerate(positives) if i in test_rows)
    return train, test


def cold_start_split(events: Sequence[Event], fraction: float,
                     seed: int = 0) -> Tuple[EventLog, FrozenSet[str]]:
    """Hide every event of a random fraction of the items that have events."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    items = sorted({e.item_id for e in events})
    if not items:
        raise EmptyInputError("no events to split")
    rng = np.random.default_rng(seed)
    n_hidden = max(1, int(round(fraction * len(items))))
    hidden = frozenset(items[int(i)] for i in rng.choice(len(items), size=n_hidden, replace=False))
    kept = tuple(e for e in events if e.item_id not in hidden)
    logger.info("cold-start split: hid %d of %d items (%d -> %d events)",
                len(hidden), len(items), len(events), len(kept))
    return kept, hidden


def anchored_at(pairs: Iterable[PairExample], anchors: FrozenSet[str]) -> Tuple[PairExample, ...]:
    """Pairs touching an anchor item, reoriented so item_a is the anchor."""
    out = []
    for p in pairs:
        if p.item_a in anchors:
            out.append(p)
        elif p.item_b in anchors:
            out.append(p.swapped())
    return tuple(out)


# -------------------------
# Scorers
# -------------------------
class EmbeddingScorer:
    """
    Cosine similarity between table rows. Items missing from the table get a
    deterministic pseudo-random score in [-1, 1], symmetric in the pair.
    """

    def __init__(self, table: EmbeddingTable, seed: int = 0):
        self.table = table
        self.seed = seed
        norms = np.linalg.norm(table.matrix, axis=1, keepdims=True) if len(table) else None
        self._unit = (table.matrix / np.where(norms > 0, norms, 1.0)) if norms is not None else None

    def _fallback(self, a: str, b: str) -> float:
        lo, hi = (a, b) if a < b else (b, a)
        return 2.0 * (_stable_hash(self.seed, lo, hi) / 2.0 ** 64) - 1.0

    def _row(self, item: str) -> Optional[int]:
        return self.table._index.get(item)

    def __call__(self, a: str, b: str) -> float:
        ra, rb = self._row(a), self._row(b)
        if ra is None or rb is None:
            return self._fallback(a, b)
        return float(self._unit[ra] @ self._unit[rb])

    def many(self, a: str, candidates: Sequence[str]) -> np.ndarray:
        ra = self._row(a)
        if ra is None:
            return np.array([self._fallback(a, c) for c in candidates])
        out = np.empty(len(candidates))
        rows = [self._row(c) for c in candidates]
        for n, (c, r) in enumerate(zip(candidates, rows)):
            out[n] = self._fallback(a, c) if r is None else float(self._unit[ra] @ self._unit[r])
        return out


def embedding_scorer(table: EmbeddingTable, seed: int = 0) -> EmbeddingScorer:
    return EmbeddingScorer(table, seed=seed)


def representation_scorer(reps: Iterable[ItemRepresentation], seed: int = 0) -> EmbeddingScorer:
    reps = list(reps)
    dim = reps[0].vector.shape[0] if reps else 1
    matrix = np.vstack([r.vector for r in reps]) if reps else np.zeros((0, dim))
    return EmbeddingScorer(EmbeddingTable(tuple(r.item_id for r in reps), matrix), seed=seed)


def random_scorer(seed: int = 0) -> EmbeddingScorer:
    return EmbeddingScorer(EmbeddingTable((), np.zeros((0, 1))), seed=seed)


def module_scorers(out_dir: PathLike, data_dir: PathLike, seed: int = 0) -> Dict[str, EmbeddingScorer]:
    """
    Scorers for one refresh output: the served snapshot ("hybrid") and each
    stage-one module on its own ("cf", "text", "image"). Items a module has no
    vector for are scored at random.
    """
    from .pipeline import ARTIFACTS_DIR
    from .serve import load_snapshot, resolve_snapshot_dir

    artifacts = Path(out_dir) / ARTIFACTS_DIR
    data_dir = Path(data_dir)
    snapshot = load_snapshot(resolve_snapshot_dir(out_dir))
    ads = load_ads(data_dir / ADS_FILE)
    ordered = [ads[i] for i in sorted(ads)]
    wv = WordVectors.load(artifacts / "word2vec")
    text = text_embed_many(ordered, TextClassifier.load(artifacts / "textcnn"), wv)
    image = image_embed_many(load_image_features(data_dir / IMAGES_FILE),
                             ImageProjector.load(artifacts / "image_projector"), sorted(ads))
    return {
        "hybrid": embedding_scorer(EmbeddingTable(snapshot.item_ids, np.asarray(snapshot.vectors)), seed),
        "cf": embedding_scorer(FactorModel.load(artifacts / "als").item_table(), seed),
        "text": embedding_scorer(text, seed),
        "image": embedding_scorer(image, seed),
    }


def _score_candidates(scorer: Scorer, a: str, candidates: Sequence[str]) -> np.ndarray:
    many = getattr(scorer, "many", None)
    if many is not None:
        return np.asarray(many(a, candidates), dtype=np.float64)
    return np.array([scorer(a, c) for c in candidates], dtype=np.float64)


# -------------------------
# Hit rate
# -------------------------
def pair_rank(scorer: Scorer, a: str, b: str, distractors: Sequence[str]) -> int:
    """1-based rank of b among {b} + distractors by scorer(a, .), ties broken by id ascending."""
    scores = _score_candidates(scorer, a, [b, *distractors])
    s_b = scores[0]
    others = scores[1:]
    ahead = int(np.count_nonzero(others > s_b))
    ties = sum(1 for d, s in zip(distractors, others) if s == s_b and d < b)
    return 1 + ahead + ties


def draw_distractors(universe: Sequence[str], a: str, b: str, n_distractors: int,
                     seed: int) -> List[str]:
    """Uniform sample without replacement from universe minus {a, b}; depends only on (seed, a, b)."""
    rng = np.random.default_rng([seed % 2 ** 63, _stable_hash(a, b) % 2 ** 63])
    size = min(len(universe), n_distractors + 2)
    picked = rng.choice(len(universe), size=size, replace=False)
    out = [universe[int(i)] for i in picked if universe[int(i)] not in (a, b)]
    return out[:n_distractors]


def hit_rates(scorer: Scorer, test_pairs: Sequence[PairExample], universe: Iterable[str],
              ns: Sequence[int] = DEFAULT_NS, n_distractors: int = DEFAULT_DISTRACTORS,
              seed: int = 0) -> Dict[int, float]:
    if not test_pairs:
        raise EmptyInputError("empty test set")
    if any(n < 1 for n in ns):
        raise ValueError(f"every n must be >= 1, got {list(ns)}")
    pool = sorted(set(universe))
    ranks = np.array([pair_rank(scorer, p.item_a, p.item_b,
                                draw_distractors(pool, p.item_a, p.item_b, n_distractors, seed))
                      for p in test_pairs])
    return {int(n): float(np.mean(ranks <= n)) for n in sorted(set(ns))}


def hit_rate(scorer: Scorer, test_pairs: Sequence[PairExample], n: int,
             n_distractors: int = DEFAULT_DISTRACTORS, seed: int = 0, *,
             universe: Iterable[str]) -> float:
    return hit_rates(scorer, test_pairs, universe, (n,), n_distractors, seed)[n]


def delta_ctr(ctr_a: float, ctr_b: float) -> float:
    if not ctr_a > 0:
        raise ValueError(f"ctr_a must be > 0, got {ctr_a}")
    return (ctr_b - ctr_a) / ctr_a


def feature_importance(model: HybridModel) -> Dict[str, float]:
    """Share of the first tower layer's column-norm mass falling on each feature group."""
    weight = model.tower[0].weight.detach().double().numpy()
    col_norms = np.linalg.norm(weight, axis=0)
    mass = np.array([col_norms[s].sum() for s in model.group_slices()])
    total = mass.sum()
    if total <= 0:
        return {g: 1.0 / len(GROUPS) for g in GROUPS}
    return {g: float(m / total) for g, m in zip(GROUPS, mass)}


# -------------------------
# Report
# -------------------------
@dataclass(frozen=True)
class EvalReport:
    model_id: str
    hit_rates: Mapping[int, float]
    n_distractors: int
    seed: int
    n_test: int
    importance: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        previous = 0.0
        for n in sorted(self.hit_rates):
            hr = self.hit_rates[n]
            if not 0.0 <= hr <= 1.0:
                raise ValueError(f"HR@{n}={hr} outside [0, 1]")
            if hr < previous:
                raise ValueError(f"HR@{n}={hr} decreases from {previous}")
            previous = hr

    @property
    def candidate_set_size(self) -> int:
        return self.n_distractors + 1

    def to_keyvalue(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "model": self.model_id,
            "seed": self.seed,
            "distractors": self.n_distractors,
            "candidates": self.candidate_set_size,
            "test_pairs": self.n_test,
        }
        for n in sorted(self.hit_rates):
            out[f"hr@{n}"] = f"{self.hit_rates[n]:.6f}"
        for g, v in self.importance.items():
            out[f"importance.{g}"] = f"{v:.6f}"
        return out

    def to_text(self) -> str:
        lines = [f"model {self.model_id}: {self.n_test} test pairs, "
                 f"{self.candidate_set_size} candidates per pair, seed {self.seed}"]
        lines += [f"  HR@{n:<3d} {self.hit_rates[n]:.4f}" for n in sorted(self.hit_rates)]
        if self.importance:
            lines.append("  feature-group weight share:")
            lines += [f"    {g:<9s}{v:.3f}" for g, v in self.importance.items()]
        return "\n".join(lines) + "\n"

    def write(self, directory: PathLike, stem: str = "eval_report") -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text_path = directory / f"{stem}.txt"
        kv_path = directory / f"{stem}.kv"
        text_path.write_text(self.to_text(), encoding="utf-8")
        write_keyvalue_file(kv_path, self.to_keyvalue())
        return text_path, kv_path


def evaluate_snapshot(model_dir: PathLike, pairs_path: PathLike, ns: Sequence[int] = DEFAULT_NS,
                      n_distractors: int = DEFAULT_DISTRACTORS, seed: int = 0) -> EvalReport:
    """HR@n of a served snapshot on a pair file; distractors drawn from its active items."""
    from .serve import load_snapshot, resolve_snapshot_dir

    directory = resolve_snapshot_dir(model_dir)
    snapshot = load_snapshot(directory)
    pairs = [p for p in load_pairs(pairs_path) if p.positive]
    usable = [p for p in pairs if p.item_a in snapshot and p.item_b in snapshot]
    if len(usable) < len(pairs):
        logger.warning("skipping %d test pairs with items outside snapshot %s",
                       len(pairs) - len(usable), snapshot.snapshot_id)
    table = EmbeddingTable(snapshot.item_ids, np.asarray(snapshot.vectors))
    rates = hit_rates(embedding_scorer(table, seed=seed), usable, snapshot.active_ids(),
                      ns, n_distractors, seed)
    importance: Dict[str, float] = {}
    if (directory / "hybrid").is_dir():
        importance = feature_importance(HybridModel.load(directory / "hybrid"))
    report = EvalReport(snapshot.snapshot_id, rates, n_distractors, seed, len(usable), importance)
    logger.info("evaluated %s: %s", snapshot.snapshot_id,
                ", ".join(f"HR@{n}={v:.4f}" for n, v in sorted(rates.items())))
    return report
