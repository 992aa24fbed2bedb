"""
recsys/hybrid.py

Second-stage fusion model.

Every item gets a FeatureBundle of frozen first-stage embeddings (cf, text, image,
location) with a presence mask. A per-group attention gate rescales the present
groups, a towering network maps the concatenation to a unit-norm representation,
and two items are compared by cosine. Training uses same-day conversion pairs as
positives and anchor-preserving negative sampling, with one shared (Siamese) network.
"""
from __future__ import annotations

import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import utc_day
from .errors import DataFormatError, EmptyInputError, NegativeSamplingError, UnknownItemError
from .mf import EmbeddingTable, FactorModel
from .models import PAIR_SIGNALS, Ad, Event, ItemRepresentation, PairExample
from .storage import expect_kind, format_int_list, load_state, parse_int_list, save_state

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GROUPS: Tuple[str, ...] = ("cf", "text", "image", "location")
DEFAULT_GROUP_DIMS: Tuple[int, ...] = (100, 100, 100, 10)
DEFAULT_TOWER: Tuple[int, ...] = (256, 128, 100)
VARIANTS = ("attention", "linear")


# -------------------------
# Feature bundles
# -------------------------
@dataclass(frozen=True, eq=False)
class FeatureBundle:
    item_id: str
    text: np.ndarray
    cf: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    location: Optional[np.ndarray] = None

    @property
    def presence(self) -> Tuple[bool, bool, bool, bool]:
        return (self.cf is not None, self.text is not None,
                self.image is not None, self.location is not None)

    def group(self, name: str) -> Optional[np.ndarray]:
        return getattr(self, name)

    def without(self, name: str) -> "FeatureBundle":
        """Copy with one group marked absent (text cannot be dropped)."""
        if name == "text":
            raise ValueError("the text group is always present")
        values = {g: self.group(g) for g in GROUPS}
        values[name] = None
        return FeatureBundle(self.item_id, **values)


def _as_table(source: Union[FactorModel, EmbeddingTable, None]) -> Optional[EmbeddingTable]:
    if isinstance(source, FactorModel):
        return source.item_table()
    return source


def _unit(v) -> Optional[np.ndarray]:
    # groups enter the tower on a common scale; zero vectors stay zero
    if v is None:
        return None
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def assemble(item_id: str, mf_model: Union[FactorModel, EmbeddingTable, None],
             text_embeddings: EmbeddingTable, image_embeddings: Optional[EmbeddingTable],
             location_table: Optional[EmbeddingTable], ads: Mapping[str, Ad]) -> FeatureBundle:
    ad = ads.get(item_id)
    if ad is None:
        raise UnknownItemError([item_id])
    text = text_embeddings.get(item_id)
    if text is None:
        raise UnknownItemError([item_id], what="text-embedded item")
    cf_table = _as_table(mf_model)

    def lookup(table: Optional[EmbeddingTable], key: str) -> Optional[np.ndarray]:
        return None if table is None else _unit(table.get(key))

    return FeatureBundle(
        item_id=item_id,
        text=_unit(text),
        cf=lookup(cf_table, item_id),
        image=lookup(image_embeddings, item_id),
        location=lookup(location_table, ad.postcode),
    )


def assemble_all(ads: Mapping[str, Ad], mf_model, text_embeddings: EmbeddingTable,
                 image_embeddings: Optional[EmbeddingTable],
                 location_table: Optional[EmbeddingTable],
                 item_ids: Optional[Iterable[str]] = None) -> Dict[str, FeatureBundle]:
    cf_table = _as_table(mf_model)
    ids = sorted(ads) if item_ids is None else list(item_ids)
    bundles = {i: assemble(i, cf_table, text_embeddings, image_embeddings, location_table, ads)
               for i in ids}
    counts = np.sum([b.presence for b in bundles.values()], axis=0) if bundles else np.zeros(4)
    logger.info("assembled %d bundles; group coverage %s", len(bundles),
                ", ".join(f"{g}={int(c)}" for g, c in zip(GROUPS, counts)))
    return bundles


def infer_group_dims(bundles: Iterable[FeatureBundle]) -> Tuple[int, ...]:
    dims: List[Optional[int]] = [None] * len(GROUPS)
    for b in bundles:
        for g, name in enumerate(GROUPS):
            v = b.group(name)
            if dims[g] is None and v is not None:
                dims[g] = int(v.shape[0])
        if all(d is not None for d in dims):
            break
    return tuple(d if d is not None else DEFAULT_GROUP_DIMS[g] for g, d in enumerate(dims))


def stack_bundles(bundles: Sequence[FeatureBundle], group_dims: Sequence[int],
                  dtype: torch.dtype = torch.float32) -> Tuple[List[torch.Tensor], torch.Tensor]:
    """Group tensors (absent rows zero) and a (B, 4) boolean presence mask."""
    groups: List[torch.Tensor] = []
    for name, dim in zip(GROUPS, group_dims):
        block = np.zeros((len(bundles), dim))
        for n, b in enumerate(bundles):
            v = b.group(name)
            if v is not None:
                if v.shape != (dim,):
                    raise ValueError(f"{b.item_id}: {name} vector has shape {v.shape}, expected ({dim},)")
                block[n] = v
        groups.append(torch.as_tensor(block, dtype=dtype))
    mask = torch.as_tensor(np.array([b.presence for b in bundles], dtype=bool).reshape(-1, len(GROUPS)))
    return groups, mask


# -------------------------
# Pairs
# -------------------------
def build_pairs(events: Iterable[Event]) -> Tuple[PairExample, ...]:
    """Unordered item pairs one user converted on (message or phone) on the same UTC day."""
    baskets: Dict[Tuple[str, object], Set[str]] = defaultdict(set)
    for e in events:
        if e.signal in PAIR_SIGNALS:
            baskets[(e.user_id, utc_day(e.ts))].add(e.item_id)
    keys: Set[Tuple[str, str]] = set()
    for items in baskets.values():
        keys.update(itertools.combinations(sorted(items), 2))
    return tuple(PairExample(a, b, 1) for a, b in sorted(keys))


def sample_negatives(positives: Sequence[PairExample], universe: Iterable[str], ratio: int = 4,
                     seed: int = 0, max_retries: int = 100) -> Tuple[PairExample, ...]:
    """For each positive (a, b) draw `ratio` partners x for the same anchor a, never a positive pair."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    items = sorted(set(universe))
    if not items:
        raise NegativeSamplingError("empty item universe")
    taken = {p.key() for p in positives if p.positive}
    rng = np.random.default_rng(seed)
    out: List[PairExample] = []
    for p in positives:
        a = p.item_a
        for _ in range(ratio):
            for _attempt in range(max_retries + 1):
                x = items[int(rng.integers(len(items)))]
                if x != a and (min(a, x), max(a, x)) not in taken:
                    out.append(PairExample(a, x, 0))
                    break
            else:
                raise NegativeSamplingError(
                    f"no negative partner for {a!r} after {max_retries} retries "
                    f"(universe of {len(items)} items)")
    return tuple(out)


def write_pairs(pairs: Iterable[PairExample], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{p.item_a}\t{p.item_b}\t{p.label}\n")


def load_pairs(path: PathLike) -> Tuple[PairExample, ...]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pair file not found: {path}")
    pairs: List[PairExample] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise DataFormatError("expected item_a<TAB>item_b<TAB>0|1",
                                      path=str(path), line_no=line_no)
            try:
                pairs.append(PairExample(parts[0], parts[1], int(parts[2])))
            except ValueError as e:
                raise DataFormatError(str(e), path=str(path), line_no=line_no) from None
    return tuple(pairs)


# -------------------------
# Model
# -------------------------
class HybridModel(nn.Module):
    """
    Attention gate over feature groups followed by a towering network.

    variant "attention": score_g = mean(w_g * v_g) + b_g over present groups, softmax,
    each group scaled by n_groups * weight_g. variant "linear": uniform gates over the
    present groups and a single linear layer instead of the tower.
    """

    def __init__(self, group_dims: Sequence[int] = DEFAULT_GROUP_DIMS,
                 tower: Sequence[int] = DEFAULT_TOWER, variant: str = "attention", tau: float = 5.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown hybrid variant {variant!r}")
        if len(group_dims) != len(GROUPS):
            raise ValueError(f"expected {len(GROUPS)} group dims, got {len(group_dims)}")
        if not tau > 0:
            raise ValueError(f"tau must be > 0, got {tau}")
        self.group_dims = tuple(int(d) for d in group_dims)
        self.variant = variant
        self.gate_weights = nn.ParameterList(nn.Parameter(torch.zeros(d)) for d in self.group_dims)
        self.gate_bias = nn.Parameter(torch.zeros(len(GROUPS)))
        widths = (sum(self.group_dims),) + (tuple(int(w) for w in tower) if variant == "attention"
                                            else (int(tower[-1]),))
        self.tower_widths = widths[1:]
        self.tower = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))
        self.loss_history: Tuple[float, ...] = ()

    @property
    def input_dim(self) -> int:
        return sum(self.group_dims)

    @property
    def output_dim(self) -> int:
        return self.tower_widths[-1]

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def group_slices(self) -> List[slice]:
        bounds = np.cumsum((0,) + self.group_dims)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def attention_weights(self, groups: Sequence[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        if self.variant == "linear":
            present = mask.to(groups[0].dtype)
            return present / present.sum(dim=1, keepdim=True)
        scores = torch.stack([(w * v).mean(dim=1) for w, v in zip(self.gate_weights, groups)], dim=1)
        scores = (scores + self.gate_bias).masked_fill(~mask, float("-inf"))
        return F.softmax(scores, dim=1)

    def forward(self, groups: Sequence[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        weights = self.attention_weights(groups, mask)
        scale = weights * len(GROUPS) * mask.to(weights.dtype)
        x = torch.cat([v * scale[:, g:g + 1] for g, v in enumerate(groups)], dim=1)
        for layer in self.tower[:-1]:
            x = F.relu(layer(x))
        return F.normalize(self.tower[-1](x), dim=1)

    def pair_logits(self, a: Tuple[Sequence[torch.Tensor], torch.Tensor],
                    b: Tuple[Sequence[torch.Tensor], torch.Tensor]) -> torch.Tensor:
        ra = self.forward(*a)
        rb = self.forward(*b)
        return self.tau * (ra * rb).sum(dim=1)

    def save(self, directory: PathLike) -> None:
        save_state(directory, self.state_dict(), {
            "kind": "hybrid_model",
            "variant": self.variant,
            "group_dims": format_int_list(self.group_dims),
            "tower": format_int_list(self.tower_widths),
        })

    @classmethod
    def load(cls, directory: PathLike) -> "HybridModel":
        manifest, state = load_state(directory)
        expect_kind(manifest, "hybrid_model", directory)
        model = cls(parse_int_list(manifest["group_dims"]), parse_int_list(manifest["tower"]),
                    variant=manifest.get("variant", "attention"))
        model.load_state_dict(state)
        model.eval()
        return model


def pair_loss(model: HybridModel, a, b, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of sigmoid(tau * cos(r_a, r_b)) against the pair labels."""
    return F.binary_cross_entropy_with_logits(model.pair_logits(a, b), labels)


# -------------------------
# Training
# -------------------------
def hybrid_fit(bundles: Mapping[str, FeatureBundle], pairs: Sequence[PairExample], epochs: int = 10,
               step: float = 0.05, seed: int = 0, momentum: float = 0.9, batch_size: int = 64,
               cf_dropout: float = 0.0, variant: str = "attention", tau: float = 5.0,
               group_dims: Optional[Sequence[int]] = None, tower: Sequence[int] = DEFAULT_TOWER,
               clip_norm: float = 5.0) -> HybridModel:
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    if not 0.0 <= cf_dropout < 1.0:
        raise ValueError(f"cf_dropout must be in [0, 1), got {cf_dropout}")
    referenced = sorted({i for p in pairs for i in (p.item_a, p.item_b)})
    missing = [i for i in referenced if i not in bundles]
    if missing:
        raise UnknownItemError(missing, what="bundle for item")
    labels_seen = {p.label for p in pairs}
    if labels_seen != {0, 1}:
        raise EmptyInputError("training pairs need at least one positive and one negative")

    if group_dims is None:
        group_dims = infer_group_dims(bundles[i] for i in referenced)
    index = {item: n for n, item in enumerate(referenced)}
    groups, mask = stack_bundles([bundles[i] for i in referenced], group_dims)
    a_idx = torch.tensor([index[p.item_a] for p in pairs], dtype=torch.long)
    b_idx = torch.tensor([index[p.item_b] for p in pairs], dtype=torch.long)
    y = torch.tensor([float(p.label) for p in pairs])

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = HybridModel(group_dims, tower, variant=variant, tau=tau)
    optimizer = torch.optim.SGD(model.parameters(), lr=step, momentum=momentum)

    def side(idx: torch.Tensor, drop: Optional[np.ndarray] = None):
        m = mask[idx]
        if drop is not None:
            m = m.clone()
            m[:, 0] &= ~torch.from_numpy(drop)
        return [g[idx] for g in groups], m

    def dataset_loss() -> float:
        with torch.no_grad():
            return float(pair_loss(model, side(a_idx), side(b_idx), y))

    history = [dataset_loss()]
    logger.info("hybrid (%s): %d pairs over %d items, initial loss=%.4f",
                variant, len(pairs), len(referenced), history[0])
    n = len(pairs)
    for epoch in range(epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            drop_a = drop_b = None
            if cf_dropout > 0:
                drop_a = rng.random(len(idx)) < cf_dropout
                drop_b = rng.random(len(idx)) < cf_dropout
            loss = pair_loss(model, side(a_idx[idx], drop_a), side(b_idx[idx], drop_b), y[idx])
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
            optimizer.step()
        model.eval()
        history.append(dataset_loss())
        logger.info("hybrid epoch %d/%d loss=%.4f tau=%.3f", epoch + 1, epochs, history[-1],
                    float(model.tau))
    model.loss_history = tuple(history)
    return model


# -------------------------
# Inference
# -------------------------
def attention(bundle: FeatureBundle, model: HybridModel) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    groups, mask = stack_bundles([bundle], model.group_dims, dtype=dtype)
    with torch.no_grad():
        return model.attention_weights(groups, mask)[0].double().numpy()


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.where(norms > 0, norms, 1.0)


def represent_many(bundles: Sequence[FeatureBundle], model: HybridModel,
                   batch_size: int = 512) -> List[ItemRepresentation]:
    bundles = list(bundles)
    dtype = next(model.parameters()).dtype
    out: List[ItemRepresentation] = []
    with torch.no_grad():
        for start in range(0, len(bundles), batch_size):
            chunk = bundles[start:start + batch_size]
            groups, mask = stack_bundles(chunk, model.group_dims, dtype=dtype)
            # renormalize in float64 so serving sees unit rows to 1e-6
            vectors = _unit_rows(model(groups, mask).double().numpy())
            out.extend(ItemRepresentation(b.item_id, v) for b, v in zip(chunk, vectors))
    return out


def represent(bundle: FeatureBundle, model: HybridModel) -> ItemRepresentation:
    return represent_many([bundle], model)[0]


def score(r_a: ItemRepresentation, r_b: ItemRepresentation) -> float:
    return float(np.dot(r_a.vector, r_b.vector))
