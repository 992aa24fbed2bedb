# recsys/models.py
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Mapping, Tuple

import numpy as np

from .errors import ConfigError, DataFormatError, UnknownSignalError


class SignalKind(str, enum.Enum):
    """User actions on an ad, from plain page views up to contacting the seller."""
    VIEW_AD = "view_ad"
    SHOW_INTEREST = "show_interest"
    FOLLOW_SELLER = "follow_seller"
    FAVORITE_AD = "favorite_ad"
    SEND_MESSAGE = "send_message"
    SHOW_PHONE = "show_phone"
    CONTACT_SELLER = "contact_seller"

    @classmethod
    def parse(cls, token: str) -> "SignalKind":
        try:
            return cls(token.strip())
        except ValueError:
            raise UnknownSignalError(
                f"unknown signal token {token!r}", token=token) from None

    @property
    def is_conversion(self) -> bool:
        return self in CONVERSION_SIGNALS


CONVERSION_SIGNALS = frozenset({SignalKind.SEND_MESSAGE,
                                SignalKind.SHOW_PHONE,
                                SignalKind.CONTACT_SELLER})

# the two signals closest to a transaction; only these label hybrid training pairs
PAIR_SIGNALS = frozenset({SignalKind.SEND_MESSAGE, SignalKind.SHOW_PHONE})


@dataclass(frozen=True)
class Event:
    user_id: str
    item_id: str
    signal: SignalKind
    ts: int

    def __post_init__(self):
        # integer UTC seconds; ints are always finite
        if not isinstance(self.ts, int) or isinstance(self.ts, bool):
            raise DataFormatError(f"timestamp must be integer seconds, got {self.ts!r}")
        if self.ts < 0:
            raise DataFormatError(f"timestamp must be non-negative, got {self.ts!r}")

    def to_line(self) -> str:
        return f"{self.user_id}\t{self.item_id}\t{self.signal.value}\t{int(self.ts)}"


# Event logs are plain tuples: ordered, immutable, hashable.
EventLog = Tuple[Event, ...]


@dataclass(frozen=True)
class Ad:
    item_id: str
    title: str
    description: str
    category: str
    subcategory: str
    postcode: str
    created_at: int
    active: bool = True

    @property
    def label(self) -> str:
        """Flat (category, subcategory) classifier label."""
        return f"{self.category}/{self.subcategory}"

    @property
    def text(self) -> str:
        return f"{self.title} {self.description}"


class AdCorpus(Mapping[str, Ad]):
    """
    Ads keyed by item_id, in file order.

    Validation on construction:
      - item ids are unique
      - every subcategory has exactly one parent category
    """

    def __init__(self, ads: Iterable[Ad]):
        self._ads: Dict[str, Ad] = {}
        parents: Dict[str, str] = {}
        for ad in ads:
            if ad.item_id in self._ads:
                raise DataFormatError(f"duplicate item_id {ad.item_id!r} in ad corpus")
            parent = parents.setdefault(ad.subcategory, ad.category)
            if parent != ad.category:
                raise DataFormatError(
                    f"subcategory {ad.subcategory!r} appears under categories "
                    f"{parent!r} and {ad.category!r}")
            self._ads[ad.item_id] = ad

    def __getitem__(self, item_id: str) -> Ad:
        return self._ads[item_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._ads)

    def __len__(self) -> int:
        return len(self._ads)

    def __repr__(self):
        return f"<AdCorpus {len(self)} ads>"

    def active_ids(self) -> Tuple[str, ...]:
        return tuple(i for i, ad in self._ads.items() if ad.active)

    def labels(self) -> Tuple[str, ...]:
        return tuple(sorted({ad.label for ad in self._ads.values()}))


DEFAULT_SIGNAL_WEIGHTS: Dict[SignalKind, float] = {
    SignalKind.VIEW_AD: 1.0,
    SignalKind.SHOW_INTEREST: 2.0,
    SignalKind.FOLLOW_SELLER: 3.0,
    SignalKind.FAVORITE_AD: 3.0,
    SignalKind.SEND_MESSAGE: 5.0,
    SignalKind.SHOW_PHONE: 5.0,
    SignalKind.CONTACT_SELLER: 5.0,
}


@dataclass(frozen=True)
class SignalWeightConfig:
    """Per-signal confidence weight. Conversion signals never weigh less than a view."""
    weights: Mapping[SignalKind, float] = field(
        default_factory=lambda: dict(DEFAULT_SIGNAL_WEIGHTS))

    def __post_init__(self):
        missing = [k.value for k in SignalKind if k not in self.weights]
        if missing:
            raise ConfigError(f"signal weights missing for: {', '.join(missing)}")
        for kind, w in self.weights.items():
            if not isinstance(kind, SignalKind):
                raise ConfigError(f"not a signal kind: {kind!r}")
            if not (isinstance(w, (int, float)) and math.isfinite(w) and w > 0):
                raise ConfigError(f"weight for {kind.value} must be > 0, got {w!r}")
        view = self.weights[SignalKind.VIEW_AD]
        for kind in CONVERSION_SIGNALS:
            if self.weights[kind] < view:
                raise ConfigError(
                    f"conversion signal {kind.value} weighs {self.weights[kind]} "
                    f"< view_ad weight {view}")

    @classmethod
    def default(cls) -> "SignalWeightConfig":
        return cls(dict(DEFAULT_SIGNAL_WEIGHTS))

    @classmethod
    def uniform(cls, value: float = 1.0) -> "SignalWeightConfig":
        return cls({k: float(value) for k in SignalKind})

    def weight(self, kind: SignalKind) -> float:
        return float(self.weights[kind])


@dataclass(frozen=True)
class PairExample:
    item_a: str
    item_b: str
    label: int  # 1 positive, 0 negative

    def __post_init__(self):
        if self.item_a == self.item_b:
            raise ValueError(f"pair items must differ, got {self.item_a!r} twice")
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label!r}")

    @property
    def positive(self) -> bool:
        return self.label == 1

    def swapped(self) -> "PairExample":
        return PairExample(self.item_b, self.item_a, self.label)

    def key(self) -> Tuple[str, str]:
        """Order-free identity of the pair."""
        return (self.item_a, self.item_b) if self.item_a < self.item_b else (self.item_b, self.item_a)


@dataclass(frozen=True, eq=False)
class ItemRepresentation:
    item_id: str
    vector: np.ndarray  # shape (dim,), unit norm

    def __repr__(self):
        return f"<ItemRepresentation {self.item_id}>"
