"""
recsys/datamodel.py

Ingestion and preparation of marketplace data.

File formats (UTF-8, tab separated, one record per line):
  events:  user_id, item_id, signal token, ts (integer UTC seconds)
  ads:     item_id, category, subcategory, postcode, created_at, active (0|1), title, description
           (title/description escape backslash, tab and newline as \\\\, \\t, \\n)
  image features: binary, b"IMGF", u32 LE dimension D, then records of
           (u16 LE id length, UTF-8 id, D LE float32)
  signal weights: key=value, one signal token per line

Preparation operations are pure functions over immutable event logs.
"""
from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import read_keyvalue_file, write_keyvalue_file
from .errors import ConfigError, DataFormatError, DimensionMismatchError, UnknownSignalError
from .models import Ad, AdCorpus, Event, EventLog, SignalKind, SignalWeightConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SECONDS_PER_DAY = 86400
IMAGE_MAGIC = b"IMGF"


# -------------------------
# Events
# -------------------------
def parse_event_line(line: str, line_no: Optional[int] = None, path: Optional[str] = None) -> Event:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 4:
        raise DataFormatError(f"expected 4 tab-separated fields, got {len(parts)}",
                              path=path, line_no=line_no)
    user_id, item_id, token, ts_raw = parts
    if not user_id or not item_id:
        raise DataFormatError("empty user_id or item_id", path=path, line_no=line_no)
    try:
        signal = SignalKind.parse(token)
    except UnknownSignalError:
        raise UnknownSignalError(f"unknown signal token {token!r}",
                                 path=path, line_no=line_no, token=token) from None
    try:
        ts = int(ts_raw.strip())
    except ValueError:
        raise DataFormatError(f"timestamp is not an integer: {ts_raw!r}",
                              path=path, line_no=line_no, token=ts_raw) from None
    if ts < 0:
        raise DataFormatError(f"negative timestamp {ts}", path=path, line_no=line_no, token=ts_raw)
    return Event(user_id, item_id, signal, ts)


def load_events(path: PathLike) -> EventLog:
    """Read an event file in file order. Blank lines are skipped; anything else malformed is an error."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"event file not found: {path}")
    events: List[Event] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            events.append(parse_event_line(line, line_no=line_no, path=str(path)))
    logger.debug("Loaded %d events from %s", len(events), path)
    return tuple(events)


def dump_events(events: Iterable[Event], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(e.to_line() + "\n")


# -------------------------
# Ads
# -------------------------
def escape_text(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "")


def unescape_text(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def ad_to_line(ad: Ad) -> str:
    return "\t".join([
        ad.item_id, ad.category, ad.subcategory, ad.postcode,
        str(int(ad.created_at)), "1" if ad.active else "0",
        escape_text(ad.title), escape_text(ad.description),
    ])


def parse_ad_line(line: str, line_no: Optional[int] = None, path: Optional[str] = None) -> Ad:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 8:
        raise DataFormatError(f"expected 8 tab-separated fields, got {len(parts)}",
                              path=path, line_no=line_no)
    item_id, category, subcategory, postcode, created_raw, active_raw, title, desc = parts
    if not item_id:
        raise DataFormatError("empty item_id", path=path, line_no=line_no)
    try:
        created_at = int(created_raw)
    except ValueError:
        raise DataFormatError(f"created_at is not an integer: {created_raw!r}",
                              path=path, line_no=line_no, token=created_raw) from None
    if active_raw not in ("0", "1"):
        raise DataFormatError(f"active flag must be 0 or 1, got {active_raw!r}",
                              path=path, line_no=line_no, token=active_raw)
    return Ad(item_id=item_id, title=unescape_text(title), description=unescape_text(desc),
              category=category, subcategory=subcategory, postcode=postcode,
              created_at=created_at, active=active_raw == "1")


def load_ads(path: PathLike) -> AdCorpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ad corpus not found: {path}")
    ads: List[Ad] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            ads.append(parse_ad_line(line, line_no=line_no, path=str(path)))
    return AdCorpus(ads)


def dump_ads(ads: Iterable[Ad], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ad in ads:
            fh.write(ad_to_line(ad) + "\n")


# -------------------------
# Image features
# -------------------------
@dataclass(frozen=True, eq=False)
class ImageFeatures:
    """Precomputed image feature vectors, one row per item."""
    dim: int
    ids: Tuple[str, ...]
    matrix: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        if self.matrix.shape != (len(self.ids), self.dim):
            raise DimensionMismatchError(
                f"image matrix shape {self.matrix.shape} != ({len(self.ids)}, {self.dim})")
        object.__setattr__(self, "_index", {i: n for n, i in enumerate(self.ids)})
        if len(self._index) != len(self.ids):
            raise DataFormatError("duplicate item id in image features")

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, item_id: str) -> Optional[np.ndarray]:
        row = self._index.get(item_id)
        return None if row is None else self.matrix[row]


def load_image_features(path: PathLike) -> ImageFeatures:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image feature file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise DataFormatError(f"bad magic {raw[:4]!r}, expected {IMAGE_MAGIC!r}", path=str(path))
    if len(raw) < 8:
        raise DataFormatError("truncated header", path=str(path))
    (dim,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    ids: List[str] = []
    rows: List[np.ndarray] = []
    body = dim * 4
    while offset < len(raw):
        record = len(ids) + 1
        if offset + 2 > len(raw):
            raise DataFormatError(f"truncated record {record}", path=str(path), line_no=record)
        (id_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        if offset + id_len + body > len(raw):
            raise DataFormatError(f"truncated record {record}", path=str(path), line_no=record)
        try:
            item_id = raw[offset:offset + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"record {record}: item id is not UTF-8",
                                  path=str(path), line_no=record) from None
        offset += id_len
        rows.append(np.frombuffer(raw, dtype="<f4", count=dim, offset=offset))
        offset += body
        ids.append(item_id)
    matrix = np.vstack(rows).astype(np.float32) if rows else np.zeros((0, dim), dtype=np.float32)
    return ImageFeatures(dim=dim, ids=tuple(ids), matrix=matrix)


def dump_image_features(features: ImageFeatures, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<I", features.dim))
        for item_id, row in zip(features.ids, features.matrix):
            encoded = item_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


# -------------------------
# Signal weights
# -------------------------
def signal_weight(kind: SignalKind, cfg: SignalWeightConfig) -> float:
    return cfg.weight(kind)


def load_signal_weights(path: PathLike) -> SignalWeightConfig:
    raw = read_keyvalue_file(path)
    weights: Dict[SignalKind, float] = {}
    for token, value in raw.items():
        try:
            kind = SignalKind.parse(token)
        except UnknownSignalError:
            raise ConfigError(f"{path}: unknown signal {token!r}") from None
        try:
            weights[kind] = float(value)
        except ValueError:
            raise ConfigError(f"{path}: weight for {token} is not a number: {value!r}") from None
    return SignalWeightConfig(weights)


def dump_signal_weights(cfg: SignalWeightConfig, path: PathLike) -> None:
    write_keyvalue_file(path, {k.value: float(cfg.weights[k]) for k in SignalKind})


# -------------------------
# Preparation
# -------------------------
def utc_day(ts: int) -> date:
    """UTC calendar date of a timestamp; the meaning of "same day" everywhere."""
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).date()


def window(events: Sequence[Event], lookback_days: int, now: int) -> EventLog:
    """Keep events with now - ts <= lookback_days days (closed boundary)."""
    if lookback_days <= 0:
        raise ValueError(f"lookback_days must be > 0, got {lookback_days}")
    horizon = lookback_days * SECONDS_PER_DAY
    return tuple(e for e in events if now - e.ts <= horizon)


def select_signals(events: Sequence[Event], kinds: Iterable[SignalKind]) -> EventLog:
    keep = frozenset(kinds)
    return tuple(e for e in events if e.signal in keep)


def filter_sparse(events: Sequence[Event]) -> EventLog:
    """
    Drop events of users or items seen only once, repeated until nothing changes.
    Every surviving user and item has at least two events.
    """
    current: EventLog = tuple(events)
    rounds = 0
    while True:
        users = Counter(e.user_id for e in current)
        items = Counter(e.item_id for e in current)
        kept = tuple(e for e in current if users[e.user_id] >= 2 and items[e.item_id] >= 2)
        rounds += 1
        if len(kept) == len(current):
            break
        current = kept
    if events and not current:
        logger.warning("filter_sparse removed all %d events", len(events))
    logger.debug("filter_sparse: %d -> %d events in %d rounds", len(events), len(current), rounds)
    return current


def latest_timestamp(events: Sequence[Event]) -> Optional[int]:
    return max((e.ts for e in events), default=None)
