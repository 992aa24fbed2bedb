"""
recsys/synthgen.py

Seeded synthetic marketplace with known latent structure.

Generative model:
  - every subcategory owns a disjoint topic vocabulary; titles and descriptions draw
    mostly from it and otherwise from a shared background vocabulary
  - items carry a hidden "style" inside their subcategory; style never shows in text or
    image, so only behaviour can recover it
  - users have an affinity over subcategories and a home location cluster; each session
    happens on one day and browses items of one (subcategory, style) intent, weighted by a
    location-cluster kernel
  - each browsed item fires every signal independently with its funnel probability
  - image features are a fixed random linear expansion of the item's topic mixture plus
    Gaussian noise
  - a cold_start_fraction of items never receives events
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import numpy as np

from .config import parse_value, read_keyvalue_file
from .datamodel import (ImageFeatures, dump_ads, dump_events, dump_image_features,
                        dump_signal_weights)
from .errors import ConfigError
from .models import Ad, AdCorpus, Event, EventLog, SignalKind, SignalWeightConfig

logger = logging.getLogger(__name__)

DEFAULT_FUNNEL: Dict[SignalKind, float] = {
    SignalKind.VIEW_AD: 1.0,
    SignalKind.SHOW_INTEREST: 0.3,
    SignalKind.FOLLOW_SELLER: 0.05,
    SignalKind.FAVORITE_AD: 0.1,
    SignalKind.SEND_MESSAGE: 0.25,
    SignalKind.SHOW_PHONE: 0.15,
    SignalKind.CONTACT_SELLER: 0.05,
}

# file names written into a data directory; `refresh` reads the same names
ADS_FILE = "ads.tsv"
EVENTS_FILE = "events.tsv"
IMAGES_FILE = "image_features.imgf"
WEIGHTS_FILE = "signal_weights.txt"

_CONSONANTS = "bdfghklmnprstvz"
_VOWELS = "aeiouy"


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 300
    n_items: int = 400
    n_categories: int = 3
    n_subcats_per_category: int = 3
    n_postcodes: int = 12
    n_location_clusters: int = 3
    # total topic vocabulary, split evenly and disjointly across subcategories
    vocab_size: int = 270
    background_vocab_size: int = 40
    topic_purity: float = 0.85
    title_len: int = 6
    desc_len: int = 20
    image_dim: int = 2048
    image_noise: float = 0.5
    days: int = 20
    seed: int = 0
    cold_start_fraction: float = 0.2
    inactive_fraction: float = 0.0
    styles_per_subcat: int = 3
    # probability a session follows the user's own style for the subcategory (0: styles drawn uniformly)
    style_loyalty: float = 0.0
    sessions_per_user: int = 8
    items_per_session: int = 4
    cross_cluster_affinity: float = 0.1
    affinity_concentration: float = 0.3
    start_ts: int = 1_699_920_000  # midnight UTC
    funnel: Mapping[SignalKind, float] = field(default_factory=lambda: dict(DEFAULT_FUNNEL))

    def __post_init__(self):
        counts = ("n_users", "n_items", "n_categories", "n_subcats_per_category", "n_postcodes",
                  "n_location_clusters", "vocab_size", "background_vocab_size", "title_len",
                  "desc_len", "image_dim", "days", "styles_per_subcat", "sessions_per_user",
                  "items_per_session")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("topic_purity", "cold_start_fraction", "inactive_fraction",
                     "cross_cluster_affinity", "style_loyalty"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.image_noise < 0 or self.affinity_concentration <= 0:
            raise ConfigError("image_noise must be >= 0 and affinity_concentration > 0")
        if self.start_ts < 0 or self.seed < 0:
            raise ConfigError("start_ts and seed must be non-negative")
        if self.vocab_size < self.n_subcategories:
            raise ConfigError(
                f"vocab_size {self.vocab_size} cannot give every one of "
                f"{self.n_subcategories} subcategories a topic word")
        if self.n_postcodes < self.n_location_clusters:
            raise ConfigError("n_postcodes must be >= n_location_clusters")
        missing = [k.value for k in SignalKind if k not in self.funnel]
        if missing:
            raise ConfigError(f"funnel probability missing for: {', '.join(missing)}")
        for kind, p in self.funnel.items():
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"funnel probability for {kind.value} must be in [0, 1], got {p}")

    @property
    def n_subcategories(self) -> int:
        return self.n_categories * self.n_subcats_per_category

    @classmethod
    def from_settings(cls, settings: Mapping[str, str]) -> "SynthConfig":
        base = cls()
        hints = {f.name: f.type for f in dataclasses.fields(cls)}
        changes: Dict[str, object] = {}
        funnel = dict(base.funnel)
        for key, raw in settings.items():
            if key.startswith("funnel."):
                token = key.split(".", 1)[1]
                try:
                    kind = SignalKind(token)
                except ValueError:
                    raise ConfigError(f"unknown funnel signal {token!r}") from None
                funnel[kind] = parse_value(raw, float, key)
            elif key in hints and key != "funnel":
                target = {"int": int, "float": float}[hints[key]]
                changes[key] = parse_value(raw, target, key)
            else:
                raise ConfigError(f"unknown synth config key {key!r}")
        return cls(**changes, funnel=funnel)

    @classmethod
    def load(cls, path: Union[str, Path], **overrides) -> "SynthConfig":
        cfg = cls.from_settings(read_keyvalue_file(path))
        return dataclasses.replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True, eq=False)
class SynthData:
    ads: AdCorpus
    events: EventLog
    image_features: ImageFeatures
    cold_items: FrozenSet[str]
    n_interactions: int
    # ground truth: item -> (subcategory index, style), postcode -> location cluster
    item_truth: Mapping[str, Tuple[int, int]]
    postcode_cluster: Mapping[str, int]

    def write(self, out_dir: Union[str, Path],
              weights: Optional[SignalWeightConfig] = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_ads(self.ads.values(), out / ADS_FILE)
        dump_events(self.events, out / EVENTS_FILE)
        dump_image_features(self.image_features, out / IMAGES_FILE)
        dump_signal_weights(weights or SignalWeightConfig.default(), out / WEIGHTS_FILE)
        logger.info("Wrote synthetic marketplace to %s: %d ads, %d events, %d cold items",
                    out, len(self.ads), len(self.events), len(self.cold_items))
        return out


def _make_words(rng: np.random.Generator, n: int) -> List[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    seen = set()
    words: List[str] = []
    while len(words) < n:
        k = int(rng.integers(2, 4))
        word = "".join(syllables[int(j)] for j in rng.integers(0, len(syllables), size=k))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _sample_text(rng: np.random.Generator, length: int, topic: List[str],
                 background: List[str], purity: float) -> List[str]:
    from_topic = rng.random(length) < purity
    topic_idx = rng.integers(0, len(topic), size=length)
    bg_idx = rng.integers(0, len(background), size=length)
    return [topic[int(t)] if ft else background[int(b)]
            for ft, t, b in zip(from_topic, topic_idx, bg_idx)]


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    n_sub = cfg.n_subcategories

    # vocabulary
    per_topic = cfg.vocab_size // n_sub
    words = _make_words(rng, per_topic * n_sub + cfg.background_vocab_size)
    topics = [words[s * per_topic:(s + 1) * per_topic] for s in range(n_sub)]
    background = words[per_topic * n_sub:]

    sub_names = [(f"cat{s // cfg.n_subcats_per_category:02d}",
                  f"cat{s // cfg.n_subcats_per_category:02d}-sub{s % cfg.n_subcats_per_category:02d}")
                 for s in range(n_sub)]
    postcodes = [f"{1000 + 10 * p:04d}" for p in range(cfg.n_postcodes)]
    postcode_cluster = {pc: p % cfg.n_location_clusters for p, pc in enumerate(postcodes)}

    # items
    item_ids = [f"i{n:05d}" for n in range(cfg.n_items)]
    item_sub = rng.permutation(np.arange(cfg.n_items) % n_sub)
    item_style = rng.integers(0, cfg.styles_per_subcat, size=cfg.n_items)
    item_pc = rng.integers(0, cfg.n_postcodes, size=cfg.n_items)
    n_cold = int(round(cfg.cold_start_fraction * cfg.n_items))
    cold_idx = set(int(i) for i in rng.choice(cfg.n_items, size=n_cold, replace=False))

    ads: List[Ad] = []
    for n, item_id in enumerate(item_ids):
        s = int(item_sub[n])
        title = _sample_text(rng, cfg.title_len, topics[s], background, cfg.topic_purity)
        desc = _sample_text(rng, cfg.desc_len, topics[s], background, cfg.topic_purity)
        category, subcategory = sub_names[s]
        ads.append(Ad(
            item_id=item_id,
            title=" ".join(title).capitalize(),
            description=" ".join(desc),
            category=category,
            subcategory=subcategory,
            postcode=postcodes[int(item_pc[n])],
            created_at=int(cfg.start_ts - int(rng.integers(0, 30 * 86400))),
            active=bool(rng.random() >= cfg.inactive_fraction),
        ))

    # image features: linear expansion of the topic mixture plus noise
    basis = rng.normal(size=(n_sub, cfg.image_dim))
    mixture = rng.dirichlet(np.ones(n_sub), size=cfg.n_items) * (1.0 - cfg.topic_purity)
    mixture[np.arange(cfg.n_items), item_sub] += cfg.topic_purity
    noise = rng.normal(scale=cfg.image_noise, size=(cfg.n_items, cfg.image_dim))
    image_matrix = (mixture @ basis + noise).astype(np.float32)
    image_features = ImageFeatures(dim=cfg.image_dim, ids=tuple(item_ids), matrix=image_matrix)

    # users and sessions
    home = rng.integers(0, cfg.n_location_clusters, size=cfg.n_users)
    affinity = rng.dirichlet(np.full(n_sub, cfg.affinity_concentration), size=cfg.n_users)
    item_cluster = np.array([postcode_cluster[postcodes[int(p)]] for p in item_pc])
    warm = np.array([n not in cold_idx for n in range(cfg.n_items)])
    # drawn only when used so loyalty-free configs keep their random stream
    preferred_style = (rng.integers(0, cfg.styles_per_subcat, size=(cfg.n_users, n_sub))
                       if cfg.style_loyalty > 0 else None)

    signals = list(SignalKind)
    probs = np.array([cfg.funnel[k] for k in signals])
    raw_events: List[Tuple[int, str, str, int]] = []
    n_interactions = 0
    for u in range(cfg.n_users):
        user_id = f"u{u:05d}"
        for _ in range(cfg.sessions_per_user):
            day = int(rng.integers(0, cfg.days))
            s = int(rng.choice(n_sub, p=affinity[u]))
            if preferred_style is not None and rng.random() < cfg.style_loyalty:
                style = int(preferred_style[u, s])
            else:
                style = int(rng.integers(0, cfg.styles_per_subcat))
            candidates = np.flatnonzero(warm & (item_sub == s) & (item_style == style))
            if candidates.size == 0:
                candidates = np.flatnonzero(warm & (item_sub == s))
            if candidates.size == 0:
                continue
            kernel = np.where(item_cluster[candidates] == home[u], 1.0, cfg.cross_cluster_affinity)
            if kernel.sum() <= 0:
                kernel = np.ones_like(kernel)
            size = min(cfg.items_per_session, candidates.size, int(np.count_nonzero(kernel)))
            chosen = rng.choice(candidates, size=size, replace=False, p=kernel / kernel.sum())
            day_start = cfg.start_ts + day * 86400
            for n in chosen:
                n_interactions += 1
                fired = rng.random(len(signals)) < probs
                offsets = rng.integers(0, 86400, size=len(signals))
                for k, hit in enumerate(fired):
                    if hit:
                        raw_events.append((int(day_start + offsets[k]), user_id,
                                           item_ids[int(n)], k))

    # every warm item gets at least one event so exactly the cold items stay event-free
    touched = {item_id for _, _, item_id, _ in raw_events}
    strongest = int(np.argmax(probs))
    for n in np.flatnonzero(warm):
        item_id = item_ids[int(n)]
        if item_id in touched or probs[strongest] <= 0:
            continue
        u = int(rng.integers(0, cfg.n_users))
        day_start = cfg.start_ts + int(rng.integers(0, cfg.days)) * 86400
        n_interactions += 1
        fired = rng.random(len(signals)) < probs
        if not fired.any():
            fired[strongest] = True
        offsets = rng.integers(0, 86400, size=len(signals))
        for k in np.flatnonzero(fired):
            raw_events.append((int(day_start + offsets[k]), f"u{u:05d}", item_id, int(k)))

    raw_events.sort()
    events = tuple(Event(user_id, item_id, signals[k], ts) for ts, user_id, item_id, k in raw_events)
    logger.info("Generated %d users, %d items (%d cold), %d events from %d interactions",
                cfg.n_users, cfg.n_items, n_cold, len(events), n_interactions)
    return SynthData(
        ads=AdCorpus(ads),
        events=events,
        image_features=image_features,
        cold_items=frozenset(item_ids[i] for i in cold_idx),
        n_interactions=n_interactions,
        item_truth={item_ids[n]: (int(item_sub[n]), int(item_style[n])) for n in range(cfg.n_items)},
        postcode_cluster=postcode_cluster,
    )
