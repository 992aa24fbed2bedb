"""
recsys/pipeline.py

Staged refresh.

  stage 1  als, location, word2vec, textcnn, image_projector
           -> <out>/artifacts/<name>/ (manifest carries an input digest; --reuse skips
              a stage whose digest is unchanged)
  stage 2  build_pairs, split_pairs, sample_negatives, hybrid_fit
  stage 3  represent every ad, build_index, write the snapshot

Stage 2 and 3 outputs are written to a staging directory that is renamed to
<out>/snapshots/<id> only after everything succeeded; <out>/CURRENT is then
repointed atomically. A failure leaves the previous snapshot current.
"""
from __future__ import annotations

import contextlib
import logging
import os
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterator, Mapping, Optional, TypeVar, Union

from .config import RefreshConfig, as_flat_dict
from .datamodel import (filter_sparse, latest_timestamp, load_ads, load_events,
                        load_image_features, load_signal_weights, select_signals, window)
from .errors import EmptyInputError, PipelineError
from .evaluation import split_pairs
from .hybrid import (assemble_all, build_pairs, hybrid_fit, load_pairs,
                     represent_many, sample_negatives, write_pairs)
from .imagepipe import ImageProjector, image_embed_many, mlp_fit, title_targets
from .mf import EmbeddingTable, FactorModel, als_fit, build_matrix, location_fit
from .models import AdCorpus, EventLog, SignalKind, SignalWeightConfig
from .serve import CURRENT_POINTER, build_index, save_snapshot
from .storage import atomic_write_text, digest_of, read_manifest, write_manifest
from .synthgen import ADS_FILE, EVENTS_FILE, IMAGES_FILE, WEIGHTS_FILE
from .textpipe import TextClassifier, WordVectors, cnn_fit, text_embed_many, tokenize, word2vec_fit

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
T = TypeVar("T")

STAGE_ONE = ("als", "location", "word2vec", "textcnn", "image_projector")
ARTIFACTS_DIR = "artifacts"
SNAPSHOTS_DIR = "snapshots"
TRAIN_PAIRS_FILE = "train_pairs.tsv"
TEST_PAIRS_FILE = "test_pairs.tsv"


@dataclass(frozen=True, eq=False)
class RefreshInputs:
    ads: AdCorpus
    events: EventLog
    weights: SignalWeightConfig
    now: int
    paths: Mapping[str, Path]


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info("refresh stage %s: start", name)
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        logger.exception("refresh stage %s failed", name)
        raise PipelineError(name, e) from e
    logger.info("refresh stage %s: done", name)


def snapshot_id_for(now: int) -> str:
    return datetime.fromtimestamp(now, tz=timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def load_inputs(data_dir: PathLike, cfg: RefreshConfig) -> RefreshInputs:
    data_dir = Path(data_dir)
    paths = {"ads": data_dir / ADS_FILE, "events": data_dir / EVENTS_FILE,
             "images": data_dir / IMAGES_FILE, "weights": data_dir / WEIGHTS_FILE}
    for key in ("ads", "events", "images"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing input file: {paths[key]}")
    weights = (load_signal_weights(paths["weights"]) if paths["weights"].exists()
               else SignalWeightConfig.default())
    events = load_events(paths["events"])
    now = cfg.now if cfg.now is not None else latest_timestamp(events)
    if now is None:
        raise EmptyInputError("event log is empty and no reference time was configured")
    return RefreshInputs(load_ads(paths["ads"]), events, weights, int(now), paths)


def _publish_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _cached_stage(root: Path, name: str, digest: str, reuse: bool,
                  train: Callable[[], T], save: Callable[[T, Path], None],
                  load: Callable[[Path], T]) -> T:
    """Run one stage-1 step, or load its artifact when --reuse and the input digest matches."""
    final = root / name
    if reuse and (final / "manifest").exists():
        manifest = read_manifest(final)
        if manifest.get("input_digest") == digest:
            logger.info("reusing %s artifact (digest %s)", name, digest[:12])
            return load(final)
        logger.info("%s artifact is stale, retraining", name)
    result = train()
    tmp = root / f".{name}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    save(result, tmp)
    manifest = read_manifest(tmp)
    manifest.update({"stage": name, "input_digest": digest})
    write_manifest(tmp, manifest)
    _publish_dir(tmp, final)
    return result


def _params(cfg: object, prefix: str) -> str:
    return ";".join(f"{k}={v}" for k, v in as_flat_dict(cfg, prefix=prefix).items())


def refresh(data_dir: PathLike, out_dir: PathLike, cfg: Optional[RefreshConfig] = None,
            reuse: bool = False) -> Path:
    """Run the staged pipeline and return the new snapshot directory."""
    cfg = cfg or RefreshConfig()
    out = Path(out_dir)
    artifacts = out / ARTIFACTS_DIR
    snapshots = out / SNAPSHOTS_DIR
    artifacts.mkdir(parents=True, exist_ok=True)
    snapshots.mkdir(parents=True, exist_ok=True)

    with _stage("load"):
        inputs = load_inputs(data_dir, cfg)
        kinds = [SignalKind.parse(t) for t in cfg.signal_tokens()]
        recent = window(inputs.events, cfg.lookback_days, inputs.now)
        behaviour = select_signals(recent, kinds) if kinds else recent
        cf_events = filter_sparse(behaviour)
        ads = inputs.ads
        # ads without a postcode get no location group
        located = [e for e in behaviour if e.item_id in ads and ads[e.item_id].postcode]
        logger.info("refresh inputs: %d ads, %d events (%d in window, %d for CF), now=%d",
                    len(ads), len(inputs.events), len(recent), len(cf_events), inputs.now)

    p = inputs.paths
    window_key = f"now={inputs.now};lookback={cfg.lookback_days};signals={','.join(k.value for k in kinds)}"
    weights_key = ";".join(f"{k.value}={inputs.weights.weight(k)}" for k in SignalKind)
    digests = {
        "als": digest_of("als", p["events"], weights_key, window_key, _params(cfg.als, "als."), cfg.seed),
        "location": digest_of("location", p["events"], p["ads"], weights_key, window_key,
                              _params(cfg.location, "location."), cfg.seed),
        "word2vec": digest_of("word2vec", p["ads"], _params(cfg.word2vec, "word2vec."), cfg.seed),
    }
    digests["textcnn"] = digest_of("textcnn", digests["word2vec"], p["ads"], _params(cfg.cnn, "cnn."), cfg.seed)
    digests["image_projector"] = digest_of("image_projector", digests["word2vec"], p["ads"], p["images"],
                                           _params(cfg.mlp, "mlp."), cfg.seed)

    # stage 1
    with _stage("als"):
        als: FactorModel = _cached_stage(
            artifacts, "als", digests["als"], reuse,
            lambda: als_fit(build_matrix(cf_events, inputs.weights), rank=cfg.als.rank,
                            reg=cfg.als.reg, iters=cfg.als.iters, seed=cfg.seed,
                            alpha=cfg.als.alpha, workers=cfg.als.workers),
            lambda m, d: m.save(d), FactorModel.load)
    with _stage("location"):
        location: EmbeddingTable = _cached_stage(
            artifacts, "location", digests["location"], reuse,
            lambda: location_fit(located, ads,
                                 rank=cfg.location.rank, reg=cfg.location.reg,
                                 iters=cfg.location.iters, seed=cfg.seed,
                                 cfg=inputs.weights, alpha=cfg.location.alpha),
            lambda t, d: t.save(d, name="location"), EmbeddingTable.load)
    with _stage("word2vec"):
        wv: WordVectors = _cached_stage(
            artifacts, "word2vec", digests["word2vec"], reuse,
            lambda: word2vec_fit([tokenize(ads[i].text) for i in sorted(ads)],
                                 dim=cfg.word2vec.dim, window=cfg.word2vec.window,
                                 negatives=cfg.word2vec.negatives, epochs=cfg.word2vec.epochs,
                                 seed=cfg.seed, min_count=cfg.word2vec.min_count,
                                 step=cfg.word2vec.step, batch_size=cfg.word2vec.batch_size),
            lambda w, d: w.save(d), WordVectors.load)
    with _stage("textcnn"):
        clf: TextClassifier = _cached_stage(
            artifacts, "textcnn", digests["textcnn"], reuse,
            lambda: cnn_fit([ads[i] for i in sorted(ads)], wv, epochs=cfg.cnn.epochs,
                            step=cfg.cnn.step, seed=cfg.seed, momentum=cfg.cnn.momentum,
                            batch_size=cfg.cnn.batch_size, seq_len=cfg.cnn.seq_len,
                            filters=cfg.cnn.filters, hidden=cfg.cnn.hidden),
            lambda c, d: c.save(d), TextClassifier.load)
    with _stage("image_projector"):
        features = load_image_features(p["images"])

        def train_projector() -> ImageProjector:
            targets = title_targets(ads.values(), wv)
            skipped = len(ads) - len(targets)
            if skipped:
                logger.warning("%d ads have no in-vocabulary title token and no image target", skipped)
            return mlp_fit(features, targets, epochs=cfg.mlp.epochs, step=cfg.mlp.step,
                           seed=cfg.seed, momentum=cfg.mlp.momentum,
                           batch_size=cfg.mlp.batch_size)

        projector: ImageProjector = _cached_stage(
            artifacts, "image_projector", digests["image_projector"], reuse,
            train_projector, lambda m, d: m.save(d), ImageProjector.load)

    base_id = snapshot_id_for(inputs.now)
    snapshot_name = base_id
    n = 1
    while (snapshots / snapshot_name).exists():
        snapshot_name = f"{base_id}-{n}"
        n += 1
    staging = snapshots / f".staging-{snapshot_name}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    try:
        # stage 2
        with _stage("pairs"):
            text_table = text_embed_many([ads[i] for i in sorted(ads)], clf, wv)
            image_table = image_embed_many(features, projector, item_ids=sorted(ads))
            bundles = assemble_all(ads, als, text_table, image_table, location)
            positives = [pr for pr in build_pairs(recent) if pr.item_a in ads and pr.item_b in ads]
            train_pos, test_pos = split_pairs(positives, cfg.hybrid.holdout_fraction, seed=cfg.seed)
            negatives = sample_negatives(train_pos, sorted(ads), ratio=cfg.hybrid.negative_ratio,
                                         seed=cfg.seed, max_retries=cfg.hybrid.max_retries)
            write_pairs(list(train_pos) + list(negatives), staging / TRAIN_PAIRS_FILE)
            write_pairs(test_pos, staging / TEST_PAIRS_FILE)
            logger.info("pairs: %d positives (%d train, %d test), %d negatives",
                        len(positives), len(train_pos), len(test_pos), len(negatives))
        with _stage("hybrid"):
            train_pairs = load_pairs(staging / TRAIN_PAIRS_FILE)
            group_dims = (als.rank, clf.embedding_dim, projector.output_dim, location.dim)
            model = hybrid_fit(bundles, train_pairs, epochs=cfg.hybrid.epochs, step=cfg.hybrid.step,
                               seed=cfg.seed, momentum=cfg.hybrid.momentum,
                               batch_size=cfg.hybrid.batch_size, cf_dropout=cfg.hybrid.cf_dropout,
                               variant=cfg.hybrid.variant, tau=cfg.hybrid.tau, group_dims=group_dims)
            model.save(staging / "hybrid")

        # stage 3
        with _stage("index"):
            reps = represent_many([bundles[i] for i in sorted(ads)], model)
            snapshot = build_index(reps, ads, snapshot_name)
            extra: Dict[str, object] = {
                "now": inputs.now,
                "lookback_days": cfg.lookback_days,
                "signals": ",".join(k.value for k in kinds),
                "seed": cfg.seed,
                "variant": cfg.hybrid.variant,
                "artifacts": ",".join(STAGE_ONE),
                "hybrid": "hybrid",
                "train_pairs": len(train_pairs),
                "test_pairs": len(test_pos),
            }
            extra.update({f"artifact.{name}": digests[name] for name in STAGE_ONE})
            save_snapshot(snapshot, staging, extra)
            final = snapshots / snapshot_name
            os.replace(staging, final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    atomic_write_text(out / CURRENT_POINTER, f"{SNAPSHOTS_DIR}/{snapshot_name}\n")
    logger.info("refresh complete: snapshot %s is current", snapshot_name)
    return final
