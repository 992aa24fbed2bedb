from __future__ import annotations

import dataclasses
import shutil

import numpy as np
import pytest

from recsys.config import RefreshConfig
from recsys.datamodel import dump_ads, dump_events, load_ads, load_events
from recsys.errors import PipelineError
from recsys.evaluation import (anchored_at, cold_start_split, evaluate_snapshot, hit_rates,
                               module_scorers)
from recsys.hybrid import HybridModel, build_pairs, load_pairs
from recsys.mf import EmbeddingTable
from recsys.pipeline import (ARTIFACTS_DIR, SNAPSHOTS_DIR, STAGE_ONE, TEST_PAIRS_FILE,
                             TRAIN_PAIRS_FILE, refresh, snapshot_id_for)
from recsys.serve import CURRENT_POINTER, load_snapshot, resolve_snapshot_dir
from recsys.storage import read_manifest
from recsys.synthgen import ADS_FILE, EVENTS_FILE, SynthConfig, generate


def artifact_mtimes(out):
    return {name: (out / ARTIFACTS_DIR / name / "manifest").stat().st_mtime_ns for name in STAGE_ONE}


def test_snapshot_id_is_utc_timestamp():
    assert snapshot_id_for(0) == "19700101T000000Z"
    assert snapshot_id_for(1_699_920_000) == "20231114T000000Z"


def test_refresh_writes_complete_snapshot(refreshed, synth_data):
    out, snapshot_dir = refreshed
    assert snapshot_dir.parent == out / SNAPSHOTS_DIR
    assert (out / CURRENT_POINTER).read_text() == f"{SNAPSHOTS_DIR}/{snapshot_dir.name}\n"
    assert resolve_snapshot_dir(out) == snapshot_dir

    manifest = read_manifest(snapshot_dir)
    assert manifest["kind"] == "snapshot"
    assert manifest["artifacts"].split(",") == list(STAGE_ONE)
    assert manifest["hybrid"] == "hybrid"
    for name in STAGE_ONE:
        artifact = read_manifest(out / ARTIFACTS_DIR / name)
        assert artifact["stage"] == name
        assert manifest[f"artifact.{name}"] == artifact["input_digest"]
    assert HybridModel.load(snapshot_dir / "hybrid").variant == "attention"
    assert not list((out / SNAPSHOTS_DIR).glob(".staging-*"))


def test_every_ad_is_served_including_cold_items(refreshed, synth_data):
    _, snapshot_dir = refreshed
    snapshot = load_snapshot(snapshot_dir)
    assert set(snapshot.item_ids) == set(synth_data.ads)
    assert set(synth_data.cold_items) <= set(snapshot.item_ids)
    norms = np.linalg.norm(snapshot.vectors, axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)


def test_pair_files_are_consistent(refreshed):
    _, snapshot_dir = refreshed
    train = load_pairs(snapshot_dir / TRAIN_PAIRS_FILE)
    test = load_pairs(snapshot_dir / TEST_PAIRS_FILE)
    manifest = read_manifest(snapshot_dir)
    assert int(manifest["train_pairs"]) == len(train)
    assert int(manifest["test_pairs"]) == len(test)
    assert all(p.positive for p in test)
    assert {p.key() for p in train if p.positive}.isdisjoint({p.key() for p in test})
    assert {p.label for p in train} == {0, 1}


def test_reuse_skips_unchanged_stages(refreshed, data_dir, fast_refresh_cfg, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(refreshed[0], out)
    before = artifact_mtimes(out)
    second = refresh(data_dir, out, fast_refresh_cfg, reuse=True)
    assert artifact_mtimes(out) == before
    assert second.name == f"{refreshed[1].name}-1"
    assert resolve_snapshot_dir(out) == second

    changed = dataclasses.replace(fast_refresh_cfg, als=dataclasses.replace(fast_refresh_cfg.als, rank=6))
    refresh(data_dir, out, changed, reuse=True)
    after = artifact_mtimes(out)
    assert after["als"] != before["als"]
    assert all(after[n] == before[n] for n in STAGE_ONE if n != "als")


def test_refresh_is_deterministic(refreshed, data_dir, fast_refresh_cfg, tmp_path):
    again = refresh(data_dir, tmp_path / "again", fast_refresh_cfg)
    first = refreshed[1]
    assert again.name == first.name
    assert (again / "manifest").read_bytes() == (first / "manifest").read_bytes()
    assert (again / "ids.txt").read_bytes() == (first / "ids.txt").read_bytes()


def test_failed_refresh_keeps_previous_snapshot(refreshed, data_dir, fast_refresh_cfg, tmp_path,
                                                monkeypatch):
    out = tmp_path / "out"
    shutil.copytree(refreshed[0], out)
    pointer = (out / CURRENT_POINTER).read_text()
    existing = sorted(p.name for p in (out / SNAPSHOTS_DIR).iterdir())

    def corrupt(pairs, path):
        path.write_text("this is not\ta pair file\n")

    monkeypatch.setattr("recsys.pipeline.write_pairs", corrupt)
    with pytest.raises(PipelineError) as exc:
        refresh(data_dir, out, fast_refresh_cfg, reuse=True)
    assert exc.value.stage == "hybrid"
    assert (out / CURRENT_POINTER).read_text() == pointer
    assert sorted(p.name for p in (out / SNAPSHOTS_DIR).iterdir()) == existing


def test_missing_inputs_fail_in_load_stage(tmp_path):
    with pytest.raises(PipelineError) as exc:
        refresh(tmp_path / "nothing-here", tmp_path / "out", RefreshConfig())
    assert exc.value.stage == "load"
    assert isinstance(exc.value.cause, FileNotFoundError)
    assert not (tmp_path / "out" / CURRENT_POINTER).exists()


def test_ad_without_postcode_gets_no_location_group(data_dir, fast_refresh_cfg, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(data_dir, data)
    target = max(load_events(data / EVENTS_FILE), key=lambda e: e.ts).item_id
    ads = load_ads(data / ADS_FILE)
    dump_ads([dataclasses.replace(ad, postcode="") if ad.item_id == target else ad
              for ad in ads.values()], data / ADS_FILE)

    snapshot_dir = refresh(data, tmp_path / "out", fast_refresh_cfg)
    assert target in load_snapshot(snapshot_dir).item_ids
    location = EmbeddingTable.load(tmp_path / "out" / ARTIFACTS_DIR / "location")
    assert "" not in location.ids


def test_evaluate_snapshot(refreshed):
    out, snapshot_dir = refreshed
    report = evaluate_snapshot(out, snapshot_dir / TEST_PAIRS_FILE, ns=(1, 5, 10), seed=0)
    assert report.model_id == snapshot_dir.name
    assert report.n_test == int(read_manifest(snapshot_dir)["test_pairs"])
    assert report.hit_rates[1] <= report.hit_rates[5] <= report.hit_rates[10]
    assert sum(report.importance.values()) == pytest.approx(1.0, abs=1e-6)
    assert evaluate_snapshot(snapshot_dir, snapshot_dir / TEST_PAIRS_FILE).hit_rates == report.hit_rates


def test_module_scorers(refreshed, data_dir):
    out, snapshot_dir = refreshed
    scorers = module_scorers(out, data_dir)
    assert set(scorers) == {"hybrid", "cf", "text", "image"}
    test = load_pairs(snapshot_dir / TEST_PAIRS_FILE)
    universe = load_snapshot(snapshot_dir).active_ids()
    for scorer in scorers.values():
        rates = hit_rates(scorer, test, universe)
        assert all(0.0 <= v <= 1.0 for v in rates.values())


# -------------------------
# desk-scale acceptance
# -------------------------
ACCEPTANCE_SYNTH = dict(n_users=300, n_items=400, image_dim=64, seed=11)


def acceptance_cfg(**hybrid):
    base = RefreshConfig(seed=5)
    return dataclasses.replace(base, hybrid=dataclasses.replace(base.hybrid, **hybrid))


@pytest.mark.slow
def test_hybrid_is_at_least_as_good_as_single_modules(tmp_path):
    data = generate(SynthConfig(**ACCEPTANCE_SYNTH)).write(tmp_path / "data")
    snapshot_dir = refresh(data, tmp_path / "out", acceptance_cfg())
    scorers = module_scorers(tmp_path / "out", data)
    test = load_pairs(snapshot_dir / TEST_PAIRS_FILE)
    universe = load_snapshot(snapshot_dir).active_ids()
    hr = {name: hit_rates(s, test, universe, ns=(10,))[10] for name, s in scorers.items()}
    assert hr["hybrid"] >= max(hr["cf"], hr["text"]) - 0.02


@pytest.mark.slow
def test_cold_items_are_recommended_from_content(tmp_path):
    data = generate(SynthConfig(**ACCEPTANCE_SYNTH)).write(tmp_path / "data")
    events = load_events(data / EVENTS_FILE)
    kept, hidden = cold_start_split(events, 0.2, seed=1)
    dump_events(kept, data / EVENTS_FILE)
    snapshot_dir = refresh(data, tmp_path / "out", acceptance_cfg())
    snapshot = load_snapshot(snapshot_dir)
    assert hidden <= set(snapshot.item_ids)

    test = anchored_at(build_pairs(events), hidden)
    scorers = module_scorers(tmp_path / "out", data)
    hybrid = hit_rates(scorers["hybrid"], test, snapshot.active_ids(), ns=(10,))[10]
    cf_only = hit_rates(scorers["cf"], test, snapshot.active_ids(), ns=(10,))[10]
    assert hybrid >= cf_only + 0.10


# users keep one style per subcategory and stay in their location cluster; text and images
# only see the subcategory, so behaviour is the richest signal
BEHAVIOUR_SYNTH = dict(ACCEPTANCE_SYNTH, n_subcats_per_category=2, styles_per_subcat=4,
                       style_loyalty=1.0, topic_purity=0.6)


@pytest.mark.slow
def test_hybrid_leans_on_behaviour_when_it_dominates(tmp_path):
    data = generate(SynthConfig(**BEHAVIOUR_SYNTH)).write(tmp_path / "data")
    base = acceptance_cfg()
    cfg = dataclasses.replace(base, als=dataclasses.replace(base.als, reg=0.1))
    snapshot_dir = refresh(data, tmp_path / "out", cfg)
    scorers = module_scorers(tmp_path / "out", data)
    test = load_pairs(snapshot_dir / TEST_PAIRS_FILE)
    universe = load_snapshot(snapshot_dir).active_ids()
    hr = {name: hit_rates(s, test, universe, ns=(10,))[10] for name, s in scorers.items()}
    assert hr["hybrid"] >= hr["text"] + 0.05
    assert hr["hybrid"] >= max(hr["cf"], hr["text"]) - 0.02

    importance = evaluate_snapshot(snapshot_dir, snapshot_dir / TEST_PAIRS_FILE).importance
    assert max(importance, key=importance.get) == "cf"
