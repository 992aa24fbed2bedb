from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
import pytest

from conftest import make_ad, make_event
from recsys.datamodel import (ImageFeatures, dump_ads, dump_events, dump_image_features,
                              dump_signal_weights, escape_text, filter_sparse, load_ads,
                              load_events, load_image_features, load_signal_weights,
                              select_signals, signal_weight, unescape_text, utc_day, window)
from recsys.errors import ConfigError, DataFormatError, UnknownSignalError
from recsys.models import AdCorpus, Event, SignalKind, SignalWeightConfig

DAY = 86400


def test_signal_kind_is_closed():
    assert len(SignalKind) == 7
    assert SignalKind.parse("send_message") is SignalKind.SEND_MESSAGE
    with pytest.raises(UnknownSignalError):
        SignalKind.parse("buy_now")


def test_event_rejects_negative_timestamp():
    with pytest.raises(DataFormatError):
        Event("u1", "i1", SignalKind.VIEW_AD, -1)


def test_load_events_counts_lines(tmp_path):
    path = tmp_path / "events.tsv"
    path.write_text("u1\ti1\tview_ad\t10\nu1\ti2\tshow_phone\t11\n\nu2\ti1\tsend_message\t12\n")
    events = load_events(path)
    assert len(events) == 3
    assert events[1] == Event("u1", "i2", SignalKind.SHOW_PHONE, 11)


def test_load_events_empty_file(tmp_path):
    path = tmp_path / "events.tsv"
    path.write_text("")
    assert load_events(path) == ()


def test_load_events_unknown_signal_names_line_and_token(tmp_path):
    path = tmp_path / "events.tsv"
    path.write_text("u1\ti1\tview_ad\t10\nu1\ti2\tbuy_now\t11\n")
    with pytest.raises(UnknownSignalError) as exc:
        load_events(path)
    assert exc.value.line_no == 2
    assert exc.value.token == "buy_now"
    assert ":2:" in str(exc.value) and "buy_now" in str(exc.value)


@pytest.mark.parametrize("line", ["u1\ti1\tview_ad", "u1\ti1\tview_ad\tsoon", "u1\ti1\tview_ad\t-5"])
def test_load_events_malformed(tmp_path, line):
    path = tmp_path / "events.tsv"
    path.write_text(line + "\n")
    with pytest.raises(DataFormatError) as exc:
        load_events(path)
    assert exc.value.line_no == 1


def test_load_events_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_events(tmp_path / "nope.tsv")


def test_event_log_reload_is_identical(tmp_path, synth_data):
    path = tmp_path / "events.tsv"
    dump_events(synth_data.events, path)
    assert load_events(path) == synth_data.events


def test_ads_escape_tabs_and_newlines(tmp_path):
    ad = make_ad("i1", title="Piano\twith stool", description="line one\nline two \\ slash")
    path = tmp_path / "ads.tsv"
    dump_ads([ad], path)
    assert len(path.read_text().splitlines()) == 1
    corpus = load_ads(path)
    assert corpus["i1"] == ad
    assert unescape_text(escape_text("a\\tb")) == "a\\tb"


def test_ad_corpus_validation():
    with pytest.raises(DataFormatError):
        AdCorpus([make_ad("i1"), make_ad("i1")])
    with pytest.raises(DataFormatError):
        AdCorpus([make_ad("i1", category="a", subcategory="s"),
                  make_ad("i2", category="b", subcategory="s")])


def test_image_features_file(tmp_path):
    feats = ImageFeatures(3, ("i1", "ä2"), np.arange(6, dtype=np.float32).reshape(2, 3))
    path = tmp_path / "img.imgf"
    dump_image_features(feats, path)
    raw = path.read_bytes()
    assert raw[:4] == b"IMGF"
    loaded = load_image_features(path)
    assert loaded.ids == ("i1", "ä2")
    np.testing.assert_array_equal(loaded.get("ä2"), [3, 4, 5])

    path.write_bytes(raw[:-2])
    with pytest.raises(DataFormatError):
        load_image_features(path)
    path.write_bytes(b"JPEG" + raw[4:])
    with pytest.raises(DataFormatError):
        load_image_features(path)


def test_signal_weight_defaults():
    cfg = SignalWeightConfig.default()
    assert signal_weight(SignalKind.VIEW_AD, cfg) == 1.0
    assert signal_weight(SignalKind.SEND_MESSAGE, cfg) == 5.0
    assert signal_weight(SignalKind.VIEW_AD, SignalWeightConfig.uniform(1.0)) == 1.0


def test_signal_weight_validation():
    weights = dict(SignalWeightConfig.default().weights)
    weights[SignalKind.SHOW_PHONE] = 0.5
    with pytest.raises(ConfigError):
        SignalWeightConfig(weights)
    weights[SignalKind.SHOW_PHONE] = 0.0
    with pytest.raises(ConfigError):
        SignalWeightConfig(weights)


def test_signal_weights_file(tmp_path):
    path = tmp_path / "weights.txt"
    dump_signal_weights(SignalWeightConfig.default(), path)
    assert load_signal_weights(path) == SignalWeightConfig.default()
    path.write_text("view_ad=1\nbuy_now=3\n")
    with pytest.raises(ConfigError):
        load_signal_weights(path)


def test_window_boundaries():
    now = 100 * DAY
    events = (make_event("u1", "i1", ts=now - 21 * DAY),
              make_event("u1", "i2", ts=now - 20 * DAY),
              make_event("u1", "i3", ts=now))
    kept = window(events, 20, now)
    assert [e.item_id for e in kept] == ["i2", "i3"]
    assert window(events[1:], 20, now) == events[1:]
    with pytest.raises(ValueError):
        window(events, 0, now)


def test_window_is_monotone_in_lookback(synth_data):
    now = max(e.ts for e in synth_data.events)
    short = set(window(synth_data.events, 5, now))
    long = set(window(synth_data.events, 10, now))
    assert short <= long <= set(synth_data.events)


def test_select_signals_keeps_views_only():
    events = (make_event("u1", "i1", "view_ad"), make_event("u1", "i1", "send_message"))
    assert select_signals(events, [SignalKind.VIEW_AD]) == events[:1]


def _fixpoint_oracle(events):
    current = list(events)
    while True:
        users = Counter(e.user_id for e in current)
        items = Counter(e.item_id for e in current)
        kept = [e for e in current if users[e.user_id] > 1 and items[e.item_id] > 1]
        if kept == current:
            return tuple(kept)
        current = kept


def test_filter_sparse_examples():
    lonely = (make_event("u1", "i1"),)
    assert filter_sparse(lonely) == ()
    square = (make_event("u1", "i1"), make_event("u1", "i2"),
              make_event("u2", "i1"), make_event("u2", "i2"))
    assert filter_sparse(square) == square
    chain = (make_event("u1", "i1"), make_event("u1", "i2"), make_event("u2", "i2"))
    assert filter_sparse(chain) == ()


def test_filter_sparse_matches_bruteforce_and_is_idempotent():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        events = tuple(make_event(f"u{rng.integers(4)}", f"i{rng.integers(4)}", ts=int(t))
                       for t in range(n))
        once = filter_sparse(events)
        assert once == _fixpoint_oracle(events)
        assert filter_sparse(once) == once
        users = Counter(e.user_id for e in once)
        items = Counter(e.item_id for e in once)
        assert all(c >= 2 for c in itertools.chain(users.values(), items.values()))


def test_utc_day_boundary():
    assert utc_day(DAY - 1) != utc_day(DAY)
    assert utc_day(DAY) == utc_day(2 * DAY - 1)
