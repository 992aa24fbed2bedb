from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from conftest import make_ad, make_event
from recsys.errors import DataFormatError, EmptyInputError, NegativeSamplingError, UnknownItemError
from recsys.hybrid import (FeatureBundle, HybridModel, assemble, assemble_all, attention,
                           build_pairs, hybrid_fit, infer_group_dims, load_pairs, pair_loss,
                           represent, represent_many, sample_negatives, score, stack_bundles,
                           write_pairs)
from recsys.mf import EmbeddingTable
from recsys.models import AdCorpus, ItemRepresentation, PairExample

DAY = 86400
DIMS = (3, 2, 2, 1)
TOWER = (6, 5, 4)


def random_bundle(rng, item_id, presence=(True, True, True, True), dims=DIMS):
    values = {}
    for name, dim, present in zip(("cf", "text", "image", "location"), dims, presence):
        values[name] = rng.normal(size=dim) if present else None
    return FeatureBundle(item_id, **values)


@pytest.fixture
def model():
    torch.manual_seed(0)
    m = HybridModel(DIMS, TOWER)
    with torch.no_grad():
        for w in m.gate_weights:
            w.normal_()
        m.gate_bias.normal_()
    return m.eval()


@pytest.fixture
def tables():
    ads = AdCorpus([make_ad("warm", postcode="1000"), make_ad("cold", postcode="1000"),
                    make_ad("far", postcode="9999")])
    cf = EmbeddingTable(("warm", "far"), np.ones((2, 3)))
    text = EmbeddingTable(("warm", "cold", "far"), np.full((3, 2), 0.5))
    image = EmbeddingTable(("warm", "cold"), np.zeros((2, 2)))
    location = EmbeddingTable(("1000",), np.ones((1, 1)))
    return ads, cf, text, image, location


def test_assemble_presence(tables):
    ads, cf, text, image, location = tables
    assert assemble("warm", cf, text, image, location, ads).presence == (True, True, True, True)
    assert assemble("cold", cf, text, image, location, ads).presence == (False, True, True, True)
    assert assemble("far", cf, text, image, location, ads).presence == (True, True, False, False)
    with pytest.raises(UnknownItemError):
        assemble("ghost", cf, text, image, location, ads)
    no_text = EmbeddingTable(("warm",), np.zeros((1, 2)))
    with pytest.raises(UnknownItemError):
        assemble("cold", cf, no_text, image, location, ads)


def test_assemble_all_and_group_dims(tables):
    ads, cf, text, image, location = tables
    bundles = assemble_all(ads, cf, text, image, location)
    assert sorted(bundles) == ["cold", "far", "warm"]
    assert infer_group_dims(bundles.values()) == (3, 2, 2, 1)
    assert infer_group_dims([bundles["cold"]]) == (100, 2, 2, 1)
    groups, mask = stack_bundles([bundles["cold"], bundles["warm"]], (3, 2, 2, 1))
    assert [g.shape[1] for g in groups] == [3, 2, 2, 1]
    assert mask.tolist() == [[False, True, True, True], [True, True, True, True]]
    assert not groups[0][0].any()


def test_assembled_groups_are_unit_length(tables):
    ads, cf, text, image, location = tables
    warm = assemble("warm", cf, text, image, location, ads)
    np.testing.assert_allclose(warm.cf, np.full(3, 1 / np.sqrt(3)))
    np.testing.assert_allclose(warm.text, np.full(2, 1 / np.sqrt(2)))
    np.testing.assert_allclose(warm.location, [1.0])
    # all-zero vectors are left alone
    assert not warm.image.any()


def test_bundle_without():
    b = random_bundle(np.random.default_rng(0), "i1")
    assert b.without("cf").presence == (False, True, True, True)
    with pytest.raises(ValueError):
        b.without("text")


def test_build_pairs_same_day_conversions():
    events = [make_event("u1", i, "send_message", ts=10) for i in ("i3", "i1", "i2")]
    pairs = build_pairs(events)
    assert [(p.item_a, p.item_b, p.label) for p in pairs] == [
        ("i1", "i2", 1), ("i1", "i3", 1), ("i2", "i3", 1)]
    assert build_pairs([make_event("u1", "i1", "show_phone", ts=0),
                        make_event("u1", "i2", "show_phone", ts=DAY)]) == ()
    assert build_pairs([make_event("u1", "i1", ts=0), make_event("u1", "i2", ts=1)]) == ()


def test_build_pairs_deduplicates_across_users_and_days():
    events = [make_event(u, i, "show_phone", ts=d * DAY)
              for u in ("u1", "u2") for d in (0, 3) for i in ("b", "a")]
    assert build_pairs(events) == (PairExample("a", "b", 1),)


def test_sample_negatives_contract():
    positives = [PairExample(f"i{n}", f"i{n + 1}", 1) for n in range(10)]
    universe = [f"i{n}" for n in range(30)]
    taken = {p.key() for p in positives}
    for seed in range(20):
        negatives = sample_negatives(positives, universe, ratio=4, seed=seed)
        assert len(negatives) == 40
        assert all(n.label == 0 for n in negatives)
        assert not taken & {n.key() for n in negatives}
        assert [n.item_a for n in negatives] == [p.item_a for p in positives for _ in range(4)]
    assert sample_negatives(positives, universe, seed=3) == sample_negatives(positives, universe, seed=3)


def test_sample_negatives_exhausts():
    with pytest.raises(NegativeSamplingError):
        sample_negatives([PairExample("a", "b", 1)], ["a", "b"], max_retries=10)
    with pytest.raises(NegativeSamplingError):
        sample_negatives([PairExample("a", "b", 1)], [])
    assert sample_negatives([], ["a", "b"]) == ()


def test_pair_file_codec(tmp_path):
    path = tmp_path / "pairs.tsv"
    pairs = (PairExample("a", "b", 1), PairExample("a", "c", 0))
    write_pairs(pairs, path)
    assert load_pairs(path) == pairs
    path.write_text("a\tb\t1\na\tb\t2\n")
    with pytest.raises(DataFormatError) as exc:
        load_pairs(path)
    assert exc.value.line_no == 2
    path.write_text("a\ta\t1\n")
    with pytest.raises(DataFormatError):
        load_pairs(path)
    with pytest.raises(FileNotFoundError):
        load_pairs(tmp_path / "missing.tsv")


def test_attention_cases():
    rng = np.random.default_rng(0)
    m = HybridModel(DIMS, TOWER).eval()
    # zero-initialized gates give equal scores
    np.testing.assert_allclose(attention(random_bundle(rng, "all"), m), [0.25] * 4, atol=1e-7)
    only_text = random_bundle(rng, "t", presence=(False, True, False, False))
    np.testing.assert_allclose(attention(only_text, m), [0, 1, 0, 0], atol=1e-7)


def test_attention_is_a_distribution_over_present_groups(model):
    rng = np.random.default_rng(1)
    for n in range(50):
        presence = (bool(rng.integers(2)), True, bool(rng.integers(2)), bool(rng.integers(2)))
        w = attention(random_bundle(rng, f"i{n}", presence), model)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-6
        assert all(w[g] == 0.0 for g in range(4) if not presence[g])
    no_cf = attention(random_bundle(rng, "x", (False, True, True, True)), model)
    assert no_cf[0] == 0.0 and abs(no_cf[1:].sum() - 1.0) < 1e-6


def test_attention_simplex_on_many_random_masks(model):
    torch.manual_seed(1)
    n = 10_000
    groups = [torch.randn(n, d) * 3 for d in DIMS]
    mask = torch.rand(n, 4) < 0.6
    mask[:, 1] = True
    with torch.no_grad():
        w = model.attention_weights(groups, mask).double()
    assert torch.all(w >= 0)
    assert torch.all(w[~mask] == 0)
    assert torch.max(torch.abs(w.sum(dim=1) - 1.0)) < 1e-6


def test_linear_variant_is_uniform():
    m = HybridModel(DIMS, TOWER, variant="linear")
    assert len(m.tower) == 1 and m.output_dim == 4
    w = attention(random_bundle(np.random.default_rng(2), "i", (False, True, True, True)), m)
    np.testing.assert_allclose(w, [0, 1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(ValueError):
        HybridModel(DIMS, TOWER, variant="deep")
    with pytest.raises(ValueError):
        HybridModel(DIMS, TOWER, tau=0.0)


def test_absent_group_values_are_ignored(model):
    rng = np.random.default_rng(3)
    bundle = random_bundle(rng, "i", (False, True, True, True))
    groups, mask = stack_bundles([bundle], DIMS)
    noisy = [g.clone() for g in groups]
    noisy[0] = torch.randn_like(noisy[0]) * 100
    with torch.no_grad():
        torch.testing.assert_close(model(groups, mask), model(noisy, mask), rtol=0, atol=0)
    full = random_bundle(rng, "j")
    np.testing.assert_array_equal(represent(full.without("cf"), model).vector,
                                  represent(FeatureBundle("j", text=full.text, image=full.image,
                                                          location=full.location), model).vector)


def test_representations_are_unit_norm(model):
    rng = np.random.default_rng(4)
    bundles = [random_bundle(rng, f"i{n}", (n % 2 == 0, True, n % 3 > 0, n % 5 > 0)) for n in range(30)]
    reps = represent_many(bundles, model, batch_size=7)
    assert [r.item_id for r in reps] == [b.item_id for b in bundles]
    for r in reps:
        assert abs(np.linalg.norm(r.vector) - 1.0) < 1e-6
    np.testing.assert_allclose(represent(bundles[0], model).vector, reps[0].vector, rtol=1e-5, atol=1e-6)


def test_score_properties(model):
    rng = np.random.default_rng(5)
    r = represent(random_bundle(rng, "a"), model)
    assert score(r, r) == pytest.approx(1.0, abs=1e-9)
    assert score(r, ItemRepresentation("neg", -r.vector)) == pytest.approx(-1.0, abs=1e-9)
    for n in range(20):
        a = represent(random_bundle(rng, f"a{n}"), model)
        b = represent(random_bundle(rng, f"b{n}", (False, True, True, False)), model)
        assert score(a, b) == score(b, a)


def test_end_to_end_gradients_match_finite_differences():
    torch.manual_seed(0)
    rng = np.random.default_rng(6)
    m = HybridModel(DIMS, TOWER).double()
    with torch.no_grad():
        for w in m.gate_weights:
            w.normal_()
    a = stack_bundles([random_bundle(rng, f"a{n}", (n != 1, True, True, n != 2)) for n in range(4)],
                      DIMS, dtype=torch.float64)
    b = stack_bundles([random_bundle(rng, f"b{n}") for n in range(4)], DIMS, dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    names = [n for n, _ in m.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in m.named_parameters())

    def loss(*values):
        state = dict(zip(names, values))
        ra = functional_call(m, state, a)
        rb = functional_call(m, state, b)
        logits = state["log_tau"].exp() * (ra * rb).sum(dim=1)
        return F.binary_cross_entropy_with_logits(logits, y)

    assert torch.autograd.gradcheck(loss, params, eps=1e-6, atol=1e-6, rtol=1e-3)
    with torch.no_grad():
        assert float(loss(*params)) == pytest.approx(float(pair_loss(m, a, b, y)), rel=1e-12)


def test_pair_order_does_not_change_loss(model):
    rng = np.random.default_rng(7)
    a = stack_bundles([random_bundle(rng, f"a{n}") for n in range(5)], DIMS)
    b = stack_bundles([random_bundle(rng, f"b{n}", (False, True, True, True)) for n in range(5)], DIMS)
    y = torch.tensor([1.0, 0.0, 0.0, 1.0, 0.0])
    with torch.no_grad():
        assert float(pair_loss(model, a, b, y)) == float(pair_loss(model, b, a, y))


@pytest.fixture(scope="module")
def clustered():
    """Two item clusters; positives inside a cluster, negatives across."""
    rng = np.random.default_rng(8)
    centers = rng.normal(size=(2, sum(DIMS))) * 2
    bundles = {}
    for n in range(24):
        v = centers[n % 2] + rng.normal(size=sum(DIMS)) * 0.3
        parts = np.split(v, np.cumsum(DIMS)[:-1])
        cf = parts[0] if n % 4 else None
        bundles[f"i{n:02d}"] = FeatureBundle(f"i{n:02d}", text=parts[1], cf=cf, image=parts[2],
                                             location=parts[3])
    ids = sorted(bundles)
    pairs = []
    for k in range(0, 22, 2):
        pairs.append(PairExample(ids[k], ids[k + 2], 1))
        pairs.append(PairExample(ids[k], ids[k + 1], 0))
    return bundles, pairs


def test_hybrid_fit_learns(clustered):
    bundles, pairs = clustered
    m = hybrid_fit(bundles, pairs, epochs=30, step=0.05, seed=1, batch_size=8, tower=TOWER)
    assert len(m.loss_history) == 31
    assert m.loss_history[-1] < m.loss_history[0]
    assert m.group_dims == DIMS
    assert float(m.tau) > 0


def test_hybrid_fit_is_deterministic(clustered):
    bundles, pairs = clustered
    kwargs = dict(epochs=2, seed=4, tower=TOWER, cf_dropout=0.3)
    a, b = hybrid_fit(bundles, pairs, **kwargs), hybrid_fit(bundles, pairs, **kwargs)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)


def test_hybrid_fit_errors(clustered):
    bundles, pairs = clustered
    with pytest.raises(UnknownItemError):
        hybrid_fit(bundles, pairs + [PairExample("i00", "ghost", 1)], tower=TOWER)
    with pytest.raises(EmptyInputError):
        hybrid_fit(bundles, [p for p in pairs if p.positive], tower=TOWER)
    with pytest.raises(ValueError):
        hybrid_fit(bundles, pairs, step=0, tower=TOWER)
    with pytest.raises(ValueError):
        hybrid_fit(bundles, pairs, cf_dropout=1.0, tower=TOWER)


def test_hybrid_model_persistence(tmp_path, clustered):
    bundles, pairs = clustered
    m = hybrid_fit(bundles, pairs, epochs=1, tower=TOWER, variant="linear")
    m.save(tmp_path / "hybrid")
    loaded = HybridModel.load(tmp_path / "hybrid")
    assert loaded.variant == "linear" and loaded.group_dims == DIMS
    assert float(loaded.tau) == pytest.approx(float(m.tau))
    b = bundles["i05"]
    np.testing.assert_allclose(represent(b, loaded).vector, represent(b, m).vector, rtol=1e-6)


@pytest.mark.slow
def test_synthetic_pairs_beat_chance(synth_data):
    from recsys.mf import als_fit, build_matrix, location_fit
    from recsys.models import SignalWeightConfig
    from recsys.textpipe import cnn_fit, text_embed_many, tokenize, word2vec_fit

    ads = synth_data.ads
    cf = als_fit(build_matrix(synth_data.events, SignalWeightConfig.default()), rank=16, iters=8)
    loc = location_fit(synth_data.events, ads, rank=3, iters=8)
    wv = word2vec_fit([tokenize(ad.text) for ad in ads.values()], dim=16, epochs=3)
    clf = cnn_fit(ads.values(), wv, epochs=3, seq_len=32, filters=8, hidden=16)
    bundles = assemble_all(ads, cf, text_embed_many(ads.values(), clf, wv), None, loc)
    positives = build_pairs(synth_data.events)
    pairs = list(positives) + list(sample_negatives(positives, ads, ratio=1))
    m = hybrid_fit(bundles, pairs, epochs=10, seed=0)
    assert m.loss_history[-1] < math.log(2)
