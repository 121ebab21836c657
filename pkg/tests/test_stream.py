from collections import Counter

import numpy as np
import pytest

from pointpst import attacks as at
from pointpst import dataset as ds
from pointpst import model as md
from pointpst import stream as st
from pointpst.purify import PurifierKind
from pointpst.selftrain import PstConfig


def _fake_cache(test, kinds, shift=0.01):
    """Adversarial stand-ins: the clean cloud shifted by a kind-specific offset."""
    cache = {}
    for j, kind in enumerate(kinds):
        idx = np.arange(len(test))
        clouds = [test[i].points + shift * (j + 1) for i in idx]
        cache[kind] = at.AdversarialBatch(kind, at.attack_spec(kind), idx, test.labels, clouds)
    return cache


@pytest.fixture(scope="module")
def test_set():
    return ds.make_dataset(n_classes=5, per_class=20, n_points=16, seed=9, split="test")


def _key(sample):
    return (sample.index, sample.provenance)


def test_single_stream_conservation(test_set):
    spec = st.StreamSpec("single", ("pgd",), batch_size=7)
    stream = st.build_stream(test_set, _fake_cache(test_set, ["pgd"]), spec)
    samples = [s for b in stream for s in b.samples]
    assert sorted(s.index for s in samples) == list(range(len(test_set)))
    assert abs(sum(s.provenance == "pgd" for s in samples) - len(test_set) / 2) <= 1
    assert all(len(b) == 7 for b in stream[:-1]) and 1 <= len(stream[-1]) <= 7
    assert [b.index for b in stream] == list(range(len(stream)))
    for s in samples:
        assert s.label == test_set[s.index].label
        expected = test_set[s.index].points + (0.01 if s.provenance == "pgd" else 0.0)
        assert np.array_equal(s.points, expected)


def test_single_stream_shuffles_provenance(test_set):
    spec = st.StreamSpec("single", ("pgd",), batch_size=10)
    stream = st.build_stream(test_set, _fake_cache(test_set, ["pgd"]), spec)
    mixes = [len(set(b.provenance)) for b in stream]
    assert max(mixes) == 2


def test_mixed_stream_rotation_and_conservation(test_set):
    kinds = st.MIXED_DEFAULT
    spec = st.StreamSpec("mixed", kinds, batch_size=6)
    stream = st.build_stream(test_set, _fake_cache(test_set, kinds), spec)
    sources = ("clean", *kinds)
    for b in stream:
        tags = set(b.provenance)
        assert len(tags) == 1
    per_source = Counter(s.provenance for b in stream for s in b.samples)
    assert all(abs(c - len(test_set) / 5) <= 6 for c in per_source.values())
    # multiset comparison against the split subsets
    subsets = st.mixed_attack_split(len(test_set), spec)
    want = Counter((int(i), sources[k]) for k, idx in enumerate(subsets) for i in idx)
    got = Counter(_key(s) for b in stream for s in b.samples)
    assert got == want
    assert sorted(i for i, _ in got) == list(range(len(test_set)))


def test_mixed_batch_source_is_index_mod_5():
    test = ds.make_dataset(n_classes=5, per_class=32, n_points=8, seed=1, split="test")
    kinds = st.MIXED_DEFAULT
    spec = st.StreamSpec("mixed", kinds, batch_size=32)
    stream = st.build_stream(test, _fake_cache(test, kinds), spec)
    sources = ("clean", *kinds)
    assert len(stream) == 5
    for b in stream:
        assert set(b.provenance) == {sources[b.index % 5]}


def test_mixed_uneven_sources_drop_out():
    test = ds.make_dataset(n_classes=2, per_class=11, n_points=8, seed=2, split="test")
    spec = st.StreamSpec("mixed", ("pgd", "cw"), batch_size=4)
    stream = st.build_stream(test, _fake_cache(test, ["pgd", "cw"]), spec)
    assert sum(len(b) for b in stream) == 22
    # 6 chunks dealt to 3 sources: two full rounds, strict rotation throughout
    order = [b.provenance[0] for b in stream]
    assert order == ["clean", "pgd", "cw"] * 2


def test_stream_determinism(test_set):
    spec = st.StreamSpec("mixed", ("pgd", "cw"), split_seed=4, shuffle_seed=8, batch_size=5)
    cache = _fake_cache(test_set, ["pgd", "cw"])
    a = st.build_stream(test_set, cache, spec)
    b = st.build_stream(test_set, cache, spec)
    assert [[_key(s) for s in x.samples] for x in a] == [[_key(s) for s in x.samples] for x in b]
    c = st.build_stream(test_set, cache, st.StreamSpec("mixed", ("pgd", "cw"), 5, 8, 5))
    assert [[_key(s) for s in x.samples] for x in a] != [[_key(s) for s in x.samples] for x in c]


def test_missing_cache(test_set):
    spec = st.StreamSpec("single", ("cw",))
    with pytest.raises(st.MissingCacheError):
        st.build_stream(test_set, _fake_cache(test_set, ["pgd"]), spec)
    partial = _fake_cache(test_set, ["cw"])
    partial["cw"] = at.AdversarialBatch("cw", partial["cw"].spec, np.array([0]), np.array([0]),
                                        [test_set[0].points])
    with pytest.raises(st.MissingCacheError):
        st.build_stream(test_set, partial, spec)


def test_designated_indices_cover_attacked(test_set):
    for spec in (st.StreamSpec("single", ("pgd",)), st.StreamSpec("mixed", st.MIXED_DEFAULT, batch_size=8)):
        idx = st.designated_indices(len(test_set), spec)
        stream = st.build_stream(test_set, _fake_cache(test_set, spec.attack_kinds), spec)
        for kind, want in idx.items():
            got = sorted(s.index for b in stream for s in b.samples if s.provenance == kind)
            assert got == list(want)


def test_spec_validation():
    with pytest.raises(ValueError):
        st.StreamSpec("mixed", ())
    with pytest.raises(ValueError):
        st.StreamSpec("mixed", ("a", "b", "c", "d", "e"))
    with pytest.raises(ValueError):
        st.StreamSpec("single", ("pgd", "cw"))
    with pytest.raises(ValueError):
        st.StreamSpec("triple", ("pgd",))


# evaluation ---------------------------------------------------------------


@pytest.fixture(scope="module")
def model(test_set):
    train = ds.make_dataset(n_classes=5, per_class=12, n_points=16, seed=9)
    cfg = md.ClassifierConfig(n_classes=5, feature_dim=8, hidden=(8, 16), seed=9)
    w = md.pretrain_source(train, cfg, epochs=3, lr=0.3, seed=9)
    return w.frozen(), md.extract_source_stats(train, w.frozen())


def test_frozen_clean_stream_reproduces_accuracy(test_set, model):
    w, _ = model
    samples = [st.StreamSample(s.points, s.label, st.CLEAN, i) for i, s in enumerate(test_set.samples)]
    stream = [st.StreamBatch(b, samples[b * 16:(b + 1) * 16]) for b in range(-(-len(samples) // 16))]
    metrics, _ = st.evaluate_stream(stream, "frozen", st.EvalComponents(w))
    assert metrics.clean_acc == 100.0 * md.accuracy(test_set, w)
    assert np.isnan(metrics.adv_acc) and metrics.mixed_acc == metrics.clean_acc


def test_pst_mask_nothing_equals_purify_only(test_set, model):
    w, stats = model
    spec = st.StreamSpec("single", ("pgd",), batch_size=10)
    stream = st.build_stream(test_set, _fake_cache(test_set, ["pgd"]), spec)
    base = dict(purifier=PurifierKind.sor(), source_stats=stats, seed=3)
    off = st.EvalComponents(w, config=PstConfig(lam=0.0, fixed_threshold=1.01, batch_size=10), **base)
    m1, r1 = st.evaluate_stream(stream, "purify_only", off)
    m2, r2 = st.evaluate_stream(stream, "pst", off)
    assert [[s["predicted_label"] for s in r["samples"]] for r in r1] == \
        [[s["predicted_label"] for s in r["samples"]] for r in r2]
    assert all(r["n_masked"] == 0 for r in r2)
    assert m1.summary() == m2.summary()


def test_pst_does_not_touch_input_weights(test_set, model):
    w, stats = model
    before = w.checksum()
    stream = st.build_stream(test_set, _fake_cache(test_set, ["pgd"]), st.StreamSpec(batch_size=10))
    st.evaluate_stream(stream, "pst", st.EvalComponents(w, source_stats=stats,
                                                         config=PstConfig(batch_size=10, learning_rate=0.05)))
    assert w.checksum() == before


def test_log_replay_and_files(test_set, model, tmp_path):
    w, stats = model
    stream = st.build_stream(test_set, _fake_cache(test_set, st.MIXED_DEFAULT),
                             st.StreamSpec("mixed", st.MIXED_DEFAULT, batch_size=8))
    metrics, records = st.evaluate_stream(
        stream, "pst", st.EvalComponents(w, source_stats=stats, config=PstConfig(batch_size=8)))
    st.write_jsonl(records, tmp_path / "log.jsonl")
    st.write_time_series(metrics, tmp_path / "ts.csv")
    replay = st.read_jsonl(tmp_path / "log.jsonl")
    correct = Counter()
    total = Counter()
    for rec in replay:
        for s in rec["samples"]:
            total[s["provenance"]] += 1
            correct[s["provenance"]] += s["predicted_label"] == s["true_label"]
    assert metrics.mixed_acc == pytest.approx(100 * sum(correct.values()) / sum(total.values()), abs=1e-12)
    assert metrics.clean_acc == pytest.approx(100 * correct["clean"] / total["clean"], abs=1e-12)
    assert st.metrics_from_log(replay).time_series == metrics.time_series
    rows = st.read_time_series(tmp_path / "ts.csv")
    assert len(rows) == len(stream)
    assert list(rows[0]) == list(st.TIME_SERIES_COLUMNS)
    assert all(r["tau_g"] != "" for r in rows)


def test_pst_requires_source_stats(test_set, model):
    w, _ = model
    with pytest.raises(ValueError):
        st.evaluate_stream([], "pst", st.EvalComponents(w))
    with pytest.raises(ValueError):
        st.evaluate_stream([], "tent", st.EvalComponents(w))
