"""Embedding simulator statistics, enrollment pairing, and the store."""
from types import SimpleNamespace

import numpy as np
import pytest

from kwspot.errors import (
    DataError,
    NoEnrollmentError,
    UsageError,
    ValidationError,
)
from kwspot.speaker import (
    EMBEDDING_DIMS,
    LATENT_DIM,
    EnrollmentStore,
    SpeakerEmbedding,
    SpeakerProfile,
    constant_vector,
    load_profiles,
    pair_enrollment,
    save_profiles,
    synth_embedding,
    variant_embedding_dim,
    variant_kind,
)


def unit_latent(rng):
    v = rng.standard_normal(LATENT_DIM)
    return v / np.linalg.norm(v)


def make_profile(rng, speaker_id="spk0", locale="A", age_group="adult"):
    return SpeakerProfile(
        speaker_id=speaker_id, locale=locale, age_group=age_group,
        latent=unit_latent(rng),
    )


def record(utt_id, speaker_id="spk0", source_id=None):
    return SimpleNamespace(id=utt_id, speaker_id=speaker_id, source_id=source_id)


# ---------------------------------------------------------------------------
# simulator

def test_synth_embedding_is_deterministic():
    rng = np.random.default_rng(0)
    p = make_profile(rng)
    a = synth_embedding(p, "utt1", "td", seed=9)
    b = synth_embedding(p, "utt1", "td", seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    c = synth_embedding(p, "utt2", "td", seed=9)
    assert a.values.tobytes() != c.values.tobytes()


def test_embeddings_are_unit_norm_with_paper_dims():
    rng = np.random.default_rng(1)
    p = make_profile(rng)
    td = synth_embedding(p, "u", "td", seed=0)
    ti = synth_embedding(p, "u", "ti", seed=0)
    assert td.dim == 64 and td.values.shape == (64,)
    assert ti.dim == 256 and ti.values.shape == (256,)
    np.testing.assert_allclose(np.linalg.norm(td.values), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(ti.values), 1.0, rtol=1e-12)


def test_synth_rejects_unknown_kind():
    rng = np.random.default_rng(2)
    with pytest.raises(ValidationError):
        synth_embedding(make_profile(rng), "u", "absent", seed=0)


def test_cosine_ordering_monte_carlo():
    """Within-speaker similarity: td beats ti, both beat cross-speaker,
    and the within-vs-cross gap is wide. 100 speakers x 10 utterances."""
    rng = np.random.default_rng(3)
    speakers = [make_profile(rng, f"s{i}") for i in range(100)]
    within = {"td": [], "ti": []}
    firsts = {"td": [], "ti": []}
    for kind in ("td", "ti"):
        for p in speakers:
            embs = [
                synth_embedding(p, f"u{j}", kind, seed=7).values
                for j in range(10)
            ]
            gram = np.array(embs) @ np.array(embs).T
            idx = np.triu_indices(10, k=1)
            within[kind].append(gram[idx].mean())
            firsts[kind].append(embs[0])
    cross = []
    for kind in ("td", "ti"):
        mat = np.array(firsts[kind])
        gram = mat @ mat.T
        idx = np.triu_indices(len(speakers), k=1)
        cross.append(gram[idx].mean())
    td_within = float(np.mean(within["td"]))
    ti_within = float(np.mean(within["ti"]))
    cross_mean = float(np.mean(cross))
    assert td_within > ti_within > cross_mean
    assert td_within - cross_mean >= 0.2
    assert ti_within - cross_mean >= 0.2


# ---------------------------------------------------------------------------
# constant vector

def test_constant_vector_is_zeros():
    e = constant_vector(64)
    assert e.kind == "absent"
    np.testing.assert_array_equal(e.values, np.zeros(64))
    e2 = constant_vector(64)
    np.testing.assert_array_equal(e.values, e2.values)
    with pytest.raises(ValidationError):
        constant_vector(0)


def test_constant_vector_cannot_be_enrolled():
    store = EnrollmentStore()
    with pytest.raises(UsageError):
        store.add(constant_vector(64))


# ---------------------------------------------------------------------------
# pairing

def test_variant_tables():
    assert variant_kind("baseline") is None
    assert variant_kind("ti_self") == "ti"
    assert variant_kind("td_cross") == "td"
    assert variant_embedding_dim("baseline") == 0
    assert variant_embedding_dim("ti_cross") == EMBEDDING_DIMS["ti"]
    with pytest.raises(ValidationError):
        variant_kind("nonsense")


def test_baseline_pairs_to_none():
    rng = np.random.default_rng(4)
    assert pair_enrollment(record("u1"), EnrollmentStore(), "baseline", rng) is None


def test_self_enrollment_reuses_the_query_utterance():
    rng = np.random.default_rng(5)
    p = make_profile(rng)
    store = EnrollmentStore(profiles={p.speaker_id: p}, embedding_seed=3)
    emb = pair_enrollment(record("u42"), store, "ti_self", rng)
    assert emb.kind == "ti"
    assert emb.source_utterance_id == "u42"
    # exactly the embedding a scorer would extract from that utterance
    query = synth_embedding(p, "u42", "ti", seed=3)
    # identical vector, so cosine is 1 up to the last bit of the dot product
    assert emb.values.tobytes() == query.values.tobytes()
    cosine = (emb.values @ query.values) / (
        np.linalg.norm(emb.values) * np.linalg.norm(query.values)
    )
    assert abs(float(cosine) - 1.0) < 1e-15


def test_self_enrollment_needs_profiles():
    rng = np.random.default_rng(6)
    with pytest.raises(UsageError):
        pair_enrollment(record("u"), EnrollmentStore(), "ti_self", rng)
    store = EnrollmentStore(profiles={}, embedding_seed=1)
    with pytest.raises(NoEnrollmentError):
        pair_enrollment(record("u"), store, "ti_self", rng)


def test_cross_with_single_enrollment_returns_it():
    rng = np.random.default_rng(7)
    p = make_profile(rng)
    store = EnrollmentStore()
    store.add(synth_embedding(p, "enroll1", "td", seed=0))
    emb = pair_enrollment(record("u_other"), store, "td_cross", rng)
    assert emb.kind == "td" and emb.dim == 64
    assert emb.source_utterance_id == "enroll1"


def test_cross_excludes_the_query_and_its_origin():
    rng = np.random.default_rng(8)
    p = make_profile(rng)
    store = EnrollmentStore()
    for utt in ("u1", "u2"):
        store.add(synth_embedding(p, utt, "td", seed=0))
    # the only other enrollment comes from u2, never from u1 itself
    for _ in range(20):
        assert pair_enrollment(record("u1"), store, "td_cross", rng).source_utterance_id == "u2"
    # an augmented copy excludes its origin utterance as well
    for _ in range(20):
        got = pair_enrollment(
            record("u1_aug0", source_id="u1"), store, "td_cross", rng
        )
        assert got.source_utterance_id == "u2"
    with pytest.raises(NoEnrollmentError):
        pair_enrollment(record("u2", source_id="u1"), store, "td_cross", rng)


def test_cross_choice_is_uniform():
    rng = np.random.default_rng(9)
    p = make_profile(rng)
    store = EnrollmentStore()
    for utt in ("e1", "e2", "e3", "e4"):
        store.add(synth_embedding(p, utt, "td", seed=0))
    counts = {}
    for _ in range(10_000):
        src = pair_enrollment(record("query"), store, "td_cross", rng).source_utterance_id
        counts[src] = counts.get(src, 0) + 1
    for src, n in counts.items():
        assert abs(n / 10_000 - 0.25) <= 0.02, (src, n)


def test_cross_never_returns_another_speaker():
    rng = np.random.default_rng(10)
    a, b = make_profile(rng, "a"), make_profile(rng, "b")
    store = EnrollmentStore()
    store.add(synth_embedding(a, "ua", "td", seed=0))
    store.add(synth_embedding(b, "ub", "td", seed=0))
    for _ in range(10):
        assert pair_enrollment(record("q", speaker_id="a"), store, "td_cross", rng).speaker_id == "a"
    assert store.lookup("a", "td")[0].speaker_id == "a"
    assert store.lookup("a", "ti") == []
    assert store.lookup("missing", "td") == []


# ---------------------------------------------------------------------------
# persistence

def test_store_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    store = EnrollmentStore()
    for i in range(3):
        p = make_profile(rng, f"s{i}")
        store.add(synth_embedding(p, f"u{i}a", "td", seed=1))
        store.add(synth_embedding(p, f"u{i}b", "ti", seed=1))
    path = tmp_path / "enroll.jsonl"
    store.save(path)
    loaded = EnrollmentStore.load(path)
    assert loaded.speakers() == store.speakers()
    assert len(loaded) == len(store)
    for sid in store.speakers():
        for kind in ("td", "ti"):
            orig = store.lookup(sid, kind)
            back = loaded.lookup(sid, kind)
            assert len(orig) == len(back)
            for a, b in zip(orig, back):
                np.testing.assert_array_equal(a.values, b.values)
                assert a.source_utterance_id == b.source_utterance_id


def test_store_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"speaker_id": "s", "kind": "td"}\n')
    with pytest.raises(DataError):
        EnrollmentStore.load(path)


def test_profiles_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    profiles = {
        f"s{i}": make_profile(rng, f"s{i}", locale="B", age_group="child")
        for i in range(4)
    }
    profiles["s0"].feature_shift = rng.standard_normal(16)
    path = tmp_path / "speakers.jsonl"
    save_profiles(profiles, path)
    back = load_profiles(path)
    assert sorted(back) == sorted(profiles)
    np.testing.assert_array_equal(back["s1"].latent, profiles["s1"].latent)
    np.testing.assert_array_equal(back["s0"].feature_shift, profiles["s0"].feature_shift)
    assert back["s2"].feature_shift is None
    assert back["s3"].cell == "B:child"


def test_profiles_load_rejects_bad_latent(tmp_path):
    path = tmp_path / "speakers.jsonl"
    path.write_text(
        '{"speaker_id": "s", "locale": "A", "age_group": "adult", '
        '"latent": [1.0, 2.0]}\n'
    )
    with pytest.raises(DataError):
        load_profiles(path)


# ---------------------------------------------------------------------------
# validation

def test_profile_validations():
    rng = np.random.default_rng(13)
    with pytest.raises(ValidationError):
        SpeakerProfile("s", "Z", "adult", unit_latent(rng))
    with pytest.raises(ValidationError):
        SpeakerProfile("s", "A", "teen", unit_latent(rng))
    with pytest.raises(ValidationError):
        SpeakerProfile("s", "A", "adult", np.ones(LATENT_DIM))  # |v| = 4


def test_embedding_validations():
    with pytest.raises(ValidationError):
        SpeakerEmbedding("s", "td", 32, np.zeros(32))  # td must be 64
    with pytest.raises(ValidationError):
        SpeakerEmbedding("s", "ti", 64, np.zeros(64))  # ti must be 256
    with pytest.raises(ValidationError):
        SpeakerEmbedding("s", "td", 64, np.zeros(65))  # shape vs dim
    with pytest.raises(ValidationError):
        SpeakerEmbedding("s", "mystery", 4, np.zeros(4))
    with pytest.raises(ValidationError):
        SpeakerEmbedding("s", "absent", 4, np.array([0.0, 0.0, 1.0, 0.0]))
