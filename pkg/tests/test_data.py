"""Corpus generation, splits, augmentation, and the audio front end."""
import json
import wave

import numpy as np
import pytest

from kwspot.data import (
    CorpusConfig,
    LogmelConfig,
    augment_noise,
    extract_logmel,
    generate_corpus,
    load_corpus,
    mel_filterbank,
    read_wav,
    split_by_speaker,
    stack_context,
)
from kwspot.errors import ConfigError, DataError, ValidationError
from kwspot.speaker import SpeakerProfile

from conftest import small_config


# ---------------------------------------------------------------------------
# generation

def test_regeneration_is_byte_identical(small_corpus_dir, tmp_path):
    again = tmp_path / "again"
    generate_corpus(small_config(), again)
    files = sorted(
        p.relative_to(small_corpus_dir)
        for p in small_corpus_dir.rglob("*")
        if p.is_file() and p.name != "generation_seconds.txt"
    )
    assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    for rel in files:
        assert (small_corpus_dir / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_different_seed_changes_the_corpus(tmp_path):
    generate_corpus(small_config(seed=8), tmp_path / "a")
    generate_corpus(small_config(seed=9), tmp_path / "b")
    a = (tmp_path / "a" / "speakers.jsonl").read_bytes()
    b = (tmp_path / "b" / "speakers.jsonl").read_bytes()
    assert a != b


def test_summary_counts(tmp_path):
    cfg = small_config()
    summary = generate_corpus(cfg, tmp_path / "c")
    speakers = sum(cfg.speakers_per_cell.values())
    per_speaker = cfg.positives_per_speaker + cfg.negatives_per_speaker
    assert summary["speakers"] == speakers
    assert summary["originals"] == speakers * per_speaker
    # only train utterances get augmented copies
    train_originals = summary["by_split"]["train"] - summary["augmented"]
    assert summary["augmented"] == train_originals * cfg.augment_copies
    assert summary["utterances"] == summary["originals"] + summary["augmented"]
    assert sum(summary["by_split"].values()) == summary["utterances"]
    # every positive yields one td and one ti enrollment embedding
    assert summary["enrollments"] == 2 * speakers * cfg.positives_per_speaker


def test_zero_negatives_gives_positive_only_manifest(tmp_path):
    generate_corpus(small_config(negatives_per_speaker=0), tmp_path / "p")
    corpus = load_corpus(tmp_path / "p")
    assert all(r.polarity == "positive" for r in corpus.records)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(speakers_per_cell={"A:adult": 1, "B:adult": 4})
    with pytest.raises(ConfigError):
        small_config(speakers_per_cell={"E:adult": 4})
    with pytest.raises(ConfigError):
        small_config(  # under-represented share above 0.2
            speakers_per_cell={"A:adult": 4, "B:child": 2},
        )
    with pytest.raises(ConfigError):
        small_config(keyword_len_range=(36, 70))  # longer than shortest utt
    with pytest.raises(ConfigError):
        small_config(keyword_len_range=(3, 10))  # span must be >= 5
    with pytest.raises(ConfigError):
        small_config(positives_per_speaker=0)
    with pytest.raises(ConfigError):
        small_config(split_fractions=(0.9, 0.2, -0.1))
    with pytest.raises(ConfigError):
        small_config(augment_snr_range=(5.0, 50.0))
    with pytest.raises(ConfigError):
        CorpusConfig.from_dict({"feature_dim": 16, "mystery_knob": 3})


def test_config_round_trips_through_json():
    cfg = small_config()
    back = CorpusConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


# ---------------------------------------------------------------------------
# splits

def test_splits_are_speaker_disjoint(small_corpus):
    by_split = {
        s: {r.speaker_id for r in small_corpus.by_split(s)}
        for s in ("train", "dev", "eval")
    }
    assert by_split["train"] & by_split["dev"] == set()
    assert by_split["train"] & by_split["eval"] == set()
    assert by_split["dev"] & by_split["eval"] == set()


def test_every_cell_reaches_eval(small_corpus):
    eval_cells = {r.cell for r in small_corpus.by_split("eval")}
    assert eval_cells == set(small_corpus.config.speakers_per_cell)


def test_split_quota_follows_fractions():
    rng = np.random.default_rng(0)

    def profile(i, locale, age):
        v = np.random.default_rng(i).standard_normal(16)
        return SpeakerProfile(f"s{i:03d}", locale, age, v / np.linalg.norm(v))

    profiles = {}
    i = 0
    for locale, age, n in (("A", "adult", 10), ("B", "child", 5), ("C", "adult", 20)):
        for _ in range(n):
            profiles[f"s{i:03d}"] = profile(i, locale, age)
            i += 1
    assignment = split_by_speaker(profiles, (0.8, 0.1, 0.1), rng)
    cells = {"A:adult": 10, "B:child": 5, "C:adult": 20}
    for cell, n in cells.items():
        got = {s: 0 for s in ("train", "dev", "eval")}
        for sid, p in profiles.items():
            if p.cell == cell:
                got[assignment[sid]] += 1
        assert sum(got.values()) == n
        # quota per split within one speaker of the exact fraction
        for split, frac in zip(("train", "dev", "eval"), (0.8, 0.1, 0.1)):
            assert abs(got[split] - n * frac) <= 1.0, (cell, split, got)
        assert got["eval"] >= 1 and got["train"] >= 1


def test_ten_speakers_eight_one_one():
    rng = np.random.default_rng(1)
    profiles = {}
    for i in range(10):
        v = np.random.default_rng(100 + i).standard_normal(16)
        profiles[f"s{i}"] = SpeakerProfile(f"s{i}", "A", "adult", v / np.linalg.norm(v))
    assignment = split_by_speaker(profiles, (0.8, 0.1, 0.1), rng)
    counts = {s: list(assignment.values()).count(s) for s in ("train", "dev", "eval")}
    assert counts == {"train": 8, "dev": 1, "eval": 1}


def test_split_rejects_tiny_cells():
    v = np.ones(16) / 4.0
    profiles = {"only": SpeakerProfile("only", "A", "adult", v)}
    with pytest.raises(ConfigError):
        split_by_speaker(profiles, (0.7, 0.1, 0.2), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# labels and augmentation

def test_labels_are_valid_spans(small_corpus):
    for r in small_corpus.records:
        seq = small_corpus.label_sequence(r)
        if r.polarity == "positive":
            assert seq.span is not None
            start, end = seq.span
            assert end - start >= 5
            inside = np.zeros_like(seq.labels)
            inside[start:end] = 1
            np.testing.assert_array_equal(seq.labels, inside)  # one contiguous run
        else:
            assert seq.span is None
            assert not seq.labels.any()


def test_augmented_copies_keep_labels_and_shape(small_corpus):
    augmented = [r for r in small_corpus.records if r.source_id is not None]
    assert augmented, "expected augmented train copies"
    lo, hi = small_corpus.config.augment_snr_range
    for r in augmented[:20]:
        origin = small_corpus.by_id[r.source_id]
        np.testing.assert_array_equal(small_corpus.labels(r), small_corpus.labels(origin))
        assert small_corpus.features(r).shape == small_corpus.features(origin).shape
        assert r.split == "train"
        assert lo <= r.snr_db <= hi


def test_augment_noise_hits_the_requested_snr():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        frames = rng.standard_normal((int(rng.integers(20, 80)), 16)) * rng.uniform(0.5, 3.0)
        snr = float(rng.uniform(0.0, 40.0))
        out = augment_noise(frames, snr, rng)
        noise = out - frames
        measured = 10.0 * np.log10(np.mean(frames**2) / np.mean(noise**2))
        worst = max(worst, abs(measured - snr))
    assert worst <= 0.1
    # the rescaling actually makes it exact to float precision
    assert worst <= 1e-9


def test_high_snr_barely_moves_frames():
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((50, 16))
    out = augment_noise(frames, 40.0, np.random.default_rng(4))
    rel = np.abs(out - frames).mean() / np.abs(frames).mean()
    assert rel < 0.05


def test_augment_noise_determinism_and_validation():
    frames = np.ones((10, 4))
    a = augment_noise(frames, 10.0, np.random.default_rng(5))
    b = augment_noise(frames, 10.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValidationError):
        augment_noise(frames, 41.0, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        augment_noise(frames, -1.0, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        augment_noise(np.zeros((10, 4)), 10.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# loader

def test_loader_round_trip(small_corpus_dir, small_corpus):
    manifest_rows = [
        json.loads(line)
        for line in (small_corpus_dir / "manifest.jsonl").read_text().splitlines()
    ]
    assert len(manifest_rows) == len(small_corpus.records)
    r = small_corpus.records[0]
    x = small_corpus.features(r)
    y = small_corpus.labels(r)
    assert x.shape[0] == y.shape[0]
    assert x.shape[1] == small_corpus.config.feature_dim
    assert small_corpus.store.profiles is not None
    assert small_corpus.store.embedding_seed is not None
    assert len(small_corpus.fingerprint) == 64


def test_loader_rejects_non_corpus_dir(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path)


def test_by_split_filters(small_corpus):
    train = small_corpus.by_split("train")
    originals = small_corpus.by_split("train", originals_only=True)
    assert len(originals) < len(train)
    assert all(r.source_id is None for r in originals)
    with pytest.raises(ValidationError):
        small_corpus.by_split("test")


# ---------------------------------------------------------------------------
# group structure

def test_locales_are_linearly_separable(default_corpus):
    """Mean frame features carry the group shift. Per-speaker variation is
    deliberately larger than the locale shift, so a least-squares probe on
    unseen speakers lands far above majority-class chance (about 0.29) but
    nowhere near perfect."""
    locales = sorted({r.locale for r in default_corpus.records})

    def mean_features(split):
        rows, targets = [], []
        for r in default_corpus.by_split(split, originals_only=True):
            rows.append(default_corpus.features(r).mean(axis=0))
            targets.append(locales.index(r.locale))
        return np.stack(rows), np.array(targets)

    x_train, y_train = mean_features("train")
    x_eval, y_eval = mean_features("eval")
    ones = lambda x: np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    onehot = np.eye(len(locales))[y_train]
    w, *_ = np.linalg.lstsq(ones(x_train), onehot, rcond=None)
    pred = np.argmax(ones(x_eval) @ w, axis=1)
    accuracy = float(np.mean(pred == y_eval))
    assert accuracy > 0.5, accuracy


def test_underrepresented_cells_are_small_but_present(default_corpus):
    cfg = default_corpus.config
    total = sum(cfg.speakers_per_cell.values())
    under = sum(cfg.speakers_per_cell[c] for c in cfg.underrep_cells)
    assert under / total <= 0.2
    for cell in cfg.underrep_cells:
        assert any(r.cell == cell for r in default_corpus.by_split("eval"))


# ---------------------------------------------------------------------------
# audio front end

def test_one_second_gives_98_frames():
    out = extract_logmel(np.random.default_rng(0).standard_normal(16000) * 0.1)
    assert out.frames.shape == (98, 80)


def test_silence_floors_every_bin():
    out = extract_logmel(np.zeros(16000))
    np.testing.assert_array_equal(out.frames, np.full((98, 80), np.log(1e-10)))


def test_pure_tone_peaks_at_the_nearest_mel_bin():
    cfg = LogmelConfig(context_left=0)
    t = np.arange(16000) / 16000.0
    tone = 0.5 * np.sin(2.0 * np.pi * 1000.0 * t)
    out = extract_logmel(tone, cfg)
    got_bin = int(np.bincount(np.argmax(out.frames, axis=1)).argmax())

    # centers of the triangular filters, recovered from the filterbank itself
    fb = mel_filterbank(cfg)
    freqs = np.arange(fb.shape[1]) * cfg.sample_rate / cfg.n_fft
    centers = freqs[np.argmax(fb, axis=1)]
    assert got_bin == int(np.argmin(np.abs(centers - 1000.0)))


def test_stack_context_replicates_the_left_edge():
    mel = np.arange(12.0).reshape(4, 3)
    out = stack_context(mel, 1)
    assert out.shape == (4, 6)
    np.testing.assert_array_equal(out[0], np.concatenate([mel[0], mel[0]]))
    np.testing.assert_array_equal(out[2], np.concatenate([mel[1], mel[2]]))
    np.testing.assert_array_equal(stack_context(mel, 0), mel)


def test_logmel_input_validation():
    with pytest.raises(DataError):
        extract_logmel(np.zeros((100, 2)))  # not 1-d
    with pytest.raises(DataError):
        extract_logmel(np.zeros(399))  # shorter than one window


def write_wav(path, rate=16000, channels=1, width=2, seconds=0.5):
    n = int(rate * seconds)
    samples = (np.sin(np.arange(n) * 0.1) * 20000).astype("<i2")
    if channels == 2:
        samples = np.repeat(samples, 2)
    if width == 1:
        samples = (samples // 256 + 128).astype(np.uint8)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(samples.tobytes())


def test_read_wav_round_trip(tmp_path):
    path = tmp_path / "ok.wav"
    write_wav(path)
    samples = read_wav(path)
    assert samples.shape == (8000,)
    assert np.abs(samples).max() <= 1.0
    out = extract_logmel(samples)
    assert out.frames.shape == ((8000 - 400) // 160 + 1, 80)


def test_read_wav_rejections(tmp_path):
    stereo = tmp_path / "stereo.wav"
    write_wav(stereo, channels=2)
    with pytest.raises(DataError):
        read_wav(stereo)
    slow = tmp_path / "slow.wav"
    write_wav(slow, rate=8000)
    with pytest.raises(DataError):
        read_wav(slow)
    narrow = tmp_path / "narrow.wav"
    write_wav(narrow, width=1)
    with pytest.raises(DataError):
        read_wav(narrow)
    not_wav = tmp_path / "not.wav"
    not_wav.write_bytes(b"datadata")
    with pytest.raises(DataError):
        read_wav(not_wav)
