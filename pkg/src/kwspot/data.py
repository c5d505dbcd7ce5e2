"""Synthetic corpus generation, speaker-disjoint splits, and the audio front end.

The corpus is built to exercise a speaker-conditioned detector without any
recorded audio. Each utterance is a (frames, feature_dim) float sequence:

* background: iid Gaussian noise plus a per-group bias vector (the "group
  shift"), so locale and age group leave a recoverable imprint on the
  features;
* positives: a keyword trajectory added over a contiguous span. The
  trajectory is an enveloped mix of a global base pattern (shared by all
  speakers) and a rank-1 speaker component along a direction determined by
  the speaker's latent vector, so part of the evidence is only usable if
  you know who is speaking;
* negatives: optionally a distractor trajectory built the same way from a
  perturbed base pattern and a wrong latent, i.e. what some other speaker's
  keyword would look like. Rejecting those is where enrollment pays off.

Under-represented cells get a doubled group shift, a weaker shared base,
and a stronger speaker component, which is what makes the baseline
detector degrade there and conditioning recover most of the loss.

Everything is deterministic given (config, seed): regenerating a corpus
produces byte-identical files.

The log-mel front end at the bottom converts 16 kHz mono PCM into stacked
log-mel frames for the streaming CLI path; the synthetic corpus does not
use it.
"""
from __future__ import annotations

import hashlib
import json
import math
import wave
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .seeding import derive_seed, rng_for
from .speaker import (
    AGE_GROUPS,
    LATENT_DIM,
    LOCALES,
    EnrollmentStore,
    SpeakerProfile,
    load_profiles,
    save_profiles,
    synth_embedding,
)
from .tensorio import canonical_json, read_tensor_file, write_tensor_file

__all__ = [
    "CorpusConfig",
    "UtteranceRecord",
    "FeatureSequence",
    "LabelSequence",
    "Corpus",
    "generate_corpus",
    "load_corpus",
    "split_by_speaker",
    "augment_noise",
    "LogmelConfig",
    "read_wav",
    "extract_logmel",
    "stack_context",
    "mel_filterbank",
    "DEFAULT_SPEAKERS_PER_CELL",
]

SPLITS = ("train", "dev", "eval")

DEFAULT_SPEAKERS_PER_CELL = {
    "A:adult": 64, "B:adult": 64, "C:adult": 64, "D:adult": 64,
    "A:child": 52, "C:child": 52,
    "B:child": 20, "D:child": 20,
}


@dataclass
class CorpusConfig:
    """Everything the generator needs. Unknown keys are rejected on load."""

    feature_dim: int = 16
    speakers_per_cell: dict = field(default_factory=lambda: dict(DEFAULT_SPEAKERS_PER_CELL))
    positives_per_speaker: int = 10
    negatives_per_speaker: int = 10
    frame_len_range: tuple = (60, 100)
    keyword_len_range: tuple = (36, 44)
    amp_common: float = 1.25
    amp_speaker: float = 3.6
    # How tightly speaker latents cluster around a shared mean direction.
    # 0 spreads them uniformly over the sphere; larger values concentrate
    # them on a cap, which gives speaker embeddings the nonzero mean that
    # real speaker-encoder vectors have. The constant stand-in embedding
    # then sits far outside the training cloud.
    latent_mean_weight: float = 4.0
    group_shift: float = 0.5
    noise_sigma: float = 1.0
    distractor_fraction: float = 0.75
    distractor_corr_range: tuple = (0.6, 0.9)
    underrep_cells: tuple = ("B:child", "D:child")
    underrep_shift_mult: float = 2.0
    underrep_common_mult: float = 0.7
    underrep_speaker_mult: float = 1.6
    augment_copies: int = 2
    augment_snr_range: tuple = (5.0, 20.0)
    split_fractions: tuple = (0.7, 0.1, 0.2)
    seed: int = 7

    def __post_init__(self):
        self.frame_len_range = tuple(int(v) for v in self.frame_len_range)
        self.keyword_len_range = tuple(int(v) for v in self.keyword_len_range)
        self.distractor_corr_range = tuple(float(v) for v in self.distractor_corr_range)
        self.augment_snr_range = tuple(float(v) for v in self.augment_snr_range)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        self.underrep_cells = tuple(self.underrep_cells)
        self.validate()

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if not self.speakers_per_cell:
            raise ConfigError("speakers_per_cell is empty")
        total = 0
        for cell, count in self.speakers_per_cell.items():
            loc, _, age = cell.partition(":")
            if loc not in LOCALES or age not in AGE_GROUPS:
                raise ConfigError(f"bad cell key {cell!r}, want '<locale>:<age_group>'")
            if int(count) < 2:
                raise ConfigError(
                    f"cell {cell!r} has {count} speakers; every cell needs >= 2 "
                    "so train and eval splits can both be covered"
                )
            total += int(count)
        for cell in self.underrep_cells:
            if cell not in self.speakers_per_cell:
                raise ConfigError(f"under-represented cell {cell!r} not in speakers_per_cell")
        under = sum(int(self.speakers_per_cell[c]) for c in self.underrep_cells)
        if self.underrep_cells and under / total > 0.2:
            raise ConfigError(
                f"under-represented cells hold {under}/{total} speakers; "
                "their share must stay <= 0.2"
            )
        if self.positives_per_speaker < 0 or self.negatives_per_speaker < 0:
            raise ConfigError("utterance counts cannot be negative")
        if self.positives_per_speaker == 0:
            raise ConfigError("need at least one positive per speaker for enrollment")
        lo, hi = self.frame_len_range
        klo, khi = self.keyword_len_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad frame_len_range {self.frame_len_range}")
        if not (5 <= klo <= khi):
            raise ConfigError(
                f"bad keyword_len_range {self.keyword_len_range} (span must be >= 5)"
            )
        if khi > lo:
            raise ConfigError(
                f"keyword_len_range {self.keyword_len_range} cannot exceed the "
                f"shortest utterance length {lo}"
            )
        if not (0.0 <= self.distractor_fraction <= 1.0):
            raise ConfigError(f"distractor_fraction must be in [0, 1]")
        clo, chi = self.distractor_corr_range
        if not (-1.0 <= clo <= chi <= 1.0):
            raise ConfigError(f"bad distractor_corr_range {self.distractor_corr_range}")
        if self.noise_sigma < 0 or self.group_shift < 0:
            raise ConfigError("noise_sigma and group_shift cannot be negative")
        if self.latent_mean_weight < 0:
            raise ConfigError(
                f"latent_mean_weight cannot be negative, got {self.latent_mean_weight}"
            )
        if self.augment_copies < 0:
            raise ConfigError("augment_copies cannot be negative")
        slo, shi = self.augment_snr_range
        if not (0.0 <= slo <= shi <= 40.0):
            raise ConfigError(f"augment SNR range must sit inside [0, 40] dB")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be 3 nonnegative values summing to 1")
        if fr[0] <= 0 or fr[2] <= 0:
            raise ConfigError("train and eval fractions must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speakers_per_cell"] = dict(sorted(self.speakers_per_cell.items()))
        for key in (
            "frame_len_range", "keyword_len_range", "distractor_corr_range",
            "augment_snr_range", "split_fractions", "underrep_cells",
        ):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class UtteranceRecord:
    """One manifest row."""

    id: str
    speaker_id: str
    split: str
    polarity: str  # "positive" | "negative"
    locale: str
    age_group: str
    feature_ref: str
    label_ref: str
    enrollment_utterances: list = field(default_factory=list)
    source_id: str | None = None
    snr_db: float | None = None

    @property
    def cell(self) -> str:
        return f"{self.locale}:{self.age_group}"


@dataclass
class FeatureSequence:
    utterance_id: str
    speaker_id: str
    frames: np.ndarray  # (n_frames, dim) float64
    meta: dict = field(default_factory=dict)


@dataclass
class LabelSequence:
    labels: np.ndarray  # (n_frames,) int64 of 0/1
    span: tuple | None  # (start, end) of the keyword for positives

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "LabelSequence":
        labels = np.asarray(labels, dtype=np.int64)
        idx = np.flatnonzero(labels)
        span = (int(idx[0]), int(idx[-1]) + 1) if idx.size else None
        return cls(labels=labels, span=span)


# ---------------------------------------------------------------------------
# trajectory bank

class _PatternBank:
    """Global deterministic patterns shared by the whole corpus."""

    def __init__(self, cfg: CorpusConfig, seed: int):
        rng = rng_for(seed, "patterns")
        dim = cfg.feature_dim
        # Base keyword trajectory: 3 random sinusoids per feature dim.
        self.base_amp = rng.uniform(0.5, 1.0, size=(dim, 3))
        self.base_freq = rng.integers(1, 4, size=(dim, 3))
        self.base_phase = rng.uniform(0.0, 2.0 * np.pi, size=(dim, 3))
        # Speaker direction map: latent -> feature space.
        self.latent_map = rng.standard_normal((dim, LATENT_DIM)) / np.sqrt(dim)
        # One unit shift direction per group cell, in sorted cell order.
        self.shift_dirs = {}
        for locale in LOCALES:
            for age in AGE_GROUPS:
                v = rng.standard_normal(dim)
                self.shift_dirs[f"{locale}:{age}"] = v / np.linalg.norm(v)
        # Population mean of the speaker latents (the cap center).
        m = rng.standard_normal(LATENT_DIM)
        self.latent_mean = m / np.linalg.norm(m)

    def _sinusoids(self, amp, freq, phase, length: int) -> np.ndarray:
        t = np.linspace(0.0, 1.0, length)[:, None, None]
        waves = amp * np.sin(2.0 * np.pi * freq * t + phase)
        traj = waves.sum(axis=2)  # (length, dim)
        norms = np.linalg.norm(traj, axis=1)
        return traj / max(norms.mean(), 1e-12)

    def base_traj(self, length: int) -> np.ndarray:
        """Shared keyword shape, mean per-frame norm 1."""
        return self._sinusoids(self.base_amp, self.base_freq, self.base_phase, length)

    def random_traj(self, length: int, rng: np.random.Generator) -> np.ndarray:
        """A fresh trajectory from the same family, for distractors."""
        dim = self.base_amp.shape[0]
        amp = rng.uniform(0.5, 1.0, size=(dim, 3))
        freq = rng.integers(1, 4, size=(dim, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(dim, 3))
        return self._sinusoids(amp, freq, phase, length)

    def speaker_dir(self, latent: np.ndarray) -> np.ndarray:
        """Acoustic direction for a latent, with the cap mean projected out.

        Centering keeps the directions spread out however concentrated the
        latents are, so the separation of the wrong-speaker distractors does
        not depend on latent_mean_weight.
        """
        c = latent - (latent @ self.latent_mean) * self.latent_mean
        n = np.linalg.norm(c)
        if n < 1e-12:
            c, n = self.latent_mean, 1.0
        d = self.latent_map @ (c / n)
        return d / np.linalg.norm(d)

    @staticmethod
    def envelope(length: int, ramp: int = 3) -> np.ndarray:
        env = np.ones(length)
        r = min(ramp, length // 2)
        if r > 0:
            rise = 0.5 * (1.0 - np.cos(np.pi * (np.arange(r) + 1) / (r + 1)))
            env[:r] = rise
            env[length - r :] = rise[::-1]
        return env


def _cell_mults(cfg: CorpusConfig, cell: str) -> tuple[float, float, float]:
    """(common amp mult, speaker amp mult, shift mult) for a group cell."""
    if cell in cfg.underrep_cells:
        return cfg.underrep_common_mult, cfg.underrep_speaker_mult, cfg.underrep_shift_mult
    return 1.0, 1.0, 1.0


def _keyword_traj(
    bank: _PatternBank, cfg: CorpusConfig, cell: str, direction: np.ndarray, length: int
) -> np.ndarray:
    cm, sm, _ = _cell_mults(cfg, cell)
    base = bank.base_traj(length)
    env = bank.envelope(length)
    mix = cfg.amp_common * cm * base + cfg.amp_speaker * sm * direction[None, :]
    return env[:, None] * mix


def _distractor_traj(
    bank: _PatternBank,
    cfg: CorpusConfig,
    cell: str,
    length: int,
    rng: np.random.Generator,
) -> np.ndarray:
    cm, sm, _ = _cell_mults(cfg, cell)
    lo, hi = cfg.distractor_corr_range
    corr = rng.uniform(lo, hi)
    wrong_latent = rng.standard_normal(LATENT_DIM)
    wrong_latent /= np.linalg.norm(wrong_latent)
    base = corr * bank.base_traj(length) + math.sqrt(1.0 - corr * corr) * bank.random_traj(
        length, rng
    )
    env = bank.envelope(length)
    mix = (
        cfg.amp_common * cm * base
        + cfg.amp_speaker * sm * bank.speaker_dir(wrong_latent)[None, :]
    )
    return env[:, None] * mix


# ---------------------------------------------------------------------------
# generation

def _make_speakers(cfg: CorpusConfig, bank: _PatternBank) -> dict:
    profiles = {}
    n = 0
    for cell in sorted(cfg.speakers_per_cell):
        locale, _, age = cell.partition(":")
        _, _, shift_mult = _cell_mults(cfg, cell)
        shift = bank.shift_dirs[cell] * cfg.group_shift * shift_mult
        for _ in range(int(cfg.speakers_per_cell[cell])):
            speaker_id = f"s{n:03d}"
            n += 1
            rng = rng_for(cfg.seed, "speaker", speaker_id)
            latent = cfg.latent_mean_weight * bank.latent_mean + rng.standard_normal(
                LATENT_DIM
            )
            latent /= np.linalg.norm(latent)
            profiles[speaker_id] = SpeakerProfile(
                speaker_id=speaker_id,
                locale=locale,
                age_group=age,
                latent=latent,
                feature_shift=shift.copy(),
            )
    return profiles


def _synth_utterance(
    cfg: CorpusConfig, bank: _PatternBank, profile: SpeakerProfile, utt_id: str, positive: bool
) -> tuple[np.ndarray, np.ndarray]:
    rng = rng_for(cfg.seed, "utterance", utt_id)
    lo, hi = cfg.frame_len_range
    n_frames = int(rng.integers(lo, hi + 1))
    x = rng.standard_normal((n_frames, cfg.feature_dim)) * cfg.noise_sigma
    x += profile.feature_shift[None, :]
    y = np.zeros(n_frames, dtype=np.int64)
    klo, khi = cfg.keyword_len_range
    if positive:
        length = int(rng.integers(klo, khi + 1))
        offset = int(rng.integers(0, n_frames - length + 1))
        direction = bank.speaker_dir(profile.latent)
        x[offset : offset + length] += _keyword_traj(cfg=cfg, bank=bank, cell=profile.cell,
                                                     direction=direction, length=length)
        y[offset : offset + length] = 1
    elif rng.uniform() < cfg.distractor_fraction:
        length = int(rng.integers(klo, khi + 1))
        offset = int(rng.integers(0, n_frames - length + 1))
        x[offset : offset + length] += _distractor_traj(bank, cfg, profile.cell, length, rng)
    return x, y


def augment_noise(frames: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise at an exact signal-to-noise ratio in dB.

    The noise draw is rescaled so the measured ratio equals the request to
    float precision; frame count and dimension are untouched.
    """
    if not (0.0 <= snr_db <= 40.0):
        raise ValidationError(f"snr_db must lie in [0, 40], got {snr_db}")
    frames = np.asarray(frames, dtype=np.float64)
    sig_power = float(np.mean(frames**2))
    if sig_power <= 0.0:
        raise ValidationError("cannot set an SNR against an all-zero signal")
    noise = rng.standard_normal(frames.shape)
    want_power = sig_power / (10.0 ** (snr_db / 10.0))
    noise *= math.sqrt(want_power / float(np.mean(noise**2)))
    return frames + noise


def split_by_speaker(
    profiles: dict, fractions: tuple, rng: np.random.Generator
) -> dict:
    """Assign speakers to train/dev/eval, stratified by group cell.

    Within each cell the quota comes from largest-remainder rounding, and
    both train and eval are forced to keep at least one speaker per cell.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"need 3 split fractions summing to 1, got {fractions}")
    cells: dict[str, list] = {}
    for speaker_id in sorted(profiles):
        cells.setdefault(profiles[speaker_id].cell, []).append(speaker_id)
    assignment = {}
    for cell in sorted(cells):
        ids = cells[cell]
        n = len(ids)
        if n < 2:
            raise ConfigError(f"cell {cell!r} has {n} speaker(s); need >= 2 to split")
        order = [ids[i] for i in rng.permutation(n)]
        counts = [int(math.floor(n * f)) for f in fractions]
        remainders = [n * f - c for f, c in zip(fractions, counts)]
        leftover = n - sum(counts)
        # Ties go to the later split so eval fills before train.
        for idx in sorted(range(3), key=lambda i: (-remainders[i], -i))[:leftover]:
            counts[idx] += 1
        for want in (2, 0):  # force eval >= 1, then train >= 1
            if counts[want] == 0:
                donor = max(
                    (i for i in range(3) if i != want), key=lambda i: counts[i]
                )
                counts[donor] -= 1
                counts[want] += 1
        bounds = np.cumsum(counts)
        for i, speaker_id in enumerate(order):
            assignment[speaker_id] = SPLITS[int(np.searchsorted(bounds, i, side="right"))]
    return assignment


def generate_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Materialize a corpus under ``out_dir``; returns a summary dict.

    Layout: corpus_config.json, manifest.jsonl, speakers.jsonl,
    enrollments.jsonl, features/<speaker>.bin, labels/<speaker>.bin.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    bank = _PatternBank(cfg, cfg.seed)
    profiles = _make_speakers(cfg, bank)
    assignment = split_by_speaker(
        profiles, cfg.split_fractions, rng_for(cfg.seed, "split")
    )
    embedding_seed = derive_seed(cfg.seed, "embeddings")

    records: list[UtteranceRecord] = []
    store = EnrollmentStore()
    for speaker_id in sorted(profiles):
        profile = profiles[speaker_id]
        split = assignment[speaker_id]
        feats: dict[str, np.ndarray] = {}
        labels: dict[str, np.ndarray] = {}
        enrollment_ids = [
            f"{speaker_id}-p{k:02d}" for k in range(cfg.positives_per_speaker)
        ]
        plan = [(f"{speaker_id}-p{k:02d}", True) for k in range(cfg.positives_per_speaker)]
        plan += [(f"{speaker_id}-n{k:02d}", False) for k in range(cfg.negatives_per_speaker)]
        for utt_id, positive in plan:
            x, y = _synth_utterance(cfg, bank, profile, utt_id, positive)
            feats[utt_id] = x
            labels[utt_id] = y
            records.append(
                UtteranceRecord(
                    id=utt_id,
                    speaker_id=speaker_id,
                    split=split,
                    polarity="positive" if positive else "negative",
                    locale=profile.locale,
                    age_group=profile.age_group,
                    feature_ref=f"features/{speaker_id}.bin#{utt_id}",
                    label_ref=f"labels/{speaker_id}.bin#{utt_id}",
                    enrollment_utterances=list(enrollment_ids),
                )
            )
            if positive:
                for kind in ("td", "ti"):
                    store.add(synth_embedding(profile, utt_id, kind, embedding_seed))
            if split == "train":
                for j in range(1, cfg.augment_copies + 1):
                    aug_id = f"{utt_id}-a{j}"
                    rng = rng_for(cfg.seed, "augment", aug_id)
                    slo, shi = cfg.augment_snr_range
                    snr = float(rng.uniform(slo, shi))
                    feats[aug_id] = augment_noise(x, snr, rng)
                    labels[aug_id] = y.copy()
                    records.append(
                        UtteranceRecord(
                            id=aug_id,
                            speaker_id=speaker_id,
                            split=split,
                            polarity="positive" if positive else "negative",
                            locale=profile.locale,
                            age_group=profile.age_group,
                            feature_ref=f"features/{speaker_id}.bin#{aug_id}",
                            label_ref=f"labels/{speaker_id}.bin#{aug_id}",
                            enrollment_utterances=list(enrollment_ids),
                            source_id=utt_id,
                            snr_db=round(snr, 6),
                        )
                    )
        write_tensor_file(
            out / "features" / f"{speaker_id}.bin",
            {"kind": "features", "speaker_id": speaker_id},
            feats,
        )
        write_tensor_file(
            out / "labels" / f"{speaker_id}.bin",
            {"kind": "labels", "speaker_id": speaker_id},
            labels,
        )

    records.sort(key=lambda r: (r.speaker_id, r.id))
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            row = {
                "id": r.id,
                "speaker_id": r.speaker_id,
                "split": r.split,
                "polarity": r.polarity,
                "locale": r.locale,
                "age_group": r.age_group,
                "feature_ref": r.feature_ref,
                "label_ref": r.label_ref,
                "enrollment_utterances": r.enrollment_utterances,
                "source_id": r.source_id,
                "snr_db": r.snr_db,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    save_profiles(profiles, out / "speakers.jsonl")
    store.save(out / "enrollments.jsonl")
    (out / "corpus_config.json").write_text(canonical_json(cfg.to_dict()) + "\n")

    summary = {
        "speakers": len(profiles),
        "utterances": len(records),
        "originals": sum(1 for r in records if r.source_id is None),
        "augmented": sum(1 for r in records if r.source_id is not None),
        "enrollments": len(store),
        "by_split": {
            s: sum(1 for r in records if r.split == s) for s in SPLITS
        },
        "by_cell": {
            cell: sum(1 for p in profiles.values() if p.cell == cell)
            for cell in sorted(cfg.speakers_per_cell)
        },
    }
    return summary


# ---------------------------------------------------------------------------
# loading

def _parse_ref(ref: str) -> tuple[str, str]:
    path, _, name = ref.partition("#")
    if not path or not name:
        raise DataError(f"bad tensor ref {ref!r}, want 'relative/path#array'")
    return path, name


class Corpus:
    """Loaded corpus with per-speaker shard caching."""

    def __init__(self, root, config, records, profiles, store):
        self.root = Path(root)
        self.config = config
        self.records = records
        self.profiles = profiles
        self.store = store
        self.by_id = {r.id: r for r in records}
        self._shards: dict[str, dict[str, np.ndarray]] = {}

    def by_split(self, split: str, originals_only: bool = False) -> list:
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
        return [
            r
            for r in self.records
            if r.split == split and (not originals_only or r.source_id is None)
        ]

    def _load_ref(self, ref: str) -> np.ndarray:
        path, name = _parse_ref(ref)
        if path not in self._shards:
            _, arrays = read_tensor_file(self.root / path)
            self._shards[path] = arrays
        shard = self._shards[path]
        if name not in shard:
            raise DataError(f"{self.root / path}: no array {name!r}")
        return shard[name]

    def features(self, record: UtteranceRecord) -> np.ndarray:
        return self._load_ref(record.feature_ref)

    def labels(self, record: UtteranceRecord) -> np.ndarray:
        return self._load_ref(record.label_ref)

    def label_sequence(self, record: UtteranceRecord) -> LabelSequence:
        return LabelSequence.from_labels(self.labels(record))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256((self.root / "manifest.jsonl").read_bytes()).hexdigest()


def load_corpus(root) -> Corpus:
    root = Path(root)
    cfg_path = root / "corpus_config.json"
    if not cfg_path.exists():
        raise DataError(f"{root}: not a corpus directory (no corpus_config.json)")
    config = CorpusConfig.from_dict(json.loads(cfg_path.read_text()))
    records = []
    with open(root / "manifest.jsonl", "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                records.append(
                    UtteranceRecord(
                        id=d["id"],
                        speaker_id=d["speaker_id"],
                        split=d["split"],
                        polarity=d["polarity"],
                        locale=d["locale"],
                        age_group=d["age_group"],
                        feature_ref=d["feature_ref"],
                        label_ref=d["label_ref"],
                        enrollment_utterances=list(d.get("enrollment_utterances", [])),
                        source_id=d.get("source_id"),
                        snr_db=d.get("snr_db"),
                    )
                )
            except (KeyError, ValueError) as e:
                raise DataError(f"{root/'manifest.jsonl'}:{line_no}: bad record ({e})") from e
    profiles = load_profiles(root / "speakers.jsonl")
    store = EnrollmentStore.load(root / "enrollments.jsonl")
    store.profiles = profiles
    store.embedding_seed = derive_seed(config.seed, "embeddings")
    return Corpus(root, config, records, profiles, store)


# ---------------------------------------------------------------------------
# audio front end

@dataclass(frozen=True)
class LogmelConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    fmin: float = 125.0
    fmax: float = 7500.0
    floor: float = 1e-10
    context_left: int = 1

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def output_dim(self) -> int:
        return self.n_mels * (self.context_left + 1)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: LogmelConfig = LogmelConfig()) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters on mel-spaced corners."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    corners = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    )
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = corners[m], corners[m + 1], corners[m + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def read_wav(path) -> np.ndarray:
    """16 kHz mono 16-bit PCM RIFF only; anything else is refused."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV not supported")
            if wf.getnchannels() != 1:
                raise DataError(f"{path}: need mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: need 16-bit samples, got {8 * wf.getsampwidth()}-bit")
            if wf.getframerate() != 16000:
                raise DataError(f"{path}: need 16 kHz, got {wf.getframerate()} Hz")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as e:
        raise DataError(f"{path}: not a readable WAV file ({e})") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def stack_context(mel: np.ndarray, left: int) -> np.ndarray:
    """Concatenate each frame with its ``left`` predecessors (edge-replicated)."""
    if left == 0:
        return mel
    n = mel.shape[0]
    parts = []
    for k in range(left, 0, -1):
        idx = np.maximum(np.arange(n) - k, 0)
        parts.append(mel[idx])
    parts.append(mel)
    return np.concatenate(parts, axis=1)


def extract_logmel(
    samples: np.ndarray, cfg: LogmelConfig = LogmelConfig(), utterance_id: str = "wav"
) -> FeatureSequence:
    """Waveform -> stacked log-mel frames.

    Frame count is 1 + floor((n_samples - window) / hop); shorter input is
    an error. Energies are floored at ``cfg.floor`` before the natural log,
    so digital silence maps every bin to ln(floor).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"waveform must be 1-d, got shape {x.shape}")
    win, hop = cfg.window_samples, cfg.hop_samples
    if x.shape[0] < win:
        raise DataError(
            f"waveform has {x.shape[0]} samples; need at least one {win}-sample window"
        )
    n_frames = 1 + (x.shape[0] - win) // hop
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * window, n=cfg.n_fft, axis=1)
    power = np.abs(spec) ** 2
    mel = np.log(np.maximum(power @ mel_filterbank(cfg).T, cfg.floor))
    return FeatureSequence(
        utterance_id=utterance_id,
        speaker_id="",
        frames=stack_context(mel, cfg.context_left),
        meta={"n_mels": cfg.n_mels, "context_left": cfg.context_left},
    )
