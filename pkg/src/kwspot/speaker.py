"""Speaker identities, simulated embeddings, and enrollment handling.

A speaker is a unit-norm latent vector plus group labels (locale, age
group). Embeddings come from a simulator instead of trained encoders: a
fixed orthonormal projection of the latent into the embedding space, plus
seeded noise whose expected norm is sigma relative to the unit signal,
renormalized. Text-dependent ("td", 64-d) embeddings are less noisy than
text-independent ("ti", 256-d) ones, mirroring how an utterance of the
exact trigger phrase pins the speaker down better than free speech.

The enrollment store maps speakers to embeddings extracted from their
positive utterances; pairing picks, per training or eval utterance, which
stored (or freshly simulated) embedding conditions the detector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NoEnrollmentError, UsageError, ValidationError
from .seeding import rng_for

__all__ = [
    "LATENT_DIM",
    "LOCALES",
    "AGE_GROUPS",
    "VARIANTS",
    "EMBEDDING_DIMS",
    "EMBEDDING_SIGMAS",
    "SpeakerProfile",
    "SpeakerEmbedding",
    "EnrollmentStore",
    "synth_embedding",
    "constant_vector",
    "pair_enrollment",
    "variant_kind",
    "variant_embedding_dim",
    "save_profiles",
    "load_profiles",
]

LATENT_DIM = 16
LOCALES = ("A", "B", "C", "D")
AGE_GROUPS = ("adult", "child")
VARIANTS = ("baseline", "ti_self", "ti_cross", "td_cross")

EMBEDDING_DIMS = {"td": 64, "ti": 256}
EMBEDDING_SIGMAS = {"td": 0.1, "ti": 0.3}

# The simulator's projections are part of its definition, not of any corpus.
_PROJECTION_SEED = 0x5EEDED


@dataclass
class SpeakerProfile:
    speaker_id: str
    locale: str
    age_group: str
    latent: np.ndarray
    feature_shift: np.ndarray | None = None

    def __post_init__(self):
        if self.locale not in LOCALES:
            raise ValidationError(f"locale must be one of {LOCALES}, got {self.locale!r}")
        if self.age_group not in AGE_GROUPS:
            raise ValidationError(
                f"age_group must be one of {AGE_GROUPS}, got {self.age_group!r}"
            )
        self.latent = np.asarray(self.latent, dtype=np.float64)
        if self.latent.shape != (LATENT_DIM,):
            raise ValidationError(
                f"latent must have shape ({LATENT_DIM},), got {self.latent.shape}"
            )
        norm = np.linalg.norm(self.latent)
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"latent must be unit norm, got |v|={norm:.6f}")

    @property
    def cell(self) -> str:
        return f"{self.locale}:{self.age_group}"


@dataclass
class SpeakerEmbedding:
    """One embedding vector with provenance.

    kind "td" and "ti" are unit-norm simulator outputs; kind "absent" is
    the fixed constant vector standing in for a missing enrollment.
    """

    speaker_id: str
    kind: str
    dim: int
    values: np.ndarray
    source_utterance_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("td", "ti", "absent"):
            raise ValidationError(f"unknown embedding kind {self.kind!r}")
        if self.dim < 1:
            raise ValidationError(f"embedding dim must be positive, got {self.dim}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.dim,):
            raise ValidationError(
                f"embedding values shape {self.values.shape} != dim {self.dim}"
            )
        if self.kind in EMBEDDING_DIMS and self.dim != EMBEDDING_DIMS[self.kind]:
            raise ValidationError(
                f"kind {self.kind!r} requires dim {EMBEDDING_DIMS[self.kind]}, got {self.dim}"
            )
        if self.kind == "absent" and np.any(self.values != self.values[0]):
            raise ValidationError("absent embeddings must hold one constant value")


def _projection(kind: str) -> np.ndarray:
    """Fixed (dim, LATENT_DIM) matrix with orthonormal columns."""
    dim = EMBEDDING_DIMS[kind]
    rng = rng_for(_PROJECTION_SEED, "projection", kind)
    q, _ = np.linalg.qr(rng.standard_normal((dim, LATENT_DIM)))
    return q


_PROJECTIONS: dict[str, np.ndarray] = {}


def synth_embedding(
    profile: SpeakerProfile, utterance_id: str, kind: str, seed: int
) -> SpeakerEmbedding:
    """Simulate extracting an embedding of ``kind`` from one utterance.

    Deterministic in (profile latent, utterance_id, kind, seed); two
    utterances of one speaker give nearby but different vectors.
    """
    if kind not in EMBEDDING_DIMS:
        raise ValidationError(f"cannot synthesize embedding kind {kind!r}")
    if kind not in _PROJECTIONS:
        _PROJECTIONS[kind] = _projection(kind)
    proj = _PROJECTIONS[kind]
    dim = EMBEDDING_DIMS[kind]
    rng = rng_for(seed, "embedding", kind, utterance_id)
    noise = rng.standard_normal(dim) / np.sqrt(dim)
    raw = proj @ profile.latent + EMBEDDING_SIGMAS[kind] * noise
    values = raw / np.linalg.norm(raw)
    return SpeakerEmbedding(
        speaker_id=profile.speaker_id,
        kind=kind,
        dim=dim,
        values=values,
        source_utterance_id=utterance_id,
    )


def constant_vector(dim: int) -> SpeakerEmbedding:
    """The stand-in used when no enrollment is available.

    All zeros: it composes with the zero-initialized conditioning weights
    to give the exact identity modulation, and no real embedding is ever
    near the origin (they all have unit norm).
    """
    if dim < 1:
        raise ValidationError(f"constant vector dim must be positive, got {dim}")
    return SpeakerEmbedding(
        speaker_id="", kind="absent", dim=dim,
        values=np.zeros(dim),
    )


def variant_kind(variant: str) -> str | None:
    """Embedding kind used by a pairing variant (None for baseline)."""
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return {"baseline": None, "ti_self": "ti", "ti_cross": "ti", "td_cross": "td"}[variant]


def variant_embedding_dim(variant: str) -> int:
    kind = variant_kind(variant)
    return 0 if kind is None else EMBEDDING_DIMS[kind]


@dataclass
class EnrollmentStore:
    """speaker_id -> enrollment embeddings, with JSONL persistence.

    ``profiles`` and ``embedding_seed`` are populated by the corpus loader
    so self-enrollment (fresh simulation from the scored utterance itself)
    can be resolved through the same interface as stored lookups.
    """

    entries: dict = field(default_factory=dict)  # speaker_id -> list[SpeakerEmbedding]
    profiles: dict | None = None  # speaker_id -> SpeakerProfile
    embedding_seed: int | None = None

    def add(self, emb: SpeakerEmbedding) -> None:
        if emb.kind == "absent":
            raise UsageError("the constant vector cannot be enrolled")
        self.entries.setdefault(emb.speaker_id, []).append(emb)

    def lookup(self, speaker_id: str, kind: str) -> list:
        return [e for e in self.entries.get(speaker_id, []) if e.kind == kind]

    def speakers(self) -> list[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for speaker_id in sorted(self.entries):
                for e in self.entries[speaker_id]:
                    fh.write(
                        json.dumps(
                            {
                                "speaker_id": e.speaker_id,
                                "kind": e.kind,
                                "dim": e.dim,
                                "values": [float(v) for v in e.values],
                                "source_utterance_id": e.source_utterance_id,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )

    @classmethod
    def load(cls, path) -> "EnrollmentStore":
        store = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                    store.add(
                        SpeakerEmbedding(
                            speaker_id=d["speaker_id"],
                            kind=d["kind"],
                            dim=int(d["dim"]),
                            values=np.asarray(d["values"], dtype=np.float64),
                            source_utterance_id=d.get("source_utterance_id"),
                        )
                    )
                except (KeyError, ValueError, ValidationError) as e:
                    raise DataError(f"{path}:{line_no}: bad enrollment record ({e})") from e
        return store


def pair_enrollment(record, store: EnrollmentStore, variant: str, rng: np.random.Generator):
    """Choose the conditioning embedding for one utterance record.

    record needs ``id`` and ``speaker_id`` attributes. Returns None for the
    baseline variant; raises ``NoEnrollmentError`` when a cross variant
    finds no stored embedding from a different utterance of the speaker.
    """
    kind = variant_kind(variant)
    if kind is None:
        return None
    if variant == "ti_self":
        if store.profiles is None or store.embedding_seed is None:
            raise UsageError(
                "self-enrollment needs store.profiles and store.embedding_seed"
            )
        profile = store.profiles.get(record.speaker_id)
        if profile is None:
            raise NoEnrollmentError(record.speaker_id, "no profile for self-enrollment")
        return synth_embedding(profile, record.id, kind, store.embedding_seed)
    origin = getattr(record, "source_id", None) or record.id
    candidates = [
        e
        for e in store.lookup(record.speaker_id, kind)
        if e.source_utterance_id not in (record.id, origin)
    ]
    if not candidates:
        raise NoEnrollmentError(
            record.speaker_id, f"no {kind} enrollment from a different utterance"
        )
    return candidates[int(rng.integers(len(candidates)))]


def save_profiles(profiles: dict, path) -> None:
    """Write speaker profiles as JSONL, sorted by speaker id."""
    with open(path, "w", encoding="utf-8") as fh:
        for speaker_id in sorted(profiles):
            p = profiles[speaker_id]
            fh.write(
                json.dumps(
                    {
                        "speaker_id": p.speaker_id,
                        "locale": p.locale,
                        "age_group": p.age_group,
                        "latent": [float(v) for v in p.latent],
                        "feature_shift": (
                            None
                            if p.feature_shift is None
                            else [float(v) for v in p.feature_shift]
                        ),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_profiles(path) -> dict:
    profiles = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                profiles[d["speaker_id"]] = SpeakerProfile(
                    speaker_id=d["speaker_id"],
                    locale=d["locale"],
                    age_group=d["age_group"],
                    latent=np.asarray(d["latent"], dtype=np.float64),
                    feature_shift=(
                        None
                        if d.get("feature_shift") is None
                        else np.asarray(d["feature_shift"], dtype=np.float64)
                    ),
                )
            except (KeyError, ValueError, ValidationError) as e:
                raise DataError(f"{path}:{line_no}: bad speaker record ({e})") from e
    return profiles
