"""Detector assembly: encoder, optional speaker conditioning, decoder, head.

The encoder is a stack of (SVDF, bottleneck dense) blocks; its last
bottleneck output is the conditioning surface. When conditioning is on,
that (frames, L) activation is scaled and shifted per channel using
vectors projected from a speaker embedding, and everything downstream
(decoder SVDF stack, 2-class head) is unchanged. Conditioning touches
exactly one seam, so a conditioned model with zeroed projections is the
unconditioned model bit for bit.

The streaming path mirrors the batch path frame by frame through per-layer
ring buffers and must agree with it to 1e-6.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, MismatchError, UsageError
from .layers import (
    DenseParams,
    FilmParams,
    SvdfLayerParams,
    SvdfState,
    dense_forward,
    film_apply,
    film_project,
    film_project_batch,
    svdf_forward_batch,
    svdf_forward_packed,
    svdf_forward_stream,
)
from .numerics import Tape, Tensor
from .tensorio import read_tensor_file, write_tensor_file

__all__ = [
    "KwsModelConfig",
    "KwsModel",
    "StreamSession",
    "default_config",
    "full_config",
    "tiny_config",
    "build",
    "count_params",
    "save_model",
    "load_model",
    "stream_step",
]

CONDITIONING_MODES = ("none", "film")


@dataclass(frozen=True)
class KwsModelConfig:
    """Architecture description, JSON-round-trippable.

    encoder: tuple of (nodes, memory, bottleneck) triples;
    decoder: tuple of (nodes, memory) pairs.
    """

    input_dim: int
    encoder: tuple
    decoder: tuple
    num_classes: int = 2
    conditioning: str = "none"
    embedding_dim: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.encoder or not self.decoder:
            raise ConfigError("encoder and decoder need at least one block each")
        for blk in self.encoder:
            if len(blk) != 3 or any(int(v) < 1 for v in blk):
                raise ConfigError(f"bad encoder block {blk!r}, want (nodes, memory, bottleneck)")
        for blk in self.decoder:
            if len(blk) != 2 or any(int(v) < 1 for v in blk):
                raise ConfigError(f"bad decoder block {blk!r}, want (nodes, memory)")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.conditioning == "film" and self.embedding_dim < 1:
            raise ConfigError("conditioned models need embedding_dim >= 1")
        # Normalize to tuples so configs hash/compare cleanly.
        object.__setattr__(self, "encoder", tuple(tuple(int(v) for v in b) for b in self.encoder))
        object.__setattr__(self, "decoder", tuple(tuple(int(v) for v in b) for b in self.decoder))

    @property
    def encoding_dim(self) -> int:
        """Channel count of the conditioning surface (last bottleneck)."""
        return self.encoder[-1][2]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "encoder": [list(b) for b in self.encoder],
            "decoder": [list(b) for b in self.decoder],
            "num_classes": self.num_classes,
            "conditioning": self.conditioning,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KwsModelConfig":
        known = {
            "input_dim", "encoder", "decoder", "num_classes",
            "conditioning", "embedding_dim",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"input_dim", "encoder", "decoder"} - set(d)
        if missing:
            raise ConfigError(f"missing model config keys: {sorted(missing)}")
        return cls(
            input_dim=int(d["input_dim"]),
            encoder=tuple(tuple(int(v) for v in b) for b in d["encoder"]),
            decoder=tuple(tuple(int(v) for v in b) for b in d["decoder"]),
            num_classes=int(d.get("num_classes", 2)),
            conditioning=str(d.get("conditioning", "none")),
            embedding_dim=int(d.get("embedding_dim", 0)),
        )


def full_config(conditioning: str = "none", embedding_dim: int = 0) -> KwsModelConfig:
    """Production-sized architecture: 80-dim stacked log-mel input,
    4 encoder blocks of 576 nodes / memory 6 / bottleneck 64, then
    3 decoder layers of 32 nodes / memory 32, 2 classes. About 328K
    parameters before conditioning."""
    return KwsModelConfig(
        input_dim=80,
        encoder=((576, 6, 64),) * 4,
        decoder=((32, 32),) * 3,
        num_classes=2,
        conditioning=conditioning,
        embedding_dim=embedding_dim,
    )


def default_config(
    input_dim: int = 16, conditioning: str = "none", embedding_dim: int = 0
) -> KwsModelConfig:
    """Desk-scale architecture used with the synthetic corpus."""
    return KwsModelConfig(
        input_dim=input_dim,
        encoder=((32, 4, 16), (32, 4, 16)),
        decoder=((16, 8), (16, 8)),
        num_classes=2,
        conditioning=conditioning,
        embedding_dim=embedding_dim,
    )


def tiny_config(conditioning: str = "none", embedding_dim: int = 0) -> KwsModelConfig:
    """Smallest useful architecture, for gradient checks and smoke tests."""
    return KwsModelConfig(
        input_dim=4,
        encoder=((6, 3, 5),),
        decoder=((4, 2),),
        num_classes=2,
        conditioning=conditioning,
        embedding_dim=embedding_dim,
    )


class KwsModel:
    """Parameter container plus forward paths. Built via ``build``."""

    def __init__(self, config: KwsModelConfig, encoder, decoder, head, film):
        self.config = config
        self.encoder: list[tuple[SvdfLayerParams, DenseParams]] = encoder
        self.decoder: list[SvdfLayerParams] = decoder
        self.head: DenseParams = head
        self.film: FilmParams | None = film

    def parameters(self) -> list[tuple[str, Tensor]]:
        """(name, tensor) pairs in a stable order used everywhere."""
        out = []
        for i, (svdf, dense) in enumerate(self.encoder):
            out += [(f"encoder{i}.svdf.{n}", t) for n, t in svdf.tensors()]
            out += [(f"encoder{i}.bottleneck.{n}", t) for n, t in dense.tensors()]
        for i, svdf in enumerate(self.decoder):
            out += [(f"decoder{i}.svdf.{n}", t) for n, t in svdf.tensors()]
        out += [(f"head.{n}", t) for n, t in self.head.tensors()]
        if self.film is not None:
            out += [(f"film.{n}", t) for n, t in self.film.tensors()]
        return out

    def attach(self, tape: Tape) -> None:
        tape.attach(*[t for _, t in self.parameters()])

    def detach(self) -> None:
        for _, t in self.parameters():
            t.tape = None
            t.grad = None

    def forward(self, frames: np.ndarray, embedding=None) -> Tensor:
        """(frames, input_dim) -> logits (frames, num_classes).

        ``embedding`` may be a numpy vector, a speaker-embedding object with
        a ``values`` attribute, or None. A conditioned model refuses None:
        pass the constant vector to run the no-enrollment path.
        """
        e_values = _embedding_values(embedding)
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise UsageError(
                f"input shape {x.shape} does not match input_dim {self.config.input_dim}"
            )
        if self.config.conditioning == "film" and e_values is None:
            raise UsageError(
                "conditioned model needs an embedding; use the constant "
                "vector for the no-enrollment condition"
            )
        h = Tensor(x)
        for svdf, dense in self.encoder:
            h = svdf_forward_batch(svdf, h)
            h = dense_forward(dense, h)
        if self.film is not None:
            gamma, beta = film_project(self.film, Tensor(e_values))
            h = film_apply(h, gamma, beta)
        for svdf in self.decoder:
            h = svdf_forward_batch(svdf, h)
        return dense_forward(self.head, h)

    def forward_packed(
        self, features: list, embeddings: list | None = None
    ) -> tuple[Tensor, np.ndarray]:
        """Run several utterances as one concatenated graph.

        ``features`` is a sequence of (frames_i, input_dim) arrays and
        ``embeddings`` one vector-like (or None) per utterance. Memory taps
        are masked at utterance boundaries, so row-for-row the logits equal
        calling ``forward`` per utterance; the win is constant graph size
        regardless of batch size. Returns (logits, frame counts).
        """
        arrays = [np.asarray(f, dtype=np.float64) for f in features]
        if not arrays:
            raise UsageError("forward_packed needs at least one utterance")
        for a in arrays:
            if a.ndim != 2 or a.shape[1] != self.config.input_dim:
                raise UsageError(
                    f"input shape {a.shape} does not match input_dim "
                    f"{self.config.input_dim}"
                )
            if a.shape[0] == 0:
                raise UsageError("forward_packed: empty utterance")
        counts = np.array([a.shape[0] for a in arrays])
        offsets = np.concatenate(([0], np.cumsum(counts[:-1])))
        starts = np.repeat(offsets, counts)
        e_mat = None
        if self.film is not None:
            if embeddings is None or len(embeddings) != len(arrays):
                raise UsageError(
                    "conditioned model needs one embedding per utterance; use "
                    "the constant vector for the no-enrollment condition"
                )
            rows = [_embedding_values(e) for e in embeddings]
            if any(r is None for r in rows):
                raise UsageError(
                    "conditioned model needs one embedding per utterance; use "
                    "the constant vector for the no-enrollment condition"
                )
            e_mat = np.stack(rows)
        h = Tensor(np.concatenate(arrays, axis=0))
        for svdf, dense in self.encoder:
            h = svdf_forward_packed(svdf, h, starts)
            h = dense_forward(dense, h)
        if self.film is not None:
            gammas, betas = film_project_batch(self.film, Tensor(e_mat))
            h = nm.add(
                nm.mul(h, nm.repeat_rows(gammas, counts)),
                nm.repeat_rows(betas, counts),
            )
        for svdf in self.decoder:
            h = svdf_forward_packed(svdf, h, starts)
        return dense_forward(self.head, h), counts

    def posteriors(self, frames: np.ndarray, embedding=None) -> np.ndarray:
        """Per-frame class posteriors, plain numpy."""
        return nm.softmax(self.forward(frames, embedding).data)


def _embedding_values(embedding) -> np.ndarray | None:
    if embedding is None:
        return None
    values = getattr(embedding, "values", embedding)
    return np.asarray(values, dtype=np.float64)


def build(config: KwsModelConfig, seed: int) -> KwsModel:
    """Deterministic construction: same (config, seed) -> bit-identical params."""
    rng = np.random.default_rng(seed)
    encoder = []
    in_dim = config.input_dim
    for nodes, memory, bottleneck in config.encoder:
        svdf = SvdfLayerParams.init(nodes, in_dim, memory, rng)
        dense = DenseParams.init(bottleneck, nodes, rng, activation="relu")
        encoder.append((svdf, dense))
        in_dim = bottleneck
    decoder = []
    for nodes, memory in config.decoder:
        decoder.append(SvdfLayerParams.init(nodes, in_dim, memory, rng))
        in_dim = nodes
    head = DenseParams.init(config.num_classes, in_dim, rng, activation="none")
    film = None
    if config.conditioning == "film":
        film = FilmParams.init(config.encoding_dim, config.embedding_dim)
    return KwsModel(config, encoder, decoder, head, film)


def count_params(model: KwsModel) -> tuple[int, dict]:
    """Total trainable parameter count and a per-section breakdown."""
    enc = sum(s.param_count + d.param_count for s, d in model.encoder)
    dec = sum(s.param_count for s in model.decoder)
    head = model.head.param_count
    film = model.film.param_count if model.film is not None else 0
    breakdown = {"encoder": enc, "decoder": dec, "head": head, "film": film}
    return enc + dec + head + film, breakdown


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_KIND = "kws-checkpoint"


def save_model(model: KwsModel, path, step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    """Write config + parameters; save -> load -> save is byte-identical."""
    meta = {
        "kind": _CKPT_KIND,
        "config": model.config.to_dict(),
        "step": int(step),
        "seed": int(seed),
    }
    if extra:
        meta["extra"] = extra
    write_tensor_file(path, meta, {name: t.data for name, t in model.parameters()})


def load_model(path, expect_config: KwsModelConfig | None = None) -> tuple[KwsModel, dict]:
    """Read a checkpoint back into a model; returns (model, meta)."""
    meta, arrays = read_tensor_file(path)
    if meta.get("kind") != _CKPT_KIND:
        raise MismatchError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    config = KwsModelConfig.from_dict(meta["config"])
    if expect_config is not None and config != expect_config:
        raise MismatchError(
            f"{path}: stored config does not match the expected one "
            f"(stored conditioning={config.conditioning!r}, "
            f"expected {expect_config.conditioning!r}; full configs differ)"
        )
    model = build(config, seed=0)
    for name, t in model.parameters():
        if name not in arrays:
            raise MismatchError(f"{path}: checkpoint is missing array {name!r}")
        if arrays[name].shape != t.data.shape:
            raise MismatchError(
                f"{path}: array {name!r} has shape {arrays[name].shape}, "
                f"expected {t.data.shape}"
            )
        t.data = arrays[name].astype(np.float64)
    stray = set(arrays) - {name for name, _ in model.parameters()}
    if stray:
        raise MismatchError(f"{path}: unexpected arrays {sorted(stray)}")
    return model, meta


# ---------------------------------------------------------------------------
# streaming

class StreamSession:
    """Frame-at-a-time inference state for one utterance and one speaker.

    Conditioning scale/shift are resolved once at session start; per-layer
    ring buffers carry the SVDF memories. ``reset`` reuses the session for
    a new utterance with the same speaker.
    """

    def __init__(self, model: KwsModel, embedding=None):
        e_values = _embedding_values(embedding)
        if model.config.conditioning == "film":
            if e_values is None:
                raise UsageError(
                    "conditioned model needs an embedding; use the constant "
                    "vector for the no-enrollment condition"
                )
            f = model.film
            self.gamma = f.w_gamma.data @ e_values + f.b_gamma.data
            self.beta = f.w_beta.data @ e_values + f.b_beta.data
        else:
            self.gamma = None
            self.beta = None
        self.model = model
        self.encoder_states = [SvdfState.fresh(svdf) for svdf, _ in model.encoder]
        self.decoder_states = [SvdfState.fresh(svdf) for svdf in model.decoder]
        self.frames_seen = 0

    def reset(self) -> None:
        for s in self.encoder_states + self.decoder_states:
            s.reset()
        self.frames_seen = 0

    def step(self, frame: np.ndarray) -> np.ndarray:
        """One input frame -> posterior over classes for that frame."""
        h = np.asarray(frame, dtype=np.float64)
        if h.shape != (self.model.config.input_dim,):
            raise UsageError(
                f"frame shape {h.shape} does not match input_dim "
                f"{self.model.config.input_dim}"
            )
        for (svdf, dense), st in zip(self.model.encoder, self.encoder_states):
            h, _ = svdf_forward_stream(svdf, st, h)
            h = dense.weights.data @ h + dense.bias.data
            if dense.activation == "relu":
                h = np.maximum(h, 0.0)
        if self.gamma is not None:
            h = self.gamma * h + self.beta
        for svdf, st in zip(self.model.decoder, self.decoder_states):
            h, _ = svdf_forward_stream(svdf, st, h)
        logits = self.model.head.weights.data @ h + self.model.head.bias.data
        self.frames_seen += 1
        return nm.softmax(logits[None, :])[0]


def stream_step(model: KwsModel, session: StreamSession, frame: np.ndarray) -> np.ndarray:
    """Session-checked streaming step: refuses a session built for another model."""
    if session.model is not model:
        raise UsageError("stream session was created for a different model")
    return session.step(frame)
