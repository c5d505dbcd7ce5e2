"""Training loop: frame cross entropy, Adam, enrollment pairing, robust mixing.

Loss per batch is the mean over utterances of the mean per-frame cross
entropy, so long utterances do not dominate. Enrollment-conditioned
variants draw a fresh pairing per visit; robust mixing then swaps each
embedding for the no-enrollment constant vector with probability ``robust_prob``,
which is what teaches a conditioned model to survive a missing enrollment.

Runs are deterministic: every random draw comes from named sub-streams of
the config seed, and the optimizer state file carries those stream states,
so a stopped-and-resumed run reproduces the uninterrupted one bit for bit.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import Corpus
from .errors import ConfigError, DataError, MismatchError
from .metrics import compute_eer, score_corpus
from .model import KwsModel, KwsModelConfig, build, load_model, save_model
from .numerics import Tape, Tensor
from .seeding import derive_seed, rng_for
from .speaker import (
    VARIANTS,
    constant_vector,
    pair_enrollment,
    variant_embedding_dim,
    variant_kind,
)
from .tensorio import canonical_json, read_tensor_file, write_tensor_file

log = logging.getLogger("kwspot.train")

__all__ = [
    "TrainConfig",
    "TrainExample",
    "TrainResult",
    "batch_loss",
    "robust_mix",
    "adam_step",
    "train",
    "model_config_for_variant",
]


@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    variant: str = "baseline"
    robust_prob: float = 0.0
    seed: int = 7
    eval_every: int = 200
    smooth_window: int = 10

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size, and eval_every must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("adam eps must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (0.0 <= self.robust_prob <= 1.0):
            raise ConfigError(f"robust_prob must lie in [0, 1], got {self.robust_prob}")
        if self.variant == "baseline" and self.robust_prob > 0:
            raise ConfigError("robust_prob only applies to enrollment-conditioned variants")
        if self.smooth_window < 1:
            raise ConfigError("smooth_window must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainExample:
    record: object
    features: np.ndarray
    labels: np.ndarray
    embedding: object | None = None
    replaced: bool = False


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    best_dev_eer: float | None
    best_step: int | None
    checkpoint_final: Path
    checkpoint_best: Path | None
    metrics_path: Path
    state_path: Path
    loss_history: list = field(default_factory=list)


def model_config_for_variant(base: KwsModelConfig, variant: str) -> KwsModelConfig:
    """Attach (or strip) conditioning so the model matches a pairing variant."""
    dim = variant_embedding_dim(variant)
    if dim == 0:
        return KwsModelConfig(
            input_dim=base.input_dim, encoder=base.encoder, decoder=base.decoder,
            num_classes=base.num_classes, conditioning="none", embedding_dim=0,
        )
    return KwsModelConfig(
        input_dim=base.input_dim, encoder=base.encoder, decoder=base.decoder,
        num_classes=base.num_classes, conditioning="film", embedding_dim=dim,
    )


def batch_loss(model: KwsModel, batch: list) -> nm.Tensor:
    """Mean over utterances of mean per-frame cross entropy.

    The whole batch runs as one packed graph; per-frame weights
    1/(batch * utterance_frames) reproduce the nested mean.
    """
    if not batch:
        raise ConfigError("empty batch")
    logits, counts = model.forward_packed(
        [ex.features for ex in batch], [ex.embedding for ex in batch]
    )
    labels = np.concatenate([ex.labels for ex in batch])
    weights = np.repeat(1.0 / (len(batch) * counts), counts)
    return nm.softmax_cross_entropy(logits, labels, weights=weights)


def robust_mix(batch: list, robust_prob: float, rng: np.random.Generator) -> list:
    """Swap each embedding for the no-enrollment constant vector with probability p.

    p = 0 leaves the batch untouched. Draws one uniform per conditioned
    example, so the stream advances identically for any p.
    """
    if robust_prob == 0.0:
        return batch
    for ex in batch:
        if ex.embedding is None:
            continue
        if rng.uniform() < robust_prob:
            ex.embedding = constant_vector(ex.embedding.dim)
            ex.replaced = True
    return batch


def adam_step(
    params: list, moments: dict, step: int, cfg: TrainConfig
) -> None:
    """In-place Adam update from the gradients sitting on the tensors."""
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**step
    bias2 = 1.0 - b2**step
    for name, t in params:
        g = t.grad
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def _startup_enrollment_check(corpus: Corpus, variant: str) -> None:
    """Cross variants fail fast if any train/dev utterance cannot be paired."""
    kind = variant_kind(variant)
    if kind is None or variant == "ti_self":
        return
    offenders = set()
    for split in ("train", "dev"):
        for record in corpus.by_split(split):
            origin = record.source_id or record.id
            entries = [
                e
                for e in corpus.store.lookup(record.speaker_id, kind)
                if e.source_utterance_id not in (record.id, origin)
            ]
            if not entries:
                offenders.add(record.speaker_id)
    if offenders:
        raise DataError(
            f"variant {variant!r} cannot pair enrollments for speakers: "
            f"{sorted(offenders)}"
        )


class _Streams:
    """The three training randomness streams, save/restorable."""

    NAMES = ("batch", "pairing", "robust")

    def __init__(self, seed: int):
        self.gens = {n: rng_for(seed, "train", n) for n in self.NAMES}

    def state(self) -> dict:
        return {n: g.bit_generator.state for n, g in self.gens.items()}

    def restore(self, state: dict) -> None:
        for n in self.NAMES:
            self.gens[n].bit_generator.state = state[n]

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.gens[name]


def _resolve_embedding(
    record, corpus: Corpus, variant: str, rng: np.random.Generator
):
    if variant == "baseline":
        return None
    return pair_enrollment(record, corpus.store, variant, rng)


def _dev_eer(model: KwsModel, corpus: Corpus, cfg: TrainConfig, step: int) -> float:
    scored, _ = score_corpus(
        model,
        corpus,
        variant=cfg.variant,
        condition="with_embedding",
        seed=derive_seed(cfg.seed, "dev-pairing", step),
        smooth_window=cfg.smooth_window,
        split="dev",
    )
    pos = [s.score for s in scored if s.polarity == "positive"]
    neg = [s.score for s in scored if s.polarity == "negative"]
    return compute_eer(pos, neg).eer


def train(
    cfg: TrainConfig,
    model_cfg: KwsModelConfig,
    corpus: Corpus,
    out_dir,
    stop_after: int | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run (or continue) a training job under ``out_dir``.

    Writes checkpoint_final.bin, checkpoint_best.bin, metrics.csv, and
    state.bin. ``stop_after`` ends the loop early at that step with state
    saved, which a later ``resume=True`` call picks up.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    want_dim = variant_embedding_dim(cfg.variant)
    if want_dim == 0 and model_cfg.conditioning != "none":
        raise ConfigError("baseline variant needs an unconditioned model config")
    if want_dim > 0 and (
        model_cfg.conditioning != "film" or model_cfg.embedding_dim != want_dim
    ):
        raise ConfigError(
            f"variant {cfg.variant!r} needs conditioning='film' with "
            f"embedding_dim={want_dim}, got {model_cfg.conditioning!r}/"
            f"{model_cfg.embedding_dim}"
        )
    if model_cfg.input_dim != corpus.config.feature_dim:
        raise ConfigError(
            f"model input_dim {model_cfg.input_dim} does not match corpus "
            f"feature_dim {corpus.config.feature_dim}"
        )
    _startup_enrollment_check(corpus, cfg.variant)

    train_records = corpus.by_split("train")
    dev_records = corpus.by_split("dev")
    if not train_records:
        raise DataError("corpus has no train utterances")
    if not dev_records:
        raise DataError("corpus has no dev utterances")
    cache = {r.id: (corpus.features(r), corpus.labels(r)) for r in train_records}

    state_path = out / "state.bin"
    metrics_path = out / "metrics.csv"
    final_path = out / "checkpoint_final.bin"
    best_path = out / "checkpoint_best.bin"
    cfg_fingerprint = canonical_json(
        {"train": cfg.to_dict(), "model": model_cfg.to_dict()}
    )

    streams = _Streams(cfg.seed)
    start_step = 0
    best_dev = None
    best_step = None
    loss_history: list[float] = []

    if resume:
        if not state_path.exists():
            raise DataError(f"nothing to resume: {state_path} does not exist")
        meta, arrays = read_tensor_file(state_path)
        if meta.get("cfg_fingerprint") != cfg_fingerprint:
            raise MismatchError(
                "resume refused: stored train/model config differs from the request"
            )
        model = build(model_cfg, seed=derive_seed(cfg.seed, "init"))
        moments = {}
        for name, t in model.parameters():
            t.data = arrays[f"param.{name}"].copy()
            moments[name] = (arrays[f"adam_m.{name}"].copy(), arrays[f"adam_v.{name}"].copy())
        streams.restore(meta["streams"])
        start_step = int(meta["step"])
        best_dev = meta["best_dev_eer"]
        best_step = meta["best_step"]
        loss_history = list(arrays["loss_history"]) if "loss_history" in arrays else []
        log.info("resumed %s at step %d", out, start_step)
    else:
        model = build(model_cfg, seed=derive_seed(cfg.seed, "init"))
        moments = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in model.parameters()
        }

    def save_state(step: int) -> None:
        arrays = {}
        for name, t in model.parameters():
            arrays[f"param.{name}"] = t.data
            arrays[f"adam_m.{name}"] = moments[name][0]
            arrays[f"adam_v.{name}"] = moments[name][1]
        arrays["loss_history"] = np.asarray(loss_history, dtype=np.float64)
        write_tensor_file(
            state_path,
            {
                "kind": "train-state",
                "cfg_fingerprint": cfg_fingerprint,
                "step": step,
                "streams": streams.state(),
                "best_dev_eer": best_dev,
                "best_step": best_step,
            },
            arrays,
        )

    n_train = len(train_records)
    end_step = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
    mode = "a" if resume else "w"
    with open(metrics_path, mode, newline="", encoding="utf-8") as metrics_fh:
        if not resume:
            metrics_fh.write("step,train_loss,dev_eer,wall_ms\n")
        final_loss = float("nan")
        for step in range(start_step + 1, end_step + 1):
            t0 = time.perf_counter()
            idxs = streams["batch"].integers(0, n_train, size=cfg.batch_size)
            batch = []
            for i in idxs:
                record = train_records[int(i)]
                feats, labels = cache[record.id]
                batch.append(
                    TrainExample(
                        record=record,
                        features=feats,
                        labels=labels,
                        embedding=_resolve_embedding(
                            record, corpus, cfg.variant, streams["pairing"]
                        ),
                    )
                )
            robust_mix(batch, cfg.robust_prob, streams["robust"])

            tape = Tape()
            model.attach(tape)
            loss = batch_loss(model, batch)
            tape.backward(loss)
            adam_step(model.parameters(), moments, step, cfg)
            model.detach()
            final_loss = float(loss.data)
            loss_history.append(final_loss)

            dev_eer_text = ""
            if step % cfg.eval_every == 0 or step == cfg.steps:
                dev_eer = _dev_eer(model, corpus, cfg, step)
                dev_eer_text = repr(dev_eer)
                if best_dev is None or dev_eer < best_dev:
                    best_dev = dev_eer
                    best_step = step
                    save_model(
                        model, best_path, step=step, seed=cfg.seed,
                        extra={"variant": cfg.variant, "robust_prob": cfg.robust_prob,
                               "role": "best-dev"},
                    )
                save_state(step)
                log.info(
                    "step %d/%d loss %.4f dev EER %.4f", step, cfg.steps,
                    final_loss, dev_eer,
                )
            wall_ms = (time.perf_counter() - t0) * 1000.0
            metrics_fh.write(f"{step},{final_loss!r},{dev_eer_text},{wall_ms:.3f}\n")

    if end_step == cfg.steps:
        save_model(
            model, final_path, step=end_step, seed=cfg.seed,
            extra={"variant": cfg.variant, "robust_prob": cfg.robust_prob,
                   "role": "final"},
        )
    save_state(end_step)
    return TrainResult(
        steps_run=end_step - start_step,
        final_loss=final_loss,
        best_dev_eer=best_dev,
        best_step=best_step,
        checkpoint_final=final_path,
        checkpoint_best=best_path if best_dev is not None else None,
        metrics_path=metrics_path,
        state_path=state_path,
        loss_history=loss_history,
    )
