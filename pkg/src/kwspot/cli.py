"""Command line entry points.

Verbs: gen-data, train, eval, stream-infer, report, selftest. Every verb
takes an optional JSON config file plus a handful of flags; flags win over
the file, the file wins over defaults, and unknown keys are rejected so a
typo cannot silently fall back to a default.

Exit codes: 0 success, 2 bad configuration, 3 bad or missing data,
4 other runtime failure. Logs go to stderr (level from KWS_LOG_LEVEL),
results go to stdout and files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    CorpusConfig,
    LogmelConfig,
    extract_logmel,
    generate_corpus,
    load_corpus,
    read_wav,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    KwspotError,
    NoEnrollmentError,
    ValidationError,
)
from .figures import plot_det, plot_group_eer
from .metrics import (
    CONDITIONS,
    compute_eer,
    det_curve,
    read_scores_csv,
    render_report_text,
    score_corpus,
    stratified_report,
    utterance_score,
    write_det_csv,
    write_scores_csv,
)
from .model import KwsModelConfig, StreamSession, default_config, load_model
from .selftest import run_selftest
from .speaker import (
    VARIANTS,
    EnrollmentStore,
    constant_vector,
    variant_embedding_dim,
)
from .tensorio import read_tensor_file
from .train import TrainConfig, model_config_for_variant, train

log = logging.getLogger("kwspot.cli")

__all__ = ["main"]


# ---------------------------------------------------------------------------
# config plumbing

def _setup_logging() -> None:
    name = os.environ.get("KWS_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return obj


def _sections(root: dict, allowed: tuple[str, ...], path) -> dict:
    unknown = set(root) - set(allowed)
    if unknown:
        raise ConfigError(
            f"{path}: unknown config sections {sorted(unknown)}, "
            f"expected a subset of {sorted(allowed)}"
        )
    for name in allowed:
        if name in root and not isinstance(root[name], dict):
            raise ConfigError(f"{path}: section {name!r} must be a JSON object")
    return root


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# verbs

def _cmd_gen_data(args) -> int:
    root = _sections(_load_config_file(args.config), ("corpus",), args.config)
    cfg = CorpusConfig.from_dict(root.get("corpus", {}))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    summary = generate_corpus(cfg, args.out)
    print(
        f"corpus: {summary['speakers']} speakers, "
        f"{summary['originals']} original + {summary['augmented']} augmented "
        f"utterances, {summary['enrollments']} enrollments"
    )
    for split, n in sorted(summary["by_split"].items()):
        print(f"  {split}: {n}")
    return 0


def _train_config(args) -> tuple[TrainConfig, dict]:
    root = _sections(_load_config_file(args.config), ("train", "model"), args.config)
    merged = dict(root.get("train", {}))
    for key in ("steps", "seed", "variant", "robust_prob", "learning_rate",
                "batch_size", "eval_every"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged), root


def _cmd_train(args) -> int:
    cfg, root = _train_config(args)
    corpus = load_corpus(args.corpus)
    if "model" in root:
        model_cfg = KwsModelConfig.from_dict(root["model"])
    else:
        model_cfg = model_config_for_variant(
            default_config(input_dim=corpus.config.feature_dim), cfg.variant
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "train_config.json", cfg.to_dict())
    _write_json(out / "model_config.json", model_cfg.to_dict())
    result = train(
        cfg, model_cfg, corpus, out,
        stop_after=args.stop_after, resume=args.resume,
    )
    print(f"trained {result.steps_run} steps, final loss {result.final_loss:.4f}")
    if result.best_dev_eer is not None:
        print(f"best dev EER {result.best_dev_eer:.4f} at step {result.best_step}")
    print(f"wrote {args.out}/checkpoint_final.bin")
    return 0


def _cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    model, meta = load_model(args.checkpoint)
    if args.variant == "baseline":
        if model.config.conditioning != "none":
            raise ConfigError(
                "baseline variant needs an unconditioned checkpoint; "
                "pick ti_self, ti_cross, or td_cross for this model"
            )
    else:
        want_dim = variant_embedding_dim(args.variant)
        if model.config.conditioning != "film" or model.config.embedding_dim != want_dim:
            raise ConfigError(
                f"variant {args.variant!r} needs a conditioned checkpoint with "
                f"embedding_dim={want_dim}, this one has "
                f"{model.config.conditioning!r}/{model.config.embedding_dim}"
            )
    scored, info = score_corpus(
        model,
        corpus,
        variant=args.variant,
        condition=args.condition,
        seed=args.seed,
        smooth_window=args.smooth_window,
        no_enrollment=args.no_enrollment,
        split=args.split,
    )
    if not scored:
        raise DataError(f"no utterances scored in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", scored)
    report = stratified_report(scored)
    _write_json(out / "report.json", report)
    title = f"{args.variant} / {args.condition} / split {args.split}"
    (out / "report.txt").write_text(render_report_text(report, title), encoding="utf-8")
    pos = [s.score for s in scored if s.polarity == "positive"]
    neg = [s.score for s in scored if s.polarity == "negative"]
    curve = det_curve(pos, neg)
    write_det_csv(out / "det.csv", curve)
    plot_det({title: curve}, out / "det.png")
    plot_group_eer(report, out / "eer_by_group.png", title=title)
    _write_json(
        out / "run.json",
        {
            "variant": args.variant,
            "condition": args.condition,
            "split": args.split,
            "seed": args.seed,
            "smooth_window": args.smooth_window,
            "no_enrollment": args.no_enrollment,
            "checkpoint": Path(args.checkpoint).name,
            "checkpoint_step": meta.get("step"),
            "corpus_fingerprint": corpus.fingerprint,
            "info": info,
        },
    )
    overall = compute_eer(pos, neg)
    print(
        f"overall EER {overall.eer:.4f} at threshold {overall.threshold:.4f} "
        f"({len(scored)} utterances, {info['fallbacks']} fallbacks, "
        f"{info['skipped']} skipped)"
    )
    print(f"wrote {args.out}/scores.csv, report.json, report.txt, det.csv, det.png")
    return 0


def _load_run(run_dir: Path) -> tuple[dict, list]:
    run_json = run_dir / "run.json"
    scores_csv = run_dir / "scores.csv"
    if not run_json.exists() or not scores_csv.exists():
        raise DataError(f"{run_dir} is not an eval run (need run.json and scores.csv)")
    meta = json.loads(run_json.read_text(encoding="utf-8"))
    return meta, read_scores_csv(scores_csv)


def _cmd_report(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    if args.reference is not None and Path(args.reference) not in run_dirs:
        run_dirs.append(Path(args.reference))
    runs: dict[str, tuple[dict, list]] = {}
    for d in run_dirs:
        label = d.name
        if label in runs:
            raise ConfigError(f"two runs share the directory name {label!r}")
        runs[label] = _load_run(d)
    fingerprints = {meta.get("corpus_fingerprint") for meta, _ in runs.values()}
    if len(fingerprints) > 1:
        raise DataError(
            "refusing to merge runs evaluated on different corpora "
            f"(fingerprints {sorted(str(f) for f in fingerprints)})"
        )
    ref_label = Path(args.reference).name if args.reference is not None else None
    ref_report = None
    if ref_label is not None:
        ref_report = stratified_report(runs[ref_label][1])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    merged: dict = {"reference": ref_label, "runs": {}}
    texts = []
    curves = {}
    for label in sorted(runs):
        meta, scored = runs[label]
        reference = ref_report if ref_label is not None and label != ref_label else None
        report = stratified_report(scored, reference=reference)
        merged["runs"][label] = {"meta": meta, "report": report}
        title = f"{label} ({meta.get('variant')}, {meta.get('condition')})"
        texts.append(render_report_text(report, title))
        pos = [s.score for s in scored if s.polarity == "positive"]
        neg = [s.score for s in scored if s.polarity == "negative"]
        curves[label] = det_curve(pos, neg)
        plot_group_eer(report, out / f"eer_by_group_{label}.png", title=title)
    _write_json(out / "report.json", merged)
    (out / "report.txt").write_text("\n".join(texts), encoding="utf-8")
    plot_det(curves, out / "det.png")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("run,variant,condition,n_scored,overall_eer\n")
        for label in sorted(runs):
            meta, scored = runs[label]
            entry = merged["runs"][label]["report"]["overall"]
            eer = "" if entry.get("insufficient") else repr(entry["eer"])
            fh.write(
                f"{label},{meta.get('variant')},{meta.get('condition')},"
                f"{len(scored)},{eer}\n"
            )
    print(f"merged {len(runs)} runs into {args.out}/report.txt")
    for line in (out / "summary.csv").read_text(encoding="utf-8").splitlines():
        print(f"  {line}")
    return 0


def _stream_features(args, model) -> np.ndarray:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"input {path} does not exist")
    if path.suffix.lower() == ".wav":
        samples = read_wav(path)
        seq = extract_logmel(samples, LogmelConfig(), utterance_id=path.stem)
        frames = seq.frames
    else:
        meta, arrays = read_tensor_file(path)
        if args.utterance is not None:
            if args.utterance not in arrays:
                have = ", ".join(sorted(arrays)[:8])
                raise DataError(
                    f"{path} has no array {args.utterance!r} (first ids: {have})"
                )
            frames = arrays[args.utterance]
        elif len(arrays) == 1:
            frames = next(iter(arrays.values()))
        else:
            have = ", ".join(sorted(arrays)[:8])
            raise DataError(
                f"{path} holds {len(arrays)} utterances; pick one with "
                f"--utterance (first ids: {have})"
            )
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"input frames have shape {frames.shape}, model wants "
            f"(frames, {model.config.input_dim})"
        )
    return frames


def _stream_embedding(args, model):
    if model.config.conditioning != "film":
        return None
    dim = model.config.embedding_dim
    if args.enrollment is None:
        log.warning(
            "conditioned model with no --enrollment; using the no-enrollment constant vector"
        )
        return constant_vector(dim)
    if args.speaker is None:
        raise ConfigError("--enrollment also needs --speaker")
    store = EnrollmentStore.load(args.enrollment)
    kind = "td" if dim == 64 else "ti"
    entries = store.lookup(args.speaker, kind)
    if not entries:
        raise NoEnrollmentError(
            args.speaker, f"no {kind} enrollment in {args.enrollment}"
        )
    return entries[0]


def _cmd_stream_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    frames = _stream_features(args, model)
    embedding = _stream_embedding(args, model)
    session = StreamSession(model, embedding)
    print("frame\tkeyword_posterior")
    series = np.empty(len(frames))
    for i, frame in enumerate(frames):
        p = session.step(frame)
        series[i] = p[1]
        print(f"{i}\t{series[i]!r}")
    score = utterance_score(series, smooth_window=args.smooth_window)
    print(f"score\t{score!r}")
    return 0


def _cmd_selftest(args) -> int:
    return run_selftest()


# ---------------------------------------------------------------------------
# parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON", help="config file for this verb")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kwspot",
        description="Speaker-aware streaming keyword spotting on synthetic data.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="synthesize a corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--variant", choices=VARIANTS, help="enrollment pairing variant")
    p.add_argument("--robust-prob", dest="robust_prob", type=float,
                   help="probability of swapping an embedding for the constant vector")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--stop-after", dest="stop_after", type=int,
                   help="pause after this step (resume later with --resume)")
    p.add_argument("--resume", action="store_true",
                   help="continue from state.bin in --out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a split and write reports")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="baseline")
    p.add_argument("--condition", choices=CONDITIONS, default="with_embedding")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--seed", type=int, default=0, help="pairing seed")
    p.add_argument("--smooth-window", dest="smooth_window", type=int, default=10)
    p.add_argument("--no-enrollment", dest="no_enrollment",
                   choices=("fallback", "skip"), default="fallback",
                   help="what to do when a speaker has no usable enrollment")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stream-infer", help="frame-by-frame scoring of one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="a .wav file or a feature shard (.bin)")
    p.add_argument("--utterance", help="array name inside a multi-utterance shard")
    p.add_argument("--enrollment", help="enrollments.jsonl for a conditioned model")
    p.add_argument("--speaker", help="speaker id to look up in --enrollment")
    p.add_argument("--smooth-window", dest="smooth_window", type=int, default=10)
    p.set_defaults(func=_cmd_stream_infer)

    p = sub.add_parser("report", help="merge eval runs into one report with figures")
    p.add_argument("runs", nargs="+", help="eval output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--reference",
                   help="run directory whose EERs the others are compared against")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest", help="quick built-in sanity checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except (DataError, ValidationError, DimensionError) as exc:
        log.error("%s", exc)
        return 3
    except KwspotError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
