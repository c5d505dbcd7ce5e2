"""Utterance scoring, EER, DET data, and group-stratified reporting.

Conventions, fixed across the package:

* an utterance's score is the maximum of a trailing moving average of its
  per-frame keyword posterior (window clipped at the sequence start);
* FAR(t) is the fraction of negatives with score >= t, FRR(t) the fraction
  of positives with score < t, both swept over the union of observed
  scores plus the two infinities;
* the EER is (FAR + FRR) / 2 at the threshold minimizing |FAR - FRR|,
  ties broken toward the lower threshold.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import DataError, ValidationError
from .numerics import softmax as _softmax
from .seeding import rng_for
from .speaker import constant_vector, pair_enrollment, variant_kind
from .errors import NoEnrollmentError

__all__ = [
    "ScoredUtterance",
    "EerResult",
    "DetCurve",
    "utterance_score",
    "compute_eer",
    "det_curve",
    "stratified_report",
    "render_report_text",
    "score_corpus",
    "write_scores_csv",
    "read_scores_csv",
    "write_det_csv",
    "read_det_csv",
    "probit",
]

CONDITIONS = ("with_embedding", "without_embedding")


@dataclass
class ScoredUtterance:
    utterance_id: str
    speaker_id: str
    locale: str
    age_group: str
    polarity: str  # "positive" | "negative"
    condition: str
    score: float


@dataclass
class EerResult:
    eer: float
    threshold: float
    far: float
    frr: float


@dataclass
class DetCurve:
    thresholds: np.ndarray  # descending, +inf first
    far: np.ndarray  # non-decreasing
    frr: np.ndarray  # non-increasing
    n_pos: int = 0
    n_neg: int = 0


def utterance_score(posteriors: np.ndarray, smooth_window: int = 10) -> float:
    """Max trailing moving average of the keyword posterior.

    ``posteriors`` is (frames, classes) with the keyword in column 1, or a
    1-d vector of keyword posteriors. Early frames average over however
    many frames exist so far.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, 1]
    elif p.ndim != 1:
        raise ValidationError(f"posteriors must be 1-d or 2-d, got shape {p.shape}")
    if p.shape[0] == 0:
        raise ValidationError("cannot score an empty utterance")
    if smooth_window < 1:
        raise ValidationError(f"smooth_window must be >= 1, got {smooth_window}")
    n = p.shape[0]
    cs = np.concatenate([[0.0], np.cumsum(p)])
    lo = np.maximum(np.arange(n) - smooth_window + 1, 0)
    smoothed = (cs[1:] - cs[lo]) / (np.arange(n) + 1 - lo)
    return float(smoothed.max())


def _check_scores(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValidationError(
            f"need at least one positive and one negative score, "
            f"got {pos.size} / {neg.size}"
        )
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValidationError("scores must be finite")
    return pos, neg


def _rates_at(pos_sorted, neg_sorted, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """FAR/FRR at each threshold via counts on the sorted score lists."""
    far = 1.0 - np.searchsorted(neg_sorted, thresholds, side="left") / neg_sorted.size
    frr = np.searchsorted(pos_sorted, thresholds, side="left") / pos_sorted.size
    return far, frr


def compute_eer(pos, neg) -> EerResult:
    """Equal error rate over the union-of-scores threshold sweep.

    The |FAR - FRR| comparison runs on integer counts, not float rates, so
    mathematical ties are real ties and the first (lowest) threshold wins
    deterministically.
    """
    pos, neg = _check_scores(pos, neg)
    ps, ns = np.sort(pos), np.sort(neg)
    thresholds = np.concatenate(
        [[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]]
    )
    below_neg = np.searchsorted(ns, thresholds, side="left")
    below_pos = np.searchsorted(ps, thresholds, side="left")
    # gap * (n_pos * n_neg), exactly
    gap_scaled = np.abs((ns.size - below_neg) * ps.size - below_pos * ns.size)
    best = int(np.argmin(gap_scaled))  # first minimum = lowest threshold
    far = (ns.size - below_neg[best]) / ns.size
    frr = below_pos[best] / ps.size
    return EerResult(
        eer=(far + frr) / 2.0,
        threshold=float(thresholds[best]),
        far=float(far),
        frr=float(frr),
    )


def det_curve(pos, neg) -> DetCurve:
    """Operating points from strict (+inf) to lenient (-inf) thresholds."""
    pos, neg = _check_scores(pos, neg)
    thresholds = np.concatenate(
        [[np.inf], np.unique(np.concatenate([pos, neg]))[::-1], [-np.inf]]
    )
    far, frr = _rates_at(np.sort(pos), np.sort(neg), thresholds)
    return DetCurve(
        thresholds=thresholds, far=far, frr=frr, n_pos=pos.size, n_neg=neg.size
    )


def probit(p: np.ndarray, n: int) -> np.ndarray:
    """Normal-deviate scale for DET plotting, clipped to stay finite.

    Probabilities are clamped to [1/(2n), 1 - 1/(2n)] where n is the count
    behind the rate, the usual finite-sample convention.
    """
    eps = 1.0 / (2.0 * max(n, 1))
    clipped = np.clip(np.atleast_1d(np.asarray(p, dtype=np.float64)), eps, 1.0 - eps)
    nd = NormalDist()
    out = np.array([nd.inv_cdf(v) for v in clipped])
    if np.ndim(p) == 0:
        return float(out[0])
    return out


# ---------------------------------------------------------------------------
# stratified reporting

def _scores_of(scored, locale=None, age_group=None) -> tuple[list, list]:
    pos, neg = [], []
    for s in scored:
        if locale is not None and s.locale != locale:
            continue
        if age_group is not None and s.age_group != age_group:
            continue
        (pos if s.polarity == "positive" else neg).append(s.score)
    return pos, neg


def _cell_entry(pos, neg, min_pos: int, min_neg: int) -> dict:
    entry = {"n_pos": len(pos), "n_neg": len(neg)}
    if len(pos) < min_pos or len(neg) < min_neg:
        entry.update(eer=None, threshold=None, insufficient=True)
        return entry
    r = compute_eer(pos, neg)
    entry.update(eer=r.eer, threshold=r.threshold, insufficient=False)
    return entry


def stratified_report(
    scored: list,
    reference: dict | None = None,
    min_pos: int = 5,
    min_neg: int = 5,
) -> dict:
    """EER overall, per locale, per age group, and per (locale, age) cell.

    ``reference`` is another report of the same shape; when given, each
    sufficient key gains a relative improvement (negative = better than the
    reference). A zero reference EER leaves the improvement undefined and
    flagged rather than divided.
    """
    if not scored:
        raise ValidationError("nothing to report: no scored utterances")
    locales = sorted({s.locale for s in scored})
    ages = sorted({s.age_group for s in scored})
    report: dict = {"overall": {}, "cells": {}, "marginals": {}}
    report["overall"] = _cell_entry(*_scores_of(scored), min_pos, min_neg)
    for loc in locales:
        report["marginals"][f"{loc}:*"] = _cell_entry(
            *_scores_of(scored, locale=loc), min_pos, min_neg
        )
    for age in ages:
        report["marginals"][f"*:{age}"] = _cell_entry(
            *_scores_of(scored, age_group=age), min_pos, min_neg
        )
    for loc in locales:
        for age in ages:
            report["cells"][f"{loc}:{age}"] = _cell_entry(
                *_scores_of(scored, locale=loc, age_group=age), min_pos, min_neg
            )
    if reference is not None:
        report["improvements"] = _improvements(report, reference)
    return report


def _lookup_entry(report: dict, key: str) -> dict | None:
    if key == "*:*":
        return report.get("overall")
    if key in report.get("cells", {}):
        return report["cells"][key]
    return report.get("marginals", {}).get(key)


def _improvements(report: dict, reference: dict) -> dict:
    out = {}
    keys = ["*:*"] + sorted(report["marginals"]) + sorted(report["cells"])
    for key in keys:
        mine = _lookup_entry(report, key)
        ref = _lookup_entry(reference, key)
        if mine is None or ref is None or mine["insufficient"] or ref.get("insufficient"):
            out[key] = {"relative": None, "note": "insufficient"}
        elif ref["eer"] == 0.0:
            out[key] = {"relative": None, "note": "reference EER is zero"}
        else:
            out[key] = {
                "relative": (mine["eer"] - ref["eer"]) / ref["eer"],
                "note": None,
            }
    return out


def _fmt_eer(entry: dict | None) -> str:
    if entry is None:
        return "-"
    if entry.get("insufficient"):
        return "insuff."
    return f"{100.0 * entry['eer']:.2f}%"


def render_report_text(report: dict, title: str = "evaluation") -> str:
    """Human-readable locale x age grid with optional improvement column."""
    overall = report["overall"]
    lines = [f"{title}"]
    lines.append(
        f"overall EER {_fmt_eer(overall)} "
        f"({overall['n_pos']} positives / {overall['n_neg']} negatives)"
    )
    ages = sorted({k.split(":")[1] for k in report["cells"]})
    locales = sorted({k.split(":")[0] for k in report["cells"]})
    header = ["group"] + ages + ["all"]
    rows = [header]
    for loc in locales:
        row = [loc]
        for age in ages:
            row.append(_fmt_eer(report["cells"].get(f"{loc}:{age}")))
        row.append(_fmt_eer(report["marginals"].get(f"{loc}:*")))
        rows.append(row)
    tail = ["all"]
    for age in ages:
        tail.append(_fmt_eer(report["marginals"].get(f"*:{age}")))
    tail.append(_fmt_eer(overall))
    rows.append(tail)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    if "improvements" in report:
        lines.append("")
        lines.append("relative EER change vs reference (negative = better):")
        for key, entry in report["improvements"].items():
            if entry["relative"] is None:
                lines.append(f"  {key:>10}  n/a ({entry['note']})")
            else:
                lines.append(f"  {key:>10}  {100.0 * entry['relative']:+.1f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# corpus scoring

def score_corpus(
    model,
    corpus,
    variant: str,
    condition: str = "with_embedding",
    seed: int = 0,
    smooth_window: int = 10,
    no_enrollment: str = "fallback",
    split: str = "eval",
) -> tuple[list, dict]:
    """Score one split of a corpus with a trained model.

    Returns (scored utterances, info). ``no_enrollment`` picks what happens
    when a cross variant finds no usable enrollment: "fallback" substitutes
    the constant vector, "skip" drops the utterance; both are counted.
    """
    if condition not in CONDITIONS:
        raise ValidationError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    if no_enrollment not in ("fallback", "skip"):
        raise ValidationError(
            f"no_enrollment must be 'fallback' or 'skip', got {no_enrollment!r}"
        )
    conditioned = model.config.conditioning == "film"
    if conditioned and variant_kind(variant) is None:
        raise ValidationError(
            "a conditioned model needs a non-baseline variant to pick enrollments"
        )
    rng = rng_for(seed, "eval-pairing", split)
    fallbacks = 0
    skipped = 0
    todo = []  # (record, embedding) after pairing decisions
    for record in corpus.by_split(split, originals_only=True):
        embedding = None
        if conditioned:
            if condition == "without_embedding":
                embedding = constant_vector(model.config.embedding_dim)
            else:
                try:
                    embedding = pair_enrollment(record, corpus.store, variant, rng)
                except NoEnrollmentError:
                    if no_enrollment == "skip":
                        skipped += 1
                        continue
                    fallbacks += 1
                    embedding = constant_vector(model.config.embedding_dim)
        todo.append((record, embedding))
    scored = []
    chunk = 64  # utterances per packed forward
    for i in range(0, len(todo), chunk):
        part = todo[i : i + chunk]
        logits, counts = model.forward_packed(
            [corpus.features(r) for r, _ in part], [e for _, e in part]
        )
        keyword_post = _softmax(logits.data)[:, 1]
        edges = np.cumsum(counts)[:-1]
        for (record, _), post in zip(part, np.split(keyword_post, edges)):
            scored.append(
                ScoredUtterance(
                    utterance_id=record.id,
                    speaker_id=record.speaker_id,
                    locale=record.locale,
                    age_group=record.age_group,
                    polarity=record.polarity,
                    condition=condition,
                    score=utterance_score(post, smooth_window),
                )
            )
    info = {"fallbacks": fallbacks, "skipped": skipped, "scored": len(scored)}
    return scored, info


# ---------------------------------------------------------------------------
# delimited output

SCORE_COLUMNS = (
    "utterance_id", "speaker_id", "locale", "age_group",
    "polarity", "condition", "score",
)


def write_scores_csv(path, scored: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for s in scored:
            w.writerow(
                [s.utterance_id, s.speaker_id, s.locale, s.age_group,
                 s.polarity, s.condition, repr(s.score)]
            )


def read_scores_csv(path) -> list:
    scored = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SCORE_COLUMNS:
            raise DataError(f"{path}: unexpected score columns {reader.fieldnames}")
        for row in reader:
            scored.append(
                ScoredUtterance(
                    utterance_id=row["utterance_id"],
                    speaker_id=row["speaker_id"],
                    locale=row["locale"],
                    age_group=row["age_group"],
                    polarity=row["polarity"],
                    condition=row["condition"],
                    score=float(row["score"]),
                )
            )
    return scored


def write_det_csv(path, curve: DetCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr", "far_probit", "frr_probit"])
        far_p = probit(curve.far, curve.n_neg)
        frr_p = probit(curve.frr, curve.n_pos)
        for t, fa, fr, fap, frp in zip(curve.thresholds, curve.far, curve.frr, far_p, frr_p):
            w.writerow([repr(float(t)), repr(float(fa)), repr(float(fr)),
                        f"{fap:.6f}", f"{frp:.6f}"])


def read_det_csv(path) -> DetCurve:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((float(row["threshold"]), float(row["far"]), float(row["frr"])))
    if not rows:
        raise DataError(f"{path}: empty DET file")
    return DetCurve(
        thresholds=np.array([r[0] for r in rows]),
        far=np.array([r[1] for r in rows]),
        frr=np.array([r[2] for r in rows]),
    )
