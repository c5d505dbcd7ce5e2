"""Built-in sanity checks, printable from the CLI.

Each check prints one PASS/FAIL line. These are smoke tests for an
installed copy, not the full test suite; they finish in a few seconds.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .metrics import compute_eer
from .model import KwsModel, StreamSession, build, tiny_config, default_config
from .numerics import Tape, Tensor, grad_check
from .seeding import rng_for

__all__ = ["run_selftest"]


def _check_gradients() -> tuple[bool, str]:
    cfg = tiny_config(conditioning="film", embedding_dim=8)
    model = build(cfg, seed=11)
    rng = rng_for(11, "selftest", "grad")
    # Nudge every parameter off its init so no ReLU sits exactly on its
    # kink and no layer is dead; zero-init biases otherwise put the check
    # on a subgradient boundary where central differences disagree.
    for _, t in model.parameters():
        t.data += rng.uniform(-0.15, 0.15, size=t.data.shape)
    frames = rng.standard_normal((5, cfg.input_dim))
    labels = rng.integers(0, cfg.num_classes, size=5)
    emb = rng.standard_normal(cfg.embedding_dim)
    emb /= np.linalg.norm(emb)

    def loss_fn():
        logits = model.forward(frames, emb)
        return nm.softmax_cross_entropy(logits, labels)

    report = grad_check(loss_fn, model.parameters(), eps=1e-5, tol=1e-4)
    return report.passed, f"max rel err {report.max_rel_err:.2e}"


def _check_streaming() -> tuple[bool, str]:
    cfg = default_config(input_dim=8)
    model = build(cfg, seed=3)
    rng = rng_for(3, "selftest", "stream")
    frames = rng.standard_normal((40, cfg.input_dim))
    batch = model.posteriors(frames)
    session = StreamSession(model)
    streamed = np.stack([session.step(f) for f in frames])
    gap = float(np.abs(batch - streamed).max())
    return gap <= 1e-6, f"max batch/stream gap {gap:.2e}"


def _check_identity_conditioning() -> tuple[bool, str]:
    bare = build(default_config(input_dim=8), seed=5)
    cond_cfg = default_config(input_dim=8, conditioning="film", embedding_dim=16)
    cond = build(cond_cfg, seed=5)
    rng = rng_for(5, "selftest", "film")
    frames = rng.standard_normal((25, 8))
    emb = rng.standard_normal(16)
    a = bare.posteriors(frames)
    b = cond.posteriors(frames, emb)
    same = a.tobytes() == b.tobytes()
    return same, "fresh conditioning layer is an exact identity" if same else "outputs differ"


def _check_eer() -> tuple[bool, str]:
    rng = rng_for(9, "selftest", "eer")
    for _ in range(50):
        pos = rng.normal(1.0, 1.0, size=rng.integers(3, 30))
        neg = rng.normal(0.0, 1.0, size=rng.integers(3, 30))
        got = compute_eer(pos, neg)
        # Brute force over every candidate threshold, exact integer gaps.
        cands = np.concatenate(([-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]))
        best = None
        for t in cands:
            n_fa = int(np.sum(neg >= t))
            n_fr = int(np.sum(pos < t))
            gap = abs(n_fa * pos.size - n_fr * neg.size)
            if best is None or gap < best[0]:
                best = (gap, (n_fa / neg.size + n_fr / pos.size) / 2.0)
        if abs(got.eer - best[1]) > 1e-12:
            return False, f"eer {got.eer} vs oracle {best[1]}"
    return True, "matches exhaustive threshold search on 50 random sets"


def run_selftest(out=print) -> int:
    """Run all checks; return 0 when everything passes, 1 otherwise."""
    checks = [
        ("gradients", _check_gradients),
        ("streaming", _check_streaming),
        ("conditioning-identity", _check_identity_conditioning),
        ("equal-error-rate", _check_eer),
    ]
    failures = 0
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # pragma: no cover - defensive
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        tag = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        out(f"[{tag}] {name}: {detail}")
    return 0 if failures == 0 else 1
