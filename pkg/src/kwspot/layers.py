"""Detector building blocks: SVDF layers, dense layers, feature-wise conditioning.

An SVDF layer is a rank-1 factorization of a short 1-d convolution. Each of
its N nodes first projects the incoming frame through a feature filter
(one row of an (N, D) matrix), then filters the last T of those projections
with a per-node time filter of length T, adds a bias, and applies ReLU.
Frames before the start of the sequence count as zeros, so outputs depend
only on the past (causal) and the batch and streaming paths agree exactly.

Feature-wise conditioning scales and shifts a (frames, L) activation with
per-channel vectors computed from a speaker embedding by one affine
projection each. With the projections zero-initialized the scale is
exactly 1 and the shift exactly 0, so a freshly conditioned model is
bit-identical to its unconditioned twin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, UsageError
from .numerics import Tensor

__all__ = [
    "SvdfLayerParams",
    "SvdfState",
    "DenseParams",
    "FilmParams",
    "glorot_uniform",
    "svdf_forward_batch",
    "svdf_forward_packed",
    "svdf_forward_stream",
    "linear",
    "dense_forward",
    "film_project",
    "film_apply",
    "film_project_batch",
]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out))."""
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


@dataclass
class SvdfLayerParams:
    """Parameters of one SVDF layer.

    feature_filters: (nodes, input_dim), time_filters: (nodes, memory),
    bias: (nodes,). Total parameter count is N*D + N*T + N.
    """

    nodes: int
    input_dim: int
    memory: int
    feature_filters: Tensor
    time_filters: Tensor
    bias: Tensor

    @classmethod
    def init(cls, nodes: int, input_dim: int, memory: int, rng: np.random.Generator):
        if nodes < 1 or input_dim < 1 or memory < 1:
            raise UsageError(
                f"svdf dims must be positive, got nodes={nodes} "
                f"input_dim={input_dim} memory={memory}"
            )
        return cls(
            nodes=nodes,
            input_dim=input_dim,
            memory=memory,
            feature_filters=Tensor(glorot_uniform(rng, input_dim, nodes, (nodes, input_dim))),
            time_filters=Tensor(glorot_uniform(rng, memory, 1, (nodes, memory))),
            bias=Tensor(np.zeros(nodes)),
        )

    @property
    def param_count(self) -> int:
        return self.nodes * self.input_dim + self.nodes * self.memory + self.nodes

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("feature_filters", self.feature_filters),
            ("time_filters", self.time_filters),
            ("bias", self.bias),
        ]


@dataclass
class SvdfState:
    """Streaming memory of one SVDF layer: a (memory, nodes) ring buffer.

    ``cursor`` is the slot the next frame's projection will be written to;
    unwritten slots hold zeros, which is exactly the left zero padding of
    the batch path.
    """

    buffer: np.ndarray
    cursor: int
    frames_seen: int

    @classmethod
    def fresh(cls, params: SvdfLayerParams) -> "SvdfState":
        return cls(
            buffer=np.zeros((params.memory, params.nodes)), cursor=0, frames_seen=0
        )

    def reset(self) -> None:
        self.buffer[...] = 0.0
        self.cursor = 0
        self.frames_seen = 0


def svdf_forward_batch(p: SvdfLayerParams, x: Tensor) -> Tensor:
    """Full-sequence SVDF: (frames, input_dim) -> (frames, nodes)."""
    if x.data.ndim != 2 or x.data.shape[1] != p.input_dim:
        raise DimensionError(
            f"svdf: input shape {x.data.shape} does not match input_dim {p.input_dim}"
        )
    acts = linear(x, p.feature_filters)  # (frames, nodes)
    return _time_filter(acts, p.time_filters, p.bias)


def svdf_forward_packed(p: SvdfLayerParams, x: Tensor, starts: np.ndarray) -> Tensor:
    """SVDF over several utterances concatenated along the frame axis.

    ``starts[f]`` is the index of the first frame of f's utterance. Memory
    taps never reach across an utterance boundary: a tap that would read a
    frame before ``starts[f]`` contributes zero, exactly like the left zero
    padding of the single-utterance path. Output equals running
    ``svdf_forward_batch`` per utterance and concatenating.
    """
    if x.data.ndim != 2 or x.data.shape[1] != p.input_dim:
        raise DimensionError(
            f"svdf: input shape {x.data.shape} does not match input_dim {p.input_dim}"
        )
    s = np.asarray(starts)
    frames = x.data.shape[0]
    if s.shape != (frames,) or not np.issubdtype(s.dtype, np.integer):
        raise DimensionError(
            f"svdf: starts shape {s.shape} does not match {frames} frames"
        )
    acts = linear(x, p.feature_filters)
    return _time_filter(acts, p.time_filters, p.bias, starts=s)


def _time_filter(a: Tensor, w: Tensor, b: Tensor, starts: np.ndarray | None = None) -> Tensor:
    """Causal per-node filtering: out[f, n] = relu(sum_t w[n, t] a[f-T+1+t, n] + b[n]).

    With ``starts``, frames before starts[f] read as zero (utterance packing).
    """
    frames, nodes = a.data.shape
    mem = w.data.shape[1]
    padded = np.zeros((frames + mem - 1, nodes))
    padded[mem - 1 :] = a.data
    blocked = None
    if starts is not None:
        idx = np.arange(frames)
        # Rows whose tap t would cross back into the previous utterance.
        blocked = [
            np.nonzero(idx - (mem - 1 - t) < starts)[0] if t < mem - 1 else None
            for t in range(mem)
        ]
    pre = np.zeros((frames, nodes))
    for t in range(mem):
        contrib = padded[t : t + frames] * w.data[:, t]
        if blocked is not None and blocked[t] is not None and blocked[t].size:
            contrib[blocked[t]] = 0.0
        pre += contrib
    pre += b.data
    out_data = np.maximum(pre, 0.0)
    nm.ensure_finite("svdf_time_filter", out_data)
    tape = nm.resolve_tape(a, w, b)
    out = Tensor(out_data, tape=tape)
    if tape is not None:

        def backward():
            g = out.grad * (pre > 0.0)
            if b.tape is not None:
                b.grad += g.sum(axis=0)
            g_pad = np.zeros_like(padded)
            for t in range(mem):
                gt = g
                if blocked is not None and blocked[t] is not None and blocked[t].size:
                    gt = g.copy()
                    gt[blocked[t]] = 0.0
                if w.tape is not None:
                    w.grad[:, t] += (padded[t : t + frames] * gt).sum(axis=0)
                g_pad[t : t + frames] += gt * w.data[:, t]
            if a.tape is not None:
                a.grad += g_pad[mem - 1 :]

        tape.record("svdf_time_filter", backward)
    return out


def svdf_forward_stream(
    p: SvdfLayerParams, state: SvdfState, frame: np.ndarray
) -> tuple[np.ndarray, SvdfState]:
    """One streaming step. Mutates and returns the state; numpy in, numpy out."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (p.input_dim,):
        raise DimensionError(
            f"svdf stream: frame shape {frame.shape}, expected ({p.input_dim},)"
        )
    state.buffer[state.cursor] = p.feature_filters.data @ frame
    mem = p.memory
    # Oldest-to-newest view of the ring, ending at the slot just written.
    order = (state.cursor + 1 + np.arange(mem)) % mem
    hist = state.buffer[order]
    y = np.maximum((p.time_filters.data.T * hist).sum(axis=0) + p.bias.data, 0.0)
    state.cursor = (state.cursor + 1) % mem
    state.frames_seen += 1
    return y, state


@dataclass
class DenseParams:
    """Affine layer: weights (out_dim, in_dim), bias (out_dim,), optional ReLU."""

    weights: Tensor
    bias: Tensor
    activation: str = "none"  # "relu" | "none"

    @classmethod
    def init(cls, out_dim: int, in_dim: int, rng: np.random.Generator, activation="none"):
        if activation not in ("relu", "none"):
            raise UsageError(f"unknown activation {activation!r}")
        return cls(
            weights=Tensor(glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim))),
            bias=Tensor(np.zeros(out_dim)),
            activation=activation,
        )

    @property
    def param_count(self) -> int:
        return int(self.weights.data.size + self.bias.data.size)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("weights", self.weights), ("bias", self.bias)]


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, activation: str = "none") -> Tensor:
    """x (frames, in) @ w (out, in)^T [+ b] [relu], as one taped op."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"linear: input {x.data.shape} does not match weights {w.data.shape}"
        )
    pre = x.data @ w.data.T
    if b is not None:
        pre = pre + b.data
    out_data = np.maximum(pre, 0.0) if activation == "relu" else pre
    nm.ensure_finite("linear", out_data)
    tape = nm.resolve_tape(x, w, b)
    out = Tensor(out_data, tape=tape)
    if tape is not None:

        def backward():
            g = out.grad
            if activation == "relu":
                g = g * (pre > 0.0)
            if w.tape is not None:
                w.grad += g.T @ x.data
            if b is not None and b.tape is not None:
                b.grad += g.sum(axis=0)
            if x.tape is not None:
                x.grad += g @ w.data

        tape.record("linear", backward)
    return out


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    return linear(x, p.weights, p.bias, activation=p.activation)


@dataclass
class FilmParams:
    """Per-channel scale/shift generators driven by a speaker embedding.

    w_gamma, w_beta: (channels, embedding_dim); b_gamma starts at ones and
    b_beta at zeros, with both weight matrices zero, so an untrained
    conditioner is a no-op.
    """

    channels: int
    embedding_dim: int
    w_gamma: Tensor
    b_gamma: Tensor
    w_beta: Tensor
    b_beta: Tensor

    @classmethod
    def init(cls, channels: int, embedding_dim: int) -> "FilmParams":
        if channels < 1 or embedding_dim < 1:
            raise UsageError(
                f"conditioning dims must be positive, got channels={channels} "
                f"embedding_dim={embedding_dim}"
            )
        return cls(
            channels=channels,
            embedding_dim=embedding_dim,
            w_gamma=Tensor(np.zeros((channels, embedding_dim))),
            b_gamma=Tensor(np.ones(channels)),
            w_beta=Tensor(np.zeros((channels, embedding_dim))),
            b_beta=Tensor(np.zeros(channels)),
        )

    @property
    def param_count(self) -> int:
        return 2 * self.channels * (self.embedding_dim + 1)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_gamma", self.w_gamma),
            ("b_gamma", self.b_gamma),
            ("w_beta", self.w_beta),
            ("b_beta", self.b_beta),
        ]


def film_project(p: FilmParams, embedding: Tensor) -> tuple[Tensor, Tensor]:
    """Embedding (E,) -> per-channel (gamma, beta), each (channels,)."""
    if embedding.data.shape != (p.embedding_dim,):
        raise DimensionError(
            f"conditioning: embedding shape {embedding.data.shape}, "
            f"expected ({p.embedding_dim},)"
        )
    gamma = nm.add(nm.matmul(p.w_gamma, embedding), p.b_gamma)
    beta = nm.add(nm.matmul(p.w_beta, embedding), p.b_beta)
    return gamma, beta


def film_apply(activations: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * activations + beta, broadcast over frames."""
    return nm.add(nm.mul(activations, gamma), beta)


def film_project_batch(p: FilmParams, embeddings: Tensor) -> tuple[Tensor, Tensor]:
    """Embeddings (n, E) -> (gammas, betas), each (n, channels).

    Row i equals film_project on embedding i; used by the packed forward
    where each utterance carries its own conditioning vector.
    """
    if embeddings.data.ndim != 2 or embeddings.data.shape[1] != p.embedding_dim:
        raise DimensionError(
            f"conditioning: embeddings shape {embeddings.data.shape}, "
            f"expected (n, {p.embedding_dim})"
        )
    gammas = linear(embeddings, p.w_gamma, p.b_gamma)
    betas = linear(embeddings, p.w_beta, p.b_beta)
    return gammas, betas
