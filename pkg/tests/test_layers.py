"""Layer math against hand cases, a double-loop oracle, and differences."""
import numpy as np
import pytest

from kwspot import numerics as nm
from kwspot.errors import DimensionError
from kwspot.layers import (
    DenseParams,
    FilmParams,
    SvdfLayerParams,
    SvdfState,
    dense_forward,
    film_apply,
    film_project,
    film_project_batch,
    glorot_uniform,
    linear,
    svdf_forward_batch,
    svdf_forward_packed,
    svdf_forward_stream,
)
from kwspot.numerics import Tape, Tensor, grad_check


def svdf_with_values(feature, time, bias):
    feature = np.atleast_2d(np.asarray(feature, dtype=np.float64))
    time = np.atleast_2d(np.asarray(time, dtype=np.float64))
    p = SvdfLayerParams(
        nodes=feature.shape[0],
        input_dim=feature.shape[1],
        memory=time.shape[1],
        feature_filters=Tensor(feature),
        time_filters=Tensor(time),
        bias=Tensor(np.asarray(bias, dtype=np.float64)),
    )
    return p


def svdf_oracle(p, x):
    """Direct double loop over the definition, zero-padded on the left."""
    frames = x.shape[0]
    proj = x @ p.feature_filters.data.T
    mem = p.memory
    out = np.zeros((frames, p.nodes))
    for f in range(frames):
        for t in range(mem):
            src = f - (mem - 1) + t
            if src >= 0:
                out[f] += p.time_filters.data[:, t] * proj[src]
    return np.maximum(out + p.bias.data, 0.0)


# ---------------------------------------------------------------------------
# hand cases

def test_single_node_memory_one_is_a_scaled_relu():
    p = svdf_with_values([[2.0]], [[1.0]], [0.0])
    out = svdf_forward_batch(p, Tensor(np.array([[3.0], [6.0]])))
    np.testing.assert_allclose(out.data, [[6.0], [12.0]], rtol=1e-15)


def test_memory_two_with_zero_oldest_tap_matches_memory_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 4))
    feature = rng.standard_normal((3, 4))
    tap = rng.standard_normal(3)
    p2 = svdf_with_values(feature, np.stack([np.zeros(3), tap], axis=1), np.zeros(3))
    p1 = svdf_with_values(feature, tap[:, None], np.zeros(3))
    out2 = svdf_forward_batch(p2, Tensor(x))
    out1 = svdf_forward_batch(p1, Tensor(x))
    np.testing.assert_allclose(out2.data, out1.data, rtol=1e-12)


def test_batch_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        nodes = int(rng.integers(1, 7))
        dim = int(rng.integers(1, 6))
        mem = int(rng.integers(1, 9))
        frames = int(rng.integers(1, 30))
        p = svdf_with_values(
            rng.standard_normal((nodes, dim)),
            rng.standard_normal((nodes, mem)),
            rng.standard_normal(nodes) * 0.1,
        )
        x = rng.standard_normal((frames, dim))
        got = svdf_forward_batch(p, Tensor(x))
        np.testing.assert_allclose(got.data, svdf_oracle(p, x), atol=1e-12)


def test_first_frames_see_zero_history():
    """Frame 0 must behave as if preceded by zeros, not by garbage."""
    p = svdf_with_values([[1.0]], [[1.0, 1.0, 1.0]], [0.0])
    out = svdf_forward_batch(p, Tensor(np.array([[5.0], [1.0], [1.0]])))
    np.testing.assert_allclose(out.data[:, 0], [5.0, 6.0, 7.0], rtol=1e-15)


# ---------------------------------------------------------------------------
# streaming

def test_streaming_equals_batch_across_random_layers():
    rng = np.random.default_rng(2)
    for _ in range(25):
        nodes = int(rng.integers(1, 8))
        dim = int(rng.integers(1, 6))
        mem = int(rng.integers(1, 10))
        frames = int(rng.integers(1, 40))
        p = svdf_with_values(
            rng.standard_normal((nodes, dim)),
            rng.standard_normal((nodes, mem)),
            rng.standard_normal(nodes) * 0.2,
        )
        x = rng.standard_normal((frames, dim))
        batch = svdf_forward_batch(p, Tensor(x)).data
        state = SvdfState.fresh(p)
        streamed = np.stack([svdf_forward_stream(p, state, f)[0] for f in x])
        assert np.abs(batch - streamed).max() <= 1e-6


def test_state_reset_replays_identically():
    rng = np.random.default_rng(3)
    p = svdf_with_values(
        rng.standard_normal((4, 3)), rng.standard_normal((4, 5)), np.zeros(4)
    )
    x = rng.standard_normal((12, 3))
    state = SvdfState.fresh(p)
    first = np.stack([svdf_forward_stream(p, state, f)[0] for f in x])
    state.reset()
    second = np.stack([svdf_forward_stream(p, state, f)[0] for f in x])
    np.testing.assert_allclose(first, second, rtol=1e-15)
    assert state.frames_seen == 12


def test_stream_rejects_wrong_frame_shape():
    p = svdf_with_values(np.ones((2, 3)), np.ones((2, 4)), np.zeros(2))
    with pytest.raises(DimensionError):
        svdf_forward_stream(p, SvdfState.fresh(p), np.ones(5))


# ---------------------------------------------------------------------------
# parameter counts and init

def test_svdf_param_count_closed_form():
    rng = np.random.default_rng(4)
    p = SvdfLayerParams.init(nodes=32, input_dim=16, memory=4, rng=rng)
    assert p.param_count == 32 * 16 + 32 * 4 + 32
    assert [name for name, _ in p.tensors()] == [
        "feature_filters", "time_filters", "bias",
    ]


def test_dense_param_count_and_activation():
    rng = np.random.default_rng(5)
    p = DenseParams.init(out_dim=5, in_dim=7, rng=rng, activation="relu")
    assert p.param_count == 5 * 7 + 5
    x = rng.standard_normal((3, 7))
    out = dense_forward(p, Tensor(x))
    assert np.all(out.data >= 0)
    p_lin = DenseParams.init(out_dim=5, in_dim=7, rng=np.random.default_rng(5))
    lin = dense_forward(p_lin, Tensor(x))
    np.testing.assert_allclose(
        lin.data, x @ p_lin.weights.data.T + p_lin.bias.data, rtol=1e-12
    )


def test_glorot_bound():
    rng = np.random.default_rng(6)
    w = glorot_uniform(rng, fan_in=30, fan_out=20, shape=(20, 30))
    limit = np.sqrt(6.0 / 50.0)
    assert np.all(np.abs(w) <= limit)
    assert np.abs(w).max() > 0.5 * limit  # actually spread out


def test_film_param_count():
    p = FilmParams.init(channels=64, embedding_dim=64)
    assert p.param_count == 2 * 64 * (64 + 1)


# ---------------------------------------------------------------------------
# conditioning

def test_fresh_film_is_exact_identity():
    rng = np.random.default_rng(7)
    p = FilmParams.init(channels=6, embedding_dim=9)
    act = rng.standard_normal((11, 6))
    emb = rng.standard_normal(9)
    gamma, beta = film_project(p, Tensor(emb))
    np.testing.assert_array_equal(gamma.data, np.ones(6))
    np.testing.assert_array_equal(beta.data, np.zeros(6))
    out = film_apply(Tensor(act), gamma, beta)
    assert out.data.tobytes() == act.tobytes()


def test_film_projection_is_affine():
    rng = np.random.default_rng(8)
    p = FilmParams.init(channels=4, embedding_dim=6)
    p.w_gamma.data[...] = rng.standard_normal((4, 6))
    p.w_beta.data[...] = rng.standard_normal((4, 6))
    p.b_beta.data[...] = rng.standard_normal(4)
    emb = rng.standard_normal(6)
    gamma, beta = film_project(p, Tensor(emb))
    np.testing.assert_allclose(gamma.data, p.w_gamma.data @ emb + 1.0, rtol=1e-12)
    np.testing.assert_allclose(
        beta.data, p.w_beta.data @ emb + p.b_beta.data, rtol=1e-12
    )
    act = rng.standard_normal((5, 4))
    out = film_apply(Tensor(act), gamma, beta)
    np.testing.assert_allclose(out.data, act * gamma.data + beta.data, rtol=1e-12)


# ---------------------------------------------------------------------------
# gradients of the fused ops

def test_linear_gradients_against_differences():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((6, 4)))
    w = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(3))

    def loss():
        out = linear(x, w, b, activation="none")
        return nm.sum_all(nm.mul(out, out))

    report = grad_check(loss, [x, w, b], names=["x", "w", "b"])
    assert report.passed, str(report)


def test_linear_relu_gradients_against_differences():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((6, 4)))
    w = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(3) + 0.5)  # keep pre-activations off the kink

    def loss():
        return nm.sum_all(linear(x, w, b, activation="relu"))

    report = grad_check(loss, [x, w, b])
    assert report.passed, str(report)


def test_svdf_gradients_against_differences():
    rng = np.random.default_rng(11)
    p = svdf_with_values(
        rng.standard_normal((3, 4)),
        rng.standard_normal((3, 5)),
        rng.standard_normal(3) + 0.4,
    )
    x = Tensor(rng.standard_normal((7, 4)))
    params = [x, p.feature_filters, p.time_filters, p.bias]

    def loss():
        out = svdf_forward_batch(p, x)
        return nm.sum_all(nm.mul(out, out))

    report = grad_check(loss, params, names=["x", "feature", "time", "bias"])
    assert report.passed, str(report)


def test_film_gradients_against_differences():
    rng = np.random.default_rng(12)
    p = FilmParams.init(channels=4, embedding_dim=5)
    for _, t in p.tensors():
        t.data += rng.uniform(-0.3, 0.3, size=t.data.shape)
    act = Tensor(rng.standard_normal((6, 4)))
    emb = Tensor(rng.standard_normal(5))

    def loss():
        gamma, beta = film_project(p, emb)
        out = film_apply(act, gamma, beta)
        return nm.sum_all(nm.mul(out, out))

    params = [act, emb] + [t for _, t in p.tensors()]
    names = ["act", "emb"] + [name for name, _ in p.tensors()]
    report = grad_check(loss, params, names=names)
    assert report.passed, str(report)


def test_svdf_rejects_wrong_input_dim():
    p = svdf_with_values(np.ones((2, 3)), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        svdf_forward_batch(p, Tensor(np.ones((4, 5))))


# ---------------------------------------------------------------------------
# packed multi-utterance forward

def _starts_for(lengths):
    offsets = np.concatenate(([0], np.cumsum(lengths[:-1])))
    return np.repeat(offsets, lengths)


def test_packed_equals_per_utterance_concat():
    rng = np.random.default_rng(11)
    for _ in range(12):
        nodes = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 5))
        mem = int(rng.integers(1, 8))
        p = svdf_with_values(
            rng.standard_normal((nodes, dim)),
            rng.standard_normal((nodes, mem)),
            rng.standard_normal(nodes) * 0.1,
        )
        lengths = rng.integers(1, 20, size=int(rng.integers(1, 5)))
        chunks = [rng.standard_normal((n, dim)) for n in lengths]
        packed = svdf_forward_packed(
            p, Tensor(np.concatenate(chunks)), _starts_for(lengths)
        )
        ref = np.concatenate(
            [svdf_forward_batch(p, Tensor(c)).data for c in chunks]
        )
        # the one shared input matmul may differ from per-chunk matmuls by
        # an ulp; the boundary masking itself is exact
        np.testing.assert_allclose(packed.data, ref, rtol=1e-12, atol=1e-12)


def test_packed_gradients_match_per_utterance_sum():
    """Backward through the packed op must equal summing per-utterance passes."""
    rng = np.random.default_rng(12)
    feature = rng.standard_normal((3, 4))
    time = rng.standard_normal((3, 5))
    bias = rng.standard_normal(3) * 0.1
    lengths = np.array([7, 3, 12])
    chunks = [rng.standard_normal((n, 4)) for n in lengths]

    tape = Tape()
    p = svdf_with_values(feature, time, bias)
    tape.attach(*[t for _, t in p.tensors()])
    out = svdf_forward_packed(p, Tensor(np.concatenate(chunks)), _starts_for(lengths))
    tape.backward(nm.sum_all(nm.mul(out, out)))
    packed_grads = [t.grad.copy() for _, t in p.tensors()]

    tape2 = Tape()
    p2 = svdf_with_values(feature, time, bias)
    tape2.attach(*[t for _, t in p2.tensors()])
    total = None
    for c in chunks:
        o = svdf_forward_batch(p2, Tensor(c))
        term = nm.sum_all(nm.mul(o, o))
        total = term if total is None else nm.add(total, term)
    tape2.backward(total)

    for got, (_, t) in zip(packed_grads, p2.tensors()):
        np.testing.assert_allclose(got, t.grad, rtol=1e-12, atol=1e-12)


def test_packed_rejects_bad_starts():
    p = svdf_with_values(np.ones((2, 3)), np.ones((2, 4)), np.zeros(2))
    x = Tensor(np.ones((6, 3)))
    with pytest.raises(DimensionError):
        svdf_forward_packed(p, x, np.zeros(5, dtype=int))  # wrong length
    with pytest.raises(DimensionError):
        svdf_forward_packed(p, x, np.zeros((6, 1)))  # wrong rank


def test_film_project_batch_matches_single_rows():
    rng = np.random.default_rng(13)
    p = FilmParams.init(channels=4, embedding_dim=5)
    for _, t in p.tensors():
        t.data += rng.uniform(-0.3, 0.3, size=t.data.shape)
    embs = rng.standard_normal((6, 5))
    gammas, betas = film_project_batch(p, Tensor(embs))
    for i in range(6):
        g, b = film_project(p, Tensor(embs[i]))
        np.testing.assert_allclose(gammas.data[i], g.data, rtol=1e-12)
        np.testing.assert_allclose(betas.data[i], b.data, rtol=1e-12)
