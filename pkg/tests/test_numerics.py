import math

import numpy as np
import pytest

from modules.errors import (
    ConfigError,
    DegenerateBatchError,
    DegenerateVectorError,
    GradientCheckError,
    OptimizerStateError,
    ShapeError,
)
from modules.layers import Attention
from modules.numerics import (
    EVAL,
    TRAIN,
    AdamState,
    BatchNormStats,
    Parameter,
    RngStreams,
    Tape,
    adam_step,
    batch_norm,
    concat,
    dropout,
    grad_check,
    matmul,
    mean_axis,
    mul,
    multi_head_attention,
    normalize_rows,
    relu,
    softmax_rows,
    sum_axis,
    take,
)


def _gen(seed):
    return np.random.Generator(np.random.Philox(seed))


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    tape = Tape()
    assert np.array_equal(matmul(tape.constant(np.eye(2)), tape.constant(m)).value, m)


def test_matmul_hand_arithmetic():
    tape = Tape()
    out = matmul(tape.constant([[1.0, 2.0], [3.0, 4.0]]), tape.constant([[1.0], [1.0]]))
    assert out.value.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    tape = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(100))
def test_matmul_matches_triple_loop(seed):
    g = _gen(seed)
    a, b = g.normal(size=(5, 7)), g.normal(size=(7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    tape = Tape()
    np.testing.assert_allclose(matmul(tape.constant(a), tape.constant(b)).value, expected, rtol=0, atol=1e-12)


def test_matmul_broadcasts_leading_axes():
    g = _gen(1)
    a, b = g.normal(size=(4, 2, 3)), g.normal(size=(3, 5))
    tape = Tape()
    out = matmul(tape.constant(a), tape.constant(b))
    assert out.shape == (4, 2, 5)
    np.testing.assert_allclose(out.value[2], a[2] @ b)


# -- softmax / relu -----------------------------------------------------------

def test_softmax_equal_logits_uniform():
    tape = Tape()
    np.testing.assert_allclose(softmax_rows(tape.constant([[2.5, 2.5, 2.5]])).value, [[1 / 3] * 3])


def test_softmax_analytic_row():
    tape = Tape()
    np.testing.assert_allclose(softmax_rows(tape.constant([[0.0, math.log(3.0)]])).value, [[0.25, 0.75]])


@pytest.mark.parametrize("seed", range(200))
def test_softmax_rows_match_formula_and_normalize(seed):
    g = _gen(seed)
    m = g.normal(scale=3.0, size=(4, 6))
    tape = Tape()
    out = softmax_rows(tape.constant(m)).value
    expected = np.exp(m) / np.exp(m).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert (out >= 0).all()


def test_softmax_is_stable_for_large_logits():
    tape = Tape()
    out = softmax_rows(tape.constant([[1000.0, 1000.0]])).value
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [[0.5, 0.5]])


def test_relu_cases():
    tape = Tape()
    assert relu(tape.constant([[-1.0, -2.0]])).value.tolist() == [[0.0, 0.0]]
    assert relu(tape.constant([[1.0, 2.0]])).value.tolist() == [[1.0, 2.0]]
    assert relu(tape.constant([[-1.0, 0.0, 2.0]])).value.tolist() == [[0.0, 0.0, 2.0]]


# -- batch norm ---------------------------------------------------------------

def _bn(x, mode=TRAIN, stats=None):
    tape = Tape()
    features = np.shape(x)[1]
    stats = stats or BatchNormStats.fresh(features)
    out = batch_norm(tape.constant(x), tape.constant(np.ones((1, features))),
                     tape.constant(np.zeros((1, features))), mode, stats)
    return out.value, stats


def test_batch_norm_constant_column_is_zero():
    out, _ = _bn(np.full((5, 1), 3.0))
    np.testing.assert_allclose(out, 0.0)


def test_batch_norm_symmetric_column():
    out, _ = _bn(np.array([[-1.0], [1.0]]))
    np.testing.assert_allclose(out, [[-1.0], [1.0]], atol=1e-4)


def test_batch_norm_matches_direct_formula():
    x = _gen(3).normal(size=(8, 4))
    out, stats = _bn(x)
    expected = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=0, keepdims=True))


def test_batch_norm_eval_uses_running_stats():
    stats = BatchNormStats(np.array([[1.0]]), np.array([[4.0]]))
    out, after = _bn(np.array([[3.0]]), EVAL, stats)
    np.testing.assert_allclose(out, [[2.0 / math.sqrt(4.0 + 1e-5)]])
    assert after.mean.tolist() == [[1.0]]


def test_batch_norm_single_row_train_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        _bn(np.ones((1, 3)))


# -- dropout ------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    tape = Tape()
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    for mode in (TRAIN, EVAL):
        assert np.array_equal(dropout(x, 0.0, mode, _gen(0)).value, x.value)


def test_dropout_eval_is_identity():
    tape = Tape()
    x = tape.constant(np.ones((3, 3)))
    assert dropout(x, 0.5, EVAL, None) is x


def test_dropout_keeps_about_half():
    tape = Tape()
    out = dropout(tape.constant(np.ones((100, 100))), 0.5, TRAIN, _gen(42)).value
    kept = (out != 0).mean()
    assert 0.48 <= kept <= 0.52
    np.testing.assert_allclose(out[out != 0], 2.0)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate):
    tape = Tape()
    with pytest.raises(ConfigError):
        dropout(tape.constant(np.ones((2, 2))), rate, TRAIN, _gen(0))


# -- attention ----------------------------------------------------------------

def test_attention_single_token_is_linear():
    layer = Attention('att', 4, 2, _gen(5))
    token = _gen(6).normal(size=(1, 4))
    tape = Tape()
    out = layer(tape, tape.constant(token)).value
    expected = (token @ layer.wv.value + layer.bv.value) @ layer.wo.value + layer.bo.value
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_identical_tokens_give_identical_rows():
    layer = Attention('att', 4, 2, _gen(7))
    tokens = np.tile(_gen(8).normal(size=(1, 4)), (3, 1))
    tape = Tape()
    out = layer(tape, tape.constant(tokens)).value
    np.testing.assert_allclose(out - out[0], 0.0, atol=1e-12)


def test_attention_identity_projections_match_oracle():
    x = _gen(9).normal(size=(3, 4))
    layer = Attention.identity('att', 4)
    tape = Tape()
    out = layer(tape, tape.constant(x)).value
    scores = x @ x.T / 2.0
    weights = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, weights @ x, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_attention_is_permutation_equivariant(seed):
    g = _gen(seed)
    heads = int(g.choice([1, 2, 4]))
    layer = Attention('att', 4 * heads, heads, g)
    for p in (layer.bq, layer.bv, layer.bo):
        p.value[...] = g.normal(size=p.shape)
    x = g.normal(size=(2, 5, 4 * heads))
    perm = g.permutation(5)
    tape = Tape()
    out = layer(tape, tape.constant(x)).value
    permuted = layer(tape, tape.constant(x[:, perm])).value
    np.testing.assert_allclose(permuted, out[:, perm], rtol=0, atol=1e-12)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError):
        Attention('att', 5, 2, _gen(0))
    layer = Attention('att', 4, 2, _gen(0))
    tape = Tape()
    x = tape.constant(np.ones((2, 4)))
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, layer, 3)


# -- adam ---------------------------------------------------------------------

def test_adam_first_step_is_sign_step():
    p = Parameter('x', [[0.0]])
    adam_step(AdamState(lr=1e-3), [p], [np.array([[1.0]])])
    assert p.value[0, 0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    p = Parameter('x', [[1.5, -2.0]])
    state = AdamState()
    for _ in range(5):
        adam_step(state, [p], [np.zeros((1, 2))])
    assert p.value.tolist() == [[1.5, -2.0]]
    assert state.step == 5


def test_adam_matches_scalar_recurrence_on_square():
    p = Parameter('x', [[1.0]])
    state = AdamState(lr=1e-3)
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 1e-3 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(state, [p], [2.0 * p.value])
    assert abs(p.value[0, 0] - x) <= 1e-12


def test_adam_rejects_mismatched_shapes():
    p = Parameter('x', np.zeros((2, 2)))
    with pytest.raises(OptimizerStateError):
        adam_step(AdamState(), [p], [np.zeros((2, 3))])
    state = AdamState(first_moment={'x': np.zeros((3,))})
    with pytest.raises(OptimizerStateError):
        adam_step(state, [p], [np.zeros((2, 2))])


# -- tape ---------------------------------------------------------------------

def test_backward_accumulates_shared_parameter():
    p = Parameter('w', [[2.0, 3.0]])
    tape = Tape()
    w = tape.param(p)
    tape.backward(sum_axis(w + w))
    np.testing.assert_allclose(p.grad, [[2.0, 2.0]])


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.param(Parameter('w', np.ones((2, 2))))
    with pytest.raises(ShapeError):
        tape.backward(mul(x, x))


def test_take_scatters_repeated_rows():
    p = Parameter('w', [[1.0], [2.0], [3.0]])
    tape = Tape()
    tape.backward(sum_axis(take(tape.param(p), [0, 0, 2])))
    assert p.grad.ravel().tolist() == [2.0, 0.0, 1.0]


def test_normalize_rows_rejects_zero_vector():
    tape = Tape()
    with pytest.raises(DegenerateVectorError):
        normalize_rows(tape.constant(np.zeros((1, 3))))


# -- grad check ---------------------------------------------------------------

def test_grad_check_quadratic_is_exact():
    p = Parameter('w', _gen(11).normal(size=(3, 4)))

    def loss_fn(tape):
        w = tape.param(p)
        return sum_axis(mul(w, w))

    report = grad_check(loss_fn, [p], samples=12, step=1e-3)
    assert report.max_relative_error <= 1e-9
    assert report.checked == 12


@pytest.mark.parametrize("seed", range(30))
def test_grad_check_composite_graph(seed):
    g = _gen(seed)
    w1 = Parameter('w1', g.normal(size=(3, 5)))
    w2 = Parameter('w2', g.normal(size=(5, 2)))
    x = g.normal(size=(4, 2, 3))

    def loss_fn(tape):
        h = matmul(tape.constant(x), tape.param(w1))
        h = softmax_rows(matmul(h, tape.param(w2)))
        pooled = mean_axis(h, axis=-2)
        features = concat([pooled, relu(pooled)], axis=-1)
        return sum_axis(mul(normalize_rows(features), features))

    assert grad_check(loss_fn, [w1, w2], samples=10, seed=seed).passed(1e-5, atol=1e-8)


def test_grad_check_catches_corrupted_rule():
    p = Parameter('w', [[0.7, -1.3]])

    def loss_fn(tape):
        w = tape.param(p)
        square = tape.record(w.value * w.value, (w,), lambda g: (3.0 * g * w.value,), 'bad_square')
        return sum_axis(square)

    assert grad_check(loss_fn, [p], samples=6).max_relative_error > 1e-3


def test_grad_check_reports_small_gradient_errors_unfloored():
    p = Parameter('w', [[0.3, -0.8]])
    c = 1e-4

    def loss_fn(tape):
        w = tape.param(p)
        scaled = tape.record(c * w.value, (w,), lambda g: (1.0001 * c * g,), 'skewed_scale')
        return sum_axis(scaled)

    report = grad_check(loss_fn, [p], samples=4)
    assert report.max_relative_error == pytest.approx(1e-4, rel=1e-3)
    assert all(e.absolute_error == pytest.approx(1e-8, rel=1e-3) for e in report.entries)
    assert not report.passed(1e-5)
    assert report.passed(1e-5, atol=1e-7)
    assert report.max_error(atol=1e-7) == 0.0


def test_grad_check_aborts_on_non_finite_loss():
    p = Parameter('w', [[1.0]])

    def loss_fn(tape):
        w = tape.param(p)
        return sum_axis(mul(w, tape.constant([[np.nan]])))

    with pytest.raises(GradientCheckError):
        grad_check(loss_fn, [p])


# -- rng streams --------------------------------------------------------------

def test_rng_streams_are_independent_and_reproducible():
    a = RngStreams(5)
    first = a.stream('data').random(3)
    b = RngStreams(5)
    b.stream('init').random(100)
    assert np.array_equal(b.stream('data').random(3), first)
    assert not np.array_equal(RngStreams(6).stream('data').random(3), first)


def test_rng_state_round_trip():
    streams = RngStreams(1)
    streams.stream('dropout').random(7)
    saved = streams.state()
    expected = streams.stream('dropout').random(4)
    restored = RngStreams(1)
    restored.restore(saved)
    assert np.array_equal(restored.stream('dropout').random(4), expected)


def test_rng_rejects_negative_seed():
    with pytest.raises(ConfigError):
        RngStreams(-1)
