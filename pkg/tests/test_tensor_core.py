import math

import mpmath
import numpy as np
import pytest

from mmfed import tensor_core as tc
from mmfed.errors import ConfigError, DataError, ShapeError, UsageError
from mmfed.tensor_core import ParamSet, Tensor

from helpers import naive_conv2d, naive_matmul, naive_maxpool


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return tc.sum_all(tc.mul(out, weights))


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    out = tc.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out.data, x)


def test_conv_hand_computed():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = tc.conv2d(x, w, np.zeros(1))
    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0].tolist() == [[6.0, 8.0], [12.0, 14.0]]


def test_conv_zero_kernel_gives_bias(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    out = tc.conv2d(x, np.zeros((4, 2, 3, 3)), np.full(4, 2.5), stride=2, padding=1)
    assert out.shape == (3, 4, 3, 3)
    assert np.all(out.data == 2.5)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, 7, size=2)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((f, c, k, k))
    b = rng.standard_normal(f)
    got = tc.conv2d(x, wt, b, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv2d(x, wt, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 1, 3, 3\)"):
        tc.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ConfigError):
        tc.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=0)
    with pytest.raises(ShapeError):
        tc.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


# --- relu -------------------------------------------------------------------

def test_relu_values_and_gradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    out = tc.relu(x)
    assert out.data.tolist() == [0.0, 0.0, 2.0]
    g = tc.backward(tc.sum_all(out), {"x": x})
    assert g["x"].tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative(rng):
    x = Tensor(-rng.random(10) - 0.1, requires_grad=True)
    out = tc.relu(x)
    assert np.all(out.data == 0)
    g = tc.backward(tc.sum_all(out), {"x": x})
    assert np.all(g["x"] == 0)


def test_relu_identity_on_positive(rng):
    r = rng.random((3, 4)) + 1e-3
    assert np.array_equal(tc.relu(r).data, r)


# --- maxpool ----------------------------------------------------------------

def test_maxpool_small():
    assert tc.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data.tolist() == [[[[4.0]]]]


def test_maxpool_4x4():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    assert tc.maxpool2d(x, 2, 2).data[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_maxpool_tie_goes_to_first_element():
    x = Tensor(np.full((1, 2, 4, 4), 3.0), requires_grad=True)
    out = tc.maxpool2d(x, 2, 2)
    assert np.all(out.data == 3.0)
    g = tc.backward(tc.sum_all(out), {"x": x})["x"]
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(g[0, 0], expected) and np.array_equal(g[0, 1], expected)


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_matches_naive(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    x = rng.standard_normal((2, 2, int(rng.integers(k, 8)), int(rng.integers(k, 8))))
    assert np.array_equal(tc.maxpool2d(x, k, stride).data, naive_maxpool(x, k, stride))


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        tc.maxpool2d(np.zeros((1, 1, 2, 3)), 3, 1)


# --- linear / flatten_concat -----------------------------------------------

def test_linear_identity(rng):
    x = rng.standard_normal((4, 3))
    assert np.array_equal(tc.linear(x, np.eye(3), np.zeros(3)).data, x)


def test_linear_sum_plus_bias():
    assert tc.linear(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0])).data.tolist() == [[6.0]]


def test_linear_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    np.testing.assert_allclose(tc.linear(x, w, b).data, naive_matmul(x, w) + b, rtol=0, atol=1e-14)


def test_linear_mismatch():
    with pytest.raises(ShapeError):
        tc.linear(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_flatten_concat_order_and_split(rng):
    a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(np.zeros((3, 1, 1, 3)), requires_grad=True)
    out = tc.flatten_concat([a, b])
    assert out.shape == (3, 5)
    assert np.array_equal(out.data[:, :2], a.data)
    assert np.all(out.data[:, 2:] == 0)
    up = rng.standard_normal((3, 5))
    g = tc.backward(tc.sum_all(tc.mul(out, up)), {"a": a, "b": b})
    assert np.array_equal(g["a"], up[:, :2])
    assert np.array_equal(g["b"].reshape(3, 3), up[:, 2:])


def test_flatten_single_part(rng):
    x = rng.standard_normal((2, 2, 3))
    assert np.array_equal(tc.flatten_concat([x]).data, x.reshape(2, 6))


def test_flatten_concat_batch_mismatch():
    with pytest.raises(ShapeError):
        tc.flatten_concat([np.zeros((2, 3)), np.zeros((3, 3))])


# --- softmax cross-entropy --------------------------------------------------

def test_ce_uniform_logits():
    loss = tc.softmax_cross_entropy(np.zeros((4, 10)), np.arange(4))
    assert math.isclose(float(loss.data), math.log(10), rel_tol=0, abs_tol=1e-12)
    assert abs(float(loss.data) - 2.302585093) < 1e-9


def test_ce_saturated_correct():
    logits = np.zeros((3, 10))
    labels = np.array([1, 5, 9])
    logits[np.arange(3), labels] = 1000.0
    assert float(tc.softmax_cross_entropy(logits, labels).data) <= 1e-9


def test_ce_matches_extended_precision(rng):
    logits = rng.standard_normal((3, 4)) * 3
    labels = np.array([0, 3, 2])
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        total += -(z[y] - mpmath.log(sum(mpmath.exp(v) for v in z)))
    expected = float(total / 3)
    assert abs(float(tc.softmax_cross_entropy(logits, labels).data) - expected) <= 1e-12


def test_ce_label_out_of_range():
    with pytest.raises(DataError, match="row 1"):
        tc.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# --- backward ---------------------------------------------------------------

def test_backward_square():
    theta = Tensor(3.0, requires_grad=True)
    g = tc.backward(tc.mul(theta, theta), {"theta": theta})
    assert float(g["theta"]) == 6.0


def test_backward_unused_param_zero(rng):
    used = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    g = tc.backward(tc.sum_all(tc.mul(used, used)), {"used": used, "unused": unused})
    assert g.names() == ["used", "unused"]
    assert g["unused"].shape == (2, 2) and np.all(g["unused"] == 0)


def test_backward_twice_is_usage_error():
    theta = Tensor(2.0, requires_grad=True)
    loss = tc.mul(theta, theta)
    tc.backward(loss, {"theta": theta})
    with pytest.raises(UsageError):
        tc.backward(loss, {"theta": theta})


def test_backward_through_consumed_subgraph():
    theta = Tensor(2.0, requires_grad=True)
    shared = tc.mul(theta, theta)
    tc.backward(tc.mul(shared, 2.0), {"theta": theta})
    with pytest.raises(UsageError):
        tc.backward(tc.mul(shared, 3.0), {"theta": theta})


def test_backward_visits_diamond_once():
    # y = x*x + x*x shares x along two paths; gradient must be 4x exactly once.
    x = Tensor(1.5, requires_grad=True)
    sq = tc.mul(x, x)
    g = tc.backward(tc.add(sq, sq), {"x": x})
    assert float(g["x"]) == 6.0


# --- sgd_step and ParamSet algebra -----------------------------------------

def test_sgd_step_scalar():
    p = ParamSet({"t": np.array(1.0)})
    out = tc.sgd_step(p, ParamSet({"t": np.array(0.5)}), 0.1)
    assert float(out["t"]) == pytest.approx(0.95, abs=1e-15)
    assert float(p["t"]) == 1.0


def test_sgd_step_zero_lr_bit_exact(rng):
    p = ParamSet({"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(2)})
    g = ParamSet({"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(2)})
    assert tc.sgd_step(p, g, 0.0).bit_equal(p)


def test_sgd_two_steps_linear(rng):
    p = ParamSet({"a": rng.standard_normal(5)})
    g = ParamSet({"a": rng.standard_normal(5)})
    a, b = 0.03, 0.07
    two = tc.sgd_step(tc.sgd_step(p, g, a), g, b)
    np.testing.assert_allclose(two["a"], p["a"] - (a + b) * g["a"], rtol=0, atol=4 * np.finfo(float).eps * 4)


def test_sgd_incompatible():
    with pytest.raises(ShapeError):
        tc.sgd_step(ParamSet({"a": np.zeros(2)}), ParamSet({"a": np.zeros(3)}), 0.1)
    with pytest.raises(ShapeError):
        ParamSet({"a": np.zeros(2)}) + ParamSet({"b": np.zeros(2)})


def test_paramset_preserves_order_and_rejects_duplicates():
    p = ParamSet([("z", np.zeros(1)), ("a", np.zeros(2))])
    assert (p + p).names() == ["z", "a"]
    assert p.scale(2.0).names() == ["z", "a"]
    with pytest.raises(ShapeError):
        ParamSet([("a", np.zeros(1)), ("a", np.zeros(1))])


# --- grad_check -------------------------------------------------------------

@pytest.mark.parametrize("h", [1e-6, 1e-5, 1e-4])
def test_grad_check_quadratic_exact(h, rng):
    centre = rng.standard_normal(6)
    theta = ParamSet({"t": centre + rng.choice([-1, 1], 6) * rng.uniform(0.5, 2.0, 6)})

    def f(p):
        d = tc.add(p["t"], -centre)
        return tc.sum_all(tc.mul(d, d))

    report = tc.grad_check(f, theta, h=h, tol=1e-9)
    assert report.passed, report.summary()


def test_grad_check_detects_wrong_gradient():
    theta = ParamSet({"t": np.array([1.0, 2.0])})

    def f(p):
        out = tc.sum_all(tc.mul(p["t"], p["t"]))
        out._backward = lambda g: (np.zeros(()),)  # break the rule on purpose
        return out

    report = tc.grad_check(f, theta)
    assert not report.passed
    assert "t" in report.failures


def test_grad_check_excludes_relu_kink():
    theta = ParamSet({"x": np.array([0.0, 1.0, -1.0])})

    def f(p):
        return tc.sum_all(tc.relu(p["x"]))

    report = tc.grad_check(f, theta, exclude_kinks=True)
    assert report.excluded["x"] == 1 and report.checked["x"] == 2
    assert report.passed


# --- finite-difference suite over random shapes ----------------------------

N_RANDOM = 20


def _check(fn, params, tol=1e-5):
    report = tc.grad_check(fn, params, h=1e-5, tol=tol, exclude_kinks=True)
    assert report.passed, report.summary()
    return report


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_conv2d(seed):
    rng = np.random.default_rng(100 + seed)
    c, f, k = (int(v) for v in rng.integers(1, 4, size=3))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    h, w = (int(v) for v in rng.integers(max(k - 2 * padding, 1), 7, size=2))
    p = ParamSet({"x": rng.standard_normal((2, c, h, w)), "w": rng.standard_normal((f, c, k, k)),
                  "b": rng.standard_normal(f)})
    ho, wo = (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1
    r = rng.standard_normal((2, f, ho, wo))
    _check(lambda q: _scalarize(tc.conv2d(q["x"], q["w"], q["b"], stride, padding), r), p)


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_relu(seed):
    rng = np.random.default_rng(200 + seed)
    shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    p = ParamSet({"x": rng.standard_normal(shape)})
    r = rng.standard_normal(shape)
    _check(lambda q: _scalarize(tc.relu(q["x"]), r), p)


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_maxpool(seed):
    rng = np.random.default_rng(300 + seed)
    k, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(k, 8, size=2))
    p = ParamSet({"x": rng.standard_normal((2, 2, h, w))})
    r = rng.standard_normal((2, 2, (h - k) // stride + 1, (w - k) // stride + 1))
    _check(lambda q: _scalarize(tc.maxpool2d(q["x"], k, stride), r), p)


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_linear(seed):
    rng = np.random.default_rng(400 + seed)
    n, d, k = (int(v) for v in rng.integers(1, 6, size=3))
    p = ParamSet({"x": rng.standard_normal((n, d)), "w": rng.standard_normal((d, k)), "b": rng.standard_normal(k)})
    r = rng.standard_normal((n, k))
    _check(lambda q: _scalarize(tc.linear(q["x"], q["w"], q["b"]), r), p)


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_flatten_concat(seed):
    rng = np.random.default_rng(500 + seed)
    n = int(rng.integers(1, 4))
    shapes = [(n, *(int(v) for v in rng.integers(1, 4, size=int(rng.integers(0, 3))))) for _ in range(3)]
    p = ParamSet({f"p{i}": rng.standard_normal(s) for i, s in enumerate(shapes)})
    width = sum(int(np.prod(s[1:])) for s in shapes)
    r = rng.standard_normal((n, width))
    _check(lambda q: _scalarize(tc.flatten_concat([q["p0"], q["p1"], q["p2"]]), r), p)


@pytest.mark.parametrize("seed", range(N_RANDOM))
def test_fd_softmax_cross_entropy(seed):
    rng = np.random.default_rng(600 + seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    p = ParamSet({"z": rng.standard_normal((n, k)) * 2})
    labels = rng.integers(0, k, n)
    _check(lambda q: tc.softmax_cross_entropy(q["z"], labels), p)


def test_determinism_bitwise(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))

    def run():
        p = ParamSet({"x": x, "w": w, "b": np.zeros(3)})
        leaves = p.leaves()
        out = tc.maxpool2d(tc.relu(tc.conv2d(leaves["x"], leaves["w"], leaves["b"], 1, 1)), 2, 2)
        loss = tc.sum_all(tc.mul(out, out))
        return float(loss.data), tc.backward(loss, leaves)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and g1.bit_equal(g2)
