"""Tensor engine: forward values, gradient rules, and the FD oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccl_lab.errors import (
    ContractError,
    DimensionError,
    DomainError,
    EmptyTapeError,
)
from ccl_lab.tensor import (
    EPSILON,
    Tensor,
    apply,
    backward,
    finite_difference_check,
    onehot,
)


def test_softmax_rows_symmetry():
    out = apply("softmax_rows", [Tensor([0.0, 0.0])])
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = apply("matmul", [eye, m])
    np.testing.assert_allclose(out.data, m.data)


def test_relu_definition():
    out = apply("relu", [Tensor([-1.0, 2.0])])
    np.testing.assert_allclose(out.data, [0.0, 2.0])


def test_sum_gradient_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = x.sum()
    backward(loss)
    np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0])


def test_mean_gradient_is_uniform():
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    backward(x.mean())
    np.testing.assert_allclose(x.grad, [0.25] * 4)


def test_softmax_ce_gradient_at_uniform_logits():
    # two classes, uniform logits, target class 0: gradient is p - y
    logits = Tensor([[0.0, 0.0]], requires_grad=True)
    logp = apply("log_softmax_rows", [logits])
    target = Tensor(onehot(np.array([0]), 2))
    loss = apply("scalar_mul", [(logp * target).sum()], {"value": -1.0})
    backward(loss)
    np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-12)


def test_fd_check_sum_of_squares():
    err = finite_difference_check(lambda t: (t * t).sum(), Tensor([1.0, 2.0, 3.0]), eps=1e-5)
    assert err < 1e-6


def test_fd_check_constant_fn():
    err = finite_difference_check(lambda t: Tensor(7.0), Tensor([1.0, 2.0]), eps=1e-5)
    assert err == 0.0


def test_fd_check_softmax_ce():
    rng = np.random.default_rng(3)
    point = Tensor(rng.normal(size=(1, 4)))
    target = Tensor(onehot(np.array([2]), 4))

    def fn(t):
        logp = apply("log_softmax_rows", [t])
        return apply("scalar_mul", [(logp * target).sum()], {"value": -1.0})

    assert finite_difference_check(fn, point, eps=1e-5) < 1e-5


def test_fd_eps_out_of_range():
    with pytest.raises(ContractError):
        finite_difference_check(lambda t: t.sum(), Tensor([1.0]), eps=1e-2)
    with pytest.raises(ContractError):
        finite_difference_check(lambda t: t.sum(), Tensor([1.0]), eps=1e-8)


# ---------------------------------------------------------------------------
# Per-op finite-difference sweep: every differentiable op, 100 random trials.
# ---------------------------------------------------------------------------

def _rand(rng, shape, positive=False, kink=None):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    if kink is not None:
        # keep every coordinate a safe margin from the non-smooth point
        d = x - kink
        d = np.where(np.abs(d) < 1e-3, np.where(d < 0, -1e-3, 1e-3), d)
        x = kink + d
    return x


def _op_cases(rng):
    # Every random constant is drawn once, outside the closures, so each fn
    # is a fixed deterministic map suitable for finite differencing.
    n, c = 3, 4
    w = Tensor(rng.normal(size=(c, 2)))
    other = Tensor(rng.normal(size=(n, c)))
    col = Tensor(rng.normal(size=(n, 1)))
    vec = Tensor(rng.normal(size=(c,)))
    coeff_mat = Tensor(rng.normal(size=(n, 2)))
    coeff_t = Tensor(rng.normal(size=(n, 1)))
    coeff_cat = Tensor(rng.normal(size=(2 * n, c)))
    coeff_sel = Tensor(rng.normal(size=(5, c)))
    idx = rng.integers(0, n, size=5)
    # case = (name, positive_input, kink_to_avoid, scalarizing fn)
    return [
        ("add", False, None, lambda t: (apply("add", [t, other]) * other).sum()),
        ("add_col", False, None, lambda t: (apply("add", [t, col]) * other).sum()),
        ("add_vec", False, None, lambda t: (apply("add", [t, vec]) * other).sum()),
        ("sub", False, None, lambda t: (apply("sub", [other, t]) * other).sum()),
        ("mul", False, None, lambda t: (apply("mul", [t, other]) * other).sum()),
        ("mul_col", False, None, lambda t: (apply("mul", [t, col]) * other).sum()),
        ("scalar_mul", False, None,
         lambda t: apply("scalar_mul", [t], {"value": -2.5}).sum()),
        ("matmul", False, None, lambda t: ((t @ w) * coeff_mat).sum()),
        ("relu", False, 0.0, lambda t: (apply("relu", [t]) * other).sum()),
        ("exp", False, None, lambda t: (apply("exp", [t]) * other).sum()),
        ("log", True, None, lambda t: (apply("log", [t]) * other).sum()),
        ("softmax_rows", False, None,
         lambda t: (apply("softmax_rows", [t]) * other).sum()),
        ("log_softmax_rows", False, None,
         lambda t: (apply("log_softmax_rows", [t]) * other).sum()),
        ("l2_normalize_rows", True, None,
         lambda t: (apply("l2_normalize_rows", [t]) * other).sum()),
        ("sum_axis", False, None,
         lambda t: (apply("sum", [t], {"axis": 0}) * vec).sum()),
        ("mean_axis", False, None,
         lambda t: (apply("mean", [t], {"axis": 1, "keepdims": True}) * col).sum()),
        ("transpose", False, None, lambda t: (t.T @ coeff_t).sum()),
        ("concat_rows", False, None,
         lambda t: (apply("concat_rows", [t, other]) * coeff_cat).sum()),
        ("select_rows", False, None,
         lambda t: (apply("select_rows", [t], {"indices": idx}) * coeff_sel).sum()),
        ("clamp_min", False, 0.3,
         lambda t: (apply("clamp_min", [t], {"min": 0.3}) * other).sum()),
    ]


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, positive, kink, fn in _op_cases(rng):
        point = Tensor(_rand(rng, (3, 4), positive=positive, kink=kink))
        err = finite_difference_check(fn, point, eps=1e-5)
        assert err <= 1e-4, f"{name} (seed {seed}): fd relative error {err:.3e}"


@given(st.lists(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
                min_size=1, max_size=5).filter(
                    lambda rows: len({len(r) for r in rows}) == 1))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_simplex_property(rows):
    out = apply("softmax_rows", [Tensor(np.array(rows))])
    assert np.all(out.data > 0.0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)


@given(st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=6),
                min_size=1, max_size=5).filter(
                    lambda rows: len({len(r) for r in rows}) == 1
                    and all(any(abs(v) > 1e-3 for v in r) for r in rows)))
@settings(max_examples=60, deadline=None)
def test_l2_normalize_rows_unit_norm_property(rows):
    out = apply("l2_normalize_rows", [Tensor(np.array(rows))])
    norms = np.linalg.norm(out.data, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = apply("relu", [x @ w])
        p = apply("softmax_rows", [h])
        loss = (p * Tensor(rng.normal(size=(4, 3)))).sum()
        backward(loss)
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_backward_twice_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = x.sum()
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_nonscalar_is_an_error():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_empty_tape_is_an_error():
    with pytest.raises(EmptyTapeError):
        backward(Tensor(3.0, requires_grad=True))


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 1.0], requires_grad=True)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient():
    # loss = sum(x*x) -> grad 2x even though x feeds one op twice
    x = Tensor([1.0, -3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, -6.0])


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        apply("add", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])
    with pytest.raises(DimensionError):
        apply("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])


def test_log_of_nonpositive_raises():
    with pytest.raises(DomainError):
        apply("log", [Tensor([1.0, 0.0])])
    # the sanctioned pattern: clamp then log
    out = apply("log", [Tensor([1.0, 0.0]).clamp_min(EPSILON)])
    assert np.isfinite(out.data).all()


def test_zero_norm_row_raises():
    with pytest.raises(DomainError):
        apply("l2_normalize_rows", [Tensor([[0.0, 0.0], [1.0, 0.0]])])


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_nonfinite_forward_raises():
    with pytest.raises(DomainError):
        apply("exp", [Tensor([1000.0])])


def test_unknown_op_kind_raises():
    with pytest.raises(ContractError):
        apply("conv2d", [Tensor([1.0])])


def test_select_rows_out_of_range_raises():
    with pytest.raises(DimensionError):
        apply("select_rows", [Tensor(np.ones((2, 2)))], {"indices": [2]})


def test_detach_blocks_gradient_flow():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * 3.0).detach()
    assert y._node is None and not y.requires_grad
    z = Tensor([1.0, 1.0], requires_grad=True)
    backward((y * z).sum())
    assert x.grad is None
    np.testing.assert_allclose(z.grad, [3.0, 6.0])


def test_grad_only_on_requires_grad_leaves():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 5.0])  # constant leaf
    backward((x * c).sum())
    assert c.grad is None
    np.testing.assert_allclose(x.grad, [5.0, 5.0])
