import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maanet.autodiff import Graph, SgdState, Tensor, backward, grad_check, no_grad, precision, sgd_step
from maanet.autodiff import functional as F
from maanet.errors import ContractError, NumericError, OracleError, ShapeError


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True, dtype=dtype)


# -- forward examples ----------------------------------------------------------

def test_sigmoid_at_zero_is_half():
    assert F.sigmoid(Tensor([0.0])).item() == 0.5


def test_all_ones_mask_multiply_is_identity():
    f = Tensor(np.random.default_rng(0).normal(size=(1, 8, 4, 4)))
    out = F.mul(Tensor(np.ones((1, 1, 4, 4))), f)
    assert np.array_equal(out.data, f.data)


def test_conv_center_of_ones_window_is_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with precision(np.float64):
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size,k,stride,pad,expected", [(14, 3, 2, 1, 7), (7, 3, 2, 1, 4), (4, 1, 2, 0, 2), (5, 3, 1, 1, 5)])
def test_conv_output_size_floor_rule(size, k, stride, pad, expected):
    assert F.conv_output_size(size, k, stride, pad) == expected


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError) as info:
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    msg = str(info.value)
    assert "add" in msg and "[2, 3]" in msg and "[4]" in msg


def test_conv_weight_rank_checked():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 3, 3))))


def test_non_finite_output_is_numeric_error():
    with pytest.raises(NumericError):
        F.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        F.exp(Tensor([1000.0]))


def test_apply_dispatches_by_name():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(F.apply("multiply", a, b).data, [3.0, 8.0])
    assert F.apply("conv2d", Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).shape == (1, 1, 3, 3)
    with pytest.raises(ContractError):
        F.apply("nope", a)


def test_rank_above_four_rejected():
    with pytest.raises(ContractError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_training_dtype_is_float32():
    assert Tensor(np.arange(3.0)).dtype == np.float32
    with precision(np.float64):
        assert Tensor(np.arange(3.0)).dtype == np.float64
    assert Tensor(np.arange(3.0)).dtype == np.float32


# -- backward examples ---------------------------------------------------------

def test_sum_gradient_is_ones():
    x = leaf([1.0, -2.0, 5.0])
    backward(F.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_sigmoid_gradient_at_zero():
    x = leaf([0.0])
    backward(F.sigmoid(x))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-12)


def test_leaf_used_twice_accumulates():
    x = leaf([2.0, 3.0])
    y = F.add(F.mul(x, x), F.mul(x, 3.0))  # x feeds three consumers
    backward(F.sum(y))
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_shared_intermediate_sums_branch_gradients():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))

    def f(a):
        h = F.sigmoid(a)                      # h feeds two branches
        return F.sum(F.add(F.mul(h, w), F.mul(h, h)))

    with precision(np.float64):
        rep = grad_check(f, [x], step=1e-5, tolerance=1e-7)
    assert rep.passed, rep.max_rel_error


def test_backward_rejects_non_scalar_and_off_tape():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(F.mul(x, 2.0))
    with pytest.raises(ContractError):
        backward(Tensor([1.0]))


def test_graph_is_topological_and_visits_each_op_once():
    x = leaf(np.ones((2, 2)))
    h = F.relu(F.mul(x, 2.0))
    loss = F.sum(F.add(h, F.sigmoid(h)))
    g = Graph.trace(loss)
    pos = {id(node.output): i for i, node in enumerate(g.ops)}
    for i, node in enumerate(g.ops):
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[id(inp)] < i
    assert len({id(n) for n in g.ops}) == len(g.ops) == 5
    assert g.kinds()[-1] == "sum"


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = F.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_two_runs_bitwise_identical():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        loss = F.mean(F.sigmoid(F.conv2d(x, w, padding=1)))
        backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_two_layer_conv_net_passes_check_in_64_bit():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w1 = leaf(rng.normal(scale=0.5, size=(3, 2, 3, 3)))
        b1 = leaf(rng.normal(size=3))
        w2 = leaf(rng.normal(scale=0.5, size=(2, 3, 3, 3)))
        b2 = leaf(rng.normal(size=2))

        def f(w1_, b1_, w2_, b2_):
            h = F.relu(F.conv2d(x, w1_, b1_, stride=1, padding=1))
            return F.mean(F.sigmoid(F.conv2d(h, w2_, b2_, stride=2, padding=1)))

        rep = grad_check(f, [w1, b1, w2, b2], step=1e-3, tolerance=1e-3)
    assert rep.passed, rep.per_input


# -- grad_check ------------------------------------------------------------------

def test_grad_check_square():
    x = leaf([3.0])
    rep = grad_check(lambda a: F.mul(a, a), [x], step=1e-3)
    assert x.grad[0] == 0.0  # the checker leaves gradients cleared
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_constant_closure():
    x = leaf([1.0, 2.0])
    rep = grad_check(lambda a: F.add(F.mul(F.sum(a), 0.0), 4.0), [x])
    assert rep.max_rel_error == 0.0


def test_grad_check_flags_wrong_gradient():
    # a bogus op whose backward is off by a factor of two
    from maanet.autodiff.tensor import make_output

    def bad_square(a):
        return make_output("bad", a.data ** 2, (a,), lambda g: (g * a.data,))

    rep = grad_check(lambda a: F.sum(bad_square(a)), [leaf([1.0, 2.0])])
    assert not rep.passed


def test_grad_check_non_deterministic_closure():
    rng = np.random.default_rng(0)
    x = leaf([1.0])
    with pytest.raises(OracleError):
        grad_check(lambda a: F.mul(a, float(rng.normal())), [x])


def test_grad_check_step_must_be_positive():
    with pytest.raises(ContractError):
        grad_check(lambda a: F.sum(a), [leaf([1.0])], step=0.0)


def test_grad_check_sampling_limits_probes():
    x = leaf(np.random.default_rng(1).normal(size=(10, 10)))
    rep = grad_check(lambda a: F.sum(F.mul(a, a)), [x], max_elements=7)
    assert rep.checked == 7 and rep.passed


# -- SGD ---------------------------------------------------------------------------

def _step_with_grad(p, g, state):
    p.grad[...] = g
    p._touched = True
    sgd_step([p], state)


def test_sgd_vanilla_step():
    p = leaf([1.0])
    _step_with_grad(p, 2.0, SgdState(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.8, abs=1e-12)
    assert p.grad[0] == 0.0


def test_sgd_momentum_two_steps():
    p = leaf([1.0])
    s = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    _step_with_grad(p, 2.0, s)
    _step_with_grad(p, 2.0, s)
    assert s.velocity[0][0] == pytest.approx(3.8, abs=1e-12)
    assert p.data[0] == pytest.approx(0.42, abs=1e-12)


def test_sgd_pure_weight_decay():
    p = leaf([1.0])
    _step_with_grad(p, 0.0, SgdState(learning_rate=0.01, momentum=0.0, weight_decay=1e-4))
    assert p.data[0] == pytest.approx(0.999999, abs=1e-12)


def test_sgd_missing_gradient():
    with pytest.raises(ContractError):
        sgd_step([leaf([1.0])], SgdState())


def test_sgd_state_validation():
    with pytest.raises(ContractError):
        SgdState(learning_rate=0.0)
    with pytest.raises(ContractError):
        SgdState(momentum=1.0)
    with pytest.raises(ContractError):
        SgdState(weight_decay=-1.0)


# -- properties ----------------------------------------------------------------------

small_arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4),
                          elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_ones_mask_passes_gradient_unchanged(x):
    with precision(np.float64):
        t = leaf(x)
        ones = Tensor(np.ones_like(x))
        backward(F.sum(F.mul(F.mul(t, ones), 2.0)))
    assert np.array_equal(t.grad, np.full_like(x, 2.0))


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_grad_shape_matches_data(x):
    with precision(np.float64):
        t = leaf(x)
        backward(F.mean(F.sigmoid(t)))
    assert t.grad.shape == t.data.shape
    assert np.isfinite(t.grad).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 7), st.sampled_from([1, 3]), st.sampled_from([1, 2]))
def test_conv_output_dims(n, c, size, k, stride):
    pad = (k - 1) // 2
    x = Tensor(np.ones((n, c, size, size)))
    out = F.conv2d(x, Tensor(np.ones((2, c, k, k))), stride=stride, padding=pad)
    expected = (size + 2 * pad - k) // stride + 1
    assert out.shape == (n, 2, expected, expected)
    if stride == 1:
        assert expected == size
