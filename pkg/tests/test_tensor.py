"""Tensor engine tests: forward oracles, backward rules, tape contract."""

import numpy as np
import pytest

from paratime import tensor as T
from paratime.errors import ContractError, ShapeError
from paratime.gradcheck import grad_check


def _t64(data, requires_grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def _rand(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul_loop_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity():
    a = _t64([[1.0, 0.0], [0.0, 1.0]])
    b = _t64([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_hand_computed():
    out = T.matmul(_t64([[1.0, 2.0]]), _t64([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    got = T.matmul(_t64(a), _t64(b)).data
    want = matmul_loop_oracle(a, b)
    assert np.max(np.abs(got - want)) < 1e-6


def test_matmul_random_shapes_vs_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m, k, n = rng.integers(1, 17, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        got = T.matmul(_t64(a), _t64(b)).data
        want = matmul_loop_oracle(a, b)
        denom = np.maximum(np.abs(want), 1.0)
        assert np.max(np.abs(got - want) / denom) < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(_t64(np.zeros((2, 3))), _t64(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_matmul_batch_broadcast_backward():
    rng = np.random.default_rng(1)
    a = _rand(rng, 3, 2, 4)
    b = _rand(rng, 4, 5)  # broadcast over the batch axis
    with T.Tape() as tape:
        loss = T.tsum(T.matmul(a, b))
    tape.backward(loss)
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def test_sigmoid_at_zero():
    assert T.sigmoid(_t64([0.0])).data[0] == pytest.approx(0.5)


def test_silu_at_zero():
    assert T.silu(_t64([0.0])).data[0] == 0.0


def test_relu_negative():
    assert T.relu(_t64([-2.5])).data[0] == 0.0


def test_broadcast_error():
    with pytest.raises(ShapeError):
        T.add(_t64(np.zeros(3)), _t64(np.zeros(4)))


def test_scalar_operators_keep_dtype():
    x = T.Tensor(np.ones(4, dtype=np.float32))
    assert (x * 0.5).dtype == np.float32
    assert (1.0 + x).dtype == np.float32


# ---------------------------------------------------------------------------
# layer_norm / rms_norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    x = _t64([5.0, 5.0, 5.0, 5.0])
    out = T.layer_norm(x, _t64(np.ones(4)), _t64(np.zeros(4)), eps=1e-5)
    assert np.max(np.abs(out.data)) < 1e-8


def test_layer_norm_already_normalized():
    out = T.layer_norm(_t64([1.0, -1.0]), _t64(np.ones(2)), _t64(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-5)


def test_layer_norm_moment_oracle():
    rng = np.random.default_rng(3)
    x = _t64(rng.standard_normal(64) * 3.0 + 1.5)
    out = T.layer_norm(x, _t64(np.ones(64)), _t64(np.zeros(64)), eps=1e-10).data
    assert abs(out.mean()) < 1e-5
    assert abs(out.var() - 1.0) < 1e-5


def test_rms_norm_constant():
    out = T.rms_norm(_t64([2.0, 2.0, 2.0, 2.0]), _t64(np.ones(4)), eps=1e-8)
    assert np.allclose(out.data, 1.0, atol=1e-4)


def test_rms_norm_zeros():
    out = T.rms_norm(_t64(np.zeros(5)), _t64(np.ones(5)))
    assert np.array_equal(out.data, np.zeros(5))


def test_rms_norm_formula_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(16)
    g = rng.standard_normal(16)
    eps = 1e-6
    want = x / np.sqrt((x * x).mean() + eps) * g
    got = T.rms_norm(_t64(x), _t64(g), eps=eps).data
    assert np.max(np.abs(got - want)) < 1e-6


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def conv_sliding_oracle(x, k, pl, pr):
    # x [c_in, L], k [c_out, c_in, kw]
    xp = np.pad(x, [(0, 0), (pl, pr)])
    c_out, c_in, kw = k.shape
    l_out = xp.shape[-1] - kw + 1
    out = np.zeros((c_out, l_out), dtype=x.dtype)
    for o in range(c_out):
        for t in range(l_out):
            out[o, t] = np.sum(xp[:, t : t + kw] * k[o])
    return out


def test_conv1d_identity_kernel():
    x = _t64([[1.0, 2.0, 3.0, 4.0]])
    k = _t64([[[1.0]]])
    out = T.conv1d(x, k, padding="valid")
    assert np.array_equal(out.data, x.data)


def test_conv1d_causal_hand_computed():
    x = _t64([[1.0, 2.0, 3.0]])
    k = _t64([[[1.0, 1.0]]])
    out = T.conv1d(x, k, padding="causal")
    assert out.data.tolist() == [[1.0, 3.0, 5.0]]


@pytest.mark.parametrize("padding,pads", [("valid", (0, 0)), ("causal", (2, 0)), ("same", (1, 1))])
def test_conv1d_matches_sliding_oracle(padding, pads):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 11))
    k = rng.standard_normal((4, 3, 3))
    got = T.conv1d(_t64(x), _t64(k), padding=padding).data
    want = conv_sliding_oracle(x, k, *pads)
    assert np.max(np.abs(got - want)) < 1e-6


def test_conv1d_kernel_too_long():
    with pytest.raises(ShapeError):
        T.conv1d(_t64(np.zeros((1, 2))), _t64(np.zeros((1, 1, 5))), padding="valid")


def test_depthwise_conv1d_matches_grouped_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 9))
    k = rng.standard_normal((4, 2))
    got = T.depthwise_conv1d(_t64(x), _t64(k), padding="causal").data
    xp = np.pad(x, [(0, 0), (1, 0)])
    want = np.stack([np.convolve(xp[c], k[c, ::-1], mode="valid") for c in range(4)])
    assert np.max(np.abs(got - want)) < 1e-10


# ---------------------------------------------------------------------------
# backward / tape contract
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = _t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = _t64([1.0, -2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2.0 * x.data)


def test_backward_requires_scalar_loss():
    x = _t64([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_twice_is_contract_error():
    x = _t64([1.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_tape_nodes_in_topological_order():
    x = _t64([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        a = T.mul(x, x)
        b = T.add(a, x)
        T.tsum(b)
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp is x or id(inp) in produced
        produced.add(id(node.out))


def test_no_recording_outside_tape():
    x = _t64([1.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(8)
    w = _t64(rng.standard_normal((4, 3)))
    b = _t64(rng.standard_normal(3))

    def f(x):
        h = T.silu(T.add(T.matmul(x, w), b))
        return T.tsum(T.sigmoid(h))

    x0 = _t64(rng.standard_normal((2, 4)))
    report = grad_check(f, x0, step=1e-5, tol=1e-4)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# grad_check behaviour
# ---------------------------------------------------------------------------


def test_grad_check_sigmoid_of_sum():
    x = _t64(np.linspace(-1.0, 1.0, 5))
    report = grad_check(lambda t: T.sigmoid(T.tsum(t)), x, tol=1e-6)
    assert report.passed, str(report)


def test_grad_check_relu_at_kink_is_excluded_not_failed():
    x = _t64([0.0, 1.0, -1.0])
    report = grad_check(lambda t: T.tsum(T.relu(t)), x, tol=1e-4)
    assert report.excluded == [0]
    assert report.passed, str(report)


def test_grad_check_rejects_float32():
    x = T.Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ContractError):
        grad_check(lambda t: T.tsum(t), x)


# ---------------------------------------------------------------------------
# per-op finite-difference property suite
# ---------------------------------------------------------------------------


def _fd_cases():
    rng = np.random.default_rng(42)
    g4 = _t64(rng.standard_normal(4))
    b4 = _t64(rng.standard_normal(4))
    w_conv = _t64(rng.standard_normal((3, 2, 3)))
    b3 = _t64(rng.standard_normal(3))
    w_dw = _t64(rng.standard_normal((4, 2)))
    other = _t64(rng.standard_normal((2, 4)))
    cases = {
        "add": ((2, 4), lambda x: T.tsum(T.sigmoid(T.add(x, other)))),
        "sub": ((2, 4), lambda x: T.tsum(T.sigmoid(T.sub(other, x)))),
        "mul": ((2, 4), lambda x: T.tsum(T.sigmoid(T.mul(x, other)))),
        "div": ((2, 4), lambda x: T.tsum(T.sigmoid(T.div(other, T.add(T.mul(x, x), T.Tensor(np.ones((2, 4)))))))),
        "neg": ((2, 4), lambda x: T.tsum(T.exp(T.neg(x)))),
        "exp": ((2, 4), lambda x: T.tsum(T.sigmoid(T.exp(x)))),
        "abs": ((5,), lambda x: T.tsum(T.mul(T.absolute(x), T.absolute(x)))),
        "sigmoid": ((2, 4), lambda x: T.tsum(T.mul(T.sigmoid(x), T.sigmoid(x)))),
        "relu": ((6,), lambda x: T.tsum(T.mul(T.relu(x), T.relu(x)))),
        "silu": ((2, 4), lambda x: T.tsum(T.mul(T.silu(x), T.silu(x)))),
        "softplus": ((2, 4), lambda x: T.tsum(T.sigmoid(T.softplus(x)))),
        "where": ((6,), lambda x: T.tsum(T.where(np.arange(6) % 2 == 0, T.mul(x, x), T.neg(x)))),
        "matmul": ((3, 4), lambda x: T.tsum(T.sigmoid(T.matmul(x, _t64(rng.standard_normal((4, 2))))))),
        "conv1d": ((2, 7), lambda x: T.tsum(T.sigmoid(T.conv1d(x, w_conv, padding="causal", bias=b3)))),
        "depthwise": ((4, 7), lambda x: T.tsum(T.sigmoid(T.depthwise_conv1d(x, w_dw, padding="causal")))),
        "layer_norm": ((2, 4), lambda x: T.tsum(T.sigmoid(T.layer_norm(x, g4, b4)))),
        "rms_norm": ((2, 4), lambda x: T.tsum(T.sigmoid(T.rms_norm(x, g4)))),
        "softmax": ((2, 4), lambda x: T.tsum(T.mul(T.softmax(x), _t64(rng.standard_normal((2, 4)))))),
        "sum_axis": ((3, 4), lambda x: T.tsum(T.sigmoid(T.tsum(x, axis=0)))),
        "mean_axis": ((3, 4), lambda x: T.tsum(T.sigmoid(T.tmean(x, axis=1, keepdims=True)))),
        "reshape": ((2, 6), lambda x: T.tsum(T.sigmoid(T.reshape(x, (3, 4))))),
        "swap_axes": ((2, 3, 4), lambda x: T.tsum(T.sigmoid(T.swap_axes(x, 0, 2)))),
        "concat": ((2, 3), lambda x: T.tsum(T.sigmoid(T.concat([x, T.mul(x, x)], axis=1)))),
        "narrow": ((2, 6), lambda x: T.tsum(T.sigmoid(T.narrow(x, 1, 2, 3)))),
        "unfold": ((5, 3), lambda x: T.tsum(T.sigmoid(T.unfold_causal(x, 2)))),
        "pad_edge": ((2, 5), lambda x: T.tsum(T.sigmoid(T.pad_left(x, 3, mode="edge")))),
        "pad_zero": ((2, 5), lambda x: T.tsum(T.sigmoid(T.pad_left(x, 3, mode="zero")))),
    }
    return [(name, shape, f) for name, (shape, f) in cases.items()]


@pytest.mark.parametrize("name,shape,f", _fd_cases(), ids=[c[0] for c in _fd_cases()])
def test_op_gradient_matches_finite_differences(name, shape, f):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x = _t64(rng.standard_normal(shape) * 0.7)
    report = grad_check(f, x, step=1e-5, tol=1e-4)
    assert report.passed, f"{name}: {report}"


def test_ssm_scan_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    t_len, c, s = 4, 3, 2
    bx = _t64(rng.standard_normal((t_len, c, s)))
    cs = _t64(rng.standard_normal((t_len, s)))
    u = _t64(rng.standard_normal((t_len, c)))
    d = _t64(rng.standard_normal(c))

    for target in ["abar", "bx", "c", "u", "d"]:
        abar = _t64(rng.uniform(0.1, 0.9, size=(t_len, c, s)))
        pool = {"abar": abar, "bx": bx, "c": cs, "u": u, "d": d}

        def f(x, _pool=pool):
            return T.tsum(T.sigmoid(T.ssm_scan(_pool["abar"], _pool["bx"], _pool["c"], _pool["u"], _pool["d"])))

        report = grad_check(f, pool[target], step=1e-6, tol=1e-4)
        assert report.passed, f"ssm_scan wrt {target}: {report}"


def test_dropout_scales_and_masks():
    rng = np.random.default_rng(12)
    x = T.Tensor(np.ones((1000,), dtype=np.float64), requires_grad=True)
    with T.Tape() as tape:
        y = T.dropout(x, 0.25, np.random.default_rng(0))
        loss = T.tsum(y)
    tape.backward(loss)
    vals = np.unique(y.data)
    assert set(vals.tolist()) <= {0.0, 1.0 / 0.75}
    assert np.array_equal((x.grad > 0), (y.data > 0))
