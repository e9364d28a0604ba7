import numpy as np
import pytest

from foldnet.autodiff import (
    KERNELS,
    add,
    affine,
    backward,
    concat,
    constant,
    depthwise_conv1d,
    embedding,
    exp,
    finite_diff_check,
    forward_op,
    gelu,
    grad_of,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    masked_fill,
    matmul,
    mul,
    multihead_mix,
    multihead_scores,
    narrow,
    parameter,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    stop_gradient,
    sub,
    swish,
    transpose,
)


def test_softmax_symmetry():
    out = softmax(constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    out = matmul(constant(np.eye(3)), constant(a))
    np.testing.assert_array_equal(out.data, a)


def test_layer_norm_reference_values():
    # Direct evaluation of (x - mean) / sqrt(population variance + 1e-5).
    x = np.array([1.0, 2.0, 3.0])
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    out = layer_norm(constant(x), constant(np.ones(3)), constant(np.zeros(3)))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_square_gradient():
    x = parameter(3.0)
    grads = backward(mul(x, x))
    assert grads[x] == pytest.approx(6.0)


def test_gradient_accumulates_over_uses(rng):
    x = parameter(rng.normal(size=4))
    # x enters the tape twice as distinct inputs of the same node.
    y = reduce_sum(mul(x, x))
    grads = backward(y)
    np.testing.assert_allclose(grads[x], 2 * x.data, rtol=1e-12)


def test_gradient_accumulation_matches_cloned_parameters(rng):
    # A parameter used t times accumulates the sum of per-use adjoints;
    # compare against a construction with one clone per use.
    w = rng.normal(size=(3, 3))
    x = rng.normal(size=(2, 3))
    probe = rng.normal(size=(2, 3))

    shared = parameter(w)
    h = matmul(constant(x), shared)
    h = matmul(h, shared)
    h = matmul(h, shared)
    g_shared = backward(reduce_sum(mul(h, constant(probe))))[shared]

    clones = [parameter(w) for _ in range(3)]
    h = constant(x)
    for c in clones:
        h = matmul(h, c)
    grads = backward(reduce_sum(mul(h, constant(probe))))
    g_sum = sum(grads[c] for c in clones)
    np.testing.assert_allclose(g_shared, g_sum, rtol=1e-12)


def test_stop_gradient_blocks_kl_teacher(rng):
    # KL(SG(p), q): gradient w.r.t. the logits producing p is exactly zero.
    t_logits = parameter(rng.normal(size=5))
    s_logits = parameter(rng.normal(size=5))
    p_log = stop_gradient(log_softmax(t_logits))
    q_log = log_softmax(s_logits)
    kl = reduce_sum(mul(exp(p_log), sub(p_log, q_log)))
    grads = backward(kl)
    np.testing.assert_array_equal(grad_of(grads, t_logits), np.zeros(5))
    assert np.abs(grads[s_logits]).max() > 0


def test_stop_gradient_barrier_equivalent_to_constant(rng):
    # Replacing the subgraph behind SG with a constant of the same value
    # leaves every returned gradient unchanged.
    x = parameter(rng.normal(size=4))
    z = parameter(rng.normal(size=4))

    def build(detached):
        inner = detached if detached is not None else stop_gradient(mul(z, z))
        return reduce_sum(add(mul(x, x), mul(inner, x)))

    g1 = backward(build(None))
    g2 = backward(build(constant(z.data * z.data)))
    np.testing.assert_array_equal(g1[x], g2[x])
    np.testing.assert_array_equal(grad_of(g1, z), np.zeros(4))


def test_backward_requires_scalar_root(rng):
    x = parameter(rng.normal(size=3))
    with pytest.raises(ValueError, match="scalar"):
        backward(mul(x, x))


def test_shape_errors_name_op_and_shapes():
    a = constant(np.zeros((2, 3)))
    b = constant(np.zeros((4, 2)))
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        matmul(a, b)
    with pytest.raises(ValueError, match="add"):
        add(a, constant(np.zeros((3, 2))))


def test_embedding_rejects_out_of_vocabulary():
    table = constant(np.zeros((4, 2)))
    with pytest.raises(IndexError, match="out of vocabulary"):
        embedding(table, [0, 4])


def test_forward_op_dispatch(rng):
    x = rng.normal(size=(2, 5))
    via_fn = softmax(constant(x))
    via_dispatch = forward_op("softmax", [constant(x)])
    np.testing.assert_array_equal(via_fn.data, via_dispatch.data)
    out = forward_op("logsumexp", [constant(x)], {"axis": 1})
    np.testing.assert_allclose(
        out.data, np.log(np.exp(x).sum(axis=1)), rtol=1e-12)
    with pytest.raises(ValueError, match="unknown op kind"):
        forward_op("fft", [constant(x)])


def test_forward_op_covers_kernel_registry():
    assert {"matmul", "softmax", "layer_norm", "depthwise_conv1d",
            "embedding", "stop_gradient", "masked_fill"} <= set(KERNELS)


def test_finite_diff_softmax_example(rng):
    # f = sum(softmax(x) * w) for fixed random w of length 8.
    w = constant(rng.normal(size=8))
    x = rng.normal(size=8)
    err = finite_diff_check(lambda p: reduce_sum(mul(softmax(p), w)), x, 1e-6)
    assert err < 1e-6


def test_finite_diff_rejects_bad_eps(rng):
    with pytest.raises(ValueError, match="eps"):
        finite_diff_check(lambda p: reduce_sum(p), rng.normal(size=3), 1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda p: log(p), np.array(-1.0), 1e-6)


def _linear_probe(shape, seed):
    return constant(np.random.default_rng(seed).normal(size=shape))


KERNEL_CASES = {
    "add": lambda p: reduce_sum(mul(add(p, scale(p, 0.5)), _linear_probe((3, 4), 0))),
    "add_bias": lambda p: reduce_sum(mul(add(_linear_probe((3, 4), 1), narrow(reshape(p, (12,)), 0, 0, 4)), _linear_probe((3, 4), 2))),
    "sub": lambda p: reduce_sum(mul(sub(p, scale(p, 0.3)), _linear_probe((3, 4), 3))),
    "mul": lambda p: reduce_sum(mul(mul(p, _linear_probe((3, 4), 4)), _linear_probe((3, 4), 5))),
    "matmul": lambda p: reduce_sum(mul(matmul(p, _linear_probe((4, 2), 6)), _linear_probe((3, 2), 7))),
    "affine": lambda p: reduce_sum(mul(affine(_linear_probe((5, 3), 8), narrow(p, 0, 0, 3), reshape(narrow(narrow(p, 0, 0, 1), 1, 0, 4), (4,))), _linear_probe((5, 4), 9))),
    "transpose": lambda p: reduce_sum(mul(transpose(p), _linear_probe((4, 3), 10))),
    "log": lambda p: reduce_sum(mul(log(add(mul(p, p), constant(np.full((3, 4), 0.5)))), _linear_probe((3, 4), 11))),
    "exp": lambda p: reduce_sum(mul(exp(p), _linear_probe((3, 4), 12))),
    "softmax": lambda p: reduce_sum(mul(softmax(p), _linear_probe((3, 4), 13))),
    "log_softmax": lambda p: reduce_sum(mul(log_softmax(p), _linear_probe((3, 4), 14))),
    "logsumexp": lambda p: reduce_sum(mul(logsumexp(p, 0), _linear_probe(4, 15))),
    "layer_norm": lambda p: reduce_sum(mul(layer_norm(p, _linear_probe(4, 16), _linear_probe(4, 17)), _linear_probe((3, 4), 18))),
    "gelu": lambda p: reduce_sum(mul(gelu(p), _linear_probe((3, 4), 19))),
    "swish": lambda p: reduce_sum(mul(swish(p), _linear_probe((3, 4), 20))),
    "depthwise_conv1d": lambda p: reduce_sum(mul(depthwise_conv1d(p, _linear_probe((3, 4), 21)), _linear_probe((3, 4), 22))),
    "multihead_scores": lambda p: reduce_sum(mul(multihead_scores(p, _linear_probe((5, 4), 23), 2), _linear_probe((2, 3, 5), 24))),
    "multihead_mix": lambda p: reduce_sum(mul(multihead_mix(softmax(multihead_scores(p, p, 2)), p, 2), _linear_probe((3, 4), 25))),
    "concat": lambda p: reduce_sum(mul(concat([p, scale(p, 2.0)], axis=1), _linear_probe((3, 8), 26))),
    "narrow": lambda p: reduce_sum(mul(narrow(p, 1, 1, 2), _linear_probe((3, 2), 27))),
    "reshape": lambda p: reduce_sum(mul(reshape(p, (4, 3)), _linear_probe((4, 3), 28))),
    "masked_fill": lambda p: reduce_sum(mul(masked_fill(p, np.eye(3, 4, dtype=bool), 0.25), _linear_probe((3, 4), 29))),
    "reduce_mean": lambda p: reduce_mean(mul(p, _linear_probe((3, 4), 30))),
    "embedding_like": lambda p: reduce_sum(mul(embedding(p, [0, 2, 2, 1]), _linear_probe((4, 4), 31))),
}


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_all_kernels_pass_finite_differences(name, rng):
    f = KERNEL_CASES[name]
    theta = rng.normal(size=(3, 4))
    assert finite_diff_check(f, theta, 1e-6) < 1e-4


def test_mask_broadcasts_over_heads(rng):
    x = rng.normal(size=(2, 3, 3))
    mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
    out = masked_fill(constant(x), mask, -1.0)
    assert (out.data[:, mask] == -1.0).all()
    np.testing.assert_array_equal(out.data[:, ~mask], x[:, ~mask])


def test_unused_reachable_parameter_gets_zeros(rng):
    x = parameter(rng.normal(size=3))
    y = parameter(rng.normal(size=3))
    loss = reduce_sum(add(mul(x, x), stop_gradient(y)))
    grads = backward(loss)
    np.testing.assert_array_equal(grads[y], np.zeros(3))


def test_values_stay_finite_through_masked_softmax():
    scores = constant(np.zeros((2, 2)))
    masked = masked_fill(scores, np.array([[False, True], [False, False]]), -1e30)
    out = softmax(masked)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data[0], [1.0, 0.0], atol=1e-200)
