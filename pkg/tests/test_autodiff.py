import numpy as np
import pytest

from trajeglish.autodiff import Module, Parameter, Tensor, concat, log_softmax, no_grad, softmax
from trajeglish.layers import (
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    mask_to_bias,
)
from trajeglish.optim import AdamW, warmup_linear_decay


def numerical_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, x_shape, seed=0, tol=1e-6):
    """Compare autodiff gradient of sum(build(x)) against finite differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=x_shape)

    def scalar(xv):
        return build(Tensor(xv)).sum().item()

    t = Tensor(x0.copy(), requires_grad=True)
    out = build(t).sum()
    out.backward()
    num = numerical_grad(scalar, x0.copy())
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "name,build,shape",
    [
        ("add_broadcast", lambda x: x + Tensor(np.ones((1, 4))), (3, 4)),
        ("mul", lambda x: x * x, (3, 4)),
        ("sub_scalar", lambda x: 2.0 - x, (5,)),
        ("div", lambda x: x / Tensor(np.arange(1.0, 5.0)), (3, 4)),
        ("pow", lambda x: (x * x + 1.0) ** 1.5, (4,)),
        ("exp", lambda x: x.exp(), (3, 3)),
        ("log", lambda x: (x * x + 1.0).log(), (3, 3)),
        ("sqrt", lambda x: (x * x + 1.0).sqrt(), (6,)),
        ("tanh", lambda x: x.tanh(), (2, 5)),
        ("relu", lambda x: (x + 0.1).relu(), (7,)),
        ("gelu", lambda x: x.gelu(), (4, 4)),
        ("reshape_t", lambda x: x.reshape(4, 3).transpose(1, 0), (3, 4)),
        ("swap", lambda x: x.swapaxes(0, 2), (2, 3, 4)),
        ("sum_axis", lambda x: x.sum(axis=1), (3, 4)),
        ("mean_keep", lambda x: x.mean(axis=-1, keepdims=True) * x, (3, 4)),
        ("max_axis", lambda x: x.max(axis=1), (5, 4)),
        ("getitem_slice", lambda x: x[1:, :2] * 3.0, (4, 4)),
        ("softmax", lambda x: softmax(x, axis=-1) * Tensor(np.arange(4.0)), (3, 4)),
        ("log_softmax", lambda x: log_softmax(x, axis=-1), (3, 4)),
        ("concat", lambda x: concat([x, x * 2.0], axis=1), (2, 3)),
    ],
)
def test_op_gradients_match_finite_differences(name, build, shape):
    check_op(build, shape)


def test_matmul_batched_gradients():
    rng = np.random.default_rng(1)
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(4, 5))  # broadcasts over the batch dim

    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    (a @ b).sum().backward()

    ga = numerical_grad(lambda v: (v @ b0).sum(), a0.copy())
    gb = numerical_grad(lambda v: (a0 @ v).sum(), b0.copy())
    np.testing.assert_allclose(a.grad, ga, atol=1e-6)
    np.testing.assert_allclose(b.grad, gb, atol=1e-6)


def test_gather_scatter_gradients():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 5])

    w = Tensor(w0.copy(), requires_grad=True)
    (w[idx] * Tensor(np.arange(12.0).reshape(4, 3))).sum().backward()
    num = numerical_grad(lambda v: (v[idx] * np.arange(12.0).reshape(4, 3)).sum(), w0.copy())
    np.testing.assert_allclose(w.grad, num, atol=1e-6)


def test_grad_accumulates_across_shared_use():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x + x  # both vjp slots point at the same parent
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_aliasing_safe_for_two_parents():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    z = x + y
    w = z + x  # x gets gradient from two paths, y from one
    w.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    np.testing.assert_allclose(y.grad, [1.0, 1.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    y2 = x * 2.0
    assert y2.requires_grad


def test_layernorm_gradcheck():
    rng = np.random.default_rng(3)
    ln = LayerNorm(6)
    x0 = rng.normal(size=(4, 6))

    def scalar(xv):
        return (ln(Tensor(xv)) * Tensor(np.arange(24.0).reshape(4, 6))).sum().item()

    x = Tensor(x0.copy(), requires_grad=True)
    (ln(x) * Tensor(np.arange(24.0).reshape(4, 6))).sum().backward()
    np.testing.assert_allclose(x.grad, numerical_grad(scalar, x0.copy()), atol=1e-6)
    # Parameter gradients too.
    for p, name in ((ln.g, "g"), (ln.b, "b")):
        analytic = p.grad.copy()
        old = p.data.copy()

        def scalar_p(v):
            p.data = v
            out = (ln(Tensor(x0)) * Tensor(np.arange(24.0).reshape(4, 6))).sum().item()
            p.data = old
            return out

        np.testing.assert_allclose(analytic, numerical_grad(scalar_p, old.copy()), atol=1e-6)


def test_attention_block_gradcheck():
    rng = np.random.default_rng(4)
    blk = EncoderBlock(rng, dim=8, n_heads=2)
    x0 = rng.normal(size=(2, 5, 8))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    bias = mask_to_bias(mask)
    weights = rng.normal(size=(2, 5, 8))

    def scalar(xv):
        return (blk(Tensor(xv), bias) * Tensor(weights)).sum().item()

    x = Tensor(x0.copy(), requires_grad=True)
    (blk(x, bias) * Tensor(weights)).sum().backward()
    np.testing.assert_allclose(x.grad, numerical_grad(scalar, x0.copy()), rtol=1e-5, atol=1e-6)


def test_decoder_block_param_gradcheck_sampled():
    rng = np.random.default_rng(5)
    blk = DecoderBlock(rng, dim=8, n_heads=2)
    x0 = rng.normal(size=(1, 4, 8))
    mem = rng.normal(size=(1, 3, 8))
    bias = mask_to_bias(np.tril(np.ones((4, 4), dtype=bool)))

    def loss_value():
        return (blk(Tensor(x0), Tensor(mem), bias, None) ** 2.0).sum().item()

    out = (blk(Tensor(x0), Tensor(mem), bias, None) ** 2.0).sum()
    out.backward()
    params = blk.named_parameters()
    assert len(params) >= 16
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for j in range(0, flat.size, max(flat.size // 3, 1)):
            old = flat[j]
            flat[j] = old + 1e-6
            hi = loss_value()
            flat[j] = old - 1e-6
            lo = loss_value()
            flat[j] = old
            num = (hi - lo) / 2e-6
            assert num == pytest.approx(gflat[j], rel=1e-4, abs=1e-6), name


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(6)
    blk = EncoderBlock(rng, dim=8, n_heads=2)
    state = blk.state_dict()
    blk2 = EncoderBlock(np.random.default_rng(7), dim=8, n_heads=2)
    blk2.load_state_dict(state)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    np.testing.assert_array_equal(blk(x).data, blk2(x).data)
    with pytest.raises(KeyError):
        blk2.load_state_dict({"nope": np.zeros(3)})


def test_adamw_decoupled_decay():
    p = Parameter(np.array([1.0]))
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    # Zero gradient: only the decay term moves the weight.
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)


def test_warmup_then_linear_decay():
    lrs = [warmup_linear_decay(s, 1.0, 10, 110) for s in range(110)]
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0)
    assert lrs[60] == pytest.approx(0.5)
    assert lrs[-1] == pytest.approx(0.01)
    with pytest.raises(ValueError):
        warmup_linear_decay(0, 1.0, 10, 5)
