import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from atdn.tensor import (
    AdamW, Conv2d, GraphError, Linear, OptimizerState, Schedule, ScheduleError, ShapeError,
    Tensor, adamw_step, cosine_lr, no_grad, ops, seeded_rng,
)
from atdn.tensor.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from atdn.tensor.rng import spawn
from atdn.dataio import FormatError, TruncatedError
from gradcheck import check, check_module


def away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


ELEMENTWISE = [
    ("add", lambda a, b: (a + b).sum(), 2),
    ("sub", lambda a, b: (a - b * 2.0).sum(), 2),
    ("mul", lambda a, b: (a * b).sum(), 2),
    ("div", lambda a, b: (a / b).sum(), 2),
    ("relu", lambda a: (a.relu() * a).sum(), 1),
    ("sigmoid", lambda a: a.sigmoid().sum(), 1),
    ("tanh", lambda a: ops.tanh(a).sum(), 1),
    ("exp", lambda a: a.exp().sum(), 1),
    ("log", lambda a: ops.log(ops.abs_(a)).sum(), 1),
    ("sqrt", lambda a: ops.sqrt(ops.abs_(a)).sum(), 1),
    ("sin", lambda a: ops.sin(a).sum(), 1),
    ("cos", lambda a: ops.cos(a).sum(), 1),
    ("power", lambda a: (a ** 3).sum(), 1),
    ("clip", lambda a: (ops.clip(a, -1.0, 1.0) * a).sum(), 1),
]


@pytest.mark.parametrize("name,fn,arity", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
def test_elementwise_gradients(rng, name, fn, arity):
    arrays = [away_from_zero(rng, (3, 4)) for _ in range(arity)]
    if name == "clip":
        arrays = [np.array([[-1.4, -0.5, 0.3, 1.2]])]
    check(fn, *arrays)


def test_broadcast_gradients(rng):
    check(lambda a, b: ((a + b) * b).sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 4)))
    check(lambda a, b: (a * b).mean(), rng.normal(size=(5, 1)), rng.normal(size=(1, 3)))


def test_reduction_gradients(rng):
    x = rng.normal(size=(3, 4, 2))
    check(lambda a: a.sum(axis=1).sum(), x)
    check(lambda a: (a.mean(axis=(0, 2), keepdims=True) * a).sum(), x)
    check(lambda a: ops.sum_sq(a, axis=-1).sum(), x)
    check(lambda a: ops.norm(a, axis=-1).sum(), x)
    check(lambda a: ops.norm(a, axis=1, keepdims=True).mean(), x)


def test_shape_op_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 4, 3))
    check(lambda a: (a.reshape(6, 4) * Tensor(w.reshape(6, 4).T.T)).sum(), x)
    check(lambda a: (a.transpose(2, 0, 1) ** 2 * Tensor(np.arange(24.0).reshape(4, 2, 3))).sum(), x)
    idx = np.array([0, 2, 2, 1])
    check(lambda a: (a[:, idx] ** 2).sum() + (a[1, 1:3] * 3.0).sum(), x)
    check(lambda a, b: (ops.concat([a, b], axis=1) ** 2).sum(), x, rng.normal(size=(2, 1, 4)))
    check(lambda a, b: (ops.stack([a, b], axis=1) * Tensor(np.arange(48.0).reshape(2, 2, 3, 4))).sum(),
          x, rng.normal(size=(2, 3, 4)))
    probe = Tensor(rng.normal(size=(2, 6, 8)))
    check(lambda a: (ops.upsample2x(a) * probe).sum(), x)


def test_matmul_gradients(rng):
    check(lambda a, b: ((a @ b) ** 2).sum(), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    check(lambda a, b: ((a @ b) ** 2).sum(), rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2)))
    check(lambda a, b: ((a @ b) ** 2).sum(), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3)))
    a = rng.normal(size=(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_gradients(rng, stride, padding):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    probe = None

    def f(a, b):
        nonlocal probe
        y = ops.conv2d(a, b, stride, padding)
        if probe is None:
            probe = np.random.default_rng(1).normal(size=y.shape)
        return (y * Tensor(probe)).sum()
    check(f, x, w)


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[b, k, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[k])
    return out


def test_conv_values_match_loop(rng):
    x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    w = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w)).data
    assert y.shape == (1, 1, 3, 3) and y.dtype == np.float32
    ref = naive_conv(x.astype(np.float64), w.astype(np.float64), 1, 0)
    # f32 accumulation of 9 products: a few ulps of the summed magnitudes
    bound = 9 * np.finfo(np.float32).eps * naive_conv(np.abs(x), np.abs(w), 1, 0)
    assert np.all(np.abs(y - ref) <= bound)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), 2, 1).data
    ref = naive_conv(x.astype(np.float64), w.astype(np.float64), 2, 1)
    bound = 27 * np.finfo(np.float32).eps * naive_conv(np.abs(x), np.abs(w), 2, 1)
    assert np.all(np.abs(y - ref) <= bound)


def test_conv_1x1_is_scaling(rng):
    x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.5, np.float32))).data
    assert np.array_equal(y, x * np.float32(2.5))


def test_conv_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("scale", [1e-3, 0.02, 0.5, 2.5])
def test_rotation_helper_gradients(rng, scale):
    s = rng.uniform(0.1, 1.0, size=6) * scale ** 2
    check(lambda a: (ops.sinc_sqrt(a) * Tensor(np.arange(1.0, 7.0))).sum(), s, tol=1e-5)
    check(lambda a: (ops.versine_sqrt(a) * Tensor(np.arange(1.0, 7.0))).sum(), s, tol=1e-5)
    c = np.cos(np.sqrt(s))
    check(lambda a, b: (ops.atan_ratio(a, b) * Tensor(np.arange(1.0, 7.0))).sum(), s, c, tol=1e-5)


def test_rotation_helper_values(rng):
    s = np.concatenate([rng.uniform(0, 1e-3, 20), rng.uniform(1e-3, 9, 20)])
    t = np.sqrt(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        ref_sinc = np.where(s > 0, np.sin(t) / t, 1.0)
        ref_vers = np.where(s > 0, (1 - np.cos(t)) / s, 0.5)
        ref_atan = np.where(s > 0, np.arctan2(np.sin(t), np.cos(t)) / np.sin(t), 1.0)
    assert np.allclose(ops.sinc_sqrt(Tensor(s)).data, ref_sinc, rtol=1e-13, atol=1e-15)
    assert np.allclose(ops.versine_sqrt(Tensor(s)).data, ref_vers, rtol=1e-10, atol=1e-15)
    got = ops.atan_ratio(Tensor(np.sin(t) ** 2), Tensor(np.cos(t))).data
    assert np.allclose(got, ref_atan, rtol=1e-10)


def test_layer_gradients(rng):
    lin = Linear(4, 3, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 4)))
    probe = Tensor(rng.normal(size=(5, 3)))
    check_module(lin, lambda: (lin(x) * probe).sum())
    conv = Conv2d(2, 3, 3, rng, stride=2, padding=1, dtype=np.float64)
    xi = Tensor(rng.normal(size=(2, 2, 6, 6)))
    probe = Tensor(rng.normal(size=(2, 3, 3, 3)))
    check_module(conv, lambda: (conv(xi) * probe).sum())


def test_two_layer_network_gradients(rng):
    class Net:
        def __init__(self):
            self.a = Linear(6, 8, rng, dtype=np.float64)
            self.b = Linear(8, 2, rng, dtype=np.float64)

    from atdn.tensor.nn import Module
    net = Net()
    net.__class__ = type("Net", (Module,), {})
    x = Tensor(rng.normal(size=(7, 6)))
    y = rng.normal(size=(7, 2))
    check_module(net, lambda: ((net.b(ops.tanh(net.a(x))) - Tensor(y)) ** 2).mean(), h=1e-3)


def test_backward_basics():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ops.sum_sq(x).backward()
    assert np.array_equal(x.grad, 2 * x.data)
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (y * 0.0 + 5.0).sum().backward()
    assert not y.grad.any()
    with pytest.raises(GraphError):
        (y * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(np.array(1.0)).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_tape_replay_is_deterministic():
    def run():
        rng = seeded_rng(3)
        lin = Linear(5, 4, rng)
        x = Tensor(rng.normal(size=(6, 5)).astype(np.float32))
        loss = (lin(x).relu() ** 2).mean()
        loss.backward()
        return loss.data.tobytes(), lin.weight.grad.tobytes()
    assert run() == run()


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_ops_stay_finite_in_domain(values):
    x = Tensor(np.array(values), requires_grad=True)
    y = ops.exp(x).sum() + ops.log(ops.abs_(x)).sum() + x.sigmoid().sum() + ops.sqrt(ops.abs_(x)).sum()
    y.backward()
    assert np.isfinite(y.data) and np.all(np.isfinite(x.grad))


# ------------------------------------------------------------- optimizer

def test_adam_first_step_matches_hand_oracle():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    state = OptimizerState()
    assert adamw_step({"p": p}, state, 1e-3)
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    update = (m / (1 - 0.9)) / (math.sqrt(v / (1 - 0.999)) + 1e-8)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 * update, abs=1e-15)
    assert state.step == 1


def test_adam_matches_reference_over_steps(rng):
    w0 = rng.normal(size=(3, 2))
    grads = rng.normal(size=(20, 3, 2))
    p = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, weight_decay=0.05)
    w, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for k, g in enumerate(grads, 1):
        lr = 1e-2 / k
        p.grad = g
        opt.step(lr)
        w = w * (1 - lr * 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - lr * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    assert np.allclose(p.data, w, rtol=0, atol=1e-14)


def test_adam_zero_grad_and_decay():
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW({"p": p})
    p.grad = np.zeros(2)
    opt.step(1e-3)
    assert np.array_equal(p.data, [2.0, -1.0])
    q = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"q": q}, weight_decay=0.1)
    q.grad = np.zeros(1)
    opt.step(1e-2)
    assert q.data[0] == pytest.approx(2.0 * (1 - 1e-2 * 0.1), abs=1e-15)


def test_non_finite_gradient_skips_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p})
    p.grad = np.array([np.nan])
    assert not opt.step(1e-3)
    assert opt.state.faults == 1 and opt.state.step == 0 and p.data[0] == 1.0


# -------------------------------------------------------------- schedule

def test_cosine_endpoints_and_midpoint():
    s = Schedule(1e-3, 1e-6, (1000,))
    assert cosine_lr(s, 0) == 1e-3
    assert cosine_lr(s, 1000) == 1e-6
    assert cosine_lr(s, 500) == 5.005e-4
    with pytest.raises(ScheduleError):
        cosine_lr(s, 1001)


def test_cosine_restarts_per_segment():
    s = Schedule(1e-3, 1e-6, (10, 20, 5))
    assert s.boundaries == (0, 11, 32)
    assert s.last_step == 37
    for b, seg in zip(s.boundaries, s.segments):
        assert cosine_lr(s, b) == 1e-3
        assert cosine_lr(s, b + seg) == 1e-6
    assert cosine_lr(s, 11 + 10) == 5.005e-4


@given(st.integers(1, 400), st.floats(1e-8, 1e-2), st.floats(0, 1))
def test_cosine_monotone_and_bounded(t_seg, lr_max, frac):
    lr_min = lr_max * frac
    s = Schedule(lr_max, lr_min, (t_seg,))
    vals = [cosine_lr(s, t) for t in range(t_seg + 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(lr_min <= v <= lr_max for v in vals)


def test_cosine_against_exact_arithmetic():
    # the midpoint is (a + b) / 2 exactly; rounding it once is the best possible answer
    for a, b in ((1e-3, 1e-6), (1e-3, 1e-5)):
        exact = (Fraction(a) + Fraction(b)) / 2
        assert Fraction(cosine_lr(Schedule(a, b, (100,)), 50)) == Fraction(float(exact))


# ------------------------------------------------------------------- rng

def test_rng_streams():
    assert np.array_equal(seeded_rng(9).random(1000), seeded_rng(9).random(1000))
    assert not np.array_equal(seeded_rng(9).random(10), seeded_rng(10).random(10))
    z = seeded_rng(0).standard_normal(1_000_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    perm = seeded_rng(4).permutation(100)
    assert sorted(perm) == list(range(100))
    a, b = spawn(seeded_rng(1), 2)
    assert not np.array_equal(a.random(5), b.random(5))


# ------------------------------------------------------------ checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    params = {"conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
              "fc.bias": rng.normal(size=(7,)).astype(np.float32), "scalar": np.float32(3.5) * np.ones(())}
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == np.shape(params[k])
        assert back[k].tobytes() == np.asarray(params[k], np.float32).tobytes()
    raw = path.read_bytes()
    assert checkpoint_bytes(back) == raw
    with pytest.raises(TruncatedError):
        parse_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        parse_checkpoint(b"XXXXXXXX" + raw[8:])


def test_module_state_dict_checks(rng):
    lin = Linear(3, 2, rng)
    state = lin.state_dict()
    other = Linear(3, 2, seeded_rng(99))
    other.load_state_dict(state)
    assert np.array_equal(other.weight.data, lin.weight.data)
    with pytest.raises(KeyError):
        other.load_state_dict({"weight": state["weight"]})
    with pytest.raises(ValueError):
        other.load_state_dict({**state, "weight": np.zeros((2, 3))})
