import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import special_ortho_group

from atdn.dataio.synthetic import SyntheticWorld, world_trajectory
from atdn.geometry import Trajectory
from atdn.mapping import (
    Embedding, MapConfig, MapModel, MapTrainConfig, MotionPolicy, StridePolicy, edl, encode,
    kl_term, map_loss, parse_policy, select_keyframes, train_map,
)
from atdn.odometry import VoConfig, VoModel
from atdn.tensor import Tensor, seeded_rng
from gradcheck import check, check_module

TINY = MapConfig(input_size=8, channels=(2, 3), latent_dim=4, skip_channels=2)


def test_edl_examples():
    e = np.array([[0.0], [1.0], [3.0]])
    p = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert float(edl(e, p).data) == pytest.approx(0.5, abs=1e-7)
    assert float(edl(p[:, :1] + 3.0, p).data) < 1e-9
    # scaled copies match the ratios too, up to the epsilon guard in the denominators
    eps = 1e-8
    bias = abs(7.0 / (7.0 + eps) - 1.0 / (1.0 + eps))
    assert float(edl(p[:, :1] * 7.0, p).data) == pytest.approx(bias, rel=1e-6)
    with pytest.raises(ValueError):
        edl(e[:2], p[:2])
    with pytest.raises(ValueError):
        edl(e, p, frame_ids=[0, 2, 1])
    with pytest.raises(ValueError):
        edl(e, p, stride=2)


def test_edl_accepts_embeddings():
    embs = [Embedding(np.array([0.0, 0.0]), 0), Embedding(np.array([1.0, 0.0]), 1),
            Embedding(np.array([1.0, 2.0]), 2)]
    p = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1.0, 0]])
    assert float(edl(embs, p).data) == pytest.approx(0.5, abs=1e-7)


def random_similarity(rng, dim):
    q = special_ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.array([[1.0]])
    return rng.uniform(0.1, 10.0), q, rng.normal(size=dim) * 5


@given(st.integers(0, 2**32 - 1))
def test_edl_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(6, 5))
    p = rng.normal(size=(6, 3))
    base = float(edl(e, p).data)
    s, q, b = random_similarity(rng, 5)
    assert abs(float(edl(s * e @ q.T + b, p).data) - base) < 1e-6
    s, q, b = random_similarity(rng, 3)
    assert abs(float(edl(e, s * p @ q.T + b).data) - base) < 1e-6
    assert base >= 0


def test_edl_gradient(rng):
    for _ in range(10):
        e = rng.normal(size=(3, 4))
        p = rng.normal(size=(3, 3))
        check(lambda x: edl(x, p), e)
    e = rng.normal(size=(7, 3))
    p = rng.normal(size=(7, 3))
    check(lambda x: edl(x, p, stride=2), e)


def test_kl_term():
    zero = Tensor(np.zeros((3, 5)))
    assert float(kl_term(zero, zero).data) == 0.0
    m = np.array([[0.5, -1.0]])
    lv = np.array([[0.3, -0.2]])
    ref = -0.5 * np.sum(1 + lv - m ** 2 - np.exp(lv))
    assert float(kl_term(Tensor(m), Tensor(lv)).data) == pytest.approx(ref, rel=1e-12)
    check(lambda a, b: kl_term(a, b), m, lv)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_kl_non_negative(m, lv):
    assert float(kl_term(Tensor(np.array([m])), Tensor(np.array([lv]))).data) >= -1e-12


def test_encode_modes(rng):
    model = MapModel(MapConfig(), seed=1)
    img = rng.random((64, 64)).astype(np.float32)
    a, b = encode(model, img, 5), encode(model, img, 5)
    assert a.dim == 128 and a.frame_id == 5
    assert a.values.tobytes() == b.values.tobytes()
    v1 = encode(model, img, rng=seeded_rng(3), variational=True)
    v2 = encode(model, img, rng=seeded_rng(3), variational=True)
    assert v1.values.tobytes() == v2.values.tobytes()
    assert not np.array_equal(v1.values, a.values)
    model.logvar_head.bias.data[:] = -1e4
    v3 = encode(model, img, rng=seeded_rng(3), variational=True)
    assert v3.values.tobytes() == a.values.tobytes()
    with pytest.raises(ValueError):
        encode(model, np.zeros((32, 32), np.float32))


def test_map_model_shapes(rng):
    for unet in (True, False):
        model = MapModel(MapConfig(unet=unet), seed=0)
        out = model.forward(Tensor(rng.random((2, 1, 64, 64)).astype(np.float32)), variational=False)
        assert out.recon.shape == (2, 1, 64, 64)
        assert out.mean.shape == (2, 128)
        assert np.all((out.recon.data >= 0) & (out.recon.data <= 1))


def test_map_model_gradients(rng):
    model = MapModel(TINY, seed=0, dtype=np.float64)
    x = rng.random((3, 8, 8))
    pos = rng.normal(size=(3, 3))
    cfg = MapTrainConfig(batch_size=3)

    def loss():
        return map_loss(model, x, pos, cfg, rng=seeded_rng(0), variational=True)[0]
    check_module(model, loss, h=1e-5)


def test_vo_model_gradients(rng):
    cfg = VoConfig(flow_height=16, flow_width=16, pool=2, channels=(2, 3), hidden=4)
    model = VoModel(cfg, seed=0, zero_init_head=False, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 2, 8, 8)))
    probe = Tensor(rng.normal(size=(2, 6)))
    check_module(model, lambda: (model(x) * probe).sum(), h=1e-5)


def test_map_loss_term_isolation(rng):
    model = MapModel(TINY, seed=2)
    x = rng.random((4, 8, 8)).astype(np.float32)
    pos = rng.normal(size=(4, 3))
    total, parts = map_loss(model, x, pos, MapTrainConfig(lambda_edl=0.0, batch_size=4), variational=False)
    out = model.forward(Tensor(x[:, None]), variational=False)
    assert float(total.data) == pytest.approx(float(((out.recon.data - x[:, None]) ** 2).mean()), rel=1e-6)
    assert parts["kl"] == 0 and parts["edl"] == 0
    total, parts = map_loss(model, x, pos, MapTrainConfig(edl_only=True, batch_size=4), variational=False)
    assert float(total.data) == pytest.approx(parts["edl"], rel=1e-6)
    with pytest.raises(ValueError):
        map_loss(model, x[:2], pos[:2], MapTrainConfig(batch_size=3))


def test_train_config_defaults_and_checks():
    c = MapTrainConfig()
    assert (c.epochs, c.batch_size, c.lr_max, c.lr_min) == (10, 8, 1e-3, 1e-5)
    with pytest.raises(ValueError):
        MapTrainConfig(beta_kl=-1)
    with pytest.raises(ValueError):
        MapTrainConfig(batch_size=2)


def test_train_map_zero_lr_and_determinism(rng):
    x = rng.random((9, 8, 8)).astype(np.float32)
    pos = np.cumsum(rng.normal(size=(9, 3)), axis=0)
    model = MapModel(TINY, seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train_map(model, x, pos, MapTrainConfig(epochs=2, batch_size=4, lr_max=0.0, lr_min=0.0))
    assert all(np.array_equal(v, before[k]) for k, v in model.state_dict().items())
    cfg = MapTrainConfig(epochs=3, batch_size=4, seed=4)
    m1, log1 = train_map(MapModel(TINY, seed=0), x, pos, cfg)
    m2, log2 = train_map(MapModel(TINY, seed=0), x, pos, cfg)
    assert log1 == log2 and len(log1) == 3
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))


def test_edl_only_training_logs_without_convergence_claim(rng):
    x = rng.random((6, 8, 8)).astype(np.float32)
    pos = np.cumsum(rng.normal(size=(6, 3)), axis=0)
    _, log = train_map(MapModel(TINY, seed=0), x, pos, MapTrainConfig(epochs=3, batch_size=3, edl_only=True))
    assert len(log) == 3 and all(math.isfinite(r.loss) for r in log)


def test_keyframe_policies():
    traj = world_trajectory(SyntheticWorld(n_frames=11, trajectory="line"))
    assert select_keyframes(traj, StridePolicy(1)) == list(range(11))
    assert select_keyframes(traj, "stride:5") == [0, 5, 10]
    line = world_trajectory(SyntheticWorld(n_frames=41, trajectory="line", speed=0.25))
    chosen = select_keyframes(line, MotionPolicy(1.0))
    # distance-scan oracle over cumulative path length
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line.translations, axis=0), axis=1))])
    expect, last = [0], 0.0
    for i in range(1, len(cum)):
        if cum[i] - last >= 1.0:
            expect.append(i)
            last = cum[i]
    assert chosen == expect == list(range(0, 41, 4))
    assert select_keyframes(world_trajectory(SyntheticWorld(n_frames=40)), MotionPolicy(1e9, 0.5))[:2] == [0, 4]
    for bad in ("stride:0", "motion:-1", "motion:1:0", "nope", "stride:x"):
        with pytest.raises(ValueError):
            parse_policy(bad)
    assert parse_policy("motion:2:0.1") == MotionPolicy(2.0, 0.1)
