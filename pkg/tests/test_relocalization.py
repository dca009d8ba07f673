import numpy as np
import pytest
from hypothesis import given, strategies as st

from atdn.dataio import FormatError, Frame, TruncatedError, write_flow
from atdn.dataio.synthetic import SyntheticWorld, flow_oracle, render, world_trajectory
from atdn.geometry import Pose, compose, relative
from atdn.mapping import Embedding, MapConfig, MapModel, encode
from atdn.odometry import VoModel
from atdn.relocalization import (
    Bottom, ChecksumError, DirectoryFlowSource, EmbeddingMap, EmptyMapError, FlowUnavailableError,
    KeyframeRecord, OracleFlowSource, StoredFlowSource, ZScore, build_map, candidates,
    load_map, map_bytes, match_search, parse_candidate_policy, parse_map, query, query_embedding,
    refine, refined_pose, save_map,
)
from conftest import random_pose


def make_map(rng, n, d, start=0):
    recs = [KeyframeRecord(start + 3 * i, Embedding(rng.normal(size=d), start + 3 * i), random_pose(rng))
            for i in range(n)]
    return EmbeddingMap.from_records(recs, bytes(range(32)))


def test_candidate_examples():
    assert candidates([0, 10, 10, 10, 10], ZScore(1)) == (0,)
    assert candidates([4.0] * 6) == (0,)
    assert candidates([3, 1, 2], Bottom(1.0)) == (0, 1, 2)
    assert candidates([3, 1, 2, 5], "bottom:0.5") == (1, 2)
    assert parse_candidate_policy("zscore") == ZScore(2.0)
    for bad in ("bottom", "bottom:0", "median"):
        with pytest.raises(ValueError):
            parse_candidate_policy(bad)
    with pytest.raises(ValueError):
        candidates([])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=40), st.floats(0, 3), st.floats(0.01, 1))
def test_candidates_contain_argmin(profile, k, q):
    i = int(np.argmin(profile))
    for pol in (ZScore(k), Bottom(q)):
        c = candidates(profile, pol)
        assert i in c and all(0 <= j < len(profile) for j in c)


def test_orthogonal_embeddings_against_linear_scan(rng):
    d = 16
    emap = EmbeddingMap(np.arange(d), np.eye(d, dtype=np.float32), np.tile(np.eye(3), (d, 1, 1)), np.zeros((d, 3)))
    for j in range(d):
        q = np.eye(d)[j] + rng.normal(scale=1e-3, size=d)
        res = query_embedding(emap, q)
        scan = [float(np.sqrt(np.sum((np.eye(d)[k] - q.astype(np.float32).astype(np.float64)) ** 2)))
                for k in range(d)]
        assert res.best_id == j == int(np.argmin(scan))
        assert np.allclose(res.profile, scan, rtol=1e-12)
        assert res.best_distance == min(res.profile)


def test_ties_go_to_lowest_id():
    emap = EmbeddingMap([2, 5, 9], np.array([[1.0], [0.0], [0.0]]), np.tile(np.eye(3), (3, 1, 1)), np.zeros((3, 3)))
    assert query_embedding(emap, [0.0]).best_id == 5


def test_one_record_and_empty_maps(rng):
    emap = make_map(rng, 1, 4)
    assert query_embedding(emap, rng.normal(size=4) * 100).best_id == 0
    with pytest.raises(EmptyMapError):
        EmbeddingMap.from_records([])
    with pytest.raises(ValueError):
        query_embedding(emap, np.zeros(5))
    with pytest.raises(ValueError):
        EmbeddingMap([3, 3], np.zeros((2, 2)), np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))


def test_l1_metric(rng):
    emap = make_map(rng, 5, 3)
    q = rng.normal(size=3).astype(np.float32)
    res = query_embedding(emap, q, metric="l1")
    assert np.allclose(res.profile, np.abs(emap.embeddings - q).sum(axis=1), rtol=1e-6)


SMALL = MapConfig(input_size=64, channels=(4, 8, 8), latent_dim=16)


def synthetic_keyframes(n=20, stride=5):
    world = SyntheticWorld(n_frames=n * stride)
    traj = world_trajectory(world)
    return world, [Frame(int(i), render(world, traj[i], 0), traj[i]) for i in range(0, len(traj), stride)]


def test_build_query_self_and_rebuild(tmp_path):
    world, kfs = synthetic_keyframes()
    model = MapModel(SMALL, seed=0)
    emap = build_map(model, list(reversed(kfs)))
    assert len(emap) == len(kfs) and np.all(np.diff(emap.frame_ids) > 0)
    for f in kfs:
        res = query(emap, model, f.image)
        assert res.best_id == f.frame_id and res.best_distance == 0.0
        assert len(res.profile) == len(emap)
    save_map(emap, tmp_path / "a.bin")
    save_map(build_map(MapModel(SMALL, seed=0), kfs), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    with pytest.raises(EmptyMapError):
        build_map(model, [])
    with pytest.raises(ValueError):
        build_map(model, [Frame(0, kfs[0].image, None)])


def test_save_load_round_trip(tmp_path, rng):
    for n, d in ((3, 8), (10_000, 32)):
        emap = make_map(rng, n, d)
        p = tmp_path / f"m{n}.bin"
        save_map(emap, p)
        back = load_map(p, expected_fingerprint=bytes(range(32)))
        assert back == emap
        assert map_bytes(back) == p.read_bytes()
        assert back.embeddings.tobytes() == emap.embeddings.tobytes()
        assert back.rotations.tobytes() == emap.rotations.tobytes()
    assert [r.frame_id for r in back.records()[:3]] == [0, 3, 6]


def test_map_corruption_detected(rng):
    raw = bytearray(map_bytes(make_map(rng, 4, 6)))
    with pytest.raises(ChecksumError):
        parse_map(bytes(raw), expected_fingerprint=bytes(32))
    flipped = raw.copy()
    flipped[70] ^= 1
    with pytest.raises(ChecksumError):
        parse_map(bytes(flipped))
    fp = raw.copy()
    fp[30] ^= 0xFF
    with pytest.raises(ChecksumError):
        parse_map(bytes(fp))
    with pytest.raises(TruncatedError):
        parse_map(bytes(raw[:-5]))
    with pytest.raises(TruncatedError):
        parse_map(bytes(raw[:20]))
    with pytest.raises(FormatError):
        parse_map(bytes(raw) + b"\0")
    with pytest.raises(FormatError):
        parse_map(b"ATDNMAP2" + bytes(raw[8:]))
    ver = raw.copy()
    ver[8] = 2
    with pytest.raises(FormatError, match="version"):
        parse_map(bytes(ver))


def test_refine_sources(tmp_path, rng):
    world, kfs = synthetic_keyframes(6, 2)
    emap = build_map(MapModel(SMALL, seed=0), kfs)
    vo = VoModel(seed=0)
    traj = world_trajectory(world)
    q = Frame(3, render(world, traj[3], 0), traj[3])
    with pytest.raises(FlowUnavailableError):
        refine(emap, vo, None, 2, q)
    with pytest.raises(FlowUnavailableError):
        refine(emap, vo, StoredFlowSource({}), 2, q)
    with pytest.raises(FlowUnavailableError):
        refine(emap, vo, DirectoryFlowSource(tmp_path), 2, q)
    with pytest.raises(FlowUnavailableError):
        OracleFlowSource(world, emap)(2, Frame(3, q.image, None))
    flow = flow_oracle(world, traj[2], traj[3])
    write_flow(flow, tmp_path / "pair_000002_000003.flo")
    deltas = [refine(emap, vo, src, 2, q) for src in
              (OracleFlowSource(world, emap), StoredFlowSource({(2, 3): flow}), DirectoryFlowSource(tmp_path))]
    assert deltas[0] == deltas[1] == deltas[2]
    with pytest.raises(KeyError):
        refine(emap, vo, OracleFlowSource(world, emap), 3, q)


def test_refined_pose_with_exact_delta(rng):
    emap = make_map(rng, 5, 4)
    target = random_pose(rng)
    delta = relative(emap.pose_of(6), target)
    assert refined_pose(emap, 6, delta).allclose(target, atol=1e-9)


def test_match_search_picks_shortest_delta():
    world, kfs = synthetic_keyframes(6, 2)
    model = MapModel(SMALL, seed=0)
    emap = build_map(model, kfs)
    vo = VoModel(seed=0, zero_init_head=False)
    res = query(emap, model, kfs[2].image, Bottom(1.0))
    out = match_search(emap, vo, OracleFlowSource(world, emap), res, kfs[2])
    assert out.refined is not None and out.best_id in emap.frame_ids
