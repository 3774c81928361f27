import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfmgnet.core import Group, Obstacle, Trajectory
from sfmgnet.features import AnnotatedDataset, FeatureConfig, extract_all, extract_arrays, extract_frame

CFG = FeatureConfig()


def walker(aid, start, vel=(1.0, 0.0), steps=12, k0=0, dt=0.1):
    k = np.arange(steps)[:, None]
    return Trajectory(aid, np.arange(k0, k0 + steps), np.asarray(start) + k * dt * np.asarray(vel))


def dataset(trajs, groups=(), obstacles=(), goals=None):
    trajs = {t.agent_id: t for t in trajs}
    goals = goals or {a: np.array([50.0, 0.0]) for a in trajs}
    return AnnotatedDataset(trajs, 0.1, list(groups), list(obstacles), goals)


def unit_or_zero(v):
    n = np.linalg.norm(v, axis=-1)
    return np.all((np.abs(n - 1.0) < 1e-9) | (n == 0.0))


def test_lone_agent_with_wall():
    ds = dataset([walker(0, (0.0, 0.0))], obstacles=[Obstacle([(-5, 2), (5, 2)])])
    f = extract_frame(ds, 0, 10, CFG)
    assert not any(nb.present for nb in f.neighbors) and len(f.neighbors) == 9
    assert not f.group.in_group and f.group.theta == 0 and not f.group.eta_centroid.any()
    assert np.isclose(f.obstacle_dist, 2.0) and np.allclose(f.obstacle_eta, [0.0, -1.0])
    assert np.allclose(f.goal_dir, [1.0, 0.0])
    assert f.window.n == 10 and np.allclose(f.window.positions[-1], [1.0, 0.0])


def test_twelve_pedestrians_keep_nine_nearest():
    others = [walker(i, (1.0 + 0.5 * i, 3.0)) for i in range(1, 12)]
    ds = dataset([walker(0, (0.0, 0.0))] + others)
    f = extract_frame(ds, 0, 10, CFG)
    d = [nb.dist for nb in f.neighbors]
    assert all(nb.present for nb in f.neighbors)
    assert d == sorted(d)
    p0 = np.array([1.0, 0.0])
    want = sorted(np.hypot(*(np.array([2.0 + 0.5 * i, 3.0]) - p0)) for i in range(1, 12))[:9]
    assert np.allclose(d, want)


def test_two_member_group_centroid_direction():
    a = Trajectory(0, np.arange(11), np.zeros((11, 2)))
    b = Trajectory(1, np.arange(11), np.tile([2.0, 0.0], (11, 1)))
    ds = dataset([a, b], groups=[Group(0, (0, 1), 0)], goals={0: np.array([0.0, 10.0]), 1: np.array([2.0, 10.0])})
    f = extract_frame(ds, 0, 10, CFG)
    assert f.group.in_group
    assert np.allclose(f.group.eta_centroid, [1.0, 0.0])
    assert np.allclose(f.group.v_desired, [0.0, 1.34])
    # standing still, the gaze is the goal direction (+y); the partner sits 90 degrees off it
    assert np.isclose(f.group.theta, 0.0)  # inside the 100 degree half angle


def test_partner_behind_gives_positive_view_angle():
    a = walker(0, (0.0, 0.0), steps=11)
    b = walker(1, (-3.0, 0.0), steps=11)
    ds = dataset([a, b], groups=[Group(0, (0, 1), 0)])
    f = extract_frame(ds, 0, 10, CFG)
    assert np.isclose(f.group.theta, np.pi - np.radians(100.0))


def test_errors_for_missing_history_or_agent():
    ds = dataset([walker(0, (0.0, 0.0), steps=12)])
    with pytest.raises(ValueError):
        extract_frame(ds, 0, 9, CFG)
    with pytest.raises(ValueError):
        extract_frame(ds, 0, 40, CFG)
    with pytest.raises(ValueError):
        extract_frame(ds, 7, 10, CFG)


def test_empty_dataset_gives_empty_stream():
    ds = AnnotatedDataset({}, 0.1, destinations={})
    assert list(extract_all(ds, CFG)) == []


def test_full_run_frame_count(small_corpus):
    # every agent contributes len - n frames; full 15 s runs give 151 - n
    ds = small_corpus[0]
    _, _, index = extract_arrays(ds, CFG)
    for aid, tr in ds.trajectories.items():
        count = sum(1 for a, _ in index if a == aid)
        assert count == max(len(tr) - CFG.n, 0)
    full = [tr for tr in ds.trajectories.values() if len(tr) == 151]
    for tr in full:
        assert sum(1 for a, _ in index if a == tr.agent_id) == 151 - 10


def test_frame_count_matches_recount(small_corpus):
    for ds in small_corpus:
        _, _, index = extract_arrays(ds, CFG)
        expected = []
        for aid, tr in ds.trajectories.items():
            have = set(int(k) for k in tr.steps)
            for t in sorted(have):
                if all(k in have for k in range(t - CFG.n, t + 1)):
                    expected.append((aid, t))
        assert sorted(index) == sorted(expected)


def test_stream_matches_single_frames(small_corpus):
    ds = small_corpus[1]
    for i, (aid, t, frame, target) in enumerate(extract_all(ds, CFG)):
        if i % 37:
            continue
        ref = extract_frame(ds, aid, t, CFG)
        assert np.allclose(frame.window.positions, ref.window.positions)
        assert np.allclose([nb.dist for nb in frame.neighbors], [nb.dist for nb in ref.neighbors])
        assert np.isclose(frame.group.theta, ref.group.theta)
        j = int(np.searchsorted(ds.trajectories[aid].steps, t))
        assert np.array_equal(target.as_array(), ds.forces[aid][j])


def test_feature_invariants_on_corpus(small_arrays):
    X, _ = small_arrays
    assert unit_or_zero(X.e) and unit_or_zero(X.eta_obs) and unit_or_zero(X.eta_nb) and unit_or_zero(X.eta_c)
    assert np.all(X.d_nb >= 0) and np.all(X.d_obs >= 0)
    d = np.where(X.nb_present, X.d_nb, 1e9)
    assert np.all(np.diff(d, axis=1)[X.nb_present[:, 1:]] >= 0)
    # present slots come first
    assert np.all(X.nb_present[:, :-1] | ~X.nb_present[:, 1:])


@given(seed=st.integers(0, 10_000), m=st.integers(1, 14))
def test_random_crowd_invariants(seed, m):
    rng = np.random.default_rng(seed)
    trajs = [walker(i, rng.uniform(-4, 4, 2), rng.uniform(-1.5, 1.5, 2), steps=11) for i in range(m)]
    groups = [Group(0, (0, 1), 1)] if m >= 2 else []
    ds = dataset(trajs, groups, [Obstacle([(-6, -6), (6, -6), (6, 6)])],
                 {i: rng.uniform(-9, 9, 2) for i in range(m)})
    X, _, index = extract_arrays(ds, CFG)
    assert len(index) == m
    assert unit_or_zero(X.eta_nb) and unit_or_zero(X.eta_c) and unit_or_zero(X.e)
    assert np.all(X.nb_present.sum(axis=1) == min(m - 1, 9))
    d = np.where(X.nb_present, X.d_nb, 1e9)
    assert np.all(np.diff(d, axis=1)[X.nb_present[:, 1:]] >= 0)


def test_leader_is_stable_across_frames(small_corpus):
    for ds in small_corpus:
        for g in ds.groups:
            assert g.leader_id in g.member_ids
    again = [ds.groups for ds in small_corpus]
    from sfmgnet.datasets import SyntheticConfig, generate_synthetic
    regen = generate_synthetic(SyntheticConfig(runs=8, duration_s=15.0, seed=123))
    assert again == [ds.groups for ds in regen]


def test_exclude_group_neighbours_flag():
    a = walker(0, (0.0, 0.0), steps=11)
    b = walker(1, (0.0, 1.0), steps=11)
    c = walker(2, (0.0, -2.0), steps=11)
    ds = dataset([a, b, c], groups=[Group(0, (0, 1), 0)])
    both = extract_frame(ds, 0, 10, CFG)
    only = extract_frame(ds, 0, 10, FeatureConfig(exclude_group_neighbors=True))
    assert sum(nb.present for nb in both.neighbors) == 2
    assert sum(nb.present for nb in only.neighbors) == 1 and np.isclose(only.neighbors[0].dist, 2.0)


def test_dt_mismatch_rejected():
    ds = dataset([walker(0, (0, 0))])
    with pytest.raises(ValueError):
        extract_arrays(ds, FeatureConfig(dt=0.4))
