import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from sfmgnet.goal_imm import (
    GoalEstimator,
    GoalHypothesis,
    ImmConfig,
    KalmanFilterState,
    ctrv_endpoint,
    generate_hypotheses,
    goal_direction,
    imm_update,
    init_imm,
    map_hypothesis,
    transition_matrix,
)

angle = st.floats(-math.pi, math.pi, allow_nan=False)


def straight(n=13, speed=1.2, heading=0.0, dt=0.1, start=(0.0, 0.0)):
    k = np.arange(n)[:, None] * dt * speed
    return np.array(start) + k * np.array([math.cos(heading), math.sin(heading)])


# -- CTRV ---------------------------------------------------------------------------

def test_ctrv_straight_limit():
    assert np.allclose(ctrv_endpoint((0, 0), 0.0, 1.0, 0.0, 5.0), [5.0, 0.0])


def test_ctrv_half_circle_matches_integration():
    got = ctrv_endpoint((0, 0), 0.0, 1.0, math.pi / 5, 5.0)
    want = oracles.ctrv_integrate((0, 0), 0.0, 1.0, math.pi / 5, 5.0)
    assert np.allclose(got, want, atol=1e-8)
    assert np.allclose(got, [0.0, 2 * 5 / math.pi], atol=1e-12)  # diameter 2 v / w


@given(x=st.floats(-5, 5), y=st.floats(-5, 5), h=angle, v=st.floats(0.1, 2), w=st.floats(-1, 1),
       T=st.floats(0.5, 10))
def test_ctrv_closed_form_matches_integration(x, y, h, v, w, T):
    got = ctrv_endpoint((x, y), h, v, w, T)
    want = oracles.ctrv_integrate((x, y), h, v, w, T, steps=4000)
    assert np.allclose(got, want, atol=1e-6)


@given(h=angle, v=st.floats(0.1, 2), w=st.floats(0.01, 1))
def test_opposite_turn_rates_mirror_about_heading(h, v, w):
    p = np.array([1.0, -2.0])
    a = ctrv_endpoint(p, h, v, w, 8.0) - p
    b = ctrv_endpoint(p, h, v, -w, 8.0) - p
    u = np.array([math.cos(h), math.sin(h)])
    n = np.array([-u[1], u[0]])
    assert abs(a @ u - b @ u) < 1e-9 and abs(a @ n + b @ n) < 1e-9


# -- hypotheses ---------------------------------------------------------------------------

def test_five_hypotheses_from_straight_walk():
    hyps = generate_hypotheses(straight(), 0.1)
    assert [h.turn_rate for h in hyps] == [-0.4, -0.2, 0.0, 0.2, 0.4]
    straight_goal = [h for h in hyps if h.turn_rate == 0.0][0].goal_point
    assert np.allclose(straight_goal, [1.2 * 1.2 + 1.2 * 8.0, 0.0])


@given(h=angle, v=st.floats(0.06, 2.5), seed=st.integers(0, 999))
def test_hypotheses_distinct_and_finite(h, v, seed):
    pos = straight(speed=v, heading=h)
    pos = pos + np.random.default_rng(seed).normal(0, 0.002, pos.shape)
    hyps = generate_hypotheses(pos, 0.1)
    for i, a in enumerate(hyps):
        assert np.all(np.isfinite(a.goal_point))
        for b in hyps[i + 1:]:
            assert np.hypot(*(a.goal_point - b.goal_point)) >= 0.5


def test_stationary_window_single_hypothesis():
    pos = np.full((10, 2), 3.0)
    hyps = generate_hypotheses(pos, 0.1)
    assert len(hyps) == 1 and np.array_equal(hyps[0].goal_point, [3.0, 3.0])


def test_hypotheses_need_two_samples():
    with pytest.raises(ValueError):
        generate_hypotheses(np.zeros((1, 2)), 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        ImmConfig(p_stay=0.0)
    with pytest.raises(ValueError):
        ImmConfig(r=0.0)


@pytest.mark.parametrize("m", [1, 2, 5, 9])
def test_transition_rows_sum_to_one(m):
    pi = transition_matrix(m, 0.9)
    assert np.allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    if m > 1:
        assert np.allclose(np.diag(pi), 0.9)


# -- IMM recursion ------------------------------------------------------------------------

def test_identical_hypotheses_leave_uniform_mu():
    g = GoalHypothesis(np.array([10.0, 0.0]), 0.0, 1.2)
    pos = straight()
    st_ = init_imm(pos, 0.1, hypotheses=[g, g, g])
    for z in pos[2:]:
        st_ = imm_update(st_, z)
        assert np.allclose(st_.mu, 1 / 3, atol=1e-12)


def test_identical_hypotheses_only_mix_nonuniform_mu():
    g = GoalHypothesis(np.array([10.0, 0.0]), 0.0, 1.2)
    st_ = init_imm(straight(), 0.1, hypotheses=[g, g, g])
    st_.mu = np.array([0.7, 0.2, 0.1])
    nxt = imm_update(st_, [0.25, 0.0])
    assert np.allclose(nxt.mu, st_.transition.T @ st_.mu, atol=1e-12)


def test_straight_walk_picks_matching_goal():
    a = GoalHypothesis(np.array([10.0, 0.0]), 0.0, 1.34)
    b = GoalHypothesis(np.array([-2.0, 8.0]), 0.0, 1.34)  # more than 90 degrees away
    pos = straight(n=12, speed=1.34)
    st_ = init_imm(pos, 0.1, hypotheses=[a, b])
    for z in pos[2:]:
        st_ = imm_update(st_, z)
    assert st_.mu[0] > 0.9
    assert map_hypothesis(st_) is a


@given(seed=st.integers(0, 10_000), n=st.integers(3, 40))
def test_mu_stays_on_simplex(seed, n):
    rng = np.random.default_rng(seed)
    pos = np.cumsum(rng.normal(0.1, 0.3, (n, 2)), axis=0)
    st_ = init_imm(pos, 0.1, ImmConfig(), at=1, hypotheses=generate_hypotheses(pos[:2] + [[0, 0], [0.1, 0]], 0.1))
    for z in pos[2:]:
        st_ = imm_update(st_, z)
        assert abs(st_.mu.sum() - 1.0) < 1e-9 and np.all(st_.mu >= 0)
        assert np.allclose(st_.transition.sum(axis=1), 1.0)


def test_covariances_stay_positive_definite():
    rng = np.random.default_rng(0)
    pos = straight()
    st_ = init_imm(pos, 0.1)
    for i in range(10_000):
        st_ = imm_update(st_, rng.normal(0, 2.0, 2) + 0.01 * i)
        if i % 97 == 0 or i == 9_999:
            for f in st_.filters:
                assert np.array_equal(f.cov, f.cov.T)
                np.linalg.cholesky(f.cov)
            np.linalg.cholesky(st_.fused_cov)
    assert abs(st_.mu.sum() - 1.0) < 1e-9


def test_singular_innovation_is_regularised():
    g = GoalHypothesis(np.array([10.0, 0.0]), 0.0, 1.0)
    st_ = init_imm(straight(), 0.1, hypotheses=[g])
    st_.filters = [KalmanFilterState(np.zeros(4), np.zeros((4, 4)), 0.0, 0.0)]
    nxt = imm_update(st_, [0.0, 0.0])
    assert nxt.singular_events == 1 and np.all(np.isfinite(nxt.fused_mean))


def test_measurement_must_be_finite():
    st_ = init_imm(straight(), 0.1)
    with pytest.raises(ValueError):
        imm_update(st_, [np.nan, 0.0])


@given(h=angle, seed=st.integers(0, 1000))
def test_mirrored_track_mirrors_probabilities(h, seed):
    rng = np.random.default_rng(seed)
    pos = straight(speed=1.2) + rng.normal(0, 0.01, (13, 2))
    c, s = math.cos(h), math.sin(h)
    R = np.array([[c, -s], [s, c]])
    pos = pos @ R.T
    mirror = np.array([[c * c - s * s, 2 * c * s], [2 * c * s, s * s - c * c]])  # reflect about heading h
    est = GoalEstimator()
    mu = est.fit(pos, 0.1).mu
    mu_m = est.fit(pos @ mirror.T, 0.1).mu
    if len(mu) == len(mu_m) == 5:
        assert np.allclose(mu, mu_m[::-1], atol=1e-7)


def test_map_converges_to_true_goal():
    """With near-noiseless data and the true goal among the candidates, MAP finds it."""
    cfg = ImmConfig()
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        p0 = rng.uniform(-3, 3, 2)
        heading = rng.uniform(-math.pi, math.pi)
        goals = [ctrv_endpoint(p0, heading, 1.34, w, 8.0) for w in cfg.turn_rates]
        k = int(rng.integers(len(goals)))
        p, v = p0.copy(), 1.0 * np.array([math.cos(heading), math.sin(heading)])
        track = [p.copy()]
        for _ in range(25):
            u = goals[k] - p
            v = v + cfg.steer_gain * 0.1 * (1.34 * u / np.linalg.norm(u) - v)
            p = p + v * 0.1
            track.append(p + rng.normal(0, 1e-4, 2))
        hyps = [GoalHypothesis(g, w, 1.34) for g, w in zip(goals, cfg.turn_rates)]
        st_ = init_imm(np.array(track), 0.1, cfg, hypotheses=hyps)
        for z in track[2:]:
            st_ = imm_update(st_, z)
        hits += map_hypothesis(st_) is hyps[k]
    assert hits >= 95


# -- goal direction ---------------------------------------------------------------------

def _state_with_goal(goal):
    g = GoalHypothesis(np.array(goal, float), 0.0, 1.0)
    return init_imm(straight(), 0.1, hypotheses=[g])


def test_goal_direction_unit():
    assert np.allclose(goal_direction(_state_with_goal((5, 0)), (0, 0)), [1.0, 0.0])


def test_goal_direction_zero_on_arrival():
    assert np.array_equal(goal_direction(_state_with_goal((5, 0)), (5, 0.1)), np.zeros(2))


def test_estimator_direction_for_straight_walk():
    d = GoalEstimator().direction(straight(), 0.1)
    assert np.allclose(d, [1.0, 0.0], atol=1e-6)
