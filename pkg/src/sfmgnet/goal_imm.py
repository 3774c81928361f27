"""Goal estimation with an interacting multiple model (IMM) filter bank.

Candidate goals are the endpoints of constant turn rate and velocity (CTRV)
motion from the agent's observed state, one per turn rate. Each candidate
drives a linear Kalman filter on ``[px, py, vx, vy]`` whose velocity relaxes
toward the candidate goal at the observed speed. The IMM recursion weighs the
filters by how well they explain the measured positions; the most probable
candidate supplies the goal direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .core import unit_vector

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ImmConfig:
    turn_rates: tuple = (-0.4, -0.2, 0.0, 0.2, 0.4)  # rad/s
    horizon_s: float = 8.0
    q: float = 0.1  # process noise intensity on acceleration
    r: float = 0.05  # measurement noise std, m
    p_stay: float = 0.95
    steer_gain: float = 2.0  # 1/s, velocity relaxation toward the goal
    steer_speed: Optional[float] = 1.34  # None: use the observed speed
    min_speed: float = 0.05
    min_separation: float = 0.5
    arrive_radius: float = 0.3
    init_velocity_std: float = 0.5
    heading_steps: int = 1  # displacements averaged for the hypothesis heading

    def __post_init__(self):
        if not 0.0 < self.p_stay <= 1.0:
            raise ValueError("p_stay must lie in (0, 1]")
        if self.r <= 0 or self.q < 0 or self.horizon_s <= 0:
            raise ValueError("r and horizon_s must be positive, q non-negative")


@dataclass(frozen=True)
class GoalHypothesis:
    goal_point: np.ndarray
    turn_rate: float
    speed: float


@dataclass
class KalmanFilterState:
    mean: np.ndarray  # (4,) px, py, vx, vy
    cov: np.ndarray  # (4, 4)
    q: float
    r: float


@dataclass
class ImmState:
    hypotheses: list
    filters: list
    mu: np.ndarray
    transition: np.ndarray
    dt: float
    steer_gain: float
    steer_speed: Optional[float] = None
    singular_events: int = 0
    fused_mean: Optional[np.ndarray] = None
    fused_cov: Optional[np.ndarray] = None


def ctrv_endpoint(position, heading, speed, turn_rate, horizon_s, eps=1e-9):
    """Closed-form CTRV position after ``horizon_s``; straight line when ``turn_rate`` is ~0."""
    x, y = float(position[0]), float(position[1])
    if abs(turn_rate) < eps:
        return np.array([x + speed * np.cos(heading) * horizon_s,
                         y + speed * np.sin(heading) * horizon_s])
    r = speed / turn_rate
    h1 = heading + turn_rate * horizon_s
    return np.array([x + r * (np.sin(h1) - np.sin(heading)),
                     y + r * (np.cos(heading) - np.cos(h1))])


def generate_hypotheses(positions, dt: float, cfg: ImmConfig = ImmConfig(), at: int = -1):
    """CTRV goal candidates from the state at sample ``at`` of ``positions``.

    Heading and speed come from the displacement ending at that sample. A
    stationary agent yields a single candidate at its position. Candidates
    closer than ``min_separation`` to an earlier one are dropped (the
    straight-line candidate is considered first).
    """
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        raise ValueError("need at least two samples to estimate heading and speed")
    at = at % len(p)
    if at == 0:
        at = 1
    m = max(1, min(cfg.heading_steps, at))
    vel = (p[at] - p[at - m]) / (m * dt)
    speed = float(np.hypot(*vel))
    if speed < cfg.min_speed:
        return [GoalHypothesis(p[at].copy(), 0.0, speed)]
    heading = float(np.arctan2(vel[1], vel[0]))
    rates = sorted(cfg.turn_rates, key=lambda w: (abs(w), w))
    out = []
    for w in rates:
        g = ctrv_endpoint(p[at], heading, speed, w, cfg.horizon_s)
        if all(np.hypot(*(g - h.goal_point)) >= cfg.min_separation for h in out):
            out.append(GoalHypothesis(g, float(w), speed))
    out.sort(key=lambda h: h.turn_rate)
    return out


def transition_matrix(m: int, p_stay: float) -> np.ndarray:
    if m == 1:
        return np.ones((1, 1))
    pi = np.full((m, m), (1.0 - p_stay) / (m - 1))
    np.fill_diagonal(pi, p_stay)
    return pi


_H = np.hstack([np.eye(2), np.zeros((2, 2))])


def _dynamics(dt, k, q):
    a = 1.0 - k * dt
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    F[2, 2] = F[3, 3] = a
    G = np.vstack([0.5 * dt * dt * np.eye(2), dt * np.eye(2)])
    return F, q * G @ G.T


def init_imm(positions, dt: float, cfg: ImmConfig = ImmConfig(), at: int = 1,
             hypotheses=None) -> ImmState:
    """Filter bank initialised at sample ``at`` (velocity from the preceding step)."""
    p = np.asarray(positions, dtype=float)
    hyps = hypotheses if hypotheses is not None else generate_hypotheses(p, dt, cfg, at=at)
    vel = (p[at] - p[at - 1]) / dt
    mean = np.concatenate([p[at], vel])
    cov = np.diag([cfg.r**2, cfg.r**2, cfg.init_velocity_std**2, cfg.init_velocity_std**2])
    filters = [KalmanFilterState(mean.copy(), cov.copy(), cfg.q, cfg.r) for _ in hyps]
    m = len(hyps)
    return ImmState(hyps, filters, np.full(m, 1.0 / m), transition_matrix(m, cfg.p_stay), dt,
                    cfg.steer_gain, cfg.steer_speed, fused_mean=mean.copy(), fused_cov=cov.copy())


def _predict(f: KalmanFilterState, hyp: GoalHypothesis, dt, k, speed):
    F, Q = _dynamics(dt, k, f.q)
    u = (hyp.speed if speed is None else speed) * unit_vector(f.mean[:2], hyp.goal_point)
    mean = F @ f.mean
    mean[2:] += k * dt * u
    return mean, F @ f.cov @ F.T + Q


def imm_update(state: ImmState, measurement) -> ImmState:
    """One IMM cycle: mix, predict, update each filter, reweigh, fuse."""
    z = np.asarray(measurement, dtype=float).reshape(2)
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement must be finite")
    m = len(state.filters)
    pi, mu = state.transition, state.mu
    c = pi.T @ mu  # predicted model probabilities
    w = pi * mu[:, None] / np.where(c > 0, c, 1.0)[None, :]  # w[i, j] = P(i | j)
    means = np.array([f.mean for f in state.filters])
    covs = np.array([f.cov for f in state.filters])

    new_filters, loglik = [], np.zeros(m)
    singular = state.singular_events
    for j in range(m):
        x0 = w[:, j] @ means
        d = means - x0
        P0 = np.einsum("i,ikl->kl", w[:, j], covs + d[:, :, None] * d[:, None, :])
        f = state.filters[j]
        mean, cov = _predict(KalmanFilterState(x0, P0, f.q, f.r), state.hypotheses[j],
                             state.dt, state.steer_gain, state.steer_speed)
        S = _H @ cov @ _H.T + f.r**2 * np.eye(2)
        S = 0.5 * (S + S.T)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            S = S + 1e-9 * np.eye(2)
            singular += 1
            L = np.linalg.cholesky(S)
        nu = z - mean[:2]
        K = np.linalg.solve(S, _H @ cov).T
        mean = mean + K @ nu
        IKH = np.eye(4) - K @ _H
        cov = IKH @ cov @ IKH.T + f.r**2 * K @ K.T  # Joseph form
        cov = 0.5 * (cov + cov.T)
        sol = np.linalg.solve(L, nu)
        loglik[j] = -0.5 * float(sol @ sol) - float(np.sum(np.log(np.diag(L)))) - LOG_2PI
        new_filters.append(KalmanFilterState(mean, cov, f.q, f.r))

    with np.errstate(divide="ignore"):
        logpost = loglik + np.log(c)
    new_mu = np.exp(logpost - logsumexp(logpost))
    new_mu /= new_mu.sum()
    means = np.array([f.mean for f in new_filters])
    fused = new_mu @ means
    d = means - fused
    fused_cov = np.einsum("j,jkl->kl", new_mu,
                          np.array([f.cov for f in new_filters]) + d[:, :, None] * d[:, None, :])
    return ImmState(state.hypotheses, new_filters, new_mu, state.transition, state.dt,
                    state.steer_gain, state.steer_speed, singular, fused, fused_cov)


def map_hypothesis(state: ImmState) -> GoalHypothesis:
    return state.hypotheses[int(np.argmax(state.mu))]


def goal_direction(state: ImmState, position, arrive_radius: float = 0.3) -> np.ndarray:
    """Unit vector toward the most probable goal; zero within ``arrive_radius`` of it."""
    g = map_hypothesis(state).goal_point
    p = np.asarray(position, dtype=float)
    if np.hypot(*(g - p)) < arrive_radius:
        return np.zeros(2)
    return unit_vector(p, g)


class GoalEstimator:
    """Fits an IMM bank to a window of observed positions.

    Candidates are generated from the state at the start of the window and
    the remaining samples are fed as measurements, so the estimate reflects
    which candidate the observed motion actually followed.
    """

    def __init__(self, cfg: Optional[ImmConfig] = None, hyp_at: int = -1):
        self.cfg = cfg or ImmConfig()
        self.hyp_at = hyp_at

    def fit(self, positions, dt: float) -> ImmState:
        p = np.asarray(positions, dtype=float)
        if len(p) < 2:
            raise ValueError("need at least two samples")
        hyps = generate_hypotheses(p, dt, self.cfg, at=self.hyp_at)
        state = init_imm(p, dt, self.cfg, at=1, hypotheses=hyps)
        for z in p[2:]:
            state = imm_update(state, z)
        return state

    def goal(self, positions, dt: float) -> np.ndarray:
        return map_hypothesis(self.fit(positions, dt)).goal_point.copy()

    def direction(self, positions, dt: float) -> np.ndarray:
        p = np.asarray(positions, dtype=float)
        return goal_direction(self.fit(p, dt), p[-1], self.cfg.arrive_radius)
