"""Gripper dynamics and horizon-condensed ("lifted") trajectory maps.

Each gripper is a 1-DOF discrete-time double integrator

    p' = p + dt*v + 0.5*dt^2*a
    v' = v + dt*a

and the tactile embedding of agent i evolves with both agents' velocities:

    f' = f + A_f * v_own + C_f * v_other.

Condensing eliminates the states: with the stacked acceleration vector
x = [a1_0..a1_{N-1}, a2_0..a2_{N-1}] the position, velocity and embedding
trajectories are affine maps S x + offset.  The decision vector stays at 2N
entries regardless of the embedding dimension, which is what keeps the QP
small.
"""

from dataclasses import dataclass

import numpy as np

from .config import MpcConfig, MpcParams
from .errors import DimensionMismatch, NonFinite, NonPositiveDt


@dataclass
class GripperState:
    """Opening position (mm) and velocity (mm/s) of one gripper."""
    p: float
    v: float

    def __post_init__(self):
        self.p = float(self.p)
        self.v = float(self.v)
        if not (np.isfinite(self.p) and np.isfinite(self.v)):
            raise NonFinite("gripper state must be finite")


@dataclass
class DoubleIntegrator:
    dt: float
    A_g: np.ndarray
    B_g: np.ndarray


@dataclass
class ActionSequence:
    """Per-agent acceleration sequences, shape (2, N), mm/s^2."""
    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.ndim != 2 or self.a.shape[0] != 2:
            raise DimensionMismatch("actions must have shape (2, N)")
        if not np.all(np.isfinite(self.a)):
            raise NonFinite("actions must be finite")


def make_double_integrator(dt: float) -> DoubleIntegrator:
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    A_g = np.array([[1.0, dt], [0.0, 1.0]])
    B_g = np.array([0.5 * dt * dt, dt])
    return DoubleIntegrator(dt=dt, A_g=A_g, B_g=B_g)


def step(dyn: DoubleIntegrator, s: GripperState, a: float) -> GripperState:
    dt = dyn.dt
    return GripperState(p=s.p + dt * s.v + 0.5 * dt * dt * a, v=s.v + dt * a)


def step_embedding(params: MpcParams, f_own, v_own: float, v_other: float):
    f_own = np.asarray(f_own, dtype=float)
    if f_own.shape != (params.M,):
        raise DimensionMismatch(
            f"embedding must have length {params.M}, got {f_own.shape}")
    return f_own + params.A_f * v_own + params.C_f * v_other


@dataclass
class LiftedSystem:
    """Affine maps from stacked actions x (2N,) to trajectories.

    Sp, Sv : (2N, 2N) agent-block-diagonal maps to positions / velocities at
        steps k = 1..N (agent 1 block first).
    Sf     : (2M(N+1), 2N) map to the concatenated embeddings
        [f1_k; f2_k] for k = 0..N (step-major).
    Offsets carry the contribution of the initial state.
    """
    N: int
    M: int
    Sp: np.ndarray
    Sv: np.ndarray
    Sf: np.ndarray
    p_offset: np.ndarray
    v_offset: np.ndarray
    f_offset: np.ndarray

    def positions(self, x):
        return (self.Sp @ x + self.p_offset).reshape(2, self.N)

    def velocities(self, x):
        return (self.Sv @ x + self.v_offset).reshape(2, self.N)

    def embeddings(self, x):
        return (self.Sf @ x + self.f_offset).reshape(self.N + 1, 2 * self.M)


def velocity_block(N: int, dt: float) -> np.ndarray:
    """(N, N) map from one agent's actions to its velocities at k = 1..N:
    lower triangular with every nonzero entry equal to dt."""
    return dt * np.tril(np.ones((N, N)))

def position_block(N: int, dt: float) -> np.ndarray:
    """(N, N) map to positions at k = 1..N; entry (k, j) is
    dt^2 * (k - j - 1/2) for j < k."""
    k = np.arange(1, N + 1)[:, None]
    j = np.arange(N)[None, :]
    return np.where(j < k, dt * dt * (k - j - 0.5), 0.0)

def velocity_sum_block(N: int, dt: float) -> np.ndarray:
    """(N+1, N) map from one agent's actions to the cumulative velocity sums
    s_k = sum_{j<k} v_j that drive the embedding trajectory: entry (k, j) is
    dt * (k - 1 - j) for j <= k - 2."""
    k = np.arange(N + 1)[:, None]
    j = np.arange(N)[None, :]
    return np.where(j <= k - 2, dt * (k - 1 - j), 0.0)


def build_lifted(params: MpcParams, cfg: MpcConfig, s1: GripperState,
                 s2: GripperState, f1, f2) -> LiftedSystem:
    """Condensed trajectory maps from initial states and embeddings.

    For any action vector x, Sp x + p_offset (and the v/f analogues) equals
    the step-by-step rollout of the dynamics above.
    """
    N, M, dt = cfg.N, cfg.M, cfg.dt
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != (M,) or f2.shape != (M,):
        raise DimensionMismatch(f"embeddings must have length {M}")
    if params.M != M:
        raise DimensionMismatch("params and config disagree on M")

    Lv = velocity_block(N, dt)
    Lp = position_block(N, dt)
    G = velocity_sum_block(N, dt)

    Z = np.zeros((N, N))
    Sv = np.block([[Lv, Z], [Z, Lv]])
    Sp = np.block([[Lp, Z], [Z, Lp]])

    ks = np.arange(1, N + 1, dtype=float)
    p_offset = np.concatenate([s1.p + ks * dt * s1.v, s2.p + ks * dt * s2.v])
    v_offset = np.concatenate([np.full(N, s1.v), np.full(N, s2.v)])

    # embedding rows: f_k = [f1; f2] + k*psi + alpha1*(G_k a1) + alpha2*(G_k a2)
    alpha1 = np.concatenate([params.A_f, params.C_f])
    alpha2 = np.concatenate([params.C_f, params.A_f])
    psi = np.concatenate([s1.v * params.A_f + s2.v * params.C_f,
                          s2.v * params.A_f + s1.v * params.C_f])
    phi0 = np.concatenate([f1, f2])

    Sf = np.zeros((2 * M * (N + 1), 2 * N))
    f_offset = np.zeros(2 * M * (N + 1))
    for k in range(N + 1):
        rows = slice(2 * M * k, 2 * M * (k + 1))
        Sf[rows, :N] = np.outer(alpha1, G[k])
        Sf[rows, N:] = np.outer(alpha2, G[k])
        f_offset[rows] = phi0 + k * psi
    return LiftedSystem(N=N, M=M, Sp=Sp, Sv=Sv, Sf=Sf,
                        p_offset=p_offset, v_offset=v_offset, f_offset=f_offset)


def rollout(params: MpcParams, cfg: MpcConfig, s1: GripperState,
            s2: GripperState, f1, f2, actions: ActionSequence):
    """Recursive reference rollout of the same dynamics.

    Returns (positions (2, N), velocities (2, N), embeddings (N+1, 2M)) for
    steps k = 1..N (k = 0..N for embeddings).  Used as the independent check
    that the condensed maps are assembled correctly.
    """
    a = actions.a
    if a.shape != (2, cfg.N):
        raise DimensionMismatch(f"actions must be (2, {cfg.N})")
    dyn = make_double_integrator(cfg.dt)
    states = [GripperState(s1.p, s1.v), GripperState(s2.p, s2.v)]
    embeds = [np.asarray(f1, dtype=float).copy(),
              np.asarray(f2, dtype=float).copy()]
    pos = np.zeros((2, cfg.N))
    vel = np.zeros((2, cfg.N))
    emb = np.zeros((cfg.N + 1, 2 * cfg.M))
    emb[0] = np.concatenate(embeds)
    for k in range(cfg.N):
        v_now = [states[0].v, states[1].v]
        for i in (0, 1):
            embeds[i] = step_embedding(params, embeds[i], v_now[i], v_now[1 - i])
            states[i] = step(dyn, states[i], a[i, k])
            pos[i, k] = states[i].p
            vel[i, k] = states[i].v
        emb[k + 1] = np.concatenate(embeds)
    return pos, vel, emb
