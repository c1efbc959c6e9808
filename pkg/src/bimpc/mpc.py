"""Differentiable two-agent MPC layer.

``forward`` assembles the horizon cost over both grippers' predicted
position, velocity and tactile-embedding trajectories into a box-constrained
QP in the stacked accelerations, solves it, and reports the first-step
actions plus the predicted opening trajectories.  ``backward`` differentiates
the solution through the KKT system with the active set held fixed and chains
the result onto every learnable parameter and onto the input embeddings, so
the layer can sit inside a gradient-based training loop.

The cost carries a compact structure that both directions share.  With
g_k the row of the cumulative-velocity map (so the embedding at step k is
f_k = phi_k + (g_k . a1) alpha1 + (g_k . a2) alpha2, where alpha1 = [A_f; C_f]
and alpha2 = [C_f; A_f]), the tactile part of the Hessian collapses to

    H_tac = [[c11 * Gam, c12 * Gam], [c12 * Gam, c22 * Gam]],
    cij = alphai' Q_f alphaj,   Gam = sum_k w_k g_k g_k'

with w_k the stage weights (terminal step amplified).  Everything
parameter-dependent enters through the three scalars c11, c12, c22 and the
per-step linear terms alphai' Q_f phi_k, which makes the hand-written
vector-Jacobian products short.
"""

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg as sla

from .config import MpcConfig, MpcParams
from .errors import (ConfigError, DimensionMismatch, NonFinite, SolverFailed)
from .lifting import GripperState, position_block, velocity_block, velocity_sum_block
from .qp import (BoxQpSolver, QpProblem, QpSolution, QpStatus, SolverSettings,
                 _solve_kkt, active_set, strict_complementarity_margin)

DEGENERATE_MARGIN = 1e-4


# -- cost structure shared by forward and backward ---------------------------

@lru_cache(maxsize=8)
def _structure(cfg: MpcConfig):
    N, dt = cfg.N, cfg.dt
    Lv = velocity_block(N, dt)
    Lp = position_block(N, dt)
    Ghat = velocity_sum_block(N, dt)[1:]          # rows k = 1..N
    w = np.ones(N)
    w[-1] = cfg.P_q                               # terminal amplification
    wh = np.concatenate([[1.0], w])               # weights for k = 0..N
    Gamma = Ghat.T @ (w[:, None] * Ghat)
    Hv = cfg.Q_v * (Lv.T @ (w[:, None] * Lv))
    hv_base = cfg.Q_v * (Lv.T @ w)                # times v0 gives linear term
    ks = np.arange(1, N + 1, dtype=float)
    Z = np.zeros((N, N))
    I = np.eye(N)
    A = np.vstack([
        np.block([[Lp, Z], [Z, Lp]]),
        np.block([[Lv, Z], [Z, Lv]]),
        np.eye(2 * N),
    ])
    return dict(Lv=Lv, Lp=Lp, Ghat=Ghat, w=w, wh=wh, Gamma=Gamma, Hv=Hv,
                hv_base=hv_base, ks=ks, A=A, I=I)


@dataclass
class AssembleInfo:
    base: np.ndarray          # pre-shift symmetric matrix
    shift: float              # amount added to the diagonal
    vmin: np.ndarray          # eigenvector of the smallest base eigenvalue
    lam_min: float            # smallest base eigenvalue


def _assemble_qf(params: MpcParams, cfg: MpcConfig):
    M = cfg.M
    if params.M != M:
        raise DimensionMismatch("params and config disagree on M")
    B1 = params.Q1 @ params.Q1.T
    B2 = params.Q2 @ params.Q2.T
    off = params.alpha * params.Qc
    base = np.block([[B1, off], [off.T, B2]])
    base = 0.5 * (base + base.T)
    lam, vec = sla.eigh(base, subset_by_index=(0, 0))
    lam_min = float(lam[0])
    shift = max(0.0, cfg.eps - lam_min)
    Q = base + shift * np.eye(2 * M) if shift > 0 else base
    return Q, AssembleInfo(base=base, shift=shift, vmin=vec[:, 0], lam_min=lam_min)


def assemble_qf(params: MpcParams, cfg: MpcConfig) -> np.ndarray:
    """Assembled 2M x 2M tactile weight: PSD diagonal blocks from the
    Cholesky factors, alpha-scaled coupling blocks, then a diagonal shift
    just large enough to keep the smallest eigenvalue at or above eps."""
    return _assemble_qf(params, cfg)[0]


# -- outputs and gradients ----------------------------------------------------

@dataclass
class MpcOutput:
    a_star: np.ndarray                 # (2,) first-step accelerations
    predicted_openings: np.ndarray     # (2, N) positions over the horizon
    qp: QpSolution
    diagnostics: dict


@dataclass
class GradOut:
    """Upstream gradient of a scalar loss w.r.t. the layer outputs."""
    d_openings: np.ndarray | None = None   # (2, N)
    d_a_star: np.ndarray | None = None     # (2,)


@dataclass
class MpcGrads:
    A_f: np.ndarray
    C_f: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    Qc: np.ndarray
    alpha: float
    f1: np.ndarray
    f2: np.ndarray
    degenerate: bool
    margin: float


class MpcEngine:
    """Caches everything that depends only on (params, cfg): the assembled
    tactile weight, the QP Hessian and constraint matrix, and the solver's
    factorization.  Per-call work is assembling the linear term and bounds."""

    def __init__(self, params: MpcParams, cfg: MpcConfig,
                 settings: SolverSettings | None = None):
        self.params = params
        self.cfg = cfg
        self.settings = settings or SolverSettings()
        self.S = _structure(cfg)
        self.Q, self.info = _assemble_qf(params, cfg)
        self.alpha1 = np.concatenate([params.A_f, params.C_f])
        self.alpha2 = np.concatenate([params.C_f, params.A_f])
        self.Qa1 = self.Q @ self.alpha1
        self.Qa2 = self.Q @ self.alpha2
        self.c11 = float(self.alpha1 @ self.Qa1)
        self.c12 = float(self.alpha1 @ self.Qa2)
        self.c22 = float(self.alpha2 @ self.Qa2)
        N = cfg.N
        S = self.S
        H = np.zeros((2 * N, 2 * N))
        H[:N, :N] = self.c11 * S["Gamma"] + S["Hv"] + cfg.Q_a * S["I"]
        H[N:, N:] = self.c22 * S["Gamma"] + S["Hv"] + cfg.Q_a * S["I"]
        H[:N, N:] = self.c12 * S["Gamma"]
        H[N:, :N] = self.c12 * S["Gamma"]
        self.H = H
        self.P = 2.0 * H
        self.A = S["A"]
        self.solver = BoxQpSolver(self.P, self.A, self.settings)

    # -- per-sample assembly -------------------------------------------------
    def _check_inputs(self, s1, s2, f1, f2):
        M = self.cfg.M
        f1 = np.asarray(f1, dtype=float)
        f2 = np.asarray(f2, dtype=float)
        if f1.shape != (M,) or f2.shape != (M,):
            raise DimensionMismatch(f"embeddings must have length {M}")
        if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
            raise NonFinite("embeddings must be finite")
        return f1, f2

    def _phi(self, s1, s2, f1, f2):
        """Columns phi_k (k = 1..N) of the zero-action embedding trajectory."""
        ks = self.S["ks"]
        psi = np.concatenate([s1.v * self.params.A_f + s2.v * self.params.C_f,
                              s2.v * self.params.A_f + s1.v * self.params.C_f])
        phi0 = np.concatenate([f1, f2])
        Phi = phi0[:, None] + np.outer(psi, ks)
        return phi0, psi, Phi

    def linear_term(self, s1, s2, f1, f2):
        """Returns (q, l, u, const) for one sample."""
        cfg, S = self.cfg, self.S
        N = cfg.N
        f1, f2 = self._check_inputs(s1, s2, f1, f2)
        phi0, psi, Phi = self._phi(s1, s2, f1, f2)
        d1 = self.Qa1 @ Phi
        d2 = self.Qa2 @ Phi
        h = np.concatenate([
            S["Ghat"].T @ (S["w"] * d1) + S["hv_base"] * s1.v,
            S["Ghat"].T @ (S["w"] * d2) + S["hv_base"] * s2.v,
        ])
        q = 2.0 * h
        ks = S["ks"]
        p_off = np.concatenate([s1.p + ks * cfg.dt * s1.v,
                                s2.p + ks * cfg.dt * s2.v])
        v_off = np.concatenate([np.full(N, s1.v), np.full(N, s2.v)])
        l = np.concatenate([cfg.p_min - p_off, cfg.v_min - v_off,
                            np.full(2 * N, cfg.a_min)])
        u = np.concatenate([cfg.p_max - p_off, cfg.v_max - v_off,
                            np.full(2 * N, cfg.a_max)])
        all_phi = np.hstack([phi0[:, None], Phi])
        const = float(np.sum(S["wh"] * np.einsum("ij,ij->j", all_phi, self.Q @ all_phi))
                      + cfg.Q_v * (s1.v ** 2 + s2.v ** 2) * np.sum(S["wh"]))
        return q, l, u, const

    def problem(self, s1, s2, f1, f2) -> QpProblem:
        q, l, u, _ = self.linear_term(s1, s2, f1, f2)
        return QpProblem(self.P, q, self.A, l, u)

    # -- forward --------------------------------------------------------------
    def _output_from(self, sol: QpSolution, s1, s2, q, l, u, const) -> MpcOutput:
        cfg, S = self.cfg, self.S
        N = cfg.N
        x = sol.x
        openings = np.vstack([
            S["Lp"] @ x[:N] + s1.p + S["ks"] * cfg.dt * s1.v,
            S["Lp"] @ x[N:] + s2.p + S["ks"] * cfg.dt * s2.v,
        ])
        cost = float(0.5 * x @ self.P @ x + q @ x + const)
        view = _View(self.P, q, self.A, l, u)
        idx, _ = active_set(view, sol, eps_abs=self.settings.eps_abs)
        return MpcOutput(
            a_star=np.array([x[0], x[N]]),
            predicted_openings=openings,
            qp=sol,
            diagnostics={"cost": cost, "active_count": int(idx.shape[0]),
                         "iterations": sol.iterations,
                         "status": sol.status.value},
        )

    def forward(self, s1: GripperState, s2: GripperState, f1, f2,
                warm: QpSolution | None = None) -> MpcOutput:
        q, l, u, const = self.linear_term(s1, s2, f1, f2)
        sol = self.solver.solve(q, l, u, warm=warm)
        if sol.status is not QpStatus.Solved:
            raise SolverFailed(
                f"QP ended with status {sol.status.value} "
                f"(primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})",
                solution=sol)
        return self._output_from(sol, s1, s2, q, l, u, const)

    def forward_batch(self, states1, states2, F1, F2):
        """Vectorized forward over B samples sharing (params, cfg).

        states1, states2: (B, 2) arrays of (p, v); F1, F2: (B, M).
        Returns (outputs, failures): per-sample MpcOutput or None for
        unsolved columns, plus the failed count.
        """
        B = F1.shape[0]
        qs, ls, us, consts = [], [], [], []
        for b in range(B):
            s1 = GripperState(states1[b, 0], states1[b, 1])
            s2 = GripperState(states2[b, 0], states2[b, 1])
            q, l, u, const = self.linear_term(s1, s2, F1[b], F2[b])
            qs.append(q)
            ls.append(l)
            us.append(u)
            consts.append(const)
        sols = self.solver.solve_batch(np.array(qs).T, np.array(ls).T,
                                       np.array(us).T)
        outputs = []
        failures = 0
        for b, sol in enumerate(sols):
            if sol.status is not QpStatus.Solved:
                outputs.append(None)
                failures += 1
                continue
            s1 = GripperState(states1[b, 0], states1[b, 1])
            s2 = GripperState(states2[b, 0], states2[b, 1])
            outputs.append(self._output_from(sol, s1, s2, qs[b], ls[b], us[b],
                                             consts[b]))
        return outputs, failures

    # -- backward ---------------------------------------------------------------
    def backward(self, s1, s2, f1, f2, output: MpcOutput,
                 grad_out: GradOut) -> MpcGrads:
        cfg, S = self.cfg, self.S
        N, M = cfg.N, cfg.M
        if output.qp.status is not QpStatus.Solved:
            raise SolverFailed("cannot differentiate an unsolved QP",
                               solution=output.qp)
        f1, f2 = self._check_inputs(s1, s2, f1, f2)
        q, l, u, _ = self.linear_term(s1, s2, f1, f2)
        prob = QpProblem(self.P, q, self.A, l, u)
        sol = output.qp
        margin = strict_complementarity_margin(prob, sol)
        degenerate = margin <= DEGENERATE_MARGIN

        g_x = np.zeros(2 * N)
        if grad_out.d_openings is not None:
            d_open = np.asarray(grad_out.d_openings, dtype=float)
            if d_open.shape != (2, N):
                raise DimensionMismatch(f"d_openings must be (2, {N})")
            g_x[:N] += S["Lp"].T @ d_open[0]
            g_x[N:] += S["Lp"].T @ d_open[1]
        if grad_out.d_a_star is not None:
            g_x[0] += grad_out.d_a_star[0]
            g_x[N] += grad_out.d_a_star[1]

        idx, side = active_set(prob, sol, eps_abs=self.settings.eps_abs)
        A_act = self.A[idx]
        lam, _ = _solve_kkt(self.P, A_act, -g_x, np.zeros(idx.shape[0]),
                            self.settings.polish_delta)

        x = sol.x
        HB = 2.0 * 0.5 * (np.outer(lam, x) + np.outer(x, lam))   # dL/dH
        hb = 2.0 * lam                                           # dL/dh

        Gamma = S["Gamma"]
        HB11, HB12 = HB[:N, :N], HB[:N, N:]
        HB21, HB22 = HB[N:, :N], HB[N:, N:]
        cb11 = float(np.sum(HB11 * Gamma))
        cb22 = float(np.sum(HB22 * Gamma))
        cb12 = float(np.sum((HB12 + HB21) * Gamma))

        Qb = (cb11 * np.outer(self.alpha1, self.alpha1)
              + cb22 * np.outer(self.alpha2, self.alpha2)
              + cb12 * np.outer(self.alpha1, self.alpha2))
        a1b = 2.0 * cb11 * self.Qa1 + cb12 * self.Qa2
        a2b = 2.0 * cb22 * self.Qa2 + cb12 * self.Qa1

        phi0, psi, Phi = self._phi(s1, s2, f1, f2)
        e1 = S["w"] * (S["Ghat"] @ hb[:N])
        e2 = S["w"] * (S["Ghat"] @ hb[N:])
        Phie1 = Phi @ e1
        Phie2 = Phi @ e2
        a1b += self.Q @ Phie1
        a2b += self.Q @ Phie2
        Qb += np.outer(self.alpha1, Phie1) + np.outer(self.alpha2, Phie2)
        Phib = np.outer(self.Qa1, e1) + np.outer(self.Qa2, e2)

        phi0b = Phib.sum(axis=1)
        psib = Phib @ S["ks"]
        A_fb = s1.v * psib[:M] + s2.v * psib[M:]
        C_fb = s2.v * psib[:M] + s1.v * psib[M:]
        A_fb += a1b[:M] + a2b[M:]
        C_fb += a1b[M:] + a2b[:M]
        f1b = phi0b[:M].copy()
        f2b = phi0b[M:].copy()

        Qb = 0.5 * (Qb + Qb.T)
        if self.info.shift > 0:
            v = self.info.vmin
            Bb = Qb - np.trace(Qb) * np.outer(v, v)
        else:
            Bb = Qb
        Bb11, Bb12 = Bb[:M, :M], Bb[:M, M:]
        Bb21, Bb22 = Bb[M:, :M], Bb[M:, M:]
        Q1b = np.tril((Bb11 + Bb11.T) @ self.params.Q1)
        Q2b = np.tril((Bb22 + Bb22.T) @ self.params.Q2)
        Qcb = self.params.alpha * (Bb12 + Bb21.T)
        alphab = float(np.sum(Bb12 * self.params.Qc)
                       + np.sum(Bb21 * self.params.Qc.T))

        return MpcGrads(A_f=A_fb, C_f=C_fb, Q1=Q1b, Q2=Q2b, Qc=Qcb,
                        alpha=alphab, f1=f1b, f2=f2b,
                        degenerate=degenerate, margin=margin)


class _View:
    """Duck-typed problem view for active-set extraction without copies."""

    def __init__(self, P, q, A, l, u):
        self.P, self.q, self.A, self.l, self.u = P, q, A, l, u
        self.n = P.shape[0]
        self.m = A.shape[0]


# -- module-level spec API -----------------------------------------------------

def build_qp(params: MpcParams, cfg: MpcConfig, s1: GripperState,
             s2: GripperState, f1, f2) -> QpProblem:
    """Assemble the horizon problem as a standalone QpProblem."""
    return MpcEngine(params, cfg).problem(s1, s2, f1, f2)


def qp_constant(params: MpcParams, cfg: MpcConfig, s1, s2, f1, f2) -> float:
    """Constant dropped from the QP objective: the full cost at zero actions.
    objective(x) + qp_constant == full horizon cost for every x."""
    return MpcEngine(params, cfg).linear_term(s1, s2, f1, f2)[3]


def forward(params: MpcParams, cfg: MpcConfig, s1: GripperState,
            s2: GripperState, f1, f2, warm: QpSolution | None = None,
            settings: SolverSettings | None = None) -> MpcOutput:
    return MpcEngine(params, cfg, settings).forward(s1, s2, f1, f2, warm=warm)


def backward(params: MpcParams, cfg: MpcConfig, s1, s2, f1, f2,
             output: MpcOutput, grad_out: GradOut,
             settings: SolverSettings | None = None) -> MpcGrads:
    return MpcEngine(params, cfg, settings).backward(s1, s2, f1, f2, output,
                                                     grad_out)


# -- single-agent layer (the decoupled baseline) -------------------------------

class SingleAgentEngine:
    """One gripper, own-velocity tactile dynamics only: the alpha = 0,
    C_f = 0 special case of the coupled layer, expressed on N variables."""

    def __init__(self, Q_own, A_f, cfg: MpcConfig,
                 settings: SolverSettings | None = None):
        self.cfg = cfg
        self.settings = settings or SolverSettings()
        self.S = _structure(cfg)
        self.Q_own = np.asarray(Q_own, dtype=float)
        self.A_f = np.asarray(A_f, dtype=float)
        if self.Q_own.shape != (cfg.M, cfg.M) or self.A_f.shape != (cfg.M,):
            raise DimensionMismatch("single-agent weight shapes inconsistent")
        self.QA = self.Q_own @ self.A_f
        c_own = float(self.A_f @ self.QA)
        S = self.S
        self.H = c_own * S["Gamma"] + S["Hv"] + cfg.Q_a * S["I"]
        self.P = 2.0 * self.H
        N = cfg.N
        self.A = np.vstack([S["Lp"], S["Lv"], np.eye(N)])
        self.solver = BoxQpSolver(self.P, self.A, self.settings)

    def linear_term(self, s: GripperState, f):
        cfg, S = self.cfg, self.S
        N = cfg.N
        f = np.asarray(f, dtype=float)
        Phi = f[:, None] + np.outer(s.v * self.A_f, S["ks"])
        d = self.QA @ Phi
        h = S["Ghat"].T @ (S["w"] * d) + S["hv_base"] * s.v
        q = 2.0 * h
        p_off = s.p + S["ks"] * cfg.dt * s.v
        v_off = np.full(N, s.v)
        l = np.concatenate([cfg.p_min - p_off, cfg.v_min - v_off,
                            np.full(N, cfg.a_min)])
        u = np.concatenate([cfg.p_max - p_off, cfg.v_max - v_off,
                            np.full(N, cfg.a_max)])
        return q, l, u

    def forward(self, s: GripperState, f, warm: QpSolution | None = None):
        """Returns (a0, openings (N,), QpSolution)."""
        q, l, u = self.linear_term(s, f)
        sol = self.solver.solve(q, l, u, warm=warm)
        if sol.status is not QpStatus.Solved:
            raise SolverFailed(
                f"single-agent QP status {sol.status.value}", solution=sol)
        openings = self.S["Lp"] @ sol.x + s.p + self.S["ks"] * self.cfg.dt * s.v
        return float(sol.x[0]), openings, sol

    def forward_batch(self, states, F):
        B = F.shape[0]
        qs, ls, us = [], [], []
        for b in range(B):
            q, l, u = self.linear_term(GripperState(states[b, 0], states[b, 1]),
                                       F[b])
            qs.append(q)
            ls.append(l)
            us.append(u)
        return self.solver.solve_batch(np.array(qs).T, np.array(ls).T,
                                       np.array(us).T)


def decoupled_weight_blocks(params: MpcParams, cfg: MpcConfig):
    """Per-agent tactile weight blocks of the assembled matrix with the
    coupling scale zeroed.  Feeding these to SingleAgentEngine reproduces the
    coupled layer's per-agent outputs exactly when C_f = 0."""
    p0 = params.copy()
    p0.alpha = 0.0
    Q, _ = _assemble_qf(p0, cfg)
    M = cfg.M
    return Q[:M, :M], Q[M:, M:]


# -- parameter checkpoints -----------------------------------------------------

CHECKPOINT_FORMAT = "bimpc-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: MpcParams, cfg: MpcConfig):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {f: getattr(cfg, f) for f in (
            "N", "M", "dt", "Q_v", "Q_a", "P_q", "eps",
            "p_min", "p_max", "v_min", "v_max", "a_min", "a_max")},
        "params": {
            "A_f": params.A_f.tolist(),
            "C_f": params.C_f.tolist(),
            "Q1": params.Q1.tolist(),
            "Q2": params.Q2.tolist(),
            "Qc": params.Qc.tolist(),
            "alpha": params.alpha,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (params, cfg); validates shapes and that the assembled
    tactile weight respects the eigenvalue floor."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a parameter checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = MpcConfig(**doc["config"])
    p = doc["params"]
    params = MpcParams(A_f=np.array(p["A_f"]), C_f=np.array(p["C_f"]),
                       Q1=np.array(p["Q1"]), Q2=np.array(p["Q2"]),
                       Qc=np.array(p["Qc"]), alpha=p["alpha"])
    if params.M != cfg.M:
        raise DimensionMismatch("checkpoint params do not match config M")
    Q = assemble_qf(params, cfg)
    lam = float(sla.eigh(Q, eigvals_only=True, subset_by_index=(0, 0))[0])
    if lam < cfg.eps - 1e-8:
        raise ConfigError("checkpoint tactile weight violates the PSD floor")
    return params, cfg
