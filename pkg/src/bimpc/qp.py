"""Dense convex QP solver for box-constrained problems.

Solves

    minimize    0.5 x' P x + q' x
    subject to  l <= A x <= u

with an operator-splitting (ADMM) iteration: the x-update solves the
normal-equations system (P + sigma*I + A' diag(rho) A) once per
factorization, the z-update projects onto [l, u], and the scaled dual y
accumulates the constraint violation.  Constraint rows are equilibrated to
unit inf-norm internally; termination is always tested on residuals of the
original, unscaled problem.

A solution-polishing step re-solves the KKT system restricted to the active
constraints, which typically leaves residuals at linear-algebra precision.
That matters downstream: the differentiable layer built on top of this
solver differentiates the same active-set KKT system, and equality of the
decoupled multi-agent problem with two independent single-agent problems is
only observable when both are solved essentially exactly.

Problems here are small (tens of variables), so everything is dense.
"""

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, NonFinite

_EQ_TOL = 1e-10          # rows with u - l below this are treated as equalities
_RHO_EQ_BOOST = 1e3      # penalty boost on equality rows
_RHO_CLIP = (1e-6, 1e6)


class QpStatus(enum.Enum):
    Solved = "solved"
    MaxIter = "max_iter"
    PrimalInfeasible = "primal_infeasible"
    DualInfeasible = "dual_infeasible"


@dataclass
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    rho: float = 0.1
    sigma: float = 1e-6
    max_iter: int = 4000
    warm_start: bool = True
    # plumbing knobs below; the defaults are fine for the MPC workload
    alpha_relax: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    eps_pinf: float = 1e-5
    eps_dinf: float = 1e-5
    polish: bool = True
    polish_delta: float = 1e-9

    def __post_init__(self):
        for name in ("eps_abs", "eps_rel", "rho", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


class QpProblem:
    """Validated problem data.  P is symmetrized at construction; P, q, A
    must be finite, bounds may be +-inf but never NaN, and l <= u."""

    def __init__(self, P, q, A, l, u):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        q = np.atleast_1d(np.asarray(q, dtype=float))
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = A.reshape(1, -1)
        l = np.atleast_1d(np.asarray(l, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        n = q.shape[0]
        m = A.shape[0] if A.size else l.shape[0]
        if P.shape != (n, n):
            raise DimensionMismatch(f"P must be ({n},{n}), got {P.shape}")
        if A.shape not in ((m, n), (0, n)):
            raise DimensionMismatch(f"A must be ({m},{n}), got {A.shape}")
        if l.shape != (m,) or u.shape != (m,):
            raise DimensionMismatch("l and u must have one entry per A row")
        for name, arr in (("P", P), ("q", q), ("A", A)):
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"{name} contains NaN or Inf")
        if np.any(np.isnan(l)) or np.any(np.isnan(u)):
            raise NonFinite("bounds contain NaN")
        if np.any(l > u):
            raise NonFinite("lower bound exceeds upper bound")
        self.P = 0.5 * (P + P.T)
        self.q = q
        self.A = A.reshape(m, n)
        self.l = l
        self.u = u
        self.n = n
        self.m = m

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def min_eigenvalue(self) -> float:
        return float(sla.eigh(self.P, eigvals_only=True, subset_by_index=(0, 0))[0])


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: QpStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    comp_residual: float = 0.0
    polished: bool = False


def kkt_residuals(problem: QpProblem, sol) -> tuple:
    """Primal, dual and complementarity residuals (inf norms) at a candidate
    point.  ``sol`` may be a QpSolution or an (x, y) pair.  Pure function."""
    if isinstance(sol, QpSolution):
        x, y = sol.x, sol.y
    else:
        x, y = sol
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (problem.n,) or y.shape != (problem.m,):
        raise DimensionMismatch("solution shapes do not match problem")
    Ax = problem.A @ x
    below = np.where(np.isfinite(problem.l), np.maximum(problem.l - Ax, 0.0), 0.0)
    above = np.where(np.isfinite(problem.u), np.maximum(Ax - problem.u, 0.0), 0.0)
    primal = float(np.max(np.maximum(below, above), initial=0.0))
    dual = float(np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ y), initial=0.0))
    y_pos = np.maximum(y, 0.0)
    y_neg = np.maximum(-y, 0.0)
    fin_u = np.isfinite(problem.u)
    fin_l = np.isfinite(problem.l)
    slack_u = np.where(fin_u, np.maximum(problem.u - Ax, 0.0), 0.0)
    slack_l = np.where(fin_l, np.maximum(Ax - problem.l, 0.0), 0.0)
    # at an infinite bound the multiplier itself must vanish
    comp_u = np.where(fin_u, y_pos * slack_u, y_pos)
    comp_l = np.where(fin_l, y_neg * slack_l, y_neg)
    comp = float(np.max(np.maximum(comp_u, comp_l), initial=0.0))
    return primal, dual, comp


def active_set(problem: QpProblem, sol: QpSolution, eps_abs: float = 1e-6,
               tol_mult: float = 10.0):
    """Indices and sides of the constraints active at the solution.

    Row i counts as active when |Ax - l|_i or |u - Ax|_i is within
    tol_mult * eps_abs.  Returns (idx, side) with side -1 for lower, +1 for
    upper and 0 for an equality row (l == u).
    """
    tol = tol_mult * eps_abs
    Ax = problem.A @ sol.x
    lo = np.isfinite(problem.l) & (np.abs(Ax - problem.l) <= tol)
    hi = np.isfinite(problem.u) & (np.abs(problem.u - Ax) <= tol)
    eq = (problem.u - problem.l) <= _EQ_TOL
    idx = np.where(lo | hi)[0]
    side = np.zeros(idx.shape[0], dtype=int)
    for j, i in enumerate(idx):
        if eq[i]:
            side[j] = 0
        elif lo[i] and hi[i]:
            side[j] = 0  # degenerate sliver of a box; treat as pinned
        elif lo[i]:
            side[j] = -1
        else:
            side[j] = 1
    return idx, side


def strict_complementarity_margin(problem: QpProblem, sol: QpSolution) -> float:
    """min over rows of max(primal gap, |dual|): small values mean some
    constraint is weakly active and the solution map is not differentiable."""
    Ax = problem.A @ sol.x
    gap_l = np.where(np.isfinite(problem.l), Ax - problem.l, np.inf)
    gap_u = np.where(np.isfinite(problem.u), problem.u - Ax, np.inf)
    gap = np.maximum(np.minimum(gap_l, gap_u), 0.0)
    margins = np.maximum(gap, np.abs(sol.y))
    return float(np.min(margins, initial=np.inf))


def _solve_kkt(P, A_act, rhs_top, rhs_bot, delta, refine=2):
    """Solve the saddle system [[P, A'],[A, 0]] via a delta-regularized LU
    with iterative refinement.  Returns (x, nu)."""
    n = P.shape[0]
    ma = A_act.shape[0]
    if ma == 0:
        try:
            c, low = sla.cho_factor(P, check_finite=False)
            return sla.cho_solve((c, low), rhs_top, check_finite=False), np.zeros(0)
        except np.linalg.LinAlgError:
            x, *_ = np.linalg.lstsq(P, rhs_top, rcond=None)
            return x, np.zeros(0)
    K = np.zeros((n + ma, n + ma))
    K[:n, :n] = P
    K[:n, n:] = A_act.T
    K[n:, :n] = A_act
    Kreg = K.copy()
    Kreg[:n, :n] += delta * np.eye(n)
    Kreg[n:, n:] -= delta * np.eye(ma)
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        return sol[:n], sol[n:]
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(refine):
        r = rhs - K @ sol
        sol = sol + sla.lu_solve(lu, r, check_finite=False)
    return sol[:n], sol[n:]


class BoxQpSolver:
    """ADMM solver with cached factorization.

    The (P, A) pair is fixed at construction so the normal-equations
    factorization is reused across solves that only change (q, l, u), which
    is exactly the receding-horizon workload.  Instances are single-owner;
    run separate instances in separate threads.
    """

    def __init__(self, P, A, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        P = np.atleast_2d(np.asarray(P, dtype=float))
        A = np.asarray(A, dtype=float).reshape(-1, P.shape[0])
        self.n = P.shape[0]
        self.m = A.shape[0]
        self.P = 0.5 * (P + P.T)
        self.A = A
        # row equilibration: unit inf-norm rows
        norms = np.max(np.abs(A), axis=1, initial=0.0) if self.m else np.zeros(0)
        self.d = np.where(norms > 0, 1.0 / np.maximum(norms, 1e-300), 1.0)
        self.As = A * self.d[:, None]
        self._rho_base = None
        self._chol = None

    # -- factorization ----------------------------------------------------
    def _factor(self, rho_vec):
        K = self.P + self.settings.sigma * np.eye(self.n)
        if self.m:
            K = K + (self.As.T * rho_vec) @ self.As
        self._chol = sla.cho_factor(K, check_finite=False)

    def _rho_vec(self, rho_scalar, eq_mask):
        rho = np.full(self.m, rho_scalar)
        rho[eq_mask] *= _RHO_EQ_BOOST
        return rho

    # -- single problem ----------------------------------------------------
    def solve(self, q, l, u, warm: QpSolution | None = None) -> QpSolution:
        """Solve for one (q, l, u) right-hand side."""
        st = self.settings
        q = np.asarray(q, dtype=float)
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)
        ls = self.d * l
        us = self.d * u
        eq_mask = (u - l) <= _EQ_TOL
        rho_scalar = st.rho
        rho = self._rho_vec(rho_scalar, eq_mask)
        self._factor(rho)

        if warm is not None and st.warm_start:
            x = np.array(warm.x, dtype=float)
            yt = np.asarray(warm.y, dtype=float) / np.where(self.d > 0, self.d, 1.0)
        else:
            x = np.zeros(self.n)
            yt = np.zeros(self.m)
        asx = self.As @ x
        z = np.clip(asx, ls, us)

        status = QpStatus.MaxIter
        r_p = r_d = np.inf
        it = 0
        x_prev = x.copy()
        yt_prev = yt.copy()
        for it in range(1, st.max_iter + 1):
            rhs = st.sigma * x - q + self.As.T @ (rho * z - yt)
            xt = sla.cho_solve(self._chol, rhs, check_finite=False)
            zt = self.As @ xt
            x_new = st.alpha_relax * xt + (1 - st.alpha_relax) * x
            z_pre = st.alpha_relax * zt + (1 - st.alpha_relax) * z
            z = np.clip(z_pre + yt / rho, ls, us)
            yt = yt + rho * (z_pre - z)
            asx = st.alpha_relax * zt + (1 - st.alpha_relax) * asx
            x = x_new

            # residuals in original units
            Ax = asx / self.d if self.m else np.zeros(0)
            z_orig = z / self.d if self.m else np.zeros(0)
            Px = self.P @ x
            Aty = self.As.T @ yt if self.m else np.zeros(self.n)
            r_p = float(np.max(np.abs(Ax - z_orig), initial=0.0))
            r_d = float(np.max(np.abs(Px + q + Aty), initial=0.0))
            eps_p = st.eps_abs + st.eps_rel * max(
                np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z_orig), initial=0.0))
            eps_d = st.eps_abs + st.eps_rel * max(
                np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                np.max(np.abs(q), initial=0.0))
            if r_p <= eps_p and r_d <= eps_d:
                status = QpStatus.Solved
                break
            if not np.isfinite(r_p) or not np.isfinite(r_d):
                break

            if it % st.adaptive_rho_interval == 0:
                infeas = self._check_infeasibility(
                    x - x_prev, (yt - yt_prev) * self.d, q, l, u)
                if infeas is not None:
                    status = infeas
                    break
                x_prev = x.copy()
                yt_prev = yt.copy()
                if st.adaptive_rho:
                    new_rho = self._adapt_rho(
                        rho_scalar, r_p, r_d, Ax, z_orig, Px, Aty, q)
                    if new_rho != rho_scalar:
                        rho_scalar = new_rho
                        rho = self._rho_vec(rho_scalar, eq_mask)
                        self._factor(rho)

        y = self.d * yt
        sol = QpSolution(x=x, y=y, status=status, primal_residual=r_p,
                         dual_residual=r_d, iterations=it)
        if status in (QpStatus.Solved, QpStatus.MaxIter) and st.polish:
            self._polish(sol, q, l, u)
        self._finalize(sol, q, l, u)
        return sol

    # -- batched problems --------------------------------------------------
    def solve_batch(self, Q, L, U, warm_x=None, warm_y=None):
        """Solve a batch of problems sharing (P, A): Q, L, U are (n, B) and
        (m, B) column-stacked right-hand sides.  Columns are frozen once they
        converge.  Returns a list of QpSolution in column order."""
        st = self.settings
        Q = np.asarray(Q, dtype=float)
        L = np.asarray(L, dtype=float)
        U = np.asarray(U, dtype=float)
        B = Q.shape[1]
        Ls = self.d[:, None] * L
        Us = self.d[:, None] * U
        eq_mask = np.zeros(self.m, dtype=bool)  # batched workload has no equalities
        rho_scalar = st.rho
        rho = self._rho_vec(rho_scalar, eq_mask)[:, None]
        self._factor(rho[:, 0])

        if warm_x is not None:
            X = np.array(warm_x, dtype=float)
            Yt = np.asarray(warm_y, dtype=float) / self.d[:, None]
        else:
            X = np.zeros((self.n, B))
            Yt = np.zeros((self.m, B))
        AsX = self.As @ X
        Z = np.clip(AsX, Ls, Us)

        done = np.zeros(B, dtype=bool)
        iters = np.zeros(B, dtype=int)
        rps = np.full(B, np.inf)
        rds = np.full(B, np.inf)
        it = 0
        for it in range(1, st.max_iter + 1):
            rhs = st.sigma * X - Q + self.As.T @ (rho * Z - Yt)
            Xt = sla.cho_solve(self._chol, rhs, check_finite=False)
            Zt = self.As @ Xt
            X_new = st.alpha_relax * Xt + (1 - st.alpha_relax) * X
            Z_pre = st.alpha_relax * Zt + (1 - st.alpha_relax) * Z
            Z_new = np.clip(Z_pre + Yt / rho, Ls, Us)
            Yt_new = Yt + rho * (Z_pre - Z_new)
            AsX_new = st.alpha_relax * Zt + (1 - st.alpha_relax) * AsX

            X = np.where(done, X, X_new)
            Z = np.where(done, Z, Z_new)
            Yt = np.where(done, Yt, Yt_new)
            AsX = np.where(done, AsX, AsX_new)

            AX = AsX / self.d[:, None]
            Zo = Z / self.d[:, None]
            PX = self.P @ X
            AtY = self.As.T @ Yt
            r_p = np.max(np.abs(AX - Zo), axis=0, initial=0.0)
            r_d = np.max(np.abs(PX + Q + AtY), axis=0, initial=0.0)
            eps_p = st.eps_abs + st.eps_rel * np.maximum(
                np.max(np.abs(AX), axis=0, initial=0.0),
                np.max(np.abs(Zo), axis=0, initial=0.0))
            eps_d = st.eps_abs + st.eps_rel * np.maximum.reduce([
                np.max(np.abs(PX), axis=0, initial=0.0),
                np.max(np.abs(AtY), axis=0, initial=0.0),
                np.max(np.abs(Q), axis=0, initial=0.0)])
            newly = (~done) & (r_p <= eps_p) & (r_d <= eps_d)
            iters[newly] = it
            rps[newly] = r_p[newly]
            rds[newly] = r_d[newly]
            done |= newly
            if np.all(done):
                break
            if st.adaptive_rho and it % st.adaptive_rho_interval == 0:
                live = ~done
                ratio = np.median(
                    (r_p[live] / np.maximum(np.max(np.abs(AX[:, live]), axis=0, initial=0.0), 1e-10))
                    / np.maximum(r_d[live] / np.maximum(np.maximum(
                        np.max(np.abs(PX[:, live]), axis=0, initial=0.0),
                        np.max(np.abs(Q[:, live]), axis=0, initial=0.0)), 1e-10), 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    rho_scalar = float(np.clip(rho_scalar * np.sqrt(ratio), *_RHO_CLIP))
                    rho = self._rho_vec(rho_scalar, eq_mask)[:, None]
                    self._factor(rho[:, 0])

        sols = []
        for b in range(B):
            status = QpStatus.Solved if done[b] else QpStatus.MaxIter
            sol = QpSolution(
                x=X[:, b].copy(), y=(self.d * Yt[:, b]), status=status,
                primal_residual=float(rps[b]) if done[b] else float(r_p[b]),
                dual_residual=float(rds[b]) if done[b] else float(r_d[b]),
                iterations=int(iters[b]) if done[b] else it)
            if st.polish:
                self._polish(sol, Q[:, b], L[:, b], U[:, b])
            self._finalize(sol, Q[:, b], L[:, b], U[:, b])
            sols.append(sol)
        return sols

    # -- internals ----------------------------------------------------------
    def _adapt_rho(self, rho_scalar, r_p, r_d, Ax, z, Px, Aty, q):
        denom_p = max(np.max(np.abs(Ax), initial=0.0),
                      np.max(np.abs(z), initial=0.0), 1e-10)
        denom_d = max(np.max(np.abs(Px), initial=0.0),
                      np.max(np.abs(Aty), initial=0.0),
                      np.max(np.abs(q), initial=0.0), 1e-10)
        ratio = (r_p / denom_p) / max(r_d / denom_d, 1e-16)
        if ratio > 5.0 or ratio < 0.2:
            return float(np.clip(rho_scalar * np.sqrt(ratio), *_RHO_CLIP))
        return rho_scalar

    def _check_infeasibility(self, dx, dy, q, l, u):
        st = self.settings
        ndy = np.max(np.abs(dy), initial=0.0)
        if ndy > 1e-12:
            dyn = dy / ndy
            sup = np.where(np.isfinite(u), u * np.maximum(dyn, 0.0), 0.0)
            inf_ = np.where(np.isfinite(l), l * np.minimum(dyn, 0.0), 0.0)
            unbounded_hit = (np.any(~np.isfinite(u) & (dyn > st.eps_pinf))
                             or np.any(~np.isfinite(l) & (dyn < -st.eps_pinf)))
            if (not unbounded_hit
                    and np.max(np.abs(self.A.T @ dyn), initial=0.0) <= st.eps_pinf
                    and float(np.sum(sup + inf_)) <= -st.eps_pinf):
                return QpStatus.PrimalInfeasible
        ndx = np.max(np.abs(dx), initial=0.0)
        if ndx > 1e-12:
            dxn = dx / ndx
            Adx = self.A @ dxn if self.m else np.zeros(0)
            ok_dir = np.all(
                np.where(np.isfinite(u), Adx <= st.eps_dinf, True)
                & np.where(np.isfinite(l), Adx >= -st.eps_dinf, True))
            if (np.max(np.abs(self.P @ dxn), initial=0.0) <= st.eps_dinf
                    and q @ dxn <= -st.eps_dinf and ok_dir):
                return QpStatus.DualInfeasible
        return None

    def _polish(self, sol: QpSolution, q, l, u):
        st = self.settings
        tol = 10.0 * st.eps_abs
        Ax = self.A @ sol.x if self.m else np.zeros(0)
        lo = np.isfinite(l) & (np.abs(Ax - l) <= tol)
        hi = np.isfinite(u) & (np.abs(u - Ax) <= tol)
        act = lo | hi
        idx = np.where(act)[0]
        b = np.where(lo[idx] & hi[idx], 0.5 * (l[idx] + u[idx]),
                     np.where(lo[idx], l[idx], u[idx]))
        A_act = self.A[idx]
        x_new, nu = _solve_kkt(self.P, A_act, -q, b, st.polish_delta)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(nu))):
            return
        y_new = np.zeros(self.m)
        y_new[idx] = nu
        prob = _RawView(self.P, q, self.A, l, u)
        old = kkt_residuals(prob, (sol.x, sol.y))
        new = kkt_residuals(prob, (x_new, y_new))
        if max(new) <= max(max(old), 1e-30):
            sol.x = x_new
            sol.y = y_new
            sol.polished = True

    def _finalize(self, sol: QpSolution, q, l, u):
        prob = _RawView(self.P, q, self.A, l, u)
        p, d, c = kkt_residuals(prob, (sol.x, sol.y))
        sol.primal_residual = p
        sol.dual_residual = d
        sol.comp_residual = c
        if sol.status in (QpStatus.Solved, QpStatus.MaxIter):
            st = self.settings
            eps_p = st.eps_abs + st.eps_rel * np.max(np.abs(self.A @ sol.x), initial=0.0)
            eps_d = st.eps_abs + st.eps_rel * max(
                np.max(np.abs(self.P @ sol.x), initial=0.0),
                np.max(np.abs(q), initial=0.0))
            sol.status = (QpStatus.Solved if (p <= eps_p and d <= eps_d)
                          else QpStatus.MaxIter)


class _RawView:
    """Duck-typed QpProblem view over already-validated arrays (no copies)."""

    def __init__(self, P, q, A, l, u):
        self.P, self.q, self.A, self.l, self.u = P, q, A, l, u
        self.n = P.shape[0]
        self.m = A.shape[0]


def solve(problem: QpProblem, settings: SolverSettings | None = None,
          warm: QpSolution | None = None) -> QpSolution:
    """One-shot solve of a QpProblem.  Deterministic given (problem,
    settings, warm); infeasibility is reported in the status, never raised."""
    solver = BoxQpSolver(problem.P, problem.A, settings)
    return solver.solve(problem.q, problem.l, problem.u, warm=warm)


# -- debug dump format -------------------------------------------------------

def dump_qp(problem: QpProblem, path_or_file):
    """Plain-text dump for failing-case triage: header 'QP n m', then
    row-major P, q, A, l, u blocks separated by blank lines."""
    def _write(fh):
        fh.write(f"QP {problem.n} {problem.m}\n")
        blocks = [problem.P, problem.q.reshape(1, -1), problem.A,
                  problem.l.reshape(1, -1), problem.u.reshape(1, -1)]
        for blk in blocks:
            fh.write("\n")
            for row in np.atleast_2d(blk):
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "w") as fh:
            _write(fh)
    else:
        _write(path_or_file)


def load_qp(path_or_file) -> QpProblem:
    """Inverse of dump_qp."""
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file) as fh:
            text = fh.read()
    else:
        text = path_or_file.read()
    lines = [ln for ln in text.splitlines()]
    header = lines[0].split()
    if len(header) != 3 or header[0] != "QP":
        raise NonFinite("not a QP dump: bad header")
    n, m = int(header[1]), int(header[2])
    rows = [np.array([float(v) for v in ln.split()]) for ln in lines[1:] if ln.strip()]
    P = np.vstack(rows[:n])
    q = rows[n]
    A = np.vstack(rows[n + 1:n + 1 + m]) if m else np.zeros((0, n))
    l = rows[n + 1 + m]
    u = rows[n + 2 + m]
    return QpProblem(P, q, A, l, u)
