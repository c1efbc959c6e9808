import numpy as np
import pytest
from scipy import linalg as sla

from bimpc.config import MpcConfig, MpcParams, init_params
from bimpc.errors import ConfigError, SolverFailed
from bimpc.lifting import ActionSequence, GripperState, rollout
from bimpc.mpc import (GradOut, MpcEngine, SingleAgentEngine, assemble_qf,
                       backward, build_qp, decoupled_weight_blocks, forward,
                       load_checkpoint, qp_constant, save_checkpoint)
from bimpc.qp import SolverSettings, solve


def _rand_params(rng, M, scale=0.5):
    return MpcParams(
        A_f=scale * rng.standard_normal(M),
        C_f=scale * rng.standard_normal(M),
        Q1=np.tril(rng.standard_normal((M, M))) * 0.4 + np.eye(M),
        Q2=np.tril(rng.standard_normal((M, M))) * 0.4 + np.eye(M),
        Qc=0.3 * rng.standard_normal((M, M)),
        alpha=0.7,
    )


def _rand_inputs(rng, cfg, v_scale=3.0):
    s1 = GripperState(rng.uniform(20, 60), rng.uniform(-v_scale, v_scale))
    s2 = GripperState(rng.uniform(20, 60), rng.uniform(-v_scale, v_scale))
    f1 = rng.standard_normal(cfg.M)
    f2 = rng.standard_normal(cfg.M)
    return s1, s2, f1, f2


def eq2_cost(params, cfg, s1, s2, f1, f2, actions):
    """Literal stage-plus-terminal cost evaluated on a recursive rollout:
    the independent reference for the condensed quadratic objective."""
    Q = assemble_qf(params, cfg)
    pos, vel, emb = rollout(params, cfg, s1, s2, f1, f2, actions)
    a = actions.a
    v0 = np.array([s1.v, s2.v])
    total = 0.0
    for k in range(cfg.N):
        fk = emb[k]
        vk = v0 if k == 0 else vel[:, k - 1]
        total += fk @ Q @ fk
        total += cfg.Q_v * np.sum(vk ** 2) + cfg.Q_a * np.sum(a[:, k] ** 2)
    fN = emb[cfg.N]
    vN = vel[:, cfg.N - 1]
    total += cfg.P_q * (fN @ Q @ fN + cfg.Q_v * np.sum(vN ** 2))
    return total


class TestAssembleQf:
    def test_alpha_zero_block_diagonal(self):
        rng = np.random.default_rng(0)
        cfg = MpcConfig(N=3, M=4)
        p = _rand_params(rng, 4)
        p.alpha = 0.0
        Q = assemble_qf(p, cfg)
        assert np.allclose(Q[:4, 4:], 0.0)
        assert np.allclose(Q[4:, :4], 0.0)

    def test_identity_factor_spectrum(self):
        cfg = MpcConfig(N=2, M=3)
        p = MpcParams(A_f=np.zeros(3), C_f=np.zeros(3),
                      Q1=np.eye(3), Q2=np.eye(3), Qc=np.eye(3), alpha=1.0)
        Q = assemble_qf(p, cfg)
        lam = np.linalg.eigvalsh(Q)
        # pre-shift spectrum is {0, 2}; the floor lifts the bottom to eps
        assert lam[0] == pytest.approx(cfg.eps, abs=1e-12)
        assert lam[-1] == pytest.approx(2.0 + cfg.eps, abs=1e-12)

    def test_seeded_draws_respect_floor(self):
        rng = np.random.default_rng(1)
        cfg = MpcConfig(N=2, M=6)
        for _ in range(50):
            p = _rand_params(rng, 6, scale=1.5)
            p.alpha = float(rng.uniform(-3, 3))
            Q = assemble_qf(p, cfg)
            lam = float(sla.eigh(Q, eigvals_only=True, subset_by_index=(0, 0))[0])
            assert lam >= cfg.eps - 1e-10
            assert np.allclose(Q, Q.T)


class TestBuildQp:
    def test_rest_zero_embedding_is_fixed_point(self):
        rng = np.random.default_rng(2)
        cfg = MpcConfig(N=5, M=4)
        p = _rand_params(rng, 4)
        prob = build_qp(p, cfg, GripperState(40, 0), GripperState(40, 0),
                        np.zeros(4), np.zeros(4))
        assert np.allclose(prob.q, 0.0)
        sol = solve(prob)
        assert np.max(np.abs(sol.x)) <= 1e-9

    def test_single_step_hand_derived(self):
        # N = 1: actions cannot influence the embedding inside the horizon,
        # so P and q reduce to the velocity/acceleration terms.
        cfg = MpcConfig(N=1, M=3)
        p = MpcParams(A_f=np.array([2.0, 0.0, 0.0]), C_f=np.zeros(3),
                      Q1=np.eye(3), Q2=np.eye(3), Qc=np.zeros((3, 3)),
                      alpha=0.0)
        s1 = GripperState(30.0, 4.0)
        s2 = GripperState(50.0, -1.5)
        prob = build_qp(p, cfg, s1, s2, np.zeros(3), np.zeros(3))
        diag = 2.0 * (cfg.P_q * cfg.Q_v * cfg.dt ** 2 + cfg.Q_a)
        assert np.allclose(prob.P, diag * np.eye(2))
        want_q = 2.0 * cfg.P_q * cfg.Q_v * cfg.dt * np.array([s1.v, s2.v])
        assert np.allclose(prob.q, want_q)

    def test_cost_matches_rollout_sum(self):
        rng = np.random.default_rng(3)
        cfg = MpcConfig(N=7, M=5)
        p = _rand_params(rng, 5)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg)
        prob = build_qp(p, cfg, s1, s2, f1, f2)
        const = qp_constant(p, cfg, s1, s2, f1, f2)
        for _ in range(50):
            acts = ActionSequence(rng.uniform(-800, 800, size=(2, cfg.N)))
            x = acts.a.reshape(-1)
            lhs = prob.objective(x) + const
            rhs = eq2_cost(p, cfg, s1, s2, f1, f2, acts)
            assert lhs == pytest.approx(rhs, rel=1e-8)


class TestForward:
    def test_heavy_motion_penalty_freezes(self):
        rng = np.random.default_rng(4)
        cfg = MpcConfig(N=6, M=4, Q_v=1e7)
        p = _rand_params(rng, 4)
        s1 = GripperState(40.0, 0.0)
        s2 = GripperState(42.0, 0.0)
        out = forward(p, cfg, s1, s2, np.zeros(4), np.zeros(4))
        assert np.max(np.abs(out.a_star)) <= 1e-6
        assert np.allclose(out.predicted_openings[0], s1.p, atol=1e-6)

    def test_agent_swap_equivariance(self):
        # symmetric parameterization: shared diagonal factor, symmetric Qc
        rng = np.random.default_rng(5)
        cfg = MpcConfig(N=5, M=4)
        Q1 = np.tril(rng.standard_normal((4, 4))) * 0.3 + np.eye(4)
        Qc = rng.standard_normal((4, 4))
        p = MpcParams(A_f=rng.standard_normal(4), C_f=rng.standard_normal(4),
                      Q1=Q1, Q2=Q1.copy(), Qc=0.5 * (Qc + Qc.T), alpha=0.6)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg)
        out_a = forward(p, cfg, s1, s2, f1, f2)
        out_b = forward(p, cfg, s2, s1, f2, f1)
        assert np.allclose(out_a.a_star, out_b.a_star[::-1], atol=1e-9)
        assert np.allclose(out_a.predicted_openings,
                           out_b.predicted_openings[::-1], atol=1e-9)

    def test_sampled_optimality(self):
        rng = np.random.default_rng(6)
        cfg = MpcConfig(N=5, M=4)
        p = _rand_params(rng, 4)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg, v_scale=1.0)
        eng = MpcEngine(p, cfg)
        out = eng.forward(s1, s2, f1, f2)
        prob = eng.problem(s1, s2, f1, f2)
        best = prob.objective(out.qp.x)
        for _ in range(1000):
            x = rng.uniform(-200, 200, size=2 * cfg.N)
            Ax = prob.A @ x
            if np.all(Ax >= prob.l) and np.all(Ax <= prob.u):
                assert best <= prob.objective(x) + 1e-9

    def test_feasible_on_in_bounds_states(self):
        rng = np.random.default_rng(7)
        cfg = MpcConfig(N=5, M=4)
        for _ in range(20):
            p = _rand_params(rng, 4)
            s1, s2, f1, f2 = _rand_inputs(rng, cfg)
            out = forward(p, cfg, s1, s2, f1, f2)
            assert out.qp.status.value == "solved"
            assert np.all(out.predicted_openings >= cfg.p_min - 1e-6)
            assert np.all(out.predicted_openings <= cfg.p_max + 1e-6)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        cfg = MpcConfig(N=4, M=3)
        p = _rand_params(rng, 3)
        eng = MpcEngine(p, cfg)
        B = 6
        st1 = np.column_stack([rng.uniform(20, 60, B), rng.uniform(-2, 2, B)])
        st2 = np.column_stack([rng.uniform(20, 60, B), rng.uniform(-2, 2, B)])
        F1 = rng.standard_normal((B, 3))
        F2 = rng.standard_normal((B, 3))
        outs, failures = eng.forward_batch(st1, st2, F1, F2)
        assert failures == 0
        for b in range(B):
            ref = eng.forward(GripperState(*st1[b]), GripperState(*st2[b]),
                              F1[b], F2[b])
            assert np.allclose(outs[b].a_star, ref.a_star, atol=1e-7)


class TestDecoupling:
    def test_single_agent_engines_reproduce_decoupled_layer(self):
        rng = np.random.default_rng(9)
        cfg = MpcConfig(N=6, M=5)
        for _ in range(10):
            p = _rand_params(rng, 5)
            p.C_f = np.zeros(5)
            p.alpha = 0.0
            s1, s2, f1, f2 = _rand_inputs(rng, cfg)
            out = forward(p, cfg, s1, s2, f1, f2)
            W1, W2 = decoupled_weight_blocks(p, cfg)
            e1 = SingleAgentEngine(W1, p.A_f, cfg)
            e2 = SingleAgentEngine(W2, p.A_f, cfg)
            a1, open1, _ = e1.forward(s1, f1)
            a2, open2, _ = e2.forward(s2, f2)
            assert abs(out.a_star[0] - a1) <= 1e-9
            assert abs(out.a_star[1] - a2) <= 1e-9
            assert np.max(np.abs(out.predicted_openings[0] - open1)) <= 1e-9
            assert np.max(np.abs(out.predicted_openings[1] - open2)) <= 1e-9

    def test_agent1_invariant_to_agent2_embedding(self):
        rng = np.random.default_rng(10)
        cfg = MpcConfig(N=5, M=4)
        p = _rand_params(rng, 4)
        p.C_f = np.zeros(4)
        p.alpha = 0.0
        s1, s2, f1, f2 = _rand_inputs(rng, cfg)
        out_a = forward(p, cfg, s1, s2, f1, f2)
        out_b = forward(p, cfg, s1, s2, f1, rng.standard_normal(4))
        assert np.max(np.abs(out_a.a_star[0] - out_b.a_star[0])) <= 1e-9
        assert np.max(np.abs(out_a.predicted_openings[0]
                             - out_b.predicted_openings[0])) <= 1e-9


# -- finite-difference oracle ---------------------------------------------------

def _param_coords(params, rng, n_mat=12):
    """Coordinates to probe: all of A_f, C_f, alpha plus seeded subsets of
    the matrix parameters."""
    M = params.M
    coords = [("A_f", (i,)) for i in range(M)]
    coords += [("C_f", (i,)) for i in range(M)]
    coords += [("alpha", ())]
    tril_idx = [(i, j) for i in range(M) for j in range(i + 1)]
    for name in ("Q1", "Q2"):
        take = rng.choice(len(tril_idx), size=min(n_mat, len(tril_idx)),
                          replace=False)
        coords += [(name, tril_idx[t]) for t in take]
    all_idx = [(i, j) for i in range(M) for j in range(M)]
    take = rng.choice(len(all_idx), size=min(n_mat, len(all_idx)), replace=False)
    coords += [("Qc", all_idx[t]) for t in take]
    return coords


def fd_gradient_check(params, cfg, s1, s2, f1, f2, rng, h=1e-5, n_mat=12):
    """Returns (max_rel_err, analytic, numeric, degenerate_flag) comparing
    backward() with central differences of a random linear functional of the
    outputs."""
    c_open = rng.standard_normal((2, cfg.N))
    c_a = rng.standard_normal(2)
    ref_open = np.zeros((2, cfg.N))
    ref_a = np.zeros(2)

    def loss_of(p_, f1_, f2_, warm=None):
        out = forward(p_, cfg, s1, s2, f1_, f2_, warm=warm)
        # centered at the base solution so FD differences do not cancel
        # against a large constant (same gradient, far less roundoff)
        return (float(np.sum(c_open * (out.predicted_openings - ref_open)))
                + float(c_a @ (out.a_star - ref_a)), out)

    _, base_out = loss_of(params, f1, f2)
    ref_open = base_out.predicted_openings.copy()
    ref_a = base_out.a_star.copy()
    grads = backward(params, cfg, s1, s2, f1, f2, base_out,
                     GradOut(d_openings=c_open, d_a_star=c_a))
    if grads.degenerate:
        return None, None, None, True

    analytic, numeric = [], []

    def probe(get, set_, g_val):
        v0 = get()
        set_(v0 + h)
        lp, _ = loss_of(*current(), warm=base_out.qp)
        set_(v0 - h)
        lm, _ = loss_of(*current(), warm=base_out.qp)
        set_(v0)
        analytic.append(g_val)
        numeric.append((lp - lm) / (2 * h))

    p_work = params.copy()
    f1_work = f1.copy()
    f2_work = f2.copy()

    def current():
        return p_work, f1_work, f2_work

    for name, idx in _param_coords(params, rng, n_mat=n_mat):
        if name == "alpha":
            probe(lambda: p_work.alpha,
                  lambda v: setattr(p_work, "alpha", float(v)),
                  grads.alpha)
        else:
            arr = getattr(p_work, name)
            g_arr = getattr(grads, name)
            probe(lambda a=arr, i=idx: a[i],
                  lambda v, a=arr, i=idx: a.__setitem__(i, v),
                  g_arr[idx])
    for vec, g_vec in ((f1_work, grads.f1), (f2_work, grads.f2)):
        for i in range(cfg.M):
            probe(lambda v_=vec, i=i: v_[i],
                  lambda val, v_=vec, i=i: v_.__setitem__(i, val),
                  g_vec[i])

    analytic = np.array(analytic)
    numeric = np.array(numeric)
    # Central differences at h = 1e-5 on float64 solver outputs resolve
    # directional derivatives down to roughly 1e-9 absolute, so entries below
    # the gradient scale (or below 1e-5 outright) are compared against a
    # floor instead of their own magnitude.
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                       np.maximum(1e-3 * scale, 1e-5))
    rel = np.abs(analytic - numeric) / denom
    return float(np.max(rel)), analytic, numeric, False


class TestBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(11)
        cfg = MpcConfig(N=4, M=3)
        p = _rand_params(rng, 3)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg)
        out = forward(p, cfg, s1, s2, f1, f2)
        g = backward(p, cfg, s1, s2, f1, f2, out, GradOut())
        for name in ("A_f", "C_f", "Q1", "Q2", "Qc", "f1", "f2"):
            assert np.allclose(getattr(g, name), 0.0)
        assert g.alpha == 0.0

    def test_interior_adjoint_is_inverse_column(self):
        # with no active constraints the adjoint solve is lam = -P^{-1} g
        from bimpc.qp import _solve_kkt
        rng = np.random.default_rng(12)
        P = np.diag(rng.uniform(1.0, 3.0, 4))
        for i in range(4):
            g = np.eye(4)[i]
            lam, _ = _solve_kkt(P, np.zeros((0, 4)), -g, np.zeros(0), 1e-9)
            assert np.allclose(lam, -np.linalg.inv(P)[:, i], atol=1e-12)

    def test_gradients_match_finite_differences_interior(self):
        rng = np.random.default_rng(13)
        cfg = MpcConfig(N=5, M=4)
        p = _rand_params(rng, 4)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg, v_scale=1.5)
        err, _, _, degen = fd_gradient_check(p, cfg, s1, s2, f1, f2, rng)
        assert not degen
        assert err <= 1e-4

    def test_gradients_match_finite_differences_active(self):
        # tighter acceleration bounds so several box constraints bind
        rng = np.random.default_rng(14)
        cfg = MpcConfig(N=5, M=4, a_min=-8.0, a_max=8.0)
        p = _rand_params(rng, 4, scale=1.0)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg, v_scale=1.5)
        f1 = 4.0 * f1
        out = forward(p, cfg, s1, s2, f1, f2)
        assert out.diagnostics["active_count"] > 0
        err, _, _, degen = fd_gradient_check(p, cfg, s1, s2, f1, f2, rng)
        assert not degen
        assert err <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        cfg = MpcConfig(N=4, M=3)
        p = _rand_params(rng, 3)
        path = tmp_path / "params.json"
        save_checkpoint(path, p, cfg)
        p2, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        for name in ("A_f", "C_f", "Q1", "Q2", "Qc"):
            assert np.allclose(getattr(p, name), getattr(p2, name))
        assert p2.alpha == p.alpha

    def test_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestWarmObjective:
    def test_objective_not_worse_than_warm_point(self):
        rng = np.random.default_rng(16)
        cfg = MpcConfig(N=5, M=4)
        p = _rand_params(rng, 4)
        s1, s2, f1, f2 = _rand_inputs(rng, cfg)
        eng = MpcEngine(p, cfg)
        prob = eng.problem(s1, s2, f1, f2)
        out = eng.forward(s1, s2, f1, f2)
        # a feasible but suboptimal candidate
        x_warm = np.clip(rng.uniform(-50, 50, 2 * cfg.N), cfg.a_min, cfg.a_max)
        assert prob.objective(out.qp.x) <= prob.objective(x_warm) + 1e-9
