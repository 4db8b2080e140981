import numpy as np
import pytest

from ilqracing.lq_solver import (
    AffineStrategy,
    LQGameProblem,
    LQGameStage,
    SingularSystem,
    solve_feedback,
    solve_lqr,
    solve_open_loop,
)

from oracles import (
    random_lq_problem,
    riccati_iteration,
    rollout_linear,
    solve_stacked_open_loop,
    stationarity_gradients,
    total_cost_lq,
)


def scalar_problem(N, K, A=1.0, B=1.0, Q=0.0, QK=1.0, R=1.0, q=0.0):
    """Scalar game with identical pieces for every player."""
    stages = []
    for _ in range(K):
        stages.append(
            LQGameStage(
                A=np.array([[A]]),
                B=np.full((N, 1, 1), B),
                Q=np.full((N, 1, 1), Q),
                q=np.full((N, 1), q),
                R=_scalar_R(N, R),
                r=np.zeros((N, N, 1)),
            )
        )
    return LQGameProblem(stages=tuple(stages), QK=np.full((N, 1, 1), QK), qK=np.full((N, 1), 0.0))


def _scalar_R(N, R):
    out = np.zeros((N, N, 1, 1))
    for i in range(N):
        out[i, i, 0, 0] = R
    return out


def test_hand_computed_single_riccati_step():
    # P_1 = 1, K_0 = (R + B P B)^-1 B P A = 0.5, k_0 = 0
    problem = scalar_problem(N=1, K=1)
    strat, rec = solve_feedback(problem)
    assert strat.K_gain[0, 0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert strat.k_ff[0, 0, 0] == pytest.approx(0.0, abs=1e-15)
    assert rec.P[1, 0, 0, 0] == 1.0
    lqr = solve_lqr(problem)
    assert lqr.K_gain[0, 0, 0, 0] == pytest.approx(0.5, abs=1e-12)


def test_zero_linear_terms_zero_feedforward():
    rng = np.random.default_rng(0)
    problem = random_lq_problem(rng, N=2, K=4, n=3, m=2, linear=False)
    strat, _ = solve_feedback(problem)
    assert np.all(strat.k_ff == 0.0)
    ol, _, dxs = solve_open_loop(problem, np.zeros(3))
    assert np.all(ol.k_ff == 0.0)
    assert np.all(dxs == 0.0)


def test_feedback_gain_equation_residuals():
    rng = np.random.default_rng(1)
    for N in (1, 2, 3):
        problem = random_lq_problem(rng, N=N, K=5, n=3, m=2, cross=(N == 2))
        strat, rec = solve_feedback(problem)
        for k in range(problem.K):
            st = problem.stages[k]
            for i in range(N):
                BtP = st.B[i].T @ rec.P[k + 1, i]
                lhs_K = (st.R[i, i] + BtP @ st.B[i]) @ strat.K_gain[k, i]
                lhs_k = (st.R[i, i] + BtP @ st.B[i]) @ strat.k_ff[k, i]
                for j in range(N):
                    if j != i:
                        lhs_K += BtP @ st.B[j] @ strat.K_gain[k, j]
                        lhs_k += BtP @ st.B[j] @ strat.k_ff[k, j]
                rhs_K = BtP @ st.A
                rhs_k = st.B[i].T @ rec.p[k + 1, i] + st.r[i, i]
                assert np.linalg.norm(lhs_K - rhs_K) <= 1e-9 * (1 + np.linalg.norm(rhs_K))
                assert np.linalg.norm(lhs_k - rhs_k) <= 1e-9 * (1 + np.linalg.norm(rhs_k))


def test_feedback_matches_stagewise_fixed_point_oracle():
    # Per stage, iterate each player's gain equation with the other's gain
    # substituted until the pair stops moving, then step the value recursion.
    rng = np.random.default_rng(2)
    problem = random_lq_problem(rng, N=2, K=3, n=2, m=1)
    strat, rec = solve_feedback(problem)

    N, K, n, m = 2, problem.K, problem.n, problem.m
    P = problem.QK.copy()
    p = problem.qK.copy()
    for k in range(K - 1, -1, -1):
        st = problem.stages[k]
        Kg = np.zeros((N, m, n))
        kf = np.zeros((N, m))
        for _ in range(400):
            Kg_prev = Kg.copy()
            kf_prev = kf.copy()
            for i in range(N):
                j = 1 - i
                Huu = st.R[i, i] + st.B[i].T @ P[i] @ st.B[i]
                Kg[i] = np.linalg.solve(Huu, st.B[i].T @ P[i] @ (st.A - st.B[j] @ Kg_prev[j]))
                kf[i] = np.linalg.solve(
                    Huu,
                    st.B[i].T @ p[i] + st.r[i, i] - st.B[i].T @ P[i] @ st.B[j] @ kf_prev[j],
                )
            if max(np.abs(Kg - Kg_prev).max(), np.abs(kf - kf_prev).max()) < 1e-14:
                break
        assert np.abs(Kg - strat.K_gain[k]).max() < 1e-6
        assert np.abs(kf - strat.k_ff[k]).max() < 1e-6
        Fk = st.A - sum(st.B[j] @ Kg[j] for j in range(N))
        beta = -sum(st.B[j] @ kf[j] for j in range(N))
        P_new = np.zeros_like(P)
        p_new = np.zeros_like(p)
        for i in range(N):
            P_new[i] = st.Q[i] + Fk.T @ P[i] @ Fk + sum(
                Kg[j].T @ st.R[i, j] @ Kg[j] for j in range(N)
            )
            p_new[i] = st.q[i] + Fk.T @ (p[i] + P[i] @ beta) + sum(
                Kg[j].T @ st.R[i, j] @ kf[j] - Kg[j].T @ st.r[i, j] for j in range(N)
            )
        P, p = P_new, p_new


def test_lqr_matches_feedback_single_player():
    rng = np.random.default_rng(3)
    for _ in range(10):
        problem = random_lq_problem(rng, N=1, K=8, n=4, m=2)
        fb, _ = solve_feedback(problem)
        lqr = solve_lqr(problem)
        assert np.abs(fb.K_gain - lqr.K_gain).max() < 1e-12
        assert np.abs(fb.k_ff - lqr.k_ff).max() < 1e-12


def test_lqr_matches_independent_riccati_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 3))
        K = int(rng.integers(1, 21))
        problem = random_lq_problem(rng, N=1, K=K, n=n, m=m)
        lqr = solve_lqr(problem)
        gains, ffs, _ = riccati_iteration(problem)
        assert np.abs(lqr.K_gain[:, 0] - gains).max() < 1e-9 * (1 + np.abs(gains).max())
        assert np.abs(lqr.k_ff[:, 0] - ffs).max() < 1e-9 * (1 + np.abs(ffs).max())


def test_riccati_stationary_fixed_point():
    # A=B=R=1, Q=1 at every stage: the value converges to the positive root of
    # P = Q + P - P^2/(R+P), i.e. the golden ratio, and the gain to P*/(1+P*).
    problem = scalar_problem(N=1, K=30, Q=1.0, QK=1.0)
    strat, rec = solve_feedback(problem)
    p_star = (1 + np.sqrt(5.0)) / 2
    assert rec.P[0, 0, 0, 0] == pytest.approx(p_star, abs=1e-12)
    residual = rec.P[0, 0, 0, 0] - (1 + rec.P[0, 0, 0, 0] - rec.P[0, 0, 0, 0] ** 2 / (1 + rec.P[0, 0, 0, 0]))
    assert abs(residual) < 1e-12
    lqr = solve_lqr(problem)
    assert lqr.K_gain[0, 0, 0, 0] == pytest.approx(p_star / (1 + p_star), abs=1e-12)


def test_no_state_cost_means_no_action():
    problem = scalar_problem(N=1, K=6, Q=0.0, QK=0.0)
    strat = solve_lqr(problem)
    assert np.all(strat.K_gain == 0.0)
    assert np.all(strat.k_ff == 0.0)


def test_open_loop_gains_are_zero():
    rng = np.random.default_rng(5)
    problem = random_lq_problem(rng, N=2, K=4, n=3, m=2)
    strat, _, _ = solve_open_loop(problem, np.zeros(3))
    assert np.all(strat.K_gain == 0.0)


def test_single_player_open_loop_and_feedback_trajectories_coincide():
    rng = np.random.default_rng(6)
    for _ in range(10):
        problem = random_lq_problem(rng, N=1, K=6, n=3, m=2)
        dx0 = rng.normal(size=3)
        fb, _ = solve_feedback(problem)
        dxs_fb, _ = rollout_linear(problem, dx0, strategy=fb)
        _, _, dxs_ol = solve_open_loop(problem, dx0)
        assert np.abs(dxs_fb - dxs_ol).max() < 1e-8


def test_open_loop_two_player_scalar_against_direct_stationarity():
    # One stage, scalar states and inputs: the two coupled first-order
    # conditions form a 2x2 linear system solved directly here.
    rng = np.random.default_rng(7)
    problem = random_lq_problem(rng, N=2, K=1, n=1, m=1)
    st = problem.stages[0]
    dx0 = np.array([0.7])
    # d J^i / d u^i = R^ii u^i + r^ii + B^i Q_K^i (A x0 + B^1 u^1 + B^2 u^2) + B^i q_K^i = 0
    A, B1, B2 = st.A[0, 0], st.B[0, 0, 0], st.B[1, 0, 0]
    L = np.array(
        [
            [st.R[0, 0, 0, 0] + B1 * problem.QK[0, 0, 0] * B1, B1 * problem.QK[0, 0, 0] * B2],
            [B2 * problem.QK[1, 0, 0] * B1, st.R[1, 1, 0, 0] + B2 * problem.QK[1, 0, 0] * B2],
        ]
    )
    b = np.array(
        [
            st.r[0, 0, 0] + B1 * (problem.QK[0, 0, 0] * A * dx0[0] + problem.qK[0, 0]),
            st.r[1, 1, 0] + B2 * (problem.QK[1, 0, 0] * A * dx0[0] + problem.qK[1, 0]),
        ]
    )
    u_direct = np.linalg.solve(L, -b)
    strat, _, dxs = solve_open_loop(problem, dx0)
    u_applied = -strat.k_ff[0, :, 0]
    assert np.abs(u_applied - u_direct).max() < 1e-12
    assert dxs[1, 0] == pytest.approx(A * dx0[0] + B1 * u_direct[0] + B2 * u_direct[1], abs=1e-12)


def test_open_loop_satisfies_stationarity_and_matches_stacked_solve():
    rng = np.random.default_rng(8)
    for N in (2, 3):
        for _ in range(5):
            problem = random_lq_problem(rng, N=N, K=4, n=3, m=2)
            dx0 = rng.normal(size=3)
            strat, _, dxs = solve_open_loop(problem, dx0)
            us = -strat.k_ff
            dxs_roll, _ = rollout_linear(problem, dx0, us=us)
            assert np.abs(dxs_roll - dxs).max() < 1e-10
            for g in stationarity_gradients(problem, dx0, us):
                assert np.abs(g).max() < 1e-8
            us_direct = solve_stacked_open_loop(problem, dx0)
            assert np.abs(us - us_direct).max() < 1e-6


def test_feedback_nash_unilateral_best_response():
    # Freeze all but one player at the returned strategy; the induced
    # single-player problem (affine dynamics absorbed into an augmented
    # state) must hand back that player's strategy.
    rng = np.random.default_rng(9)
    for _ in range(5):
        problem = random_lq_problem(rng, N=2, K=4, n=3, m=2)
        strat, _ = solve_feedback(problem)
        for i in range(2):
            check_best_response(problem, strat, i, tol=1e-6)


def check_best_response(problem, strat, i, tol):
    """Augmented-state reduction of the induced single-player problem."""
    K, N, n, m = problem.K, problem.N, problem.n, problem.m
    na = n + 1
    stages = []
    for k in range(K):
        st = problem.stages[k]
        F = st.A.copy()
        d = np.zeros(n)
        for j in range(N):
            if j != i:
                F -= st.B[j] @ strat.K_gain[k, j]
                d -= st.B[j] @ strat.k_ff[k, j]
        Aa = np.zeros((na, na))
        Aa[:n, :n] = F
        Aa[:n, n] = d
        Aa[n, n] = 1.0
        Ba = np.zeros((1, na, m))
        Ba[0, :n] = st.B[i]
        Qa = np.zeros((1, na, na))
        Qa[0, :n, :n] = st.Q[i]
        Qa[0, :n, n] = st.q[i]
        Qa[0, n, :n] = st.q[i]
        stages.append(
            LQGameStage(
                A=Aa, B=Ba, Q=Qa, q=np.zeros((1, na)),
                R=st.R[i, i][None, None], r=st.r[i, i][None, None],
            )
        )
    QKa = np.zeros((1, na, na))
    QKa[0, :n, :n] = problem.QK[i]
    QKa[0, :n, n] = problem.qK[i]
    QKa[0, n, :n] = problem.qK[i]
    induced = LQGameProblem(stages=tuple(stages), QK=QKa, qK=np.zeros((1, na)))
    br = solve_lqr(induced)
    for k in range(K):
        K_state = br.K_gain[k, 0, :, :n]
        k_eff = br.K_gain[k, 0, :, n] + br.k_ff[k, 0]
        assert np.abs(K_state - strat.K_gain[k, i]).max() < tol
        assert np.abs(k_eff - strat.k_ff[k, i]).max() < tol


def test_feedback_cross_input_costs_enter_recursion():
    # With nonzero R^{ij} the opponents' strategies feed extra state cost into
    # player i's induced problem; fold it in and check the best response.
    rng = np.random.default_rng(10)
    problem = random_lq_problem(rng, N=2, K=3, n=2, m=2, cross=True)
    strat, _ = solve_feedback(problem)
    for i in range(2):
        folded = fold_cross_terms(problem, strat, i)
        check_best_response(folded, strat, i, tol=1e-6)


def fold_cross_terms(problem, strat, i):
    """Rewrite opponents' input costs of player i as state costs via u^j(x)."""
    N = problem.N
    stages = []
    for k, st in enumerate(problem.stages):
        Q = st.Q.copy()
        q = st.q.copy()
        R = st.R.copy()
        r = st.r.copy()
        for j in range(N):
            if j != i:
                Kj, kj = strat.K_gain[k, j], strat.k_ff[k, j]
                Q[i] = Q[i] + Kj.T @ st.R[i, j] @ Kj
                q[i] = q[i] + Kj.T @ (st.R[i, j] @ kj) - Kj.T @ st.r[i, j]
                R[i, j] = 0.0
                r[i, j] = 0.0
        stages.append(LQGameStage(A=st.A, B=st.B, Q=Q, q=q, R=R, r=r))
    return LQGameProblem(stages=tuple(stages), QK=problem.QK, qK=problem.qK)


def test_open_loop_and_feedback_solutions_differ_with_coupled_costs():
    # Two players, shared scalar state, both penalizing it: the equilibrium
    # trajectories of the two information structures must not coincide.
    stages = []
    for _ in range(3):
        stages.append(
            LQGameStage(
                A=np.array([[1.0]]),
                B=np.array([[[1.0]], [[1.0]]]),
                Q=np.array([[[1.0]], [[2.0]]]),
                q=np.zeros((2, 1)),
                R=_scalar_R(2, 1.0),
                r=np.zeros((2, 2, 1)),
            )
        )
    problem = LQGameProblem(stages=tuple(stages), QK=np.array([[[1.0]], [[2.0]]]), qK=np.zeros((2, 1)))
    dx0 = np.array([1.0])
    fb, _ = solve_feedback(problem)
    dxs_fb, _ = rollout_linear(problem, dx0, strategy=fb)
    _, _, dxs_ol = solve_open_loop(problem, dx0)
    assert np.abs(dxs_fb - dxs_ol).max() > 1e-3


def test_open_loop_equilibrium_resists_unilateral_deviation():
    rng = np.random.default_rng(11)
    problem = random_lq_problem(rng, N=2, K=4, n=2, m=1)
    dx0 = rng.normal(size=2)
    strat, _, _ = solve_open_loop(problem, dx0)
    us = -strat.k_ff
    base = total_cost_lq(problem, dx0, us)
    for i in range(2):
        for _ in range(5):
            trial = us.copy()
            trial[:, i] += 0.1 * rng.normal(size=trial[:, i].shape)
            perturbed = total_cost_lq(problem, dx0, trial)
            assert perturbed[i] >= base[i] - 1e-10


def test_singular_feedback_stage_raises():
    # Nearly-zero own-input costs with identical input maps make the stacked
    # system rank-deficient.
    problem = scalar_problem(N=2, K=1, R=1e-20)
    with pytest.raises(SingularSystem) as exc:
        solve_feedback(problem)
    assert exc.value.stage == 0


def test_singular_open_loop_coupling_raises():
    # Negative terminal costs drive Lambda = 1 + 2 B R^-1 B M to zero.
    stages = (
        LQGameStage(
            A=np.array([[1.0]]),
            B=np.array([[[1.0]], [[1.0]]]),
            Q=np.zeros((2, 1, 1)),
            q=np.zeros((2, 1)),
            R=_scalar_R(2, 1.0),
            r=np.zeros((2, 2, 1)),
        ),
    )
    problem = LQGameProblem(stages=stages, QK=np.array([[[-0.5]], [[-0.5]]]), qK=np.zeros((2, 1)))
    with pytest.raises(SingularSystem):
        solve_open_loop(problem, np.zeros(1))


def test_problem_validation_accepts_random_instances():
    rng = np.random.default_rng(12)
    random_lq_problem(rng, N=3, K=3, n=4, m=2, cross=True).validate()
