"""Exact solvers for finite-horizon N-player linear-quadratic dynamic games.

A game is described stage-by-stage by linear dynamics

    dx_{k+1} = A_k dx_k + sum_i B_k^i du_k^i

and per-player quadratic costs with affine terms (state Hessian Q, gradient q,
input Hessians R[i][j], gradients r[i][j]).  Three solvers are provided:

* ``solve_feedback``  -- feedback Nash equilibrium via the coupled value
  recursion; the per-stage gain equations of all players are stacked into one
  block linear system and solved with a single LU factorization.
* ``solve_open_loop`` -- open-loop Nash equilibrium via the costate recursion.
* ``solve_lqr``       -- single-player special case through the classic
  difference Riccati equation, kept as an independent code path.

All strategies use the convention  u_k^i = uhat_k^i - K_k^i dx_k - k_k^i,
so applying a returned strategy through the linear dynamics reproduces the
equilibrium trajectory for every solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A stage system whose 1-norm condition number exceeds this is treated as
# rank-deficient (the LQ game has no unique equilibrium at that stage).
CONDITION_LIMIT = 1e12


class SingularSystem(RuntimeError):
    """The equilibrium equations at one stage have no unique solution."""

    def __init__(self, stage: int, what: str = "stacked gain system"):
        self.stage = stage
        super().__init__(f"{what} is numerically singular at stage {stage}")


@dataclass(frozen=True)
class LQGameStage:
    """One stage of an LQ game.

    A: (n, n) state transition; B: (N, n, m) per-player input maps;
    Q/q: (N, n, n) and (N, n) per-player state cost pieces;
    R/r: (N, N, m, m) and (N, N, m) input cost pieces, where R[i, j] is the
    Hessian of player i's cost w.r.t. player j's input (cross terms j != i
    enter only the feedback value recursion).
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    q: np.ndarray
    R: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class LQGameProblem:
    """Finite-horizon LQ game: K stages plus per-player terminal cost QK/qK.

    ``has_cross`` may be set to False by builders that guarantee all
    cross-player input costs R[i, j], r[i, j] (i != j) are zero; None means
    the solver scans for them.
    """

    stages: tuple[LQGameStage, ...]
    QK: np.ndarray  # (N, n, n)
    qK: np.ndarray  # (N, n)
    has_cross: bool | None = None

    @property
    def K(self) -> int:
        return len(self.stages)

    @property
    def N(self) -> int:
        return self.QK.shape[0]

    @property
    def n(self) -> int:
        return self.QK.shape[1]

    @property
    def m(self) -> int:
        return self.stages[0].B.shape[2]

    def validate(self) -> None:
        N, n, m = self.N, self.n, self.m
        assert self.QK.shape == (N, n, n) and self.qK.shape == (N, n)
        for k, st in enumerate(self.stages):
            assert st.A.shape == (n, n), f"stage {k}: bad A"
            assert st.B.shape == (N, n, m), f"stage {k}: bad B"
            assert st.Q.shape == (N, n, n) and st.q.shape == (N, n)
            assert st.R.shape == (N, N, m, m) and st.r.shape == (N, N, m)
            for i in range(N):
                Rii = st.R[i, i]
                assert np.allclose(Rii, Rii.T), f"stage {k}: R[{i},{i}] not symmetric"
                assert np.linalg.eigvalsh(Rii).min() > 0, f"stage {k}: R[{i},{i}] not PD"


@dataclass(frozen=True)
class AffineStrategy:
    """Per-stage, per-player affine strategies, stage-major.

    K_gain[k, i] is the (m, n) feedback gain and k_ff[k, i] the (m,)
    feedforward term; the control deviation is -K_gain @ dx - k_ff.
    Open-loop solutions carry K_gain identically zero.
    """

    K_gain: np.ndarray  # (K, N, m, n)
    k_ff: np.ndarray  # (K, N, m)


@dataclass(frozen=True)
class FeedbackValueRecursion:
    """Value matrices/vectors of the feedback recursion plus intermediates.

    P[k, i], p[k, i] quote each player's quadratic value at stage k
    (P[K] and p[K] equal the terminal cost pieces); F[k] and beta[k] are the
    closed-loop transition and drift at stage k.
    """

    P: np.ndarray  # (K+1, N, n, n)
    p: np.ndarray  # (K+1, N, n)
    F: np.ndarray  # (K, n, n)
    beta: np.ndarray  # (K, n)


@dataclass(frozen=True)
class OpenLoopValueRecursion:
    """Costate recursion arrays of the open-loop solution.

    M[k, i], m_vec[k, i] define player i's costate as an affine function of
    the state deviation; Lam[k] is the stage coupling matrix whose inverse
    propagates the equilibrium state deviation.
    """

    M: np.ndarray  # (K+1, N, n, n)
    m_vec: np.ndarray  # (K+1, N, n)
    Lam: np.ndarray  # (K, n, n)


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def _norm1(mat: np.ndarray) -> float:
    return float(np.abs(mat).sum(axis=0).max())


def _inv_checked(mat: np.ndarray, stage: int, what: str) -> np.ndarray:
    """Invert a small square system, raising SingularSystem on bad conditioning.

    The factorization is formed once per stage; every right-hand side at that
    stage reuses it through plain matrix products.
    """
    try:
        inv = np.linalg.inv(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(stage, what) from exc
    cond = _norm1(mat) * _norm1(inv)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularSystem(stage, what)
    return inv


def solve_feedback(problem: LQGameProblem) -> tuple[AffineStrategy, FeedbackValueRecursion]:
    """Feedback Nash equilibrium strategies of an LQ game.

    Proceeds backward from the terminal cost.  At every stage the N coupled
    gain equations are assembled into one (N*m, N*m) block system which is
    factorized once; the feedforward system shares the same left-hand side,
    so both right-hand sides are solved with that factorization.
    """
    N, K, n, m = problem.N, problem.K, problem.n, problem.m
    P = np.zeros((K + 1, N, n, n))
    p = np.zeros((K + 1, N, n))
    P[K] = _sym(problem.QK)
    p[K] = problem.qK
    K_gain = np.zeros((K, N, m, n))
    k_ff = np.zeros((K, N, m))
    F_all = np.zeros((K, n, n))
    beta_all = np.zeros((K, n))

    # Cross input-cost terms are often identically zero (as in the racing
    # game); skip their recursion contributions in that case.
    has_cross = problem.has_cross
    if has_cross is None:
        has_cross = any(
            np.any(st.R[i, j]) or np.any(st.r[i, j])
            for st in problem.stages
            for i in range(N)
            for j in range(N)
            if i != j
        )

    R_diag = np.stack([np.stack([st.R[i, i] for i in range(N)]) for st in problem.stages])
    r_diag = np.stack([np.stack([st.r[i, i] for i in range(N)]) for st in problem.stages])
    diag_rows = np.arange(N)[:, None] * m + np.arange(m)

    rhs = np.empty((N * m, n + 1))
    for k in range(K - 1, -1, -1):
        st = problem.stages[k]
        A, B = st.A, st.B
        Pn, pn = P[k + 1], p[k + 1]
        BtP = np.einsum("inm,ink->imk", B, Pn)  # (N, m, n)
        blocks = np.einsum("imk,jkl->ijml", BtP, B)  # (N, N, m, m)
        blocks[np.arange(N), np.arange(N)] += R_diag[k]
        S = blocks.transpose(0, 2, 1, 3).reshape(N * m, N * m)
        rhs[:, :n] = (BtP @ A).reshape(N * m, n)
        rhs[:, n] = (np.einsum("inm,in->im", B, pn) + r_diag[k]).ravel()
        sol = _inv_checked(S, k, "stacked gain system") @ rhs
        Kk = sol[:, :n].reshape(N, m, n)
        kk = sol[:, n].reshape(N, m)
        K_gain[k] = Kk
        k_ff[k] = kk

        F = A - np.einsum("jnm,jmp->np", B, Kk)
        beta = -np.einsum("jnm,jm->n", B, kk)
        F_all[k] = F
        beta_all[k] = beta
        PF = Pn @ F  # (N, n, n)
        Pnew = st.Q + F.T @ PF
        Pnew += np.einsum("imn,imo,iop->inp", Kk, R_diag[k], Kk)
        Rk = np.einsum("imo,io->im", R_diag[k], kk)
        pnew = st.q + pn @ F + np.einsum("inm,n->im", PF, beta)
        pnew += np.einsum("imn,im->in", Kk, Rk - r_diag[k])
        if has_cross:
            for i in range(N):
                for j in range(N):
                    if j != i:
                        Pnew[i] += Kk[j].T @ st.R[i, j] @ Kk[j]
                        pnew[i] += Kk[j].T @ (st.R[i, j] @ kk[j]) - Kk[j].T @ st.r[i, j]
        P[k] = _sym(Pnew)
        p[k] = pnew

    return AffineStrategy(K_gain, k_ff), FeedbackValueRecursion(P, p, F_all, beta_all)


def solve_open_loop(
    problem: LQGameProblem, dx0: np.ndarray
) -> tuple[AffineStrategy, OpenLoopValueRecursion, np.ndarray]:
    """Open-loop Nash equilibrium of an LQ game from state deviation ``dx0``.

    Returns a strategy with zero gains whose feedforward terms, applied as
    u = uhat - k_ff, reproduce the equilibrium input sequences, together with
    the costate recursion and the equilibrium state-deviation trajectory.
    """
    N, K, n, m = problem.N, problem.K, problem.n, problem.m
    M = np.zeros((K + 1, N, n, n))
    mv = np.zeros((K + 1, N, n))
    M[K] = _sym(problem.QK)
    mv[K] = problem.qK
    Lam = np.zeros((K, n, n))
    Lam_inv = np.zeros((K, n, n))
    # Per stage: y_k = sum_j B^j R^{jj,-1} (B^{j,T} m^j_{k+1} + r^{jj}_k),
    # the joint pull of all players' unconstrained input updates.
    y_all = np.zeros((K, n))

    # Own-input cost inverses and B R^{-1} products for every stage and
    # player, in batched calls outside the recursion.
    R_own = np.stack([np.stack([st.R[i, i] for i in range(N)]) for st in problem.stages])
    B_all = np.stack([st.B for st in problem.stages])  # (K, N, n, m)
    Rinv = np.linalg.inv(R_own)  # (K, N, m, m)
    BRinv_all = B_all @ Rinv  # (K, N, n, m)
    eye = np.eye(n)
    for k in range(K - 1, -1, -1):
        st = problem.stages[k]
        A, B = st.A, st.B
        Lam_k = eye.copy()
        y = np.zeros(n)
        for j in range(N):
            BRinv = BRinv_all[k, j]  # (n, m)
            Lam_k += BRinv @ (B[j].T @ M[k + 1, j])
            y += BRinv @ (B[j].T @ mv[k + 1, j] + st.r[j, j])
        Lam[k] = Lam_k
        y_all[k] = y
        Li = _inv_checked(Lam_k, k, "open-loop coupling matrix")
        Lam_inv[k] = Li
        W = Li @ A
        z = Li @ y
        for i in range(N):
            M[k, i] = st.Q[i] + A.T @ (M[k + 1, i] @ W)
            mv[k, i] = A.T @ (mv[k + 1, i] - M[k + 1, i] @ z) + st.q[i]

    # Forward sweep: propagate the coupled state deviation and read off each
    # player's input through its costate.  k_ff is stored so that the applied
    # deviation -k_ff equals the equilibrium input deviation.
    dxs = np.zeros((K + 1, n))
    dxs[0] = dx0
    k_ff = np.zeros((K, N, m))
    for k in range(K):
        st = problem.stages[k]
        dxs[k + 1] = Lam_inv[k] @ (st.A @ dxs[k] - y_all[k])
        for i in range(N):
            grad = st.B[i].T @ (M[k + 1, i] @ dxs[k + 1] + mv[k + 1, i]) + st.r[i, i]
            k_ff[k, i] = Rinv[k, i] @ grad

    strategy = AffineStrategy(np.zeros((K, N, m, n)), k_ff)
    return strategy, OpenLoopValueRecursion(M, mv, Lam), dxs


def solve_lqr(problem: LQGameProblem) -> AffineStrategy:
    """Single-player solver via the difference Riccati equation.

    Independent of the stacked-system path in ``solve_feedback``; used as an
    internal oracle and as the backward pass of the sequential planner.
    """
    if problem.N != 1:
        raise ValueError("solve_lqr requires a single-player problem")
    K, n, m = problem.K, problem.n, problem.m
    P = _sym(problem.QK[0])
    p = problem.qK[0].copy()
    K_gain = np.zeros((K, 1, m, n))
    k_ff = np.zeros((K, 1, m))
    rhs = np.zeros((m, n + 1))
    for k in range(K - 1, -1, -1):
        st = problem.stages[k]
        A, B = st.A, st.B[0]
        Q, q = st.Q[0], st.q[0]
        R, r = st.R[0, 0], st.r[0, 0]
        BtP = B.T @ P
        H = R + BtP @ B
        rhs[:, :n] = BtP @ A
        rhs[:, n] = B.T @ p + r
        sol = _inv_checked(H, k, "Riccati gain system") @ rhs
        Kk, kk = sol[:, :n], sol[:, n]
        K_gain[k, 0] = Kk
        k_ff[k, 0] = kk
        # Riccati update in its textbook form, then the affine value term.
        Pnew = Q + A.T @ P @ A - (A.T @ P @ B) @ Kk
        F = A - B @ Kk
        p = q + F.T @ (p - P @ (B @ kk)) + Kk.T @ (R @ kk) - Kk.T @ r
        P = _sym(Pnew)
    return AffineStrategy(K_gain, k_ff)
