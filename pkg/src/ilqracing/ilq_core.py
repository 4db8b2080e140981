"""Iterative LQ game solver for nonlinear dynamic games.

Given a game supplied through callbacks (continuous-time dynamics with
analytic Jacobians, per-player stage and terminal costs with analytic
derivatives), the solver repeats four steps until the trajectory stops
moving: forward-Euler linearization along the nominal trajectory, quadratic
cost expansion, an exact LQ-game backward pass (open-loop or feedback), and
a damped forward pass through the exact nonlinear dynamics.  Intermediate
trajectories are always dynamically feasible because the forward pass rolls
the true dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lq_solver import (
    AffineStrategy,
    LQGameProblem,
    LQGameStage,
    solve_feedback,
    solve_lqr,
    solve_open_loop,
)

OPEN_LOOP = "open-loop"
FEEDBACK = "feedback"

R_FLOOR = 1e-6  # minimum eigenvalue enforced on input-cost Hessians


class EvaluationFailure(RuntimeError):
    """A dynamics or cost callback could not be evaluated (invalid state)."""


@dataclass(frozen=True)
class StageExpansion:
    """Quadratic expansion of one player's stage cost along a trajectory."""

    value: np.ndarray  # (K,)
    grad_x: np.ndarray  # (K, n)
    hess_x: np.ndarray  # (K, n, n)
    grad_u: np.ndarray  # (K, m)
    hess_u: np.ndarray  # (K, m, m)


@dataclass(frozen=True)
class GameDefinition:
    """Nonlinear dynamic game described by callbacks.

    dynamics(x, u) evaluates the continuous-time joint vector field and
    broadcasts over leading axes; x has shape (..., n), u (..., N, m).
    jacobians(X, U) returns (fx, fu) with shapes (K, n, n) and (K, N, n, m)
    for a stage batch.  stage_costs[i](X, U_i) returns a StageExpansion;
    terminal_costs[i](x) returns (value, grad, hess).  positions(X) maps
    states to per-player planar coordinates, shape (..., N, 2), used by the
    trajectory-change metric.
    """

    N: int
    K: int
    n: int
    m: int
    dt: float
    dynamics: Callable
    jacobians: Callable
    stage_costs: Sequence[Callable]
    terminal_costs: Sequence[Callable]
    positions: Callable


@dataclass(frozen=True)
class OperatingPoint:
    """Joint nominal trajectory: xs (K+1, n) and inputs us (K, N, m)."""

    xs: np.ndarray
    us: np.ndarray


@dataclass(frozen=True)
class SolverParams:
    mode: str = OPEN_LOOP
    eta: float = 0.1
    max_iters: int = 50
    conv_tol: float = 0.01  # meters of trajectory change
    regularization: float = 0.0  # eigenvalue floor for state-cost Hessians

    def __post_init__(self):
        if self.mode not in (OPEN_LOOP, FEEDBACK):
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("step size must lie in (0, 1]")


@dataclass
class SolveResult:
    op: OperatingPoint
    strategies: AffineStrategy
    converged: bool
    iterations: int
    trajectory_changes: list = field(default_factory=list)
    costs: np.ndarray | None = None  # per-player total cost at the final op


def rollout(defn: GameDefinition, x0: np.ndarray, us: np.ndarray) -> OperatingPoint:
    """Forward-Euler rollout of the joint dynamics under fixed inputs."""
    xs = np.zeros((defn.K + 1, defn.n))
    xs[0] = x0
    for k in range(defn.K):
        xs[k + 1] = xs[k] + defn.dt * defn.dynamics(xs[k], us[k])
    return OperatingPoint(xs=xs, us=np.array(us, dtype=float, copy=True))


def linearize(defn: GameDefinition, op: OperatingPoint):
    """Per-stage discrete-time system matrices A_k = I + dt*fx, B_k^i = dt*fu."""
    fx, fu = defn.jacobians(op.xs[:-1], op.us)
    A = defn.dt * fx
    A[:, range(defn.n), range(defn.n)] += 1.0
    B = defn.dt * fu
    return A, B


def _floor_eigenvalues(H: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clip the spectrum of a batch of matrices at ``floor``.

    Matrices whose Gershgorin lower bound already clears the floor are passed
    through unchanged (projection would be the identity); only the remainder
    pays for an eigendecomposition.
    """
    Hs = 0.5 * (H + np.swapaxes(H, -1, -2))
    diag = np.diagonal(Hs, axis1=-2, axis2=-1)
    radius = np.abs(Hs).sum(axis=-1) - np.abs(diag)
    certain = ((diag - radius) >= floor).all(axis=-1)
    if certain.all():
        return Hs
    if Hs.ndim == 2:
        w, V = np.linalg.eigh(Hs)
        if w.min() >= floor:
            return Hs
        return V @ (np.maximum(w, floor)[:, None] * V.T)
    todo = ~certain
    w, V = np.linalg.eigh(Hs[todo])
    w = np.maximum(w, floor)
    out = Hs.copy()
    out[todo] = V @ (w[..., :, None] * np.swapaxes(V, -1, -2))
    return out


def quadratize(defn: GameDefinition, op: OperatingPoint, regularization: float):
    """Quadratic cost expansion with PSD-projected state Hessians."""
    K, N, n, m = defn.K, defn.N, defn.n, defn.m
    Q = np.zeros((K, N, n, n))
    q = np.zeros((K, N, n))
    R = np.zeros((K, N, N, m, m))
    r = np.zeros((K, N, N, m))
    for i in range(N):
        exp = defn.stage_costs[i](op.xs[:-1], op.us[:, i])
        Q[:, i] = _floor_eigenvalues(exp.hess_x, regularization)
        q[:, i] = exp.grad_x
        R[:, i, i] = _floor_eigenvalues(exp.hess_u, R_FLOOR)
        r[:, i, i] = exp.grad_u
    QK = np.zeros((N, n, n))
    qK = np.zeros((N, n))
    for i in range(N):
        _, g, H = defn.terminal_costs[i](op.xs[-1])
        QK[i] = _floor_eigenvalues(H, regularization)
        qK[i] = g
    return Q, q, R, r, QK, qK


def build_lq_problem(defn: GameDefinition, op: OperatingPoint, regularization: float) -> LQGameProblem:
    A, B = linearize(defn, op)
    Q, q, R, r, QK, qK = quadratize(defn, op, regularization)
    stages = tuple(
        LQGameStage(A=A[k], B=B[k], Q=Q[k], q=q[k], R=R[k], r=r[k]) for k in range(defn.K)
    )
    # Stage costs here never couple through other players' inputs.
    return LQGameProblem(stages=stages, QK=QK, qK=qK, has_cross=False)


def forward_pass(defn: GameDefinition, op: OperatingPoint, strategies: AffineStrategy, eta: float) -> OperatingPoint:
    """Damped strategy update rolled through the exact nonlinear dynamics."""
    xs = np.zeros_like(op.xs)
    us = np.zeros_like(op.us)
    xs[0] = op.xs[0]
    for k in range(defn.K):
        dx = xs[k] - op.xs[k]
        us[k] = op.us[k] - strategies.K_gain[k] @ dx - eta * strategies.k_ff[k]
        xs[k + 1] = xs[k] + defn.dt * defn.dynamics(xs[k], us[k])
    return OperatingPoint(xs=xs, us=us)


def trajectory_change(defn: GameDefinition, op_a: OperatingPoint, op_b: OperatingPoint) -> float:
    """Largest per-player planar displacement between two trajectories."""
    pa = defn.positions(op_a.xs)
    pb = defn.positions(op_b.xs)
    return float(np.sqrt(((pa - pb) ** 2).sum(axis=-1)).max())


def total_costs(defn: GameDefinition, op: OperatingPoint) -> np.ndarray:
    """Each player's true (unexpanded) total cost along an operating point."""
    costs = np.zeros(defn.N)
    for i in range(defn.N):
        exp = defn.stage_costs[i](op.xs[:-1], op.us[:, i])
        value, _, _ = defn.terminal_costs[i](op.xs[-1])
        costs[i] = exp.value.sum() + value
    return costs


def _backward(problem: LQGameProblem, mode: str) -> AffineStrategy:
    if mode == FEEDBACK:
        if problem.N == 1:
            return solve_lqr(problem)
        return solve_feedback(problem)[0]
    return solve_open_loop(problem, np.zeros(problem.n))[0]


def solve(
    defn: GameDefinition,
    x0: np.ndarray,
    warm_start: np.ndarray | None = None,
    params: SolverParams = SolverParams(),
) -> SolveResult:
    """Run the iterative LQ game loop from ``x0``.

    The warm start is an input sequence (K, N, m); by default all players
    start from zero inputs.  Returns the last operating point whether or not
    the trajectory-change test converged within ``max_iters``.
    """
    if warm_start is None:
        warm_start = np.zeros((defn.K, defn.N, defn.m))
    op = rollout(defn, x0, warm_start)
    changes: list[float] = []
    strategies = AffineStrategy(
        np.zeros((defn.K, defn.N, defn.m, defn.n)), np.zeros((defn.K, defn.N, defn.m))
    )
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iters + 1):
        problem = build_lq_problem(defn, op, params.regularization)
        strategies = _backward(problem, params.mode)
        new_op = forward_pass(defn, op, strategies, params.eta)
        change = trajectory_change(defn, op, new_op)
        changes.append(change)
        op = new_op
        if change <= params.conv_tol:
            converged = True
            break
    return SolveResult(
        op=op,
        strategies=strategies,
        converged=converged,
        iterations=iterations,
        trajectory_changes=changes,
        costs=total_costs(defn, op),
    )
