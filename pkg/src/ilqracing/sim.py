"""Moving-horizon closed-loop simulation of competing planners.

Each player replans at a fixed cadence from the measured joint state using
its own planner: either the sequential approach (predict opponents at
constant velocity, then solve a single-vehicle problem) or the full dynamic
game with an open-loop or feedback solution concept.  Planners never share
solutions; between replans everybody executes its own plan open-loop, and the
plant integrates the same forward-Euler dynamics the planners use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import racing
from .ilq_core import (
    FEEDBACK,
    OPEN_LOOP,
    EvaluationFailure,
    SolverParams,
    solve,
)
from .lq_solver import SingularSystem
from .racing import IN, IS, NU, NX, CostParams, GGDiamond, Track

SEQUENTIAL = "sequential"
GAME_OPEN_LOOP = "game-open-loop"
GAME_FEEDBACK = "game-feedback"
PLANNER_KINDS = (SEQUENTIAL, GAME_OPEN_LOOP, GAME_FEEDBACK)


@dataclass(frozen=True)
class PlannerSpec:
    kind: str
    params: SolverParams = SolverParams()

    def __post_init__(self):
        if self.kind not in PLANNER_KINDS:
            raise ValueError(f"unknown planner kind {self.kind!r}")

    @property
    def mode(self) -> str:
        # The solution concept is part of the planner kind for game planners;
        # the sequential planner keeps whatever its solver params say.
        if self.kind == GAME_OPEN_LOOP:
            return OPEN_LOOP
        if self.kind == GAME_FEEDBACK:
            return FEEDBACK
        return self.params.mode


@dataclass(frozen=True)
class ScenarioConfig:
    track: Track
    x0: np.ndarray  # (N, 6) initial vehicle states
    planners: Sequence[PlannerSpec]
    cost_params: Sequence[CostParams]
    diamonds: Sequence[GGDiamond]
    K: int = 40
    dt: float = 0.1
    replan_interval: float = 0.1
    duration: float = 20.0
    overtake_gap: float = 20.0
    overtake_margin: float = 5.0

    @property
    def N(self) -> int:
        return len(self.planners)

    @property
    def replan_steps(self) -> int:
        steps = self.replan_interval / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("replan interval must be an integer multiple of dt")
        return max(1, int(round(steps)))

    def joint_x0(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float).reshape(-1)


@dataclass
class StepDiagnostics:
    time: float
    player: int
    iterations: int
    converged: bool
    failed: bool = False
    message: str = ""


@dataclass
class SimEvent:
    kind: str  # "collision" | "overtake"
    time: float
    pair: tuple  # (i, j); for overtake, j passed i


@dataclass
class SimLog:
    times: np.ndarray  # (T+1,)
    states: np.ndarray  # (T+1, N*6)
    inputs: np.ndarray  # (T, N, 2)
    diagnostics: list = field(default_factory=list)
    events: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.states.shape[1] // NX

    def player_states(self) -> np.ndarray:
        return self.states.reshape(self.states.shape[0], self.N, NX)


def predict_constant_velocity(state: np.ndarray, K: int, dt: float) -> np.ndarray:
    """Straight-path constant-speed prediction of (s, n) over stages 0..K."""
    state = np.asarray(state, dtype=float)
    k = np.arange(K + 1)
    s = state[IS] + state[1] * np.cos(state[3]) * k * dt
    n = state[IN] + state[1] * np.sin(state[3]) * k * dt
    return np.stack([s, n], axis=1)


def _shift_warm_start(warm: Optional[np.ndarray], steps: int, shape) -> np.ndarray:
    """Previous solution advanced by the replan interval, zero-padded."""
    out = np.zeros(shape)
    if warm is not None and steps < shape[0]:
        out[: shape[0] - steps] = warm[steps:]
    return out


def plan_step(i: int, x_joint: np.ndarray, warm: Optional[np.ndarray],
              spec: PlannerSpec, scenario: ScenarioConfig, time: float = 0.0):
    """One planning solve for player ``i`` from the current joint state.

    Returns (inputs for i over the horizon, diagnostics, warm start for the
    next call).  Solver failures degrade to reusing the shifted remainder of
    the previous plan.
    """
    K, dt = scenario.K, scenario.dt
    steps = scenario.replan_steps
    x_joint = np.asarray(x_joint, dtype=float)
    states = x_joint.reshape(scenario.N, NX)

    if spec.kind == SEQUENTIAL:
        obstacles = []
        for j in range(scenario.N):
            if j == i:
                continue
            path = predict_constant_velocity(states[j], K, dt)
            pj = scenario.cost_params[j]
            obstacles.append((path[:, 0], path[:, 1], pj.l_veh, pj.w_veh))
        defn = racing.build_single_player_game(
            scenario.track, scenario.cost_params[i], scenario.diamonds[i],
            obstacles, K, dt,
        )
        warm_us = _shift_warm_start(warm, steps, (K, 1, NU))
        x0 = states[i]
    else:
        defn = racing.build_game(
            scenario.track, scenario.cost_params, scenario.diamonds, K, dt
        )
        warm_us = _shift_warm_start(warm, steps, (K, scenario.N, NU))
        x0 = x_joint

    params = SolverParams(
        mode=spec.mode,
        eta=spec.params.eta,
        max_iters=spec.params.max_iters,
        conv_tol=spec.params.conv_tol,
        regularization=spec.params.regularization,
    )
    try:
        result = solve(defn, x0, warm_start=warm_us, params=params)
    except (SingularSystem, EvaluationFailure) as exc:
        diag = StepDiagnostics(time=time, player=i, iterations=0, converged=False,
                               failed=True, message=str(exc))
        plan = warm_us[:, 0] if spec.kind == SEQUENTIAL else warm_us[:, i]
        return plan, diag, warm_us

    diag = StepDiagnostics(time=time, player=i, iterations=result.iterations,
                           converged=result.converged)
    us = result.op.us
    plan = us[:, 0] if spec.kind == SEQUENTIAL else us[:, i]
    return plan, diag, us


def detect_collision(x_joint: np.ndarray, geometry: Sequence[tuple]) -> Optional[tuple]:
    """First colliding pair (i, j) under the track-aligned rectangle test.

    ``geometry`` holds per-player (l_veh, w_veh); a pair collides when both
    the longitudinal gap is below the mean length and the lateral gap below
    the mean width (strict inequalities).
    """
    states = np.asarray(x_joint, dtype=float).reshape(-1, NX)
    N = states.shape[0]
    for i in range(N):
        for j in range(i + 1, N):
            l_pair = 0.5 * (geometry[i][0] + geometry[j][0])
            w_pair = 0.5 * (geometry[i][1] + geometry[j][1])
            if (abs(states[i, IS] - states[j, IS]) < l_pair
                    and abs(states[i, IN] - states[j, IN]) < w_pair):
                return (i, j)
    return None


def run_scenario(scenario: ScenarioConfig, seed: int = 0) -> SimLog:
    """Closed-loop episode until duration, collision, or overtake + margin."""
    N, K, dt = scenario.N, scenario.K, scenario.dt
    steps = scenario.replan_steps
    track = scenario.track
    geometry = [(p.l_veh, p.w_veh) for p in scenario.cost_params]
    max_steps = int(round(scenario.duration / dt))

    x = scenario.joint_x0()
    times = [0.0]
    states = [x.copy()]
    inputs = []
    diagnostics: list[StepDiagnostics] = []
    events: list[SimEvent] = []
    warm: list[Optional[np.ndarray]] = [None] * N
    # Ordered pairs eligible for an overtake event: j starts behind i.
    s0 = x.reshape(N, NX)[:, IS]
    pending = {(j, i) for i in range(N) for j in range(N)
               if i != j and s0[j] < s0[i]}

    step = 0
    deadline = max_steps
    collided = False
    while step < deadline:
        t = step * dt
        plans = []
        for i in range(N):
            plan, diag, warm[i] = plan_step(i, x, warm[i], scenario.planners[i], scenario, t)
            plans.append(plan)
            diagnostics.append(diag)
        for r in range(steps):
            if step >= deadline:
                break
            u = np.stack([plans[i][r] for i in range(N)])
            x = x + dt * racing.joint_dynamics(x, u, track)
            step += 1
            times.append(step * dt)
            states.append(x.copy())
            inputs.append(u)
            pstates = x.reshape(N, NX)
            pair = detect_collision(x, geometry)
            if pair is not None:
                events.append(SimEvent("collision", step * dt, pair))
                collided = True
                break
            for (j, i) in sorted(pending):
                if pstates[j, IS] - pstates[i, IS] >= scenario.overtake_gap:
                    events.append(SimEvent("overtake", step * dt, (i, j)))
                    pending.discard((j, i))
                    new_deadline = step + int(round(scenario.overtake_margin / dt))
                    deadline = min(deadline, new_deadline)
        if collided:
            break

    log = SimLog(
        times=np.asarray(times),
        states=np.asarray(states),
        inputs=np.asarray(inputs) if inputs else np.zeros((0, N, NU)),
        diagnostics=diagnostics,
        events=events,
    )
    overtakes = [e for e in log.events if e.kind == "overtake"]
    planned = [d for d in diagnostics if not d.failed]
    log.summary = {
        "outcome": "collision" if collided else ("overtake" if overtakes else "timeout"),
        "collision": collided,
        "overtake_time": overtakes[0].time if overtakes else None,
        "steps": len(inputs),
        "planning_steps": len(diagnostics),
        "failed_steps": sum(d.failed for d in diagnostics),
        "converged_steps": sum(d.converged for d in planned),
        "mean_iterations": (float(np.mean([d.iterations for d in planned]))
                            if planned else 0.0),
        "seed": seed,
    }
    return log


def overtaking_time(log: SimLog, overtaker: int, target: int, gap: float) -> Optional[float]:
    """First logged time at which ``overtaker`` leads ``target`` by ``gap``.

    Only defined when the overtaker starts behind; None when the gap is never
    reached within the log.
    """
    ps = log.player_states()
    lead = ps[:, overtaker, IS] - ps[:, target, IS]
    hits = np.nonzero(lead >= gap)[0]
    if len(hits) == 0:
        return None
    return float(log.times[hits[0]])
