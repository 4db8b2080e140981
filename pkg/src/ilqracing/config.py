"""JSON configuration schema for scenarios and batch studies.

One file describes everything: the track, the players (initial state,
planner, cost weights, acceleration envelope), shared solver settings,
simulation settings, and the optional batch section.  Every key has a
default; unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ilq_core import FEEDBACK, OPEN_LOOP, SolverParams
from .racing import CostParams, GGDiamond, Track
from .sim import PLANNER_KINDS, SEQUENTIAL, PlannerSpec, ScenarioConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _get(section: dict, key: str, default, where: str, kind=None):
    value = section.get(key, default)
    if kind is not None and value is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{key}: {exc}") from exc
    return value


TRACK_KEYS = ("length", "width_left", "width_right", "curvature")
COST_KEYS = ("r_jerk", "c_collision", "c_wall", "c_ax", "c_acc", "c_compete",
             "l_veh", "w_veh")
GG_KEYS = ("v_grid", "ax_max", "ax_min_mag", "ay_max")
PLAYER_KEYS = ("s0", "v0", "n0", "chi0", "ax0", "ay0", "v_max", "planner",
               "cost", "gg")
SOLVER_KEYS = ("mode", "eta", "max_iters", "conv_tol", "regularization",
               "horizon", "dt")
SCENARIO_KEYS = ("duration", "replan_interval", "overtake_gap", "overtake_margin")
BATCH_KEYS = ("ratios", "samples", "seed", "ego_kinds", "opponent_kinds",
              "start_sampling")
TOP_KEYS = ("track", "players", "solver", "scenario", "batch")


def _build_track(section: dict) -> Track:
    _check_keys(section, TRACK_KEYS, "track")
    length = _get(section, "length", 600.0, "track", float)
    wl = _get(section, "width_left", 4.0, "track", float)
    wr = _get(section, "width_right", 4.0, "track", float)
    curvature = section.get("curvature")
    if curvature is None:
        return Track.straight(length=length, width_left=wl, width_right=wr)
    pts = np.asarray(curvature, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ConfigError("track.curvature must be a list of [s, kappa] pairs")
    return Track.from_profiles(pts[:, 0], pts[:, 1], wl, wr)


def _build_cost(section: dict, where: str) -> CostParams:
    _check_keys(section, COST_KEYS, where)
    defaults = CostParams()
    r_jerk = section.get("r_jerk")
    if r_jerk is None:
        R = defaults.R_jerk
    else:
        arr = np.asarray(r_jerk, dtype=float)
        R = np.diag([float(arr), float(arr)]) if arr.ndim == 0 else (
            np.diag(arr) if arr.ndim == 1 else arr)
    try:
        return CostParams(
            R_jerk=R,
            c_collision=_get(section, "c_collision", defaults.c_collision, where, float),
            c_wall=_get(section, "c_wall", defaults.c_wall, where, float),
            c_ax=_get(section, "c_ax", defaults.c_ax, where, float),
            c_acc=_get(section, "c_acc", defaults.c_acc, where, float),
            c_compete=_get(section, "c_compete", defaults.c_compete, where, float),
            l_veh=_get(section, "l_veh", defaults.l_veh, where, float),
            w_veh=_get(section, "w_veh", defaults.w_veh, where, float),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_gg(section: dict, v_max: float, where: str) -> GGDiamond:
    if not section:
        return GGDiamond.default(v_max)
    _check_keys(section, GG_KEYS, where)
    try:
        return GGDiamond(
            v_grid=np.asarray(section["v_grid"], dtype=float),
            ax_max=np.asarray(section["ax_max"], dtype=float),
            ax_min_mag=np.asarray(section["ax_min_mag"], dtype=float),
            ay_max=np.asarray(section["ay_max"], dtype=float),
            v_max=v_max,
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: missing table {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_solver(section: dict) -> tuple[SolverParams, int, float]:
    _check_keys(section, SOLVER_KEYS, "solver")
    mode = _get(section, "mode", OPEN_LOOP, "solver", str)
    if mode not in (OPEN_LOOP, FEEDBACK):
        raise ConfigError(f"solver.mode must be {OPEN_LOOP!r} or {FEEDBACK!r}")
    try:
        params = SolverParams(
            mode=mode,
            eta=_get(section, "eta", 0.1, "solver", float),
            max_iters=_get(section, "max_iters", 50, "solver", int),
            conv_tol=_get(section, "conv_tol", 0.01, "solver", float),
            regularization=_get(section, "regularization", 0.0, "solver", float),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc
    horizon = _get(section, "horizon", 40, "solver", int)
    dt = _get(section, "dt", 0.1, "solver", float)
    if horizon < 1 or dt <= 0:
        raise ConfigError("solver.horizon must be >= 1 and solver.dt > 0")
    return params, horizon, dt


DEFAULT_PLAYERS = (
    {"s0": 50.0, "v0": 30.0, "n0": 0.0, "v_max": 30.0, "planner": SEQUENTIAL},
    {"s0": 0.0, "v0": 40.0, "n0": 0.5, "v_max": 40.0, "planner": SEQUENTIAL},
)


def load_config(source) -> dict:
    """Parse a config mapping, file path, or JSON string into raw sections."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    elif isinstance(source, dict):
        raw = source
    else:
        raise ConfigError(f"unsupported config source {type(source)!r}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, TOP_KEYS, "config")
    return raw


def build_scenario(raw: dict, mode_override: str | None = None) -> ScenarioConfig:
    """Materialize a ScenarioConfig from parsed config sections."""
    track = _build_track(raw.get("track", {}))
    solver, horizon, dt = _build_solver(raw.get("solver", {}))
    if mode_override is not None:
        if mode_override not in (OPEN_LOOP, FEEDBACK):
            raise ConfigError(f"mode override must be {OPEN_LOOP!r} or {FEEDBACK!r}")
        solver = SolverParams(mode=mode_override, eta=solver.eta,
                              max_iters=solver.max_iters, conv_tol=solver.conv_tol,
                              regularization=solver.regularization)

    players = raw.get("players", [dict(p) for p in DEFAULT_PLAYERS])
    if not isinstance(players, list) or len(players) < 1:
        raise ConfigError("players must be a non-empty list")
    x0 = np.zeros((len(players), 6))
    planners, costs, diamonds = [], [], []
    for idx, p in enumerate(players):
        where = f"players[{idx}]"
        if not isinstance(p, dict):
            raise ConfigError(f"{where} must be an object")
        _check_keys(p, PLAYER_KEYS, where)
        v0 = _get(p, "v0", 30.0, where, float)
        x0[idx] = [
            _get(p, "s0", 0.0, where, float),
            v0,
            _get(p, "n0", 0.0, where, float),
            _get(p, "chi0", 0.0, where, float),
            _get(p, "ax0", 0.0, where, float),
            _get(p, "ay0", 0.0, where, float),
        ]
        kind = _get(p, "planner", SEQUENTIAL, where, str)
        if kind not in PLANNER_KINDS:
            raise ConfigError(f"{where}.planner must be one of {PLANNER_KINDS}")
        if mode_override is not None and kind != SEQUENTIAL:
            kind = "game-open-loop" if mode_override == OPEN_LOOP else "game-feedback"
        planners.append(PlannerSpec(kind=kind, params=solver))
        costs.append(_build_cost(p.get("cost", {}), f"{where}.cost"))
        v_max = _get(p, "v_max", v0, where, float)
        diamonds.append(_build_gg(p.get("gg", {}), v_max, f"{where}.gg"))

    scen = raw.get("scenario", {})
    _check_keys(scen, SCENARIO_KEYS, "scenario")
    try:
        return ScenarioConfig(
            track=track,
            x0=x0,
            planners=planners,
            cost_params=costs,
            diamonds=diamonds,
            K=horizon,
            dt=dt,
            replan_interval=_get(scen, "replan_interval", dt, "scenario", float),
            duration=_get(scen, "duration", 20.0, "scenario", float),
            overtake_gap=_get(scen, "overtake_gap", 20.0, "scenario", float),
            overtake_margin=_get(scen, "overtake_margin", 5.0, "scenario", float),
        )
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def batch_section(raw: dict) -> dict:
    """Validated batch settings with defaults filled in."""
    section = raw.get("batch", {})
    _check_keys(section, BATCH_KEYS, "batch")
    ratios = [float(x) for x in section.get("ratios", (1.0, 10.0))]
    if any(r <= 0 for r in ratios):
        raise ConfigError("batch.ratios must be positive")
    samples = _get(section, "samples", 20, "batch", int)
    if samples < 1:
        raise ConfigError("batch.samples must be >= 1")
    kinds = list(PLANNER_KINDS)
    ego_kinds = section.get("ego_kinds", kinds)
    opp_kinds = section.get("opponent_kinds", kinds)
    for lst, name in ((ego_kinds, "ego_kinds"), (opp_kinds, "opponent_kinds")):
        bad = set(lst) - set(PLANNER_KINDS)
        if bad:
            raise ConfigError(f"batch.{name}: unknown planner kind(s) {sorted(bad)}")
    rule = _get(section, "start_sampling", "uniform-ordered", "batch", str)
    if rule != "uniform-ordered":
        raise ConfigError("batch.start_sampling supports only 'uniform-ordered'")
    return {
        "ratios": ratios,
        "samples": samples,
        "seed": _get(section, "seed", 0, "batch", int),
        "ego_kinds": list(ego_kinds),
        "opponent_kinds": list(opp_kinds),
        "start_sampling": rule,
    }
