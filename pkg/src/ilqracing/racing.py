"""Racing domain: curvilinear point-mass vehicles, acceleration envelopes,
soft-constraint stage costs, and a competitive progress terminal cost.

States live in track coordinates (progress s, speed V, lateral offset n,
relative heading chi, accelerations ax/ay); inputs are the two jerks.  All
cost and dynamics derivatives are analytic and vectorized over a leading
batch axis; finite differences are used only by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ilq_core import EvaluationFailure, GameDefinition, StageExpansion

# State layout per vehicle.
IS, IV, IN, ICHI, IAX, IAY = range(6)
NX = 6  # states per vehicle
NU = 2  # inputs per vehicle (jx, jy)

V_MIN = 0.1  # m/s; below this the chi dynamics blow up
CHART_MIN = 1e-9  # validity margin for 1 - n*kappa(s)


def _interp_with_slope(grid: np.ndarray, vals: np.ndarray, s):
    """Piecewise-linear table lookup with the local slope.

    Constant extrapolation outside the grid (slope 0 there).
    """
    s = np.asarray(s, dtype=float)
    v = np.interp(s, grid, vals)
    idx = np.clip(np.searchsorted(grid, s, side="right") - 1, 0, len(grid) - 2)
    seg = (vals[idx + 1] - vals[idx]) / (grid[idx + 1] - grid[idx])
    slope = np.where((s > grid[0]) & (s < grid[-1]), seg, 0.0)
    return v, slope


@dataclass(frozen=True)
class Track:
    """Centerline curvature and boundary offsets, sampled over progress."""

    s_grid: np.ndarray
    kappa: np.ndarray
    width_left: np.ndarray
    width_right: np.ndarray
    length: float

    def __post_init__(self):
        # Constant-profile fast paths; curvature lookups sit on the hot path
        # of every rollout step.
        object.__setattr__(self, "_kappa_zero", bool(np.all(self.kappa == 0.0)))
        wl = self.width_left
        wr = self.width_right
        object.__setattr__(self, "_const_wl", float(wl[0]) if np.all(wl == wl[0]) else None)
        object.__setattr__(self, "_const_wr", float(wr[0]) if np.all(wr == wr[0]) else None)

    @classmethod
    def straight(cls, length: float = 600.0, width_left: float = 4.0, width_right: float = 4.0):
        grid = np.array([0.0, length])
        return cls(
            s_grid=grid,
            kappa=np.zeros(2),
            width_left=np.full(2, float(width_left)),
            width_right=np.full(2, float(width_right)),
            length=float(length),
        )

    @classmethod
    def from_profiles(cls, s_grid, kappa, width_left, width_right):
        s_grid = np.asarray(s_grid, dtype=float)
        if s_grid.ndim != 1 or len(s_grid) < 2 or np.any(np.diff(s_grid) <= 0):
            raise ValueError("track grid must be strictly increasing with >= 2 samples")
        wl = np.broadcast_to(np.asarray(width_left, dtype=float), s_grid.shape).copy()
        wr = np.broadcast_to(np.asarray(width_right, dtype=float), s_grid.shape).copy()
        if np.any(wl <= 0) or np.any(wr <= 0):
            raise ValueError("track widths must be positive")
        kap = np.broadcast_to(np.asarray(kappa, dtype=float), s_grid.shape).copy()
        return cls(s_grid=s_grid, kappa=kap, width_left=wl, width_right=wr,
                   length=float(s_grid[-1] - s_grid[0]))

    def curvature(self, s):
        if self._kappa_zero:
            z = np.zeros(np.shape(s))
            return z, z
        return _interp_with_slope(self.s_grid, self.kappa, s)

    def bounds(self, s):
        if self._const_wl is not None and self._const_wr is not None:
            z = np.zeros(np.shape(s))
            return np.full(np.shape(s), self._const_wl), z, np.full(np.shape(s), self._const_wr), z
        wl, dwl = _interp_with_slope(self.s_grid, self.width_left, s)
        wr, dwr = _interp_with_slope(self.s_grid, self.width_right, s)
        return wl, dwl, wr, dwr


@dataclass(frozen=True)
class GGDiamond:
    """Velocity-dependent acceleration envelope (diamond approximation).

    Tables hold the forward limit ax_max(V), the braking magnitude
    |ax_min|(V), and the lateral limit ay_max(V); linear interpolation
    between samples, constant extrapolation outside.  ax_max must vanish at
    v_max, which is how top speed is enforced.
    """

    v_grid: np.ndarray
    ax_max: np.ndarray
    ax_min_mag: np.ndarray
    ay_max: np.ndarray
    v_max: float

    def __post_init__(self):
        ax_at_vmax = np.interp(self.v_max, self.v_grid, self.ax_max)
        if abs(ax_at_vmax) > 1e-9:
            raise ValueError("ax_max table must reach zero at v_max")
        if np.any(self.ax_min_mag <= 0) or np.any(self.ay_max <= 0):
            raise ValueError("braking and lateral tables must be positive")

    @classmethod
    def default(cls, v_max: float):
        grid = np.array([0.0, float(v_max)])
        return cls(
            v_grid=grid,
            ax_max=np.array([6.0, 0.0]),
            ax_min_mag=np.full(2, 15.0),
            ay_max=np.full(2, 12.0),
            v_max=float(v_max),
        )

    def tables(self, V):
        """(value, slope) triples for ax_max, |ax_min|, ay_max at speed V."""
        am, dam = _interp_with_slope(self.v_grid, self.ax_max, V)
        am = np.where(np.asarray(V, dtype=float) >= self.v_max, 0.0, am)
        p, dp = _interp_with_slope(self.v_grid, self.ax_min_mag, V)
        q, dq = _interp_with_slope(self.v_grid, self.ay_max, V)
        return (am, dam), (p, dp), (q, dq)


def gg_limits(V, diamond: GGDiamond):
    """Acceleration limits (ax_max, ax_min, ay_max) at speed V; ax_min < 0."""
    (am, _), (p, _), (q, _) = diamond.tables(V)
    return am, -p, q


@dataclass(frozen=True)
class VehicleState:
    s: float = 0.0
    V: float = 1.0
    n: float = 0.0
    chi: float = 0.0
    ax: float = 0.0
    ay: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.V, self.n, self.chi, self.ax, self.ay])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*(float(v) for v in np.asarray(x)))


@dataclass(frozen=True)
class ControlInput:
    jx: float = 0.0
    jy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.jx, self.jy])


@dataclass(frozen=True)
class CostParams:
    """Per-player cost weights and vehicle geometry."""

    R_jerk: np.ndarray = field(default_factory=lambda: np.diag([2e-2, 2e-2]))
    c_collision: float = 1.0
    c_wall: float = 200.0
    c_ax: float = 10.0
    c_acc: float = 10.0
    c_compete: float = 0.5
    l_veh: float = 5.0
    w_veh: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "R_jerk", np.asarray(self.R_jerk, dtype=float))
        if self.R_jerk.shape != (2, 2) or np.linalg.eigvalsh(self.R_jerk).min() <= 0:
            raise ValueError("jerk weight must be a 2x2 PD matrix")
        if min(self.l_veh, self.w_veh) <= 0:
            raise ValueError("vehicle geometry must be positive")


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def _check_state(V, D):
    if V.min() <= V_MIN:
        raise EvaluationFailure(f"speed dropped to {float(V.min()):.3f} m/s")
    if D.min() <= CHART_MIN:
        raise EvaluationFailure("state left the curvilinear chart (1 - n*kappa <= 0)")


def _vehicle_dynamics(xp: np.ndarray, up: np.ndarray, track: Track) -> np.ndarray:
    """Continuous-time derivative of per-vehicle states, batched."""
    s, V, n, chi = xp[..., IS], xp[..., IV], xp[..., IN], xp[..., ICHI]
    ax, ay = xp[..., IAX], xp[..., IAY]
    kap, _ = track.curvature(s)
    cos, sin = np.cos(chi), np.sin(chi)
    D = 1.0 - n * kap
    _check_state(V, D)
    sdot = V * cos / D
    out = np.empty_like(xp)
    out[..., IS] = sdot
    out[..., IV] = ax
    out[..., IN] = V * sin
    out[..., ICHI] = ay / V - kap * sdot
    out[..., IAX] = up[..., 0]
    out[..., IAY] = up[..., 1]
    return out


def continuous_dynamics(state, control, track: Track) -> np.ndarray:
    """Single-vehicle state derivative (accepts VehicleState or array)."""
    x = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
    u = control.as_array() if isinstance(control, ControlInput) else np.asarray(control, dtype=float)
    return _vehicle_dynamics(x, u, track)


def joint_dynamics(x: np.ndarray, u: np.ndarray, track: Track) -> np.ndarray:
    """Concatenated dynamics of N vehicles; x (..., N*6), u (..., N, 2)."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    xp = x.reshape(lead + (-1, NX))
    return _vehicle_dynamics(xp, np.asarray(u, dtype=float), track).reshape(x.shape)


def _vehicle_jacobian(xp: np.ndarray, track: Track) -> np.ndarray:
    """Analytic per-vehicle Jacobian of the continuous dynamics, batched."""
    s, V, n, chi = xp[..., IS], xp[..., IV], xp[..., IN], xp[..., ICHI]
    ay = xp[..., IAY]
    kap, dkap = track.curvature(s)
    cos, sin = np.cos(chi), np.sin(chi)
    D = 1.0 - n * kap
    _check_state(V, D)
    D2 = D * D
    J = np.zeros(xp.shape[:-1] + (NX, NX))
    J[..., IS, IS] = V * cos * n * dkap / D2
    J[..., IS, IV] = cos / D
    J[..., IS, IN] = V * cos * kap / D2
    J[..., IS, ICHI] = -V * sin / D
    J[..., IV, IAX] = 1.0
    J[..., IN, IV] = sin
    J[..., IN, ICHI] = V * cos
    J[..., ICHI, IS] = -V * cos * dkap / D2
    J[..., ICHI, IV] = -ay / (V * V) - kap * cos / D
    J[..., ICHI, IN] = -kap * kap * V * cos / D2
    J[..., ICHI, ICHI] = kap * V * sin / D
    J[..., ICHI, IAY] = 1.0 / V
    return J


def dynamics_jacobians(x: np.ndarray, u: np.ndarray, track: Track):
    """Joint-state Jacobians (block diagonal) and per-player input Jacobians.

    Returns fx with shape (..., N*6, N*6) and fu with shape (..., N, N*6, 2);
    jerks only reach the acceleration states of their own vehicle.
    """
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    N = x.shape[-1] // NX
    blocks = _vehicle_jacobian(x.reshape(lead + (N, NX)), track)
    fx = np.zeros(lead + (N * NX, N * NX))
    fu = np.zeros(lead + (N, N * NX, NU))
    for i in range(N):
        o = i * NX
        fx[..., o:o + NX, o:o + NX] = blocks[..., i, :, :]
        fu[..., i, o + IAX, 0] = 1.0
        fu[..., i, o + IAY, 1] = 1.0
    return fx, fu


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

def _one_sided(viol: np.ndarray, weight: float):
    """Value and d/dviol derivatives of weight * viol^2 on {viol > 0}."""
    act = viol > 0.0
    v = np.where(act, weight * viol * viol, 0.0)
    d1 = np.where(act, 2.0 * weight * viol, 0.0)
    d2 = np.where(act, 2.0 * weight, 0.0)
    return v, d1, d2


def _collision_pieces(ds, dn, l_pair, w_pair, weight):
    """Value and first/second derivatives in (ds, dn) of the proximity cost."""
    zs = -2.0 * ds / (l_pair * l_pair)
    zn = -2.0 * dn / (w_pair * w_pair)
    E = weight * np.exp(1.0 - (ds / l_pair) ** 2 - (dn / w_pair) ** 2)
    E_s, E_n = E * zs, E * zn
    E_ss = E * (zs * zs - 2.0 / (l_pair * l_pair))
    E_sn = E * zs * zn
    E_nn = E * (zn * zn - 2.0 / (w_pair * w_pair))
    return E, E_s, E_n, E_ss, E_sn, E_nn


def _own_state_terms(val, gx, Hx, o, X, track, params, diamond):
    """Wall and acceleration penalties of one vehicle, scattered in place.

    ``o`` is the vehicle's offset in the joint state vector; val/gx/Hx are
    the batch accumulators.
    """
    s = X[..., o + IS]
    V = X[..., o + IV]
    n = X[..., o + IN]
    ax = X[..., o + IAX]
    ay = X[..., o + IAY]
    iS, iV, iN, iAX, iAY = o + IS, o + IV, o + IN, o + IAX, o + IAY

    wl, dwl, wr, dwr = track.bounds(s)
    v, d1, d2 = _one_sided(n - wl, params.c_wall)
    val += v
    gx[..., iN] += d1
    gx[..., iS] += -d1 * dwl
    Hx[..., iN, iN] += d2
    Hx[..., iN, iS] += -d2 * dwl
    Hx[..., iS, iN] += -d2 * dwl
    Hx[..., iS, iS] += d2 * dwl * dwl

    v, d1, d2 = _one_sided(-n - wr, params.c_wall)
    val += v
    gx[..., iN] += -d1
    gx[..., iS] += -d1 * dwr
    Hx[..., iN, iN] += d2
    Hx[..., iN, iS] += d2 * dwr
    Hx[..., iS, iN] += d2 * dwr
    Hx[..., iS, iS] += d2 * dwr * dwr

    (am, dam), (p, dp), (q, dq) = diamond.tables(V)
    v, d1, d2 = _one_sided(ax - am, params.c_ax)
    val += v
    gx[..., iAX] += d1
    gx[..., iV] += -d1 * dam
    Hx[..., iAX, iAX] += d2
    Hx[..., iAX, iV] += -d2 * dam
    Hx[..., iV, iAX] += -d2 * dam
    Hx[..., iV, iV] += d2 * dam * dam

    # Combined-acceleration diamond: rho = (ax/p)^2 + (ay/q)^2 with
    # speed-dependent denominators.
    p2, q2 = p * p, q * q
    rho = ax * ax / p2 + ay * ay / q2
    r_ax = 2.0 * ax / p2
    r_ay = 2.0 * ay / q2
    r_V = -2.0 * (ax * ax * dp / (p2 * p) + ay * ay * dq / (q2 * q))
    r_axax = 2.0 / p2
    r_ayay = 2.0 / q2
    r_axV = -4.0 * ax * dp / (p2 * p)
    r_ayV = -4.0 * ay * dq / (q2 * q)
    r_VV = 6.0 * (ax * ax * dp * dp / (p2 * p2) + ay * ay * dq * dq / (q2 * q2))
    v, d1, d2 = _one_sided(rho - 1.0, params.c_acc)
    val += v
    for idx, g1 in ((iAX, r_ax), (iAY, r_ay), (iV, r_V)):
        gx[..., idx] += d1 * g1
    for ia, ga in ((iAX, r_ax), (iAY, r_ay), (iV, r_V)):
        for ib, gb in ((iAX, r_ax), (iAY, r_ay), (iV, r_V)):
            Hx[..., ia, ib] += d2 * ga * gb
    Hx[..., iAX, iAX] += d1 * r_axax
    Hx[..., iAY, iAY] += d1 * r_ayay
    Hx[..., iAX, iV] += d1 * r_axV
    Hx[..., iV, iAX] += d1 * r_axV
    Hx[..., iAY, iV] += d1 * r_ayV
    Hx[..., iV, iAY] += d1 * r_ayV
    Hx[..., iV, iV] += d1 * r_VV


def _scatter_collision(val, gx, Hx, pieces, idx_i, idx_j=None):
    """Accumulate collision derivatives at own (and optionally other) coords."""
    E, E_s, E_n, E_ss, E_sn, E_nn = pieces
    si, ni = idx_i
    val += E
    gx[..., si] += E_s
    gx[..., ni] += E_n
    Hx[..., si, si] += E_ss
    Hx[..., si, ni] += E_sn
    Hx[..., ni, si] += E_sn
    Hx[..., ni, ni] += E_nn
    if idx_j is not None:
        sj, nj = idx_j
        gx[..., sj] -= E_s
        gx[..., nj] -= E_n
        Hx[..., sj, sj] += E_ss
        Hx[..., sj, nj] += E_sn
        Hx[..., nj, sj] += E_sn
        Hx[..., nj, nj] += E_nn
        Hx[..., si, sj] -= E_ss
        Hx[..., sj, si] -= E_ss
        Hx[..., si, nj] -= E_sn
        Hx[..., nj, si] -= E_sn
        Hx[..., ni, sj] -= E_sn
        Hx[..., sj, ni] -= E_sn
        Hx[..., ni, nj] -= E_nn
        Hx[..., nj, ni] -= E_nn


def _jerk_terms(U, params):
    R = params.R_jerk
    val = np.einsum("...a,ab,...b->...", U, R, U)
    gu = 2.0 * U @ R
    Hu = np.broadcast_to(2.0 * R, U.shape[:-1] + (NU, NU)).copy()
    return val, gu, Hu


def stage_cost(i, x, u_i, track, params: Sequence[CostParams], diamonds: Sequence[GGDiamond]):
    """Stage cost of player ``i`` at one joint state, with derivatives.

    Returns (value, grad_x, hess_x, grad_u, hess_u) over the joint state and
    the player's own input.  Pairwise proximity geometry uses the mean of the
    two vehicles' dimensions.
    """
    x = np.asarray(x, dtype=float)[None]
    u = np.asarray(u_i, dtype=float)[None]
    N = x.shape[-1] // NX
    val, gx, Hx, gu, Hu = _stage_terms_joint(i, x, u, track, params, diamonds, N)
    return float(val[0]), gx[0], Hx[0], gu[0], Hu[0]


def _stage_terms_joint(i, X, U_i, track, params, diamonds, N):
    njoint = N * NX
    val, gu, Hu = _jerk_terms(U_i, params[i])
    gx = np.zeros(X.shape[:-1] + (njoint,))
    Hx = np.zeros(X.shape[:-1] + (njoint, njoint))
    oi = i * NX
    _own_state_terms(val, gx, Hx, oi, X, track, params[i], diamonds[i])
    for j in range(N):
        if j == i:
            continue
        oj = j * NX
        ds = X[..., oi + IS] - X[..., oj + IS]
        dn = X[..., oi + IN] - X[..., oj + IN]
        l_pair = 0.5 * (params[i].l_veh + params[j].l_veh)
        w_pair = 0.5 * (params[i].w_veh + params[j].w_veh)
        pieces = _collision_pieces(ds, dn, l_pair, w_pair, params[i].c_collision)
        _scatter_collision(val, gx, Hx, pieces, (oi + IS, oi + IN), (oj + IS, oj + IN))
    return val, gx, Hx, gu, Hu


def terminal_cost(i, x, params: Sequence[CostParams]):
    """Competitive progress cost: -s_i + c_compete * sum of opponents' s."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1] // NX
    njoint = N * NX
    grad = np.zeros(njoint)
    grad[i * NX + IS] = -1.0
    value = -x[i * NX + IS]
    for j in range(N):
        if j != i:
            grad[j * NX + IS] = params[i].c_compete
            value += params[i].c_compete * x[j * NX + IS]
    return value, grad, np.zeros((njoint, njoint))


# ---------------------------------------------------------------------------
# Game definitions
# ---------------------------------------------------------------------------

def build_game(track: Track, params: Sequence[CostParams], diamonds: Sequence[GGDiamond],
               K: int, dt: float) -> GameDefinition:
    """Full N-player racing game over the joint state."""
    N = len(params)
    njoint = N * NX

    def dynamics(x, u):
        return joint_dynamics(x, u, track)

    def jacobians(X, U):
        return dynamics_jacobians(X, U, track)

    def make_stage_cost(i):
        def cost(X, U_i):
            val, gx, Hx, gu, Hu = _stage_terms_joint(i, X, U_i, track, params, diamonds, N)
            return StageExpansion(val, gx, Hx, gu, Hu)
        return cost

    def make_terminal(i):
        def cost(x):
            return terminal_cost(i, x, params)
        return cost

    def positions(X):
        lead = np.asarray(X).shape[:-1]
        return np.asarray(X).reshape(lead + (N, NX))[..., [IS, IN]]

    return GameDefinition(
        N=N, K=K, n=njoint, m=NU, dt=dt,
        dynamics=dynamics,
        jacobians=jacobians,
        stage_costs=[make_stage_cost(i) for i in range(N)],
        terminal_costs=[make_terminal(i) for i in range(N)],
        positions=positions,
    )


def build_single_player_game(track: Track, own_params: CostParams, own_diamond: GGDiamond,
                             obstacles: Sequence[tuple], K: int, dt: float) -> GameDefinition:
    """One-vehicle optimal control problem against predicted opponents.

    ``obstacles`` holds per-opponent tuples (s_path, n_path, l_veh, w_veh)
    with paths sampled at stages 0..K; predicted positions enter the
    proximity cost as exogenous time-varying parameters.  Opponents' terminal
    progress only shifts the terminal cost by a constant.
    """

    def dynamics(x, u):
        x = np.asarray(x, dtype=float)
        return _vehicle_dynamics(x, np.asarray(u, dtype=float)[..., 0, :], track).reshape(x.shape)

    def jacobians(X, U):
        fx = _vehicle_jacobian(np.asarray(X, dtype=float), track)
        fu = np.zeros(np.asarray(X).shape[:-1] + (1, NX, NU))
        fu[..., 0, IAX, 0] = 1.0
        fu[..., 0, IAY, 1] = 1.0
        return fx, fu

    def cost(X, U_i):
        X = np.asarray(X, dtype=float)
        val, gu, Hu = _jerk_terms(np.asarray(U_i, dtype=float), own_params)
        gx = np.zeros(X.shape[:-1] + (NX,))
        Hx = np.zeros(X.shape[:-1] + (NX, NX))
        _own_state_terms(val, gx, Hx, 0, X, track, own_params, own_diamond)
        for s_path, n_path, l_j, w_j in obstacles:
            ds = X[..., IS] - np.asarray(s_path)[:X.shape[0]]
            dn = X[..., IN] - np.asarray(n_path)[:X.shape[0]]
            l_pair = 0.5 * (own_params.l_veh + l_j)
            w_pair = 0.5 * (own_params.w_veh + w_j)
            pieces = _collision_pieces(ds, dn, l_pair, w_pair, own_params.c_collision)
            _scatter_collision(val, gx, Hx, pieces, (IS, IN))
        return StageExpansion(val, gx, Hx, gu, Hu)

    terminal_shift = own_params.c_compete * sum(float(np.asarray(o[0])[K]) for o in obstacles)

    def terminal(x):
        grad = np.zeros(NX)
        grad[IS] = -1.0
        return -float(x[IS]) + terminal_shift, grad, np.zeros((NX, NX))

    def positions(X):
        return np.asarray(X)[..., None, [IS, IN]]

    return GameDefinition(
        N=1, K=K, n=NX, m=NU, dt=dt,
        dynamics=dynamics,
        jacobians=jacobians,
        stage_costs=[cost],
        terminal_costs=[terminal],
        positions=positions,
    )
