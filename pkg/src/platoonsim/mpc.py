"""Per-cycle finite-horizon MPC for one vehicle in ACC, CACC, or Platooning mode.

Decision variables are the stacked inputs over the horizon; predicted ego
states are eliminated through the cycle's affine model. Each neighbor adds a
quadratic penalty on (aggregate gap error, relative speed); the radar
predecessor additionally contributes a hard no-collision constraint on
predicted positions.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import qp
from .errors import ConfigError
from .vehicle import IV, IX, ControlInput, LinearModel, VehicleState, linearize

MODES = ("ACC", "CACC", "Platooning")


@dataclass(frozen=True)
class SpacingPolicy:
    mode: str  # "ACC" | "CACC" | "Platooning"
    t_gap: float = 0.8  # [s] time headway (ACC/CACC)
    d_const: float = 15.0  # [m] constant clearance (Platooning)
    d_safety: float = 0.0  # [m] minimum gap

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("ACC", "CACC") and self.t_gap <= 0:
            raise ConfigError("t_gap", f"must be positive, got {self.t_gap}")
        if self.mode == "Platooning" and self.d_const <= 0:
            raise ConfigError("d_const", f"must be positive, got {self.d_const}")
        if self.d_safety < 0:
            raise ConfigError("d_safety", f"must be >= 0, got {self.d_safety}")


@dataclass(frozen=True)
class MpcWeights:
    q_ego: tuple = (0.0, 0.0, 0.0, 0.0)  # ego trajectory-error weights [x y v phi]
    r_u: tuple = (0.1, 0.1)  # input magnitude [a delta]
    r_du: tuple = (0.5, 0.5)  # input rate [a delta]
    q_rel: tuple = (1.0, 0.5)  # per neighbor: (gap error, relative speed)

    def __post_init__(self):
        for name in ("q_ego", "r_u", "r_du", "q_rel"):
            vals = getattr(self, name)
            if any(w < 0 for w in vals):
                raise ConfigError(name, f"weights must be >= 0, got {vals}")


@dataclass(frozen=True)
class MpcBounds:
    a_max: float = 1.0  # [m/s^2]
    a_min: float = -3.0  # [m/s^2]
    delta_max: float = 0.5  # [rad]
    ddelta_max: float = 0.05  # [rad/step]
    da_max: float = 0.5  # [m/s^2 per step]
    v_min: float = 0.0  # [m/s]
    v_max: float = math.inf  # [m/s]

    def __post_init__(self):
        if not self.a_min <= 0 <= self.a_max:
            raise ConfigError("a_max", f"need a_min <= 0 <= a_max, got [{self.a_min}, {self.a_max}]")
        if self.da_max < 0 or self.ddelta_max < 0:
            raise ConfigError("da_max", "rate bounds must be >= 0")


@dataclass(frozen=True)
class HorizonPlan:
    steps: int = 10  # prediction horizon T
    dt: float = 0.1  # [s]

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("horizon.steps", f"must be >= 1, got {self.steps}")
        if self.dt <= 0:
            raise ConfigError("horizon.dt", f"must be positive, got {self.dt}")


@dataclass(frozen=True)
class NeighborTrack:
    """Predicted trajectory of one neighbor over the horizon (steps 1..T)."""

    hops: int  # string-position distance i - j (radar predecessor: 1)
    x: np.ndarray  # predicted positions (m)
    v: np.ndarray  # predicted speeds (m/s)


@dataclass(frozen=True)
class ControlDecision:
    input: ControlInput
    status: str  # qp status, or "fallback" when maximal braking was applied
    fallback: bool
    objective: float
    kkt_residual: float
    iterations: int


def desired_gap(policy: SpacingPolicy, v_ego: float, hops: int) -> float:
    """Desired bumper-to-bumper distance to a neighbor `hops` positions ahead.

    CACC/ACC: hops * (d_safety + t_gap * v); Platooning: hops * d_const.
    """
    if hops < 1:
        raise ConfigError("hops", f"must be >= 1, got {hops}")
    if policy.mode == "Platooning":
        return hops * policy.d_const
    return hops * (policy.d_safety + policy.t_gap * v_ego)


def predict_constant_speed(x0: float, v0: float, horizon: HorizonPlan, hops: int = 1) -> NeighborTrack:
    """Constant-speed extrapolation for steps 1..T."""
    k = np.arange(1, horizon.steps + 1, dtype=float)
    return NeighborTrack(hops=hops, x=x0 + v0 * k * horizon.dt, v=np.full(horizon.steps, float(v0)))


@lru_cache(maxsize=32)
def _rate_rows(T: int) -> np.ndarray:
    """Inequality rows for +/- input-rate limits at steps 1..T-1."""
    n = 2 * T
    rows = np.zeros((4 * (T - 1), n))
    for k in range(1, T):
        base = 4 * (k - 1)
        for comp in (0, 1):
            rows[base + 2 * comp, 2 * k + comp] = 1.0
            rows[base + 2 * comp, 2 * (k - 1) + comp] = -1.0
            rows[base + 2 * comp + 1] = -rows[base + 2 * comp]
    return rows


@lru_cache(maxsize=32)
def _input_cost_blocks(r_u: tuple, r_du: tuple, T: int):
    """Constant part of H: magnitude penalty plus rate-difference penalty."""
    n = 2 * T
    Ru = np.diag(np.tile(r_u, T))
    Rdu = np.diag(np.tile(r_du, T))
    D = np.eye(n)
    for k in range(1, T):
        D[2 * k, 2 * (k - 1)] = -1.0
        D[2 * k + 1, 2 * (k - 1) + 1] = -1.0
    H_const = 2.0 * (Ru + D.T @ Rdu @ D)
    # g gets -2 D^T Rdu E u_prev with E selecting the first input block
    DtR = D.T @ Rdu  # n x n; only the first block column of E matters
    g_prev_map = -2.0 * DtR[:, :2]  # multiply by u_prev
    return H_const, g_prev_map


def _prediction_maps(model: LinearModel, z0: np.ndarray, T: int):
    """z_k = P_k U + f_k for k = 1..T under the cycle's affine model.

    P and f propagate together as one augmented matrix [P | f] so each horizon
    step costs a single 4x(n+1) matmul.
    """
    n = 2 * T
    A, B, C = model.A, model.B, model.C
    out = np.zeros((T, 4, n + 1))
    aug = np.zeros((4, n + 1))
    aug[:, n] = z0
    for k in range(T):
        aug = A @ aug
        aug[:, 2 * k : 2 * k + 2] += B
        aug[:, n] += C
        out[k] = aug
    return out[:, :, :n], out[:, :, n]


def build_problem(
    ego: VehicleState,
    prev_input: ControlInput,
    neighbors: Sequence[NeighborTrack],
    policy: SpacingPolicy,
    weights: MpcWeights,
    bounds: MpcBounds,
    horizon: HorizonPlan,
    vehicle_length: float,
    model: Optional[LinearModel] = None,
) -> qp.QpProblem:
    """Assemble the condensed QP for one control cycle."""
    if not neighbors:
        raise ConfigError("neighbors", "follower needs at least the radar predecessor")
    radar_rows = [k for k, nb in enumerate(neighbors) if nb.hops == 1]
    if len(radar_rows) != 1:
        raise ConfigError("neighbors", f"expected exactly one hops=1 track, got {len(radar_rows)}")
    if model is None:
        model = linearize((ego.v, ego.phi, prev_input.delta), horizon.dt)
    return build_problem_stacked(
        ego.as_array(), prev_input.as_array(), model,
        np.array([nb.hops for nb in neighbors], dtype=float),
        np.stack([nb.x for nb in neighbors]),
        np.stack([nb.v for nb in neighbors]),
        radar_rows[0], policy, weights, bounds, horizon, vehicle_length,
    )


def build_problem_stacked(
    z0: np.ndarray,
    prev_u: np.ndarray,
    model: LinearModel,
    hops: np.ndarray,
    x_pred: np.ndarray,  # (n_neighbors, T)
    v_pred: np.ndarray,  # (n_neighbors, T)
    radar_row: int,
    policy: SpacingPolicy,
    weights: MpcWeights,
    bounds: MpcBounds,
    horizon: HorizonPlan,
    vehicle_length: float,
) -> qp.QpProblem:
    """Array-level assembly used by the engine hot path and build_problem."""
    T = horizon.steps
    n = 2 * T
    dt = horizon.dt
    P, f = _prediction_maps(model, z0, T)
    Px = P[:, IX, :]  # (T, n)
    Pv = P[:, IV, :]
    fx = f[:, IX]
    fv = f[:, IV]

    H_const, g_prev_map = _input_cost_blocks(weights.r_u, weights.r_du, T)
    H = H_const.copy()
    g = g_prev_map @ prev_u

    if any(w > 0 for w in weights.q_ego):
        # reference: constant-speed hold of the current state
        ref = np.tile(z0, (T, 1))
        ref[:, IX] = z0[IX] + z0[IV] * dt * np.arange(1, T + 1)
        Qe = np.asarray(weights.q_ego, dtype=float)
        for k in range(T):
            PQ = P[k].T * Qe  # (n,4)
            H += 2.0 * PQ @ P[k]
            g += 2.0 * PQ @ (f[k] - ref[k])

    q_gap, q_speed = weights.q_rel

    # signed gap error for neighbor j at step k:
    #   (x_pred - x_ego - hops*L) - desired_gap  =  c_j - M_j U
    # with M_j = Px + hops*t_gap*Pv for the time-headway policies and M_j = Px
    # for constant clearance. The per-neighbor sums reduce to hop moments.
    if policy.mode == "Platooning":
        tg = 0.0
        c = x_pred - hops[:, None] * (vehicle_length + policy.d_const) - fx
    else:
        tg = policy.t_gap
        c = (
            x_pred
            - hops[:, None] * (vehicle_length + policy.d_safety)
            - fx
            - tg * hops[:, None] * fv
        )
    n_nb = len(hops)
    m1 = float(hops.sum())
    m2 = float((hops * hops).sum())
    if q_gap > 0:
        PxPx = Px.T @ Px
        PxPv = Px.T @ Pv
        PvPv = Pv.T @ Pv
        H += 2.0 * q_gap * (n_nb * PxPx + tg * m1 * (PxPv + PxPv.T) + tg * tg * m2 * PvPv)
        c_sum = c.sum(axis=0)
        cm_sum = (hops[:, None] * c).sum(axis=0)
        g += -2.0 * q_gap * (Px.T @ c_sum + tg * Pv.T @ cm_sum)
    if q_speed > 0:
        dv = v_pred - fv  # (nb, T) signed relative-speed error at U = 0
        H += 2.0 * q_speed * n_nb * (Pv.T @ Pv)
        g += -2.0 * q_speed * (Pv.T @ dv.sum(axis=0))

    # box bounds; the first step also honors the rate window around prev_u
    ub = np.tile([bounds.a_max, bounds.delta_max], T)
    lb = np.tile([bounds.a_min, -bounds.delta_max], T)
    ub[0] = min(bounds.a_max, prev_u[0] + bounds.da_max)
    lb[0] = max(bounds.a_min, prev_u[0] - bounds.da_max)
    ub[1] = min(bounds.delta_max, prev_u[1] + bounds.ddelta_max)
    lb[1] = max(-bounds.delta_max, prev_u[1] - bounds.ddelta_max)

    G_blocks = []
    h_blocks = []
    # input rate limits for steps 1..T-1
    if T > 1:
        G_blocks.append(_rate_rows(T))
        h_blocks.append(np.tile([bounds.da_max, bounds.da_max,
                                 bounds.ddelta_max, bounds.ddelta_max], T - 1))
    # speed envelope
    if bounds.v_min > -math.inf:
        G_blocks.append(-Pv)
        h_blocks.append(fv - bounds.v_min)
    if math.isfinite(bounds.v_max):
        G_blocks.append(Pv)
        h_blocks.append(bounds.v_max - fv)
    # hard no-collision rows against the radar predecessor's prediction
    G_blocks.append(Px)
    h_blocks.append(x_pred[radar_row] - vehicle_length - policy.d_safety - fx)

    return qp.QpProblem(
        H=H, g=g, lb=lb, ub=ub,
        G=np.vstack(G_blocks), h=np.concatenate(h_blocks),
    )


def _snap(value: float, lo: float, hi: float, tol: float = 1e-9) -> float:
    """Collapse solver roundoff: values within tol of a bound sit on the bound."""
    if value - lo <= tol:
        return lo
    if hi - value <= tol:
        return hi
    return value


def compute_control(
    ego: VehicleState,
    prev_input: ControlInput,
    neighbors: Sequence[NeighborTrack],
    policy: SpacingPolicy,
    weights: MpcWeights,
    bounds: MpcBounds,
    horizon: HorizonPlan,
    vehicle_length: float,
    model: Optional[LinearModel] = None,
    tol: float = qp.DEFAULT_TOL,
    max_iter: int = qp.DEFAULT_MAX_ITER,
) -> ControlDecision:
    """Solve the cycle's QP and return the first-step input, clamped to bounds.

    An infeasible QP falls back to maximal braking (a_min, zero steering).
    """
    problem = build_problem(
        ego, prev_input, neighbors, policy, weights, bounds, horizon,
        vehicle_length, model,
    )
    return decide(problem, bounds, tol=tol, max_iter=max_iter)


def decide(
    problem: qp.QpProblem,
    bounds: MpcBounds,
    tol: float = qp.DEFAULT_TOL,
    max_iter: int = qp.DEFAULT_MAX_ITER,
) -> ControlDecision:
    """Solve an assembled cycle QP and extract the first-step input."""
    sol = qp.solve(problem, tol=tol, max_iter=max_iter)
    if sol.status == "infeasible" or not np.all(np.isfinite(sol.x[:2])):
        return ControlDecision(
            input=ControlInput(a=bounds.a_min, delta=0.0),
            status="fallback", fallback=True,
            objective=math.nan, kkt_residual=math.nan, iterations=sol.iterations,
        )
    a = _snap(float(np.clip(sol.x[0], problem.lb[0], problem.ub[0])), problem.lb[0], problem.ub[0])
    delta = _snap(float(np.clip(sol.x[1], problem.lb[1], problem.ub[1])), problem.lb[1], problem.ub[1])
    return ControlDecision(
        input=ControlInput(a=a, delta=delta),
        status=sol.status, fallback=False,
        objective=sol.objective, kkt_residual=sol.kkt_residual,
        iterations=sol.iterations,
    )
