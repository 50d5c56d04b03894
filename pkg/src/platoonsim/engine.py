"""Synchronous time-stepped simulation of an N-vehicle string.

Per step, in order: all vehicles beacon, the channel decides per-link
delivery, followers update neighbor estimates and take a radar measurement,
followers solve their MPC from the step-t snapshot, the leader applies its
profile-tracking input, and every plant advances one Euler step.
"""

import csv
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import mpc
from .comms import link_uniforms
from .errors import CollisionError, ConfigError
from .mpc import HorizonPlan, MpcBounds, MpcWeights, SpacingPolicy
from .vehicle import VEHICLE_LENGTH, ControlInput, VehicleState, linearize, step_nonlinear

# solver_status codes in the trace
STATUS_LEADER = -1
STATUS_OPTIMAL = 0
STATUS_MAX_ITER = 1
STATUS_FALLBACK = 2
_STATUS_CODE = {"optimal": STATUS_OPTIMAL, "max_iter": STATUS_MAX_ITER,
                "fallback": STATUS_FALLBACK}


# ---------------------------------------------------------------------------
# leader speed profiles


@dataclass(frozen=True)
class ConstantProfile:
    v: float = 20.0  # [m/s]
    kind: str = "constant"


@dataclass(frozen=True)
class StepTestProfile:
    """Hold, ramp down, hold, ramp up, hold. Ramps run at |a| = accel."""

    v_start: float = 20.0  # [m/s]
    v_low: float = 15.0  # [m/s]
    v_high: float = 25.0  # [m/s]
    t_down: float = 10.0  # [s] deceleration ramp start
    t_up: float = 60.0  # [s] acceleration ramp start
    accel: float = 1.0  # [m/s^2] ramp magnitude
    kind: str = "step_test"

    def __post_init__(self):
        if self.accel <= 0:
            raise ConfigError("leader_profile.accel", "must be positive")
        if self.t_up < self.t_down + (self.v_start - self.v_low) / self.accel:
            raise ConfigError("leader_profile.t_up", "acceleration ramp starts before the deceleration ramp ends")


@dataclass(frozen=True)
class SinusoidProfile:
    """Smooth periodic speed, bounded in [v_mean - amplitude, v_mean + amplitude]."""

    v_mean: float = 15.0  # [m/s]
    amplitude: float = 5.0  # [m/s]
    period: float = 60.0  # [s]
    phase: float = 0.0  # [rad]
    kind: str = "sinusoid"

    def __post_init__(self):
        if self.period <= 0:
            raise ConfigError("leader_profile.period", "must be positive")
        if self.amplitude < 0:
            raise ConfigError("leader_profile.amplitude", "must be >= 0")


PROFILE_KINDS = {
    "constant": ConstantProfile,
    "step_test": StepTestProfile,
    "sinusoid": SinusoidProfile,
}


def leader_speed(profile, t: float) -> float:
    """Reference speed of the human-driven leader at time t."""
    if t < 0:
        raise ConfigError("t", f"must be >= 0, got {t}")
    if isinstance(profile, ConstantProfile):
        return profile.v
    if isinstance(profile, StepTestProfile):
        p = profile
        down_len = (p.v_start - p.v_low) / p.accel
        up_len = (p.v_high - p.v_low) / p.accel
        if t < p.t_down:
            return p.v_start
        if t < p.t_down + down_len:
            return p.v_start - p.accel * (t - p.t_down)
        if t < p.t_up:
            return p.v_low
        if t < p.t_up + up_len:
            return p.v_low + p.accel * (t - p.t_up)
        return p.v_high
    if isinstance(profile, SinusoidProfile):
        p = profile
        return p.v_mean + p.amplitude * math.sin(2 * math.pi * t / p.period + p.phase)
    raise ConfigError("leader_profile", f"unknown profile {profile!r}")


@dataclass(frozen=True)
class LeaderEvent:
    """One completed leader disturbance: a ramp to a new setpoint."""

    name: str
    t_start: float  # ramp start
    t_ramp_end: float
    setpoint: float  # new speed (m/s)
    t_window_end: float  # end of the observation window


def leader_events(profile, duration: float) -> list:
    """Disturbance events of a profile within [0, duration]."""
    if not isinstance(profile, StepTestProfile):
        return []
    p = profile
    down_len = (p.v_start - p.v_low) / p.accel
    up_len = (p.v_high - p.v_low) / p.accel
    events = []
    if p.t_down + down_len <= duration:
        events.append(LeaderEvent("decel", p.t_down, p.t_down + down_len,
                                  p.v_low, min(p.t_up, duration)))
    if p.t_up + up_len <= duration:
        events.append(LeaderEvent("accel", p.t_up, p.t_up + up_len,
                                  p.v_high, duration))
    return events


# ---------------------------------------------------------------------------
# scenario configuration


def default_weights(mode: str) -> MpcWeights:
    """Mode-tuned scenario weights.

    The constant-clearance policy carries a stiffer position term (it has no
    time-headway self-damping to lean on); the time-headway modes keep the gap
    term soft so the string's speed settles ahead of the slow gap contraction
    that a headway change implies.
    """
    if mode == "Platooning":
        return MpcWeights(q_rel=(0.05, 3.0), r_u=(0.01, 0.1), r_du=(1.5, 0.5))
    return MpcWeights(q_rel=(5e-4, 3.0), r_u=(0.01, 0.1), r_du=(0.3, 0.5))


@dataclass
class ScenarioConfig:
    n_vehicles: int
    mode: str  # "ACC" | "CACC" | "Platooning"
    per: float = 0.0
    seed: int = 0
    duration: float = 120.0  # [s]
    dt: float = 0.1  # [s]
    vehicle_length: float = VEHICLE_LENGTH  # [m]
    leader_profile: object = field(default_factory=StepTestProfile)
    policy: SpacingPolicy = None  # filled from mode in __post_init__
    weights: MpcWeights = None  # mode-tuned defaults when omitted
    bounds: MpcBounds = field(default_factory=MpcBounds)
    horizon: HorizonPlan = field(default_factory=HorizonPlan)

    def __post_init__(self):
        if self.n_vehicles < 2:
            raise ConfigError("n_vehicles", f"need at least 2, got {self.n_vehicles}")
        if self.duration <= 0:
            raise ConfigError("duration", f"must be positive, got {self.duration}")
        if self.dt <= 0:
            raise ConfigError("dt", f"must be positive, got {self.dt}")
        if not 0.0 <= self.per <= 1.0:
            raise ConfigError("per", f"must be in [0, 1], got {self.per}")
        if self.mode not in mpc.MODES:
            raise ConfigError("mode", f"must be one of {mpc.MODES}, got {self.mode!r}")
        if self.policy is None:
            self.policy = SpacingPolicy(mode=self.mode)
        elif self.policy.mode != self.mode:
            raise ConfigError("policy.mode", f"{self.policy.mode!r} != scenario mode {self.mode!r}")
        if self.weights is None:
            self.weights = default_weights(self.mode)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


def _build_section(cls, data: dict, section: str, **extra):
    if not isinstance(data, dict):
        raise ConfigError(section, f"expected an object, got {type(data).__name__}")
    allowed = set(cls.__dataclass_fields__) - {"kind"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown field")
    merged = {**data, **extra}
    for key in ("q_ego", "r_u", "r_du", "q_rel"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    try:
        return cls(**merged)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def config_from_dict(data: dict) -> ScenarioConfig:
    """Parse and validate a scenario document (already JSON-decoded)."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    known = {"n_vehicles", "mode", "per", "seed", "duration", "dt",
             "vehicle_length", "leader_profile", "policy", "weights",
             "bounds", "horizon"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    for req in ("n_vehicles", "mode"):
        if req not in data:
            raise ConfigError(req, "required field missing")

    kwargs = {k: data[k] for k in
              ("n_vehicles", "mode", "per", "seed", "duration", "dt", "vehicle_length")
              if k in data}

    prof = data.get("leader_profile", {"kind": "step_test"})
    if not isinstance(prof, dict) or "kind" not in prof:
        raise ConfigError("leader_profile.kind", "required field missing")
    kind = prof["kind"]
    if kind not in PROFILE_KINDS:
        raise ConfigError("leader_profile.kind",
                          f"unknown profile {kind!r}; expected one of {sorted(PROFILE_KINDS)}")
    kwargs["leader_profile"] = _build_section(
        PROFILE_KINDS[kind], {k: v for k, v in prof.items() if k != "kind"},
        "leader_profile")

    if "policy" in data:
        kwargs["policy"] = _build_section(SpacingPolicy, data["policy"], "policy",
                                          mode=data["mode"])
    if "weights" in data:
        kwargs["weights"] = _build_section(MpcWeights, data["weights"], "weights")
    if "bounds" in data:
        kwargs["bounds"] = _build_section(MpcBounds, data["bounds"], "bounds")
    if "horizon" in data:
        kwargs["horizon"] = _build_section(HorizonPlan, data["horizon"], "horizon")
    return ScenarioConfig(**kwargs)


def config_to_dict(config: ScenarioConfig) -> dict:
    out = {
        "n_vehicles": config.n_vehicles,
        "mode": config.mode,
        "per": config.per,
        "seed": config.seed,
        "duration": config.duration,
        "dt": config.dt,
        "vehicle_length": config.vehicle_length,
        "leader_profile": asdict(config.leader_profile),
        "policy": {k: v for k, v in asdict(config.policy).items() if k != "mode"},
        "weights": {k: list(v) for k, v in asdict(config.weights).items()},
        "bounds": asdict(config.bounds),
        "horizon": asdict(config.horizon),
    }
    return out


# ---------------------------------------------------------------------------
# estimator bank: constant-speed hold state for every (sender, receiver) link


class EstimatorBank:
    """Vectorized per-link estimator state; [j, i] = sender j, receiver i (j < i)."""

    def __init__(self, n: int, x0: np.ndarray, v0: np.ndarray):
        self.n = n
        self.link = np.triu(np.ones((n, n), dtype=bool), k=1)
        self.last_x = np.tile(x0[:, None], (1, n))
        self.last_v = np.tile(v0[:, None], (1, n))
        self.last_a = np.zeros((n, n))
        self.age = np.zeros((n, n))

    def update(self, delivered: np.ndarray, x, v, a, dt: float) -> None:
        """Apply one beacon round: fresh packets reset, lost links coast."""
        self.age += dt
        mask = delivered & self.link
        idx = np.nonzero(mask)
        self.last_x[mask] = x[idx[0]]
        self.last_v[mask] = v[idx[0]]
        self.last_a[mask] = a[idx[0]]
        self.age[mask] = 0.0

    def estimates_for(self, i: int):
        """Held (x, v) estimates of senders 0..i-1 as seen by receiver i."""
        ages = self.age[:i, i]
        est_x = self.last_x[:i, i] + self.last_v[:i, i] * ages
        return est_x, self.last_v[:i, i].copy(), ages.copy()


# ---------------------------------------------------------------------------
# trace


@dataclass
class SimTrace:
    t: np.ndarray  # (S,)
    x: np.ndarray  # (S, N)
    y: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    a_cmd: np.ndarray
    delta_cmd: np.ndarray
    gap: np.ndarray  # (S, N); NaN for the leader
    desired_gap: np.ndarray
    gap_error: np.ndarray  # signed; time-gap error (s) for CACC, meters otherwise
    solver_status: np.ndarray  # (S, N) int8
    delivered: np.ndarray  # (S, N, N) int8; [s, j, i]; -1 = not a link
    est_age: np.ndarray  # (S, N, N) float32; NaN = not a link
    kkt: Optional[np.ndarray] = None  # (S, N) solver residuals; NaN leader/fallback
    config: Optional[ScenarioConfig] = None

    @property
    def n_vehicles(self) -> int:
        return self.x.shape[1]

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    def to_csv(self, path) -> None:
        """One row per (step, vehicle); delivery flags as rx_from_<j> columns."""
        n = self.n_vehicles
        rx_cols = [f"rx_from_{j}" for j in range(n - 1)]
        header = ["step", "t", "vehicle_id", "x", "y", "v", "phi", "a_cmd",
                  "delta_cmd", "gap", "desired_gap", "gap_error",
                  "solver_status"] + rx_cols
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for s in range(self.n_steps):
                for i in range(n):
                    row = [s, repr(float(self.t[s])), i]
                    for arr in (self.x, self.y, self.v, self.phi, self.a_cmd,
                                self.delta_cmd, self.gap, self.desired_gap,
                                self.gap_error):
                        val = float(arr[s, i])
                        row.append("" if math.isnan(val) else repr(val))
                    row.append(int(self.solver_status[s, i]))
                    for j in range(n - 1):
                        d = int(self.delivered[s, j, i]) if j < i else -1
                        row.append("" if d < 0 else d)
                    w.writerow(row)


def read_trace_csv(path) -> SimTrace:
    """Rebuild the numeric trace from a CSV written by to_csv (config is not stored)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise ConfigError("trace", f"{path} has no data rows")
    col = {name: k for k, name in enumerate(header)}
    n = max(int(r[col["vehicle_id"]]) for r in rows) + 1
    steps = max(int(r[col["step"]]) for r in rows) + 1

    def grid(name, fill=np.nan):
        out = np.full((steps, n), fill)
        for r in rows:
            cell = r[col[name]]
            out[int(r[col["step"]]), int(r[col["vehicle_id"]])] = (
                float(cell) if cell != "" else np.nan)
        return out

    t = np.zeros(steps)
    for r in rows:
        t[int(r[col["step"]])] = float(r[col["t"]])
    delivered = np.full((steps, n, n), -1, dtype=np.int8)
    for r in rows:
        s, i = int(r[col["step"]]), int(r[col["vehicle_id"]])
        for j in range(n - 1):
            cell = r[col[f"rx_from_{j}"]]
            if cell != "":
                delivered[s, j, i] = int(cell)
    status = np.zeros((steps, n), dtype=np.int8)
    for r in rows:
        status[int(r[col["step"]]), int(r[col["vehicle_id"]])] = int(r[col["solver_status"]])
    return SimTrace(
        t=t, x=grid("x"), y=grid("y"), v=grid("v"), phi=grid("phi"),
        a_cmd=grid("a_cmd"), delta_cmd=grid("delta_cmd"), gap=grid("gap"),
        desired_gap=grid("desired_gap"), gap_error=grid("gap_error"),
        solver_status=status, delivered=delivered,
        est_age=np.full((steps, n, n), np.nan, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# simulation


def initialize(config: ScenarioConfig):
    """Single-file string at exact desired gaps, all at the leader's initial speed.

    Estimators are bootstrapped with every neighbor's true initial state.
    """
    v0 = leader_speed(config.leader_profile, 0.0)
    n = config.n_vehicles
    x = np.zeros(n)
    for i in range(1, n):
        spacing = config.vehicle_length + mpc.desired_gap(config.policy, v0, 1)
        x[i] = x[i - 1] - spacing
    states = [VehicleState(float(x[i]), 0.0, v0, 0.0) for i in range(n)]
    bank = EstimatorBank(n, x, np.full(n, v0))
    return states, bank


def _signed_gap_error(policy: SpacingPolicy, gap: float, v_ego: float) -> float:
    if policy.mode == "CACC":
        if v_ego < 0.1:
            return math.nan  # time gap undefined near standstill
        return gap / v_ego - policy.t_gap
    if policy.mode == "Platooning":
        return gap - policy.d_const
    return gap - (policy.d_safety + policy.t_gap * v_ego)  # ACC distance error


def run(config: ScenarioConfig) -> SimTrace:
    """Simulate the scenario; deterministic for a fixed config."""
    n = config.n_vehicles
    dt = config.dt
    steps = config.n_steps
    L = config.vehicle_length
    policy, weights, bounds, horizon = (config.policy, config.weights,
                                        config.bounds, config.horizon)
    if horizon.dt != dt:
        raise ConfigError("horizon.dt", f"{horizon.dt} != scenario dt {dt}")

    states, bank = initialize(config)
    x = np.array([s.x for s in states])
    y = np.zeros(n)
    v = np.array([s.v for s in states])
    phi = np.zeros(n)
    prev_u = np.zeros((n, 2))  # applied input of the previous step

    # per-link index arrays for the vectorized channel draws
    jj, ii = np.nonzero(np.triu(np.ones((n, n), dtype=bool), k=1))

    tr = SimTrace(
        t=np.arange(steps) * dt,
        x=np.zeros((steps, n)), y=np.zeros((steps, n)),
        v=np.zeros((steps, n)), phi=np.zeros((steps, n)),
        a_cmd=np.zeros((steps, n)), delta_cmd=np.zeros((steps, n)),
        gap=np.full((steps, n), np.nan), desired_gap=np.full((steps, n), np.nan),
        gap_error=np.full((steps, n), np.nan),
        solver_status=np.zeros((steps, n), dtype=np.int8),
        delivered=np.full((steps, n, n), -1, dtype=np.int8),
        est_age=np.full((steps, n, n), np.nan, dtype=np.float32),
        kkt=np.full((steps, n), np.nan),
        config=config,
    )

    kdt = np.arange(1, horizon.steps + 1) * dt
    use_v2v = config.mode in ("CACC", "Platooning")

    for s in range(steps):
        t = s * dt

        # (1)+(2) beacon and per-link delivery; step 0 is the bootstrap round
        if s == 0:
            delivered = np.ones(len(jj), dtype=bool)
        else:
            u = link_uniforms(config.seed, s, jj, ii)
            delivered = u >= config.per
        dmat = np.zeros((n, n), dtype=bool)
        dmat[jj, ii] = delivered
        tr.delivered[s][jj, ii] = delivered.astype(np.int8)

        # (3) estimator update from this round's beacons, then radar
        if s > 0:
            bank.update(dmat, x, v, prev_u[:, 0], dt)
        tr.est_age[s][bank.link] = bank.age[bank.link].astype(np.float32)

        gaps = x[:-1] - x[1:] - L  # gap of follower i to vehicle i-1
        if np.any(gaps < 0):
            bad = int(np.argmax(gaps < 0)) + 1
            raise CollisionError(s, t, bad, float(gaps[bad - 1]))

        # (4) follower controls from the step-t snapshot
        a_cmd = np.zeros(n)
        delta_cmd = np.zeros(n)
        status = np.full(n, STATUS_LEADER, dtype=np.int8)
        for i in range(1, n):
            z0 = np.array([x[i], y[i], v[i], phi[i]])
            model = linearize((v[i], phi[i], prev_u[i, 1]), dt)
            # radar predecessor: true state, constant-speed prediction
            hops_list = [1.0]
            xp_rows = [x[i - 1] + v[i - 1] * kdt]
            vp_rows = [np.full(horizon.steps, v[i - 1])]
            if use_v2v and i >= 2:
                est_x, est_v, _ = bank.estimates_for(i)
                senders = np.arange(i - 1)  # j = 0 .. i-2 (i-1 covered by radar)
                hops_list.extend((i - senders).astype(float))
                xp_rows.extend(est_x[senders, None] + est_v[senders, None] * kdt[None, :])
                vp_rows.extend(np.tile(est_v[senders, None], (1, horizon.steps)))
            problem = mpc.build_problem_stacked(
                z0, prev_u[i], model,
                np.array(hops_list), np.vstack(xp_rows), np.vstack(vp_rows),
                0, policy, weights, bounds, horizon, L,
            )
            dec = mpc.decide(problem, bounds)
            a_cmd[i] = dec.input.a
            delta_cmd[i] = dec.input.delta
            status[i] = _STATUS_CODE[dec.status]
            tr.kkt[s, i] = dec.kkt_residual

        # (5) leader tracks its profile open loop
        v_next_ref = leader_speed(config.leader_profile, t + dt)
        a_cmd[0] = float(np.clip((v_next_ref - v[0]) / dt, bounds.a_min, bounds.a_max))

        # log the step
        tr.x[s], tr.y[s], tr.v[s], tr.phi[s] = x, y, v, phi
        tr.a_cmd[s], tr.delta_cmd[s] = a_cmd, delta_cmd
        tr.solver_status[s] = status
        tr.gap[s, 1:] = gaps
        for i in range(1, n):
            tr.desired_gap[s, i] = mpc.desired_gap(policy, v[i], 1)
            tr.gap_error[s, i] = _signed_gap_error(policy, gaps[i - 1], v[i])

        # (6) plants advance
        for i in range(n):
            nxt = step_nonlinear(
                VehicleState(x[i], y[i], v[i], phi[i]),
                ControlInput(a_cmd[i], delta_cmd[i]), dt, L,
            )
            x[i], y[i], v[i], phi[i] = nxt.x, nxt.y, nxt.v, nxt.phi
        prev_u = np.column_stack([a_cmd, delta_cmd])

    return tr
