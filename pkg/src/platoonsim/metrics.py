"""Post-processing of traces: gap errors, 95th-percentile error, speed
difference, empirical string-stability ratios, and settle times."""

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import LeaderEvent, SimTrace, leader_events
from .errors import EmptyInputError
from .mpc import SpacingPolicy

AMPLIFICATION_FLOOR = 0.01  # [m/s] minimum upstream peak for a defined ratio
SETTLE_BAND = 0.1  # [m/s]
MIN_TIME_GAP_SPEED = 0.1  # [m/s] below this the time-gap error is excluded


@dataclass
class MetricsReport:
    p95_error: float  # pooled over followers; seconds for CACC, meters otherwise
    p95_unit: str  # "s" | "m"
    mean_speed_diff: float  # [m/s]
    max_speed_diff: float  # [m/s]
    per_vehicle_p95: list = field(default_factory=list)
    amplification_ratios: dict = field(default_factory=dict)  # event -> list
    settle_times: dict = field(default_factory=dict)  # event -> (s, settled)
    fallback_steps: int = 0


def gap_error_series(trace: SimTrace, policy: SpacingPolicy) -> np.ndarray:
    """(steps, vehicles) absolute errors; NaN for the leader and for excluded
    near-standstill CACC samples."""
    if trace.n_steps == 0:
        raise EmptyInputError("zero-length trace")
    gap = trace.gap
    v = trace.v
    if policy.mode == "CACC":
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.abs(gap / v - policy.t_gap)
        err[v < MIN_TIME_GAP_SPEED] = np.nan
    elif policy.mode == "Platooning":
        err = np.abs(gap - policy.d_const)
    else:  # ACC: distance error against the time-headway target
        err = np.abs(gap - (policy.d_safety + policy.t_gap * v))
    err[:, 0] = np.nan  # leader has no predecessor
    return err


def percentile95(series) -> float:
    """Nearest-rank 95th percentile: sorted value at index ceil(0.95 n)."""
    arr = np.asarray(series, dtype=float).ravel()
    if arr.size == 0:
        raise EmptyInputError("empty series")
    arr = np.sort(arr)
    rank = math.ceil(0.95 * arr.size)  # 1-based
    return float(arr[rank - 1])


def speed_difference(trace: SimTrace):
    """Per-step max-minus-min speed across the string, plus its time mean."""
    series = trace.v.max(axis=1) - trace.v.min(axis=1)
    return series, float(series.mean())


def string_stability_ratio(
    trace: SimTrace,
    baseline: float,
    window: tuple = None,
    floor: float = AMPLIFICATION_FLOOR,
) -> np.ndarray:
    """peak |v_i - baseline| / peak |v_{i-1} - baseline| for i = 2..N-1.

    NaN where the upstream peak is below the floor.
    """
    lo, hi = (0.0, math.inf) if window is None else window
    mask = (trace.t >= lo) & (trace.t < hi)
    if not mask.any():
        raise EmptyInputError("empty event window")
    dev = np.abs(trace.v[mask] - baseline)
    peaks = dev.max(axis=0)  # per vehicle
    n = trace.n_vehicles
    ratios = np.full(n, np.nan)
    for i in range(2, n):
        if peaks[i - 1] >= floor:
            ratios[i] = peaks[i] / peaks[i - 1]
    return ratios[2:]


def settle_time(
    trace: SimTrace,
    event: LeaderEvent,
    band: float = SETTLE_BAND,
):
    """Seconds from event start until every vehicle stays within +-band of the
    new setpoint for the remainder of the window. (window_length, False) when
    the string never settles."""
    mask = (trace.t >= event.t_start) & (trace.t < event.t_window_end)
    if not mask.any():
        raise EmptyInputError("empty event window")
    t_win = trace.t[mask]
    dev = np.abs(trace.v[mask] - event.setpoint).max(axis=1)
    inside = dev <= band
    # last index from which `inside` holds through the window end
    settled_from = None
    for k in range(len(inside) - 1, -1, -1):
        if inside[k]:
            settled_from = k
        else:
            break
    if settled_from is None:
        return float(event.t_window_end - event.t_start), False
    return float(t_win[settled_from] - event.t_start), True


def onset_times(trace: SimTrace, threshold: float = 0.1) -> np.ndarray:
    """Per vehicle, first time its speed deviates by `threshold` from its
    initial value; NaN if it never does."""
    dev = np.abs(trace.v - trace.v[0])
    out = np.full(trace.n_vehicles, np.nan)
    for i in range(trace.n_vehicles):
        hits = np.flatnonzero(dev[:, i] >= threshold)
        if len(hits):
            out[i] = trace.t[hits[0]]
    return out


def build_report(trace: SimTrace) -> MetricsReport:
    """Standard per-run summary; requires the trace to carry its config."""
    if trace.config is None:
        raise EmptyInputError("trace has no config attached")
    policy = trace.config.policy
    err = gap_error_series(trace, policy)
    pooled = err[:, 1:][~np.isnan(err[:, 1:])]
    per_vehicle = []
    for i in range(1, trace.n_vehicles):
        col = err[:, i][~np.isnan(err[:, i])]
        per_vehicle.append(percentile95(col) if col.size else math.nan)
    series, mean_sd = speed_difference(trace)

    report = MetricsReport(
        p95_error=percentile95(pooled) if pooled.size else math.nan,
        p95_unit="s" if policy.mode == "CACC" else "m",
        mean_speed_diff=mean_sd,
        max_speed_diff=float(series.max()),
        per_vehicle_p95=per_vehicle,
        fallback_steps=int((trace.solver_status == 2).sum()),
    )
    events = leader_events(trace.config.leader_profile, trace.config.duration)
    for ev in events:
        report.settle_times[ev.name] = settle_time(trace, ev)
        baseline = leader_speed_before(trace, ev)
        report.amplification_ratios[ev.name] = string_stability_ratio(
            trace, baseline, window=(ev.t_start, ev.t_window_end)
        ).tolist()
    return report


def leader_speed_before(trace: SimTrace, event: LeaderEvent) -> float:
    """Leader speed immediately before a disturbance event."""
    before = trace.t < event.t_start
    if not before.any():
        return float(trace.v[0, 0])
    return float(trace.v[before, 0][-1])
