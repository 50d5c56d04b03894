"""V2V layer: APLF topology, BSM beacons, Bernoulli packet-erasure links, and
the constant-speed hold estimator used across inter-packet gaps.

Loss draws are stateless and keyed on (seed, step, sender, receiver), so any
link's delivery pattern can be recomputed independently and in parallel.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError

BEACON_PERIOD = 0.1  # [s] 10 Hz BSM rate

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 1.0 / (1 << 53)


@dataclass(frozen=True)
class Bsm:
    sender_id: int
    t: float  # timestamp (s), multiple of the beacon period
    x: float  # position (m)
    y: float  # position (m)
    v: float  # speed (m/s)
    a: float  # acceleration (m/s^2)
    phi: float  # heading (rad)


@dataclass(frozen=True)
class ChannelConfig:
    per: float  # packet error rate in [0, 1]
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.per <= 1.0:
            raise ConfigError("per", f"must be in [0, 1], got {self.per}")


@dataclass(frozen=True)
class Topology:
    n: int  # vehicle count
    kind: str = "APLF"

    def __post_init__(self):
        if self.kind != "APLF":
            raise ConfigError("topology.kind", f"unknown kind {self.kind!r}")
        if self.n < 2:
            raise ConfigError("topology.n", f"need at least 2 vehicles, got {self.n}")


def v2v_neighbors(topology: Topology, i: int) -> set:
    """APLF: vehicle i hears every preceding vehicle (and the leader)."""
    if not 0 <= i < topology.n:
        raise ConfigError("vehicle", f"index {i} outside [0, {topology.n})")
    return set(range(i))


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> np.uint64(30))) * _MIX1) & _MASK
    x = ((x ^ (x >> np.uint64(27))) * _MIX2) & _MASK
    return x ^ (x >> np.uint64(31))


def link_uniforms(seed: int, step: int, senders, receivers) -> np.ndarray:
    """Uniform [0,1) draw per link, keyed on (seed, step, sender, receiver)."""
    senders = np.asarray(senders, dtype=np.uint64)
    receivers = np.asarray(receivers, dtype=np.uint64)
    h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.zeros_like(senders))
    h = _mix(h ^ np.uint64(step))
    h = _mix(h ^ senders)
    h = _mix(h ^ receivers)
    return (h >> np.uint64(11)).astype(np.float64) * _TO_UNIT


def transmit(bsm: Bsm, link: tuple, cfg: ChannelConfig, step: int) -> bool:
    """True iff the beacon crosses the (sender, receiver) link at this step.

    Delivered with probability 1 - per, independently per link per beacon.
    """
    sender, receiver = link
    u = link_uniforms(cfg.seed, step, [sender], [receiver])[0]
    return bool(u >= cfg.per)


@dataclass(frozen=True)
class NeighborEstimate:
    last_bsm: Bsm
    age: float = 0.0  # seconds since reception

    @property
    def est_x(self) -> float:
        return self.last_bsm.x + self.last_bsm.v * self.age

    @property
    def est_v(self) -> float:
        return self.last_bsm.v


def bootstrap_estimate(bsm: Bsm) -> NeighborEstimate:
    """Synthetic 'received' beacon for t=0 (strings start at steady state)."""
    return NeighborEstimate(last_bsm=bsm, age=0.0)


def update_estimate(
    est: NeighborEstimate,
    incoming: Optional[Bsm],
    dt: float,
) -> NeighborEstimate:
    """Fresh packet replaces the held state; otherwise coast at constant speed."""
    if dt <= 0:
        raise ConfigError("dt", f"must be positive, got {dt}")
    if incoming is not None:
        return NeighborEstimate(last_bsm=incoming, age=0.0)
    return replace(est, age=est.age + dt)


@dataclass(frozen=True)
class RelativeState:
    gap: float  # bumper-to-bumper distance (m)
    rel_speed: float  # predecessor speed minus ego speed (m/s)


def radar_measure(ego, predecessor, vehicle_length: float) -> RelativeState:
    """Noiseless, lossless range/range-rate to vehicle i-1."""
    return RelativeState(
        gap=predecessor.x - ego.x - vehicle_length,
        rel_speed=predecessor.v - ego.v,
    )
