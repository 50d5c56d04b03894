"""Kinematic bicycle model: nonlinear Euler step and per-cycle affine linearization.

State ordering is [x, y, v, phi] throughout (position, position, speed, yaw).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelError, SingularLinearizationError

VEHICLE_LENGTH = 4.5  # [m] wheelbase / body length used by the yaw kinematics

# index aliases into the state vector
IX, IY, IV, IPHI = 0, 1, 2, 3


@dataclass(frozen=True)
class VehicleState:
    x: float  # longitudinal position (m)
    y: float  # lateral position (m)
    v: float  # speed (m/s)
    phi: float  # yaw angle (rad)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.phi], dtype=float)

    @staticmethod
    def from_array(z: np.ndarray) -> "VehicleState":
        return VehicleState(float(z[0]), float(z[1]), float(z[2]), float(z[3]))


@dataclass(frozen=True)
class ControlInput:
    a: float  # acceleration command (m/s^2)
    delta: float  # steering angle (rad)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)


@dataclass(frozen=True)
class LinearModel:
    """Discrete affine model z' = A z + B u + C about an operating point."""

    A: np.ndarray  # 4x4
    B: np.ndarray  # 4x2
    C: np.ndarray  # 4-vector affine offset
    op_point: tuple  # (v_bar, phi_bar, delta_bar)
    dt: float  # step length (s)


def _check_finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ModelError(f"non-finite {what}: {values}")


def step_nonlinear(
    state: VehicleState,
    inp: ControlInput,
    dt: float,
    length: float = VEHICLE_LENGTH,
) -> VehicleState:
    """One forward-Euler step of the kinematic bicycle model.

    Speed is clamped at zero (no reverse). Yaw rate is v * tan(delta) / L.
    """
    if dt <= 0:
        raise ModelError(f"dt must be positive, got {dt}")
    _check_finite(state.as_array(), "state")
    _check_finite(inp.as_array(), "input")
    if abs(inp.delta) >= math.pi / 2:
        raise ModelError(f"|delta| must be < pi/2, got {inp.delta}")

    x = state.x + state.v * math.cos(state.phi) * dt
    y = state.y + state.v * math.sin(state.phi) * dt
    v = max(0.0, state.v + inp.a * dt)
    phi = state.phi + state.v * math.tan(inp.delta) / length * dt
    return VehicleState(x, y, v, phi)


def linearize(
    op_point: tuple,
    dt: float,
    length: float = VEHICLE_LENGTH,
) -> LinearModel:
    """Affine model about (v_bar, phi_bar, delta_bar).

    A and B are the Jacobians of the Euler step; C is the residual
    f(z_bar, u_bar) - A z_bar - B u_bar, so the affine map reproduces the
    nonlinear step exactly at the operating point.
    """
    v_bar, phi_bar, delta_bar = (float(p) for p in op_point)
    _check_finite([v_bar, phi_bar, delta_bar], "operating point")
    if dt <= 0:
        raise ModelError(f"dt must be positive, got {dt}")
    cos_d = math.cos(delta_bar)
    if abs(delta_bar) >= math.pi / 2 or cos_d == 0.0:
        raise SingularLinearizationError(
            f"linearization singular at delta_bar={delta_bar}"
        )

    cos_p = math.cos(phi_bar)
    sin_p = math.sin(phi_bar)
    tan_d = math.tan(delta_bar)

    A = np.eye(4)
    A[IX, IV] = cos_p * dt
    A[IX, IPHI] = -v_bar * sin_p * dt
    A[IY, IV] = sin_p * dt
    A[IY, IPHI] = v_bar * cos_p * dt
    A[IPHI, IV] = tan_d / length * dt

    B = np.zeros((4, 2))
    B[IV, 0] = dt
    B[IPHI, 1] = v_bar / (length * cos_d * cos_d) * dt

    # Taylor residual at the expansion point; x_bar, y_bar, a_bar cancel,
    # so evaluate with them at zero.
    z_bar = np.array([0.0, 0.0, v_bar, phi_bar])
    u_bar = np.array([0.0, delta_bar])
    f_bar = np.array(
        [
            v_bar * cos_p * dt,
            v_bar * sin_p * dt,
            v_bar,
            phi_bar + v_bar * tan_d / length * dt,
        ]
    )
    C = f_bar - A @ z_bar - B @ u_bar

    return LinearModel(A=A, B=B, C=C, op_point=(v_bar, phi_bar, delta_bar), dt=dt)


def step_linear(model: LinearModel, state: VehicleState, inp: ControlInput) -> VehicleState:
    """Propagate one step with the affine model: z' = A z + B u + C."""
    _check_finite(model.A, "model A")
    _check_finite(model.B, "model B")
    _check_finite(model.C, "model C")
    z = model.A @ state.as_array() + model.B @ inp.as_array() + model.C
    return VehicleState.from_array(z)
