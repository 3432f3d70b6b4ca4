"""Stock-level dynamics of a single production process.

Each process holds an input buffer and an output buffer.  Production moves
material from the fuller buffer toward the emptier one at rate ``h`` times
their difference.  Transport into the input buffer may arrive ``d`` ticks
late; transport out of the output buffer always acts immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from probctl.errors import ParameterError

__all__ = [
    "B_IN",
    "B_OUT",
    "ProcessParams",
    "ProcessState",
    "AugmentedPlant",
    "local_dynamics_matrix",
    "production_rate",
    "step_process",
    "augment",
]

# selectors for the (input, output) buffer pair
B_IN = np.diag([1.0, 0.0])
B_OUT = np.eye(2) - B_IN
B_IN.setflags(write=False)
B_OUT.setflags(write=False)


def _check_gain(h):
    if not (0.0 < h < 1.0):
        raise ParameterError(f"production gain h must lie in (0, 1), got {h!r}")


@dataclass(frozen=True)
class ProcessParams:
    h: float
    d: int = 0

    def __post_init__(self):
        _check_gain(self.h)
        if int(self.d) != self.d or self.d < 0:
            raise ParameterError(f"delay d must be a non-negative integer, got {self.d!r}")
        object.__setattr__(self, "d", int(self.d))


@dataclass(frozen=True)
class ProcessState:
    x_in: float
    x_out: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x_in, self.x_out], dtype=float)

    @classmethod
    def from_array(cls, v) -> "ProcessState":
        return cls(float(v[0]), float(v[1]))


def local_dynamics_matrix(h: float) -> np.ndarray:
    """``[[1-h, h], [h, 1-h]]``; symmetric, doubly stochastic."""
    _check_gain(h)
    return np.array([[1.0 - h, h], [h, 1.0 - h]])


def production_rate(state: ProcessState, h: float) -> float:
    return -h * (state.x_out - state.x_in)


def step_process(state: ProcessState, u_now, u_delayed, params: ProcessParams) -> ProcessState:
    """Advance one tick.

    ``u_now`` and ``u_delayed`` are the process input vectors
    ``(sum of arrivals, -sum of departures)`` at ``t`` and ``t - d``.  Only
    the input-buffer component of ``u_delayed`` and the output-buffer
    component of ``u_now`` are used.  With ``d == 0`` pass the same vector
    twice.
    """
    A = local_dynamics_matrix(params.h)
    x = A @ state.as_array() + B_OUT @ np.asarray(u_now, float) + B_IN @ np.asarray(u_delayed, float)
    return ProcessState.from_array(x)


@dataclass(frozen=True)
class AugmentedPlant:
    """Delay-free realization over ``(x, z_d, ..., z_1)`` with ``z_k = u(t-k)``."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    d: int

    B_I = B_IN
    B_O = B_OUT

    @property
    def n_states(self) -> int:
        return 2 * (self.d + 1)

    def stack(self, x, history_oldest_first) -> np.ndarray:
        """Augmented state from plant state and the last ``d`` inputs (oldest first)."""
        hist = np.asarray(history_oldest_first, dtype=float).reshape(self.d, 2)
        return np.concatenate([np.asarray(x, float), hist.ravel()])


def augment(params: ProcessParams) -> AugmentedPlant:
    d = params.d
    if d < 1:
        raise ParameterError("augment() needs d >= 1; use the plain plant for d == 0")
    n = 2 * (d + 1)
    A_bar = np.zeros((n, n))
    A_bar[:2, :2] = local_dynamics_matrix(params.h)
    A_bar[:2, 2:4] = B_IN
    # shift register: block k receives block k+1
    for k in range(1, d):
        A_bar[2 * k:2 * k + 2, 2 * k + 2:2 * k + 4] = np.eye(2)
    B_bar = np.zeros((n, 2))
    B_bar[:2] = B_OUT
    B_bar[-2:] = np.eye(2)
    return AugmentedPlant(A_bar, B_bar, d)
