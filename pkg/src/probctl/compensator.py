"""Delay compensator for a process with input-transport delay ``d``.

The compensator is a static map over the current stock measurement and the
last ``d`` process inputs.  Its blocks come from the partitioned storage
matrix ``Omega`` built by a block recursion.  With the resulting storage
``0.5 * xb' Omega xb`` on the delay-augmented state, the compensated plant
satisfies the dissipation inequality for every ``gamma`` above
:func:`gamma_min_delay`.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from probctl.errors import ConsistencyError, ParameterError, StateError
from probctl.plant import B_IN, B_OUT, ProcessParams, augment, local_dynamics_matrix

log = logging.getLogger(__name__)

__all__ = [
    "OmegaStorage",
    "CompensatorState",
    "build_omega",
    "build_output_map",
    "literal_output_blocks",
    "compensate",
    "gamma_min_nodelay",
    "gamma_min_delay",
]


def _check(h, d=None, min_d=1):
    if not (0.0 < h < 1.0):
        raise ParameterError(f"production gain h must lie in (0, 1), got {h!r}")
    if d is not None and (int(d) != d or d < min_d):
        raise ParameterError(f"delay must be an integer >= {min_d}, got {d!r}")


@dataclass(frozen=True)
class OmegaStorage:
    omega: np.ndarray
    d: int

    def block(self, j: int, k: int) -> np.ndarray:
        """1-based 2x2 block ``(j, k)``."""
        return self.omega[2 * (j - 1):2 * j, 2 * (k - 1):2 * k]


def build_omega(h: float, d: int) -> OmegaStorage:
    _check(h, d)
    d = int(d)
    n = d + 1
    A = local_dynamics_matrix(h)
    O = {}
    for j in range(1, n + 1):
        O[j, j] = np.eye(2)
    O[1, 2] = A @ O[1, 1] @ B_IN
    for j in range(3, n + 1):
        O[1, j] = A @ O[1, j - 1]
    for j in range(3, n + 1):
        O[2, j] = B_IN @ O[1, j - 1]
    for j in range(3, n + 1):
        for k in range(j + 1, n + 1):
            O[j, k] = O[j - 1, k - 1]
    # every block below the diagonal is the transpose of its mirror
    for j in range(2, n + 1):
        for k in range(1, j):
            O[j, k] = O[k, j].T
    omega = np.block([[O[j, k] for k in range(1, n + 1)] for j in range(1, n + 1)])
    lam = np.linalg.eigvalsh(0.5 * (omega + omega.T)).min()
    if not lam > 1e-9:
        raise ConsistencyError(f"Omega(h={h}, d={d}) is not positive definite (min eig {lam:.3e})")
    return OmegaStorage(omega, d)


def literal_output_blocks(h: float, d: int, omega: OmegaStorage) -> list[np.ndarray]:
    """Compensator blocks written out from their closed-form block formulas."""
    A = local_dynamics_matrix(h)
    n = d + 1
    O = omega.block
    blocks = [
        B_OUT @ O(1, 1) @ A + O(n, 1) @ A,
        B_OUT @ O(1, 1) @ B_IN + O(n, 1) @ B_IN,
    ]
    for j in range(3, n + 1):
        blocks.append(B_OUT @ O(1, j - 1) + O(n, j - 1) @ B_IN)
    return blocks


def build_output_map(h: float, d: int, omega: OmegaStorage | None = None) -> list[np.ndarray]:
    """Blocks ``C_1 .. C_{d+1}`` of the compensator output map.

    The authoritative value is ``B_bar' Omega A_bar``, the unique choice that
    zeroes the cross blocks of the dissipation certificate.  The closed-form
    block formulas are evaluated alongside and a disagreement is logged.
    ``d == 0`` returns ``[I]`` (no compensation, ``y = x``).
    """
    if d == 0:
        _check(h)
        return [np.eye(2)]
    omega = build_omega(h, d) if omega is None else omega
    if omega.d != d:
        raise ParameterError(f"Omega was built for d={omega.d}, not d={d}")
    plant = augment(ProcessParams(h, d))
    C_bar = plant.B_bar.T @ omega.omega @ plant.A_bar
    blocks = [C_bar[:, 2 * k:2 * k + 2].copy() for k in range(d + 1)]
    literal = literal_output_blocks(h, d, omega)
    worst = max(float(np.abs(a - b).max()) for a, b in zip(blocks, literal))
    if worst > 1e-12:
        log.warning("closed-form compensator blocks differ from B_bar' Omega A_bar by %.3e "
                    "(h=%g, d=%d); using the latter", worst, h, d)
    return blocks


@dataclass
class CompensatorState:
    """Output blocks plus a ring buffer of the last ``d`` process inputs."""

    c_blocks: list[np.ndarray]
    history: deque = field(default=None)

    def __post_init__(self):
        d = len(self.c_blocks) - 1
        if self.history is None:
            self.history = deque((np.zeros(2) for _ in range(d)), maxlen=d)

    @property
    def d(self) -> int:
        return len(self.c_blocks) - 1

    def output(self, x_s) -> np.ndarray:
        return compensate(x_s, list(self.history), self.c_blocks)

    def push(self, u) -> None:
        if self.d:
            self.history.append(np.asarray(u, dtype=float).copy())

    @property
    def c_bar(self) -> np.ndarray:
        return np.hstack(self.c_blocks)


def compensate(x_s, history, c_blocks) -> np.ndarray:
    """``C_1 x_s + sum_j C_{j+1} u(t-d+j-1)``; ``history`` is oldest first."""
    d = len(c_blocks) - 1
    if len(history) != d:
        raise StateError(f"compensator expects {d} history entries, got {len(history)}")
    y = c_blocks[0] @ np.asarray(x_s, dtype=float)
    for j in range(d):
        y = y + c_blocks[j + 1] @ np.asarray(history[j], dtype=float)
    return y


def gamma_min_nodelay(h: float) -> float:
    _check(h)
    return 1.0 / (2.0 * (1.0 - h))


def gamma_min_delay(h: float, d: int) -> float:
    _check(h, d)
    inner = (1.0 - 2.0 * h) ** d - 1.0
    return (3.0 + math.sqrt(1.0 + inner * inner)) / 4.0
