"""Quadratic dissipativity: supply rates, KYP certificates, drift oracle.

Sign and scaling convention: for a linear system ``(A, B, C, D)``, storage
``V(x) = 0.5 x' P x`` and supply ``W(y, u) = y'Qy + u'Ru + 2 y'Su`` the
certificate ``M`` is the symmetric matrix with

    [x; u]' M [x; u] = 2 * (V(Ax + Bu) - V(x) - W(Cx + Du, u)).

The system is dissipative with that storage iff ``M`` is negative
semidefinite.  For ``P = Omega``, ``Q = 0``, ``R = gamma I``, ``S = 0.5 I``
and ``D = 0`` this is the familiar block matrix with lower-right block
``B' Omega B - 2 gamma I``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from probctl.compensator import build_omega, build_output_map
from probctl.errors import EnumerationError, ParameterError
from probctl.plant import ProcessParams, augment, local_dynamics_matrix

__all__ = [
    "SupplyRate",
    "LinearSystem",
    "QuadraticStorage",
    "supply_value",
    "dissipation_certificate",
    "is_nsd",
    "is_pd",
    "max_eig",
    "min_eig",
    "check_local_dissipativity",
    "local_certificate",
    "delay_certificate",
    "bisect_gamma",
    "network_condition",
    "network_margin",
    "expected_drift",
    "MAX_ENUMERATED_ROUTES",
]

SD_TOL = 1e-9
MAX_ENUMERATED_ROUTES = 14


@dataclass(frozen=True)
class SupplyRate:
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        Q, R, S = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.Q, self.R, self.S))
        if Q.shape[0] != Q.shape[1] or R.shape[0] != R.shape[1]:
            raise ParameterError("Q and R must be square")
        if S.shape != (Q.shape[0], R.shape[0]):
            raise ParameterError(f"S has shape {S.shape}, expected {(Q.shape[0], R.shape[0])}")
        if not (np.allclose(Q, Q.T) and np.allclose(R, R.T)):
            raise ParameterError("Q and R must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "S", S)

    @classmethod
    def gamma_passive(cls, gamma: float, p: int) -> "SupplyRate":
        """``(0, gamma I, 0.5 I)``: ``W = y'u + gamma u'u``."""
        return cls(np.zeros((p, p)), gamma * np.eye(p), 0.5 * np.eye(p))

    @classmethod
    def output_strict(cls, delta: float, p: int) -> "SupplyRate":
        """``(0, -delta I, 0.5 I)`` evaluated as ``W(z, y) = z'y - delta y'y``."""
        return cls(np.zeros((p, p)), -delta * np.eye(p), 0.5 * np.eye(p))


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray | None = None

    def __post_init__(self):
        A, B, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.A, self.B, self.C))
        n, m = B.shape
        if A.shape != (n, n) or C.shape[1] != n:
            raise ParameterError(f"inconsistent realization shapes A{A.shape} B{B.shape} C{C.shape}")
        D = np.zeros((C.shape[0], m)) if self.D is None else np.atleast_2d(np.asarray(self.D, dtype=float))
        if D.shape != (C.shape[0], m):
            raise ParameterError(f"D has shape {D.shape}, expected {(C.shape[0], m)}")
        for name, val in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class QuadraticStorage:
    P: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] != P.shape[1] or not np.allclose(P, P.T):
            raise ParameterError("storage matrix must be square and symmetric")
        if min_eig(P) < -SD_TOL:
            raise ParameterError("storage matrix must be positive semidefinite")
        object.__setattr__(self, "P", P)

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.P @ x)


def supply_value(supply: SupplyRate, y, u) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if y.shape[0] != supply.Q.shape[0] or u.shape[0] != supply.R.shape[0]:
        raise ParameterError("supply rate dimension mismatch")
    return float(y @ supply.Q @ y + u @ supply.R @ u + 2.0 * y @ supply.S @ u)


def dissipation_certificate(sys: LinearSystem, storage: QuadraticStorage, supply: SupplyRate) -> np.ndarray:
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    P, Q, R, S = storage.P, supply.Q, supply.R, supply.S
    if P.shape != A.shape:
        raise ParameterError(f"storage is {P.shape}, state dimension is {A.shape[0]}")
    if Q.shape[0] != C.shape[0] or R.shape[0] != B.shape[1]:
        raise ParameterError("supply rate does not match the system's input/output sizes")
    xx = A.T @ P @ A - P - 2.0 * C.T @ Q @ C
    xu = A.T @ P @ B - 2.0 * C.T @ Q @ D - 2.0 * C.T @ S
    uu = B.T @ P @ B - 2.0 * D.T @ Q @ D - 2.0 * R - 2.0 * (D.T @ S + S.T @ D)
    M = np.block([[xx, xu], [xu.T, uu]])
    return 0.5 * (M + M.T)


def _square(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


def max_eig(M) -> float:
    return float(np.linalg.eigvalsh(_square(M))[-1])


def min_eig(M) -> float:
    return float(np.linalg.eigvalsh(_square(M))[0])


def is_nsd(M, tol: float = SD_TOL) -> bool:
    return max_eig(M) <= tol


def is_pd(M, tol: float = SD_TOL) -> bool:
    return min_eig(M) > tol


def local_certificate(h: float, gamma: float) -> np.ndarray:
    """Certificate of the undelayed process with unit storage and ``y = x``."""
    A = local_dynamics_matrix(h)
    I = np.eye(2)
    return dissipation_certificate(LinearSystem(A, I, I), QuadraticStorage(I), SupplyRate.gamma_passive(gamma, 2))


def check_local_dissipativity(h: float, gamma: float, tol: float = SD_TOL) -> bool:
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma!r}")
    return is_nsd(local_certificate(h, gamma), tol)


def delay_certificate(h: float, d: int, gamma: float, omega=None, c_bar=None) -> np.ndarray:
    """Certificate of the compensated, delay-augmented process with storage ``Omega``."""
    plant = augment(ProcessParams(h, d))
    omega = build_omega(h, d) if omega is None else omega
    if c_bar is None:
        c_bar = np.hstack(build_output_map(h, d, omega))
    sys = LinearSystem(plant.A_bar, plant.B_bar, c_bar)
    return dissipation_certificate(sys, QuadraticStorage(omega.omega), SupplyRate.gamma_passive(gamma, 2))


def bisect_gamma(passes, lo: float = 0.0, hi: float = 1.0, tol: float = 1e-10) -> float:
    """Smallest ``gamma`` with ``passes(gamma)`` true, assuming monotonicity."""
    while not passes(hi):
        hi *= 2.0
        if hi > 1e12:
            raise ParameterError("no gamma up to 1e12 passes")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid > 0 and passes(mid):
            hi = mid
        else:
            lo = mid
    return hi


def network_margin(delta, gamma, B) -> float:
    """Smallest eigenvalue of ``diag(delta) - B' diag(gamma_i I_2) B``."""
    B = np.asarray(B, dtype=float)
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if B.shape[0] != 2 * gamma.shape[0] or B.shape[1] != delta.shape[0]:
        raise ParameterError(
            f"B is {B.shape}; need {2 * gamma.shape[0]} rows for {gamma.shape[0]} processes "
            f"and {delta.shape[0]} columns for the routes"
        )
    G = np.repeat(gamma, 2)
    return min_eig(np.diag(delta) - B.T @ (G[:, None] * B))


def network_condition(delta, gamma, B, tol: float = SD_TOL) -> bool:
    return network_margin(delta, gamma, B) >= -tol


def expected_drift(state, loop, include_exogenous: bool = False) -> float:
    """Exact ``E[V(next) | state] - V(state)`` for the closed loop.

    Enumerates every joint actuator outcome.  Actuators are independent
    given their commands, so a branch's probability is the product of the
    per-route outcome probabilities.  Routes whose command is 0 or +-1 are
    deterministic and contribute a single branch.

    ``loop`` provides ``commands(state)``, ``advance(state, u_a, exogenous)``
    accepting a batch of outcome vectors, and ``storage_change(state, nxt)``.
    """
    u_c = np.asarray(loop.commands(state), dtype=float)
    m = u_c.shape[0]
    if m > MAX_ENUMERATED_ROUTES:
        raise EnumerationError(f"{m} routes exceed the enumeration bound of {MAX_ENUMERATED_ROUTES}")
    sign = np.sign(u_c)
    mag = np.abs(u_c)
    random_routes = np.flatnonzero((mag > 0) & (mag < 1))
    base = np.where(mag >= 1.0, sign, 0.0)
    k = random_routes.size
    # each random route either fires (+-1, prob |u_c|) or idles (0)
    fire = np.array(list(itertools.product((0.0, 1.0), repeat=k)), dtype=float).reshape(2 ** k, k)
    outcomes = np.repeat(base[None, :], fire.shape[0], axis=0)
    outcomes[:, random_routes] = fire * sign[random_routes]
    p = mag[random_routes]
    prob = np.prod(np.where(fire > 0, p, 1.0 - p), axis=1)
    nxt = loop.advance(state, outcomes, exogenous=include_exogenous)
    dv = loop.storage_change(state, nxt)
    return float(np.dot(prob, dv))
