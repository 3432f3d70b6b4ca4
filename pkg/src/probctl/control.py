"""Transport controllers: gain plus bounded dead-zone normalizer.

A controller maps a route imbalance ``y_c`` to a probability command
``u_c = f(L * y_c)``.  The dead-zone normalizers output zero when
``|L * y_c| < L * delta``, which makes the controller/actuator cascade
output-strictly passive with margin ``delta``: since the actuator moments
are ``E[u_a] = u_c`` and ``E[u_a**2] = |u_c|``, the margin condition
``E[u_a y_c] >= delta E[u_a**2]`` reads ``u_c y_c >= delta |u_c|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from probctl.errors import ParameterError

__all__ = [
    "NORMALIZERS",
    "ControllerSpec",
    "OspReport",
    "normalize",
    "controller_output",
    "verify_osp_margin",
    "estimate_passivity_index",
    "default_osp_grid",
]

NORMALIZERS = ("tanh_dz", "atan_dz", "sat_dz", "atan")

_TWO_OVER_PI = 2.0 / math.pi


@dataclass(frozen=True)
class ControllerSpec:
    """Per-route controller.

    ``delta`` is the passivity margin the route is designed for.  For the
    dead-zone normalizers it also sets the dead-zone width; the plain
    ``"atan"`` normalizer has no dead-zone and ignores it when computing
    commands.
    """

    gain: float
    normalizer: str = "atan_dz"
    delta: float = 0.0
    theta_m: float | None = None

    def __post_init__(self):
        if self.normalizer not in NORMALIZERS:
            raise ParameterError(f"unknown normalizer {self.normalizer!r}; expected one of {NORMALIZERS}")
        if not (self.gain > 0 and math.isfinite(self.gain)):
            raise ParameterError(f"controller gain must be positive, got {self.gain!r}")
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ParameterError(f"delta must be non-negative, got {self.delta!r}")
        if self.normalizer == "sat_dz":
            if self.theta_m is None:
                raise ParameterError("sat_dz needs theta_m")
            if not self.theta_m > self.gain * self.delta:
                raise ParameterError(
                    f"theta_m={self.theta_m} must exceed the dead-zone edge L*delta={self.gain * self.delta}"
                )

    @property
    def has_deadzone(self) -> bool:
        return self.normalizer != "atan"

    @property
    def threshold(self) -> float:
        """Dead-zone edge in ``theta`` units."""
        return self.gain * self.delta if self.has_deadzone else 0.0


def normalize(theta, spec: ControllerSpec):
    """Apply the normalizer; accepts scalars or arrays."""
    theta = np.asarray(theta, dtype=float)
    kind = spec.normalizer
    if kind == "tanh_dz":
        out = np.tanh(theta)
    elif kind in ("atan_dz", "atan"):
        out = _TWO_OVER_PI * np.arctan(theta)
    else:
        out = np.clip(theta / spec.theta_m, -1.0, 1.0)
    if spec.has_deadzone:
        out = np.where(np.abs(theta) < spec.threshold, 0.0, out)
    out = out + 0.0  # normalizes -0.0
    return float(out) if out.ndim == 0 else out


def controller_output(y_c, spec: ControllerSpec):
    return normalize(spec.gain * np.asarray(y_c, dtype=float), spec)


def default_osp_grid(delta: float, y_max: float | None = None, n: int = 10_001) -> np.ndarray:
    """Symmetric grid on ``[-y_max, y_max]`` that includes ``0`` and ``+-delta``."""
    if y_max is None:
        y_max = max(10.0, 5.0 * delta)
    g = np.linspace(-y_max, y_max, n)
    extra = [0.0, delta, -delta]
    extra += list(np.nextafter([delta, -delta], 0.0))
    return np.unique(np.concatenate([g, extra]))


@dataclass(frozen=True)
class OspReport:
    passed: bool
    delta: float
    witnesses: np.ndarray
    worst_margin: float

    def __bool__(self):
        return self.passed


def verify_osp_margin(spec: ControllerSpec, delta: float, grid=None, tol: float = 1e-12) -> OspReport:
    """Check ``u_c * y_c >= delta * |u_c|`` at every grid point.

    Uses the exact actuator moments rather than sampling.  ``witnesses``
    lists the violating ``y_c`` values; ``worst_margin`` is the smallest
    ``u_c*y_c - delta*|u_c|`` seen.
    """
    y = default_osp_grid(delta) if grid is None else np.asarray(grid, dtype=float)
    u = np.asarray(controller_output(y, spec))
    margin = u * y - delta * np.abs(u)
    bad = margin < -tol
    return OspReport(not bool(bad.any()), float(delta), y[bad], float(margin.min()))


def estimate_passivity_index(spec: ControllerSpec, y_sampler, n_samples: int, rng,
                             n_bins: int = 100, resolution: float = 0.01) -> float:
    """Monte Carlo estimate of the cascade's passivity margin.

    Draws ``y_c`` from ``y_sampler(rng, n)`` and pushes it through the
    controller and a sampled actuator.  Samples are binned by ``y_c``.  The
    margin must hold conditionally on the input, so the estimate is the
    largest grid value ``k * resolution`` with
    ``mean(u_a*y_c) >= delta * mean(u_a**2)`` in every bin that saw any
    actuation.  Returns ``inf`` when the actuator never fired.
    """
    if n_samples < 10_000:
        raise ParameterError("estimate_passivity_index needs at least 1e4 samples")
    y = np.asarray(y_sampler(rng, n_samples), dtype=float)
    u_c = np.asarray(controller_output(y, spec))
    r = rng.random(n_samples)
    u_a = np.where(r < np.abs(u_c), np.sign(u_c), 0.0)
    if not np.any(u_a):
        return math.inf
    lo, hi = y.min(), y.max()
    if hi == lo:
        bins = np.zeros(n_samples, dtype=int)
        n_bins = 1
    else:
        bins = np.minimum(((y - lo) / (hi - lo) * n_bins).astype(int), n_bins - 1)
    num = np.bincount(bins, weights=u_a * y, minlength=n_bins)
    den = np.bincount(bins, weights=u_a * u_a, minlength=n_bins)
    active = den > 0
    ratio = (num[active] / den[active]).min()
    if ratio <= 0:
        return 0.0
    return math.floor(ratio / resolution + 1e-9) * resolution
