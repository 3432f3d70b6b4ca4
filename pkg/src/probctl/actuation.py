"""Memoryless stochastic transport actuator.

A probability command ``u_c`` in ``[-1, 1]`` fires one unit of transport in
the direction of its sign with probability ``|u_c|`` and does nothing
otherwise.  Hence ``E[u_a] = u_c`` and ``E[u_a**2] = |u_c|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from probctl.errors import CommandRangeError

__all__ = [
    "OutcomeDistribution",
    "RngStream",
    "outcome_distribution",
    "sample",
    "sample_array",
    "expectation",
    "second_moment",
]

OUTCOMES = (1, 0, -1)


@dataclass(frozen=True)
class OutcomeDistribution:
    p_plus: float
    p_zero: float
    p_minus: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_plus, self.p_zero, self.p_minus)


def _check(u_c):
    u_c = float(u_c)
    if not (-1.0 <= u_c <= 1.0):
        raise CommandRangeError(f"probability command must lie in [-1, 1], got {u_c!r}")
    return u_c


def outcome_distribution(u_c: float) -> OutcomeDistribution:
    u_c = _check(u_c)
    p_plus = max(u_c, 0.0)
    p_minus = max(-u_c, 0.0)
    return OutcomeDistribution(p_plus, 1.0 - abs(u_c), p_minus)


def expectation(u_c: float) -> float:
    return _check(u_c)


def second_moment(u_c: float) -> float:
    return abs(_check(u_c))


@dataclass
class RngStream:
    """Independent, reproducible uniform stream for one route.

    Streams are keyed by ``(seed, replicate, route)`` through
    :class:`numpy.random.SeedSequence` spawn keys and driven by the
    counter-based Philox generator, so the ``t``-th draw of a stream is fixed
    regardless of how other streams are consumed.
    """

    seed: int
    stream: int
    replicate: int = 0
    draws: int = field(default=0, init=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.replicate), int(self.stream)))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def uniform(self) -> float:
        self.draws += 1
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.random(n)


def sample(u_c: float, rng: RngStream) -> int:
    """One actuator outcome in ``{-1, 0, +1}``; consumes exactly one draw."""
    u_c = _check(u_c)
    return _fire(u_c, rng.uniform())


def _fire(u_c, r):
    if r < abs(u_c):
        return 1 if u_c > 0 else -1
    return 0


def sample_array(u_c, uniforms) -> np.ndarray:
    """Vectorized outcomes for commands ``u_c`` against matching uniforms."""
    u_c = np.asarray(u_c, dtype=float)
    if np.any(np.abs(u_c) > 1.0):
        raise CommandRangeError("probability command outside [-1, 1]")
    fired = np.asarray(uniforms) < np.abs(u_c)
    return (fired * np.sign(u_c)).astype(np.int8)
