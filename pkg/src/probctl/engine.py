"""Closed-loop simulation of the buffer network.

One tick runs, in order:

1. sense the stocks;
2. compensate per process (or pass the measurement through);
3. form route imbalances ``y_c = -B' y``;
4. compute probability commands per route;
5. sample actuator outcomes per route;
6. split the process inputs ``u = B u_a`` into the immediate output-buffer
   part and the delayed input-buffer part;
7. add exogenous inflow/outflow;
8. apply disturbances scheduled at this tick;
9. advance the plant and the input history.

Steps 7 and 8 act on the stocks before the production update of step 9.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from probctl.actuation import RngStream, sample
from probctl.compensator import build_omega, build_output_map, gamma_min_delay, gamma_min_nodelay
from probctl.control import ControllerSpec, controller_output
from probctl.dissipativity import expected_drift
from probctl.errors import NumericError, ParameterError
from probctl.plant import local_dynamics_matrix
from probctl.topology import NetworkTopology, build_cyclic, incidence

__all__ = [
    "Flow",
    "Disturbance",
    "Scenario",
    "EquilibriumState",
    "LoopState",
    "ClosedLoop",
    "Trace",
    "ReplicateSummary",
    "design_gammas",
    "min_deltas",
    "equilibrium",
    "step",
    "run",
    "run_replicates",
    "consensus_error",
    "settling_time",
    "window_variance",
    "window_disagreement",
    "build_reference_tests",
    "reference_test",
    "REFERENCE_IDS",
    "REFERENCE_X0",
]

BUFFERS = ("in", "out")


@dataclass(frozen=True)
class Flow:
    """Constant exogenous rate into or out of one buffer (1-based process)."""

    process: int
    buffer: str
    rate: float

    def __post_init__(self):
        if self.buffer not in BUFFERS:
            raise ParameterError(f"buffer must be 'in' or 'out', got {self.buffer!r}")
        if not math.isfinite(self.rate):
            raise ParameterError("exogenous rate must be finite")


@dataclass(frozen=True)
class Disturbance:
    """One-off change of ``sign * amount`` to a buffer at tick ``t``."""

    t: int
    process: int
    buffer: str
    amount: float
    sign: int = -1

    def __post_init__(self):
        if self.buffer not in BUFFERS:
            raise ParameterError(f"buffer must be 'in' or 'out', got {self.buffer!r}")
        if self.sign not in (-1, 1):
            raise ParameterError(f"disturbance sign must be +1 or -1, got {self.sign!r}")
        if not math.isfinite(self.amount):
            raise ParameterError("disturbance amount must be finite")

    @property
    def delta(self) -> float:
        return self.sign * self.amount


@dataclass(frozen=True)
class Scenario:
    """Full experiment configuration.

    ``h`` and ``d`` are per process, ``controllers`` per route (in route
    order).  ``nominal_delay`` sizes the compensator: an integer or
    ``"max"`` for the largest process delay.  With ``delta_auto`` set, every
    route's ``delta`` is replaced by the smallest value that satisfies the
    network condition by diagonal dominance (exactly ``2 gamma_m`` on a
    ring).
    """

    topology: NetworkTopology
    h: tuple[float, ...]
    d: tuple[int, ...]
    controllers: tuple[ControllerSpec, ...]
    x0: tuple[float, ...]
    horizon: int = 300
    compensator: bool = False
    nominal_delay: int | str | None = None
    delta_auto: bool = False
    inflows: tuple[Flow, ...] = ()
    outflows: tuple[Flow, ...] = ()
    disturbances: tuple[Disturbance, ...] = ()
    seed: int = 0
    replicates: int = 1
    delay_range: tuple[int, int] | None = None
    delay_seed: int | None = None
    clamp: bool = False
    compute_drift: bool = False
    name: str = ""

    def __post_init__(self):
        topo = self.topology
        n, m = topo.n_processes, topo.n_routes
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("h", tuple(float(v) for v in self.h))
        set_("d", tuple(int(v) for v in self.d))
        set_("x0", tuple(float(v) for v in self.x0))
        set_("controllers", tuple(self.controllers))
        set_("inflows", tuple(self.inflows))
        set_("outflows", tuple(self.outflows))
        set_("disturbances", tuple(self.disturbances))
        if len(self.h) != n or len(self.d) != n:
            raise ParameterError(f"h and d need one entry per process ({n})")
        for h in self.h:
            if not 0.0 < h < 1.0:
                raise ParameterError(f"production gain h must lie in (0, 1), got {h}")
        if any(v < 0 for v in self.d):
            raise ParameterError("delays must be non-negative")
        if len(self.controllers) != m:
            raise ParameterError(f"need one controller per route ({m}), got {len(self.controllers)}")
        if len(self.x0) != 2 * n:
            raise ParameterError(f"initial stock vector needs {2 * n} entries, got {len(self.x0)}")
        if not all(math.isfinite(v) for v in self.x0):
            raise ParameterError("initial stocks must be finite")
        if self.horizon < 0:
            raise ParameterError("horizon must be non-negative")
        if self.replicates < 1:
            raise ParameterError("replicates must be at least 1")
        for f in self.inflows + self.outflows:
            if not 1 <= f.process <= n:
                raise ParameterError(f"exogenous flow names process {f.process} outside 1..{n}")
        for dist in self.disturbances:
            if not 1 <= dist.process <= n:
                raise ParameterError(f"disturbance names process {dist.process} outside 1..{n}")
            if not 0 <= dist.t <= self.horizon:
                raise ParameterError(f"disturbance time {dist.t} outside [0, {self.horizon}]")
        nd = self.nominal_delay
        if nd is not None and nd != "max" and (int(nd) != nd or nd < 0):
            raise ParameterError(f"nominal delay must be a non-negative integer or 'max', got {nd!r}")
        if self.delta_auto:
            deltas = min_deltas(topo, design_gammas(self))
            set_("controllers", tuple(replace(c, delta=float(v)) for c, v in zip(self.controllers, deltas)))

    @property
    def n_processes(self) -> int:
        return self.topology.n_processes

    @property
    def n_routes(self) -> int:
        return self.topology.n_routes

    @property
    def d_n(self) -> int:
        """Resolved compensator delay (0 when the compensator is off)."""
        if not self.compensator:
            return 0
        if self.nominal_delay is None or self.nominal_delay == "max":
            return max(self.d)
        return int(self.nominal_delay)

    @property
    def deltas(self) -> np.ndarray:
        return np.array([c.delta for c in self.controllers])


def design_gammas(scenario: Scenario) -> np.ndarray:
    """Per-process dissipativity level the design relies on."""
    dn = scenario.d_n
    if dn >= 1:
        return np.array([gamma_min_delay(h, dn) for h in scenario.h])
    return np.array([gamma_min_nodelay(h) for h in scenario.h])


def min_deltas(topology: NetworkTopology, gammas) -> np.ndarray:
    """Row sums of ``|B' diag(gamma) B|``: a diagonally dominant, hence
    sufficient, choice of per-route margins.  Equals ``2 gamma`` on a ring."""
    B = incidence(topology)
    G = np.repeat(np.asarray(gammas, dtype=float), 2)
    return np.abs(B.T @ (G[:, None] * B)).sum(axis=1)


@dataclass(frozen=True)
class EquilibriumState:
    x_bar: np.ndarray

    @property
    def level(self) -> float:
        return float(self.x_bar[0])


def equilibrium(x0) -> EquilibriumState:
    x0 = np.asarray(x0, dtype=float).ravel()
    return EquilibriumState(np.full(x0.shape, x0.mean()))


@dataclass
class LoopState:
    """Stocks ``x`` (N, 2) plus input history ``hist`` (H, N, 2), oldest first.

    ``hist[-k]`` is the process input applied ``k`` ticks ago.  Both arrays
    may carry extra leading batch dimensions (used by drift enumeration).
    """

    t: int
    x: np.ndarray
    hist: np.ndarray

    def copy(self) -> "LoopState":
        return LoopState(self.t, self.x.copy(), self.hist.copy())


class ClosedLoop:
    """Compiled wiring of a scenario: matrices, compensators, storage."""

    def __init__(self, scenario: Scenario):
        self.scenario = sc = scenario
        self.N = sc.n_processes
        self.M = sc.n_routes
        self.B = incidence(sc.topology)
        self.A = np.stack([local_dynamics_matrix(h) for h in sc.h])
        self.d = np.array(sc.d, dtype=int)
        self.d_n = sc.d_n
        self.H = int(max(self.d.max(initial=0), self.d_n))
        self.storage_kind = "omega" if self.d_n >= 1 else "identity"
        if sc.compensator:
            self.c_bar = np.stack([np.hstack(build_output_map(h, self.d_n)) for h in sc.h])
        else:
            self.c_bar = None
        if self.storage_kind == "omega":
            self.omega = np.stack([build_omega(h, self.d_n).omega for h in sc.h])
        else:
            self.omega = None
        self.exo = np.zeros((self.N, 2))
        for f in sc.inflows:
            self.exo[f.process - 1, 0 if f.buffer == "in" else 1] += f.rate
        for f in sc.outflows:
            self.exo[f.process - 1, 0 if f.buffer == "in" else 1] -= f.rate
        self.kicks = {}
        for dist in sc.disturbances:
            k = self.kicks.setdefault(dist.t, np.zeros((self.N, 2)))
            k[dist.process - 1, 0 if dist.buffer == "in" else 1] += dist.delta
        # in-transit material: input-buffer history entries that have not arrived yet
        self._transit_mask = np.zeros((self.H, self.N))
        for i, di in enumerate(self.d):
            if di:
                self._transit_mask[self.H - di:, i] = 1.0

    def initial_state(self) -> LoopState:
        x = np.asarray(self.scenario.x0, dtype=float).reshape(self.N, 2)
        return LoopState(0, x, np.zeros((self.H, self.N, 2)))

    def state_from(self, x, hist=None, t=0) -> LoopState:
        x = np.asarray(x, dtype=float).reshape(self.N, 2)
        hist = np.zeros((self.H, self.N, 2)) if hist is None else np.asarray(hist, dtype=float)
        return LoopState(t, x, hist.reshape(self.H, self.N, 2))

    def exogenous(self, t: int) -> np.ndarray:
        """Exogenous rate plus disturbances scheduled at ``t``."""
        return self.exo + self.kicks.get(t, 0.0)

    def augmented(self, state: LoopState, level: float = 0.0) -> np.ndarray:
        """Per-process ``(x - level, z_dn, ..., z_1)``, shape (..., N, 2*dn + 2)."""
        x = state.x - level
        dn = self.d_n
        if dn == 0:
            return x
        h = state.hist[..., self.H - dn:, :, :]
        h = np.moveaxis(h, -3, -2)  # (..., N, dn, 2)
        return np.concatenate([x, h.reshape(h.shape[:-2] + (2 * dn,))], axis=-1)

    def outputs(self, state: LoopState) -> np.ndarray:
        if self.c_bar is None:
            return state.x.copy()
        xb = self.augmented(state)
        return np.einsum("nij,...nj->...ni", self.c_bar, xb)

    def imbalance(self, state: LoopState) -> np.ndarray:
        y = self.outputs(state)
        return -(y.reshape(y.shape[:-2] + (2 * self.N,)) @ self.B)

    def commands(self, state: LoopState, y_c=None) -> np.ndarray:
        y_c = self.imbalance(state) if y_c is None else y_c
        return np.array([controller_output(v, c) for v, c in zip(y_c, self.scenario.controllers)])

    def advance(self, state: LoopState, u_a, exogenous: bool = True) -> LoopState:
        """Next state for realized outcomes ``u_a`` (..., M)."""
        u_a = np.asarray(u_a, dtype=float)
        batch = u_a.shape[:-1]
        u = (u_a @ self.B.T).reshape(batch + (self.N, 2))
        arriving = u[..., :, 0].copy()
        for i, di in enumerate(self.d):
            if di:
                arriving[..., i] = state.hist[self.H - di, i, 0]
        x = state.x
        if exogenous:
            x = x + self.exogenous(state.t)
        x_next = np.einsum("nij,...nj->...ni", self.A, x)
        x_next = x_next + np.stack([arriving, u[..., :, 1]], axis=-1)
        if self.scenario.clamp:
            x_next = np.maximum(x_next, 0.0)
        if self.H:
            hist = np.broadcast_to(state.hist, batch + state.hist.shape)
            hist_next = np.concatenate([hist[..., 1:, :, :], u[..., None, :, :]], axis=-3)
        else:
            hist_next = np.zeros(batch + (0, self.N, 2))
        return LoopState(state.t + 1, x_next, hist_next)

    def in_transit(self, state: LoopState) -> np.ndarray:
        if not self.H:
            return np.zeros(state.x.shape[:-2])
        return np.einsum("...hn,hn->...", state.hist[..., 0], self._transit_mask)

    def total(self, state: LoopState):
        """Material in buffers plus material in transit."""
        return state.x.sum(axis=(-2, -1)) + self.in_transit(state)

    def level(self, state: LoopState):
        return self.total(state) / (2 * self.N)

    def _quad(self, a, b):
        if self.omega is None:
            return 0.5 * np.einsum("...ni,...ni->...", a, b)
        return 0.5 * np.einsum("...ni,nij,...nj->...", a, self.omega, b)

    def storage(self, state: LoopState, level=None) -> float:
        level = self.level(state) if level is None else level
        a = self.augmented(state, level)
        return float(self._quad(a, a))

    def storage_change(self, state: LoopState, nxt: LoopState) -> np.ndarray:
        """``V(nxt) - V(state)`` about the current conserved level.

        Evaluated as ``0.5 (a1 - a0)' P (a1 + a0)`` to avoid cancellation.
        """
        level = self.level(state)
        a0 = self.augmented(state, level)
        a1 = self.augmented(nxt, level)
        return self._quad(a1 - a0, a1 + a0)


@dataclass
class Trace:
    """Per-tick record.  States have ``T + 1`` rows, signals ``T``."""

    x: np.ndarray
    y_c: np.ndarray
    u_c: np.ndarray
    u_a: np.ndarray
    V: np.ndarray
    level: np.ndarray | None
    total: np.ndarray | None
    drift: np.ndarray
    y: np.ndarray | None = None
    err: np.ndarray | None = None
    name: str = ""
    replicate: int = 0

    @property
    def horizon(self) -> int:
        return self.x.shape[0] - 1

    @property
    def consensus(self) -> np.ndarray:
        """Max-abs consensus error per tick."""
        if self.err is not None:
            return self.err
        return consensus_error(self)[0]


def _streams(scenario, replicate):
    return [RngStream(scenario.seed, m, replicate) for m in range(scenario.n_routes)]


def step(state: LoopState, loop: ClosedLoop, streams) -> tuple[LoopState, dict]:
    """Advance one tick; returns the next state and the tick's signals."""
    y = loop.outputs(state)
    y_c = loop.imbalance(state)
    u_c = loop.commands(state, y_c)
    u_a = np.array([sample(v, s) for v, s in zip(u_c, streams)], dtype=np.int8)
    nxt = loop.advance(state, u_a)
    if not np.all(np.isfinite(nxt.x)):
        raise NumericError(f"non-finite stock levels at t={nxt.t}")
    return nxt, {"y": y.ravel(), "y_c": y_c, "u_c": u_c, "u_a": u_a}


def run(scenario: Scenario, replicate: int = 0, drift_ticks=None) -> Trace:
    """Simulate one replicate.

    Exact drift is evaluated at ``drift_ticks`` (all ticks when the scenario
    sets ``compute_drift``); other entries are NaN.
    """
    loop = ClosedLoop(scenario)
    T, N, M = scenario.horizon, loop.N, loop.M
    if scenario.compute_drift:
        drift_ticks = range(T + 1)
    drift_ticks = set() if drift_ticks is None else {int(t) for t in drift_ticks}
    streams = _streams(scenario, replicate)
    xs = np.empty((T + 1, 2 * N))
    ys = np.empty((T, 2 * N))
    y_c = np.empty((T, M))
    u_c = np.empty((T, M))
    u_a = np.empty((T, M), dtype=np.int8)
    V = np.empty(T + 1)
    level = np.empty(T + 1)
    total = np.empty(T + 1)
    drift = np.full(T + 1, np.nan)
    state = loop.initial_state()
    for t in range(T + 1):
        xs[t] = state.x.ravel()
        total[t] = loop.total(state)
        level[t] = total[t] / (2 * N)
        V[t] = loop.storage(state, level[t])
        if t in drift_ticks:
            drift[t] = expected_drift(state, loop)
        if t == T:
            break
        state, rec = step(state, loop, streams)
        ys[t], y_c[t], u_c[t], u_a[t] = rec["y"], rec["y_c"], rec["u_c"], rec["u_a"]
    tr = Trace(xs, y_c, u_c, u_a, V, level, total, drift, y=ys, name=scenario.name, replicate=replicate)
    tr.err = consensus_error(tr)[0]
    return tr


@dataclass
class ReplicateSummary:
    mean: np.ndarray
    std: np.ndarray
    traces: list[Trace] = field(repr=False)


def _run_one(args):
    scenario, r, drift_ticks = args
    return run(scenario, r, drift_ticks)


def run_replicates(scenario: Scenario, replicates: int | None = None, workers: int | None = None,
                   drift_ticks=None) -> ReplicateSummary:
    """Run replicates ``0..R-1`` and summarize the consensus error per tick."""
    R = scenario.replicates if replicates is None else replicates
    jobs = [(scenario, r, drift_ticks) for r in range(R)]
    if workers and workers > 1 and R > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    err = np.stack([consensus_error(t)[0] for t in traces])
    return ReplicateSummary(err.mean(axis=0), err.std(axis=0), traces)


def consensus_error(trace: Trace, eq: EquilibriumState | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Max-abs and mean-square deviation from the equilibrium per tick.

    Without ``eq`` the reference is the conserved running level, which
    re-bases whenever disturbances or exogenous flows change the total.
    """
    if eq is None and trace.level is None:
        raise ParameterError("trace has no level series; pass an equilibrium")
    ref = trace.level[:, None] if eq is None else np.asarray(eq.x_bar)[None, :]
    dev = trace.x - ref
    return np.abs(dev).max(axis=1), (dev ** 2).mean(axis=1)


def settling_time(err, threshold: float, start: int = 0, end: int | None = None):
    """First tick in ``[start, end]`` after which ``err`` stays within threshold."""
    err = np.asarray(err)
    end = len(err) - 1 if end is None else end
    seg = err[start:end + 1] <= threshold
    if not seg[-1]:
        return None
    bad = np.flatnonzero(~seg)
    return start if bad.size == 0 else start + int(bad[-1]) + 1


def window_variance(trace: Trace, t0: int = 250, t1: int = 300) -> float:
    """Fluctuation of the stock levels over ticks ``t0..t1``.

    Variance over time of each buffer's stock within the window, averaged
    over buffers.  A static offset between buffers does not count.
    """
    return float(trace.x[t0:t1 + 1].var(axis=0).mean())


def window_disagreement(trace: Trace, t0: int = 250, t1: int = 300) -> float:
    """Mean over ``t0..t1`` of the squared deviation of stocks from the level."""
    return float(consensus_error(trace)[1][t0:t1 + 1].mean())


REFERENCE_X0 = (15, 27, 40, 25, 30, 2, 10, 15, 5, 30, 2, 17)
REFERENCE_IDS = ("1", "2-1", "2-2", "2-3", "3-1", "3-2", "3-3")


def build_reference_tests(seed: int = 1, delay_seed: int = 0) -> list[Scenario]:
    """The seven reference experiments on the six-process ring."""
    topo = build_cyclic(6)
    n = 6
    common = dict(
        topology=topo,
        h=(0.10,) * n,
        x0=REFERENCE_X0,
        horizon=300,
        inflows=(Flow(1, "in", 0.05),),
        outflows=(Flow(6, "out", 0.05),),
        disturbances=(Disturbance(150, 4, "out", 15.0, -1),),
        seed=seed,
        delta_auto=True,
    )
    big = tuple(int(v) for v in np.random.default_rng(delay_seed).integers(8, 13, size=n))

    def ctl(gain, kind):
        return (ControllerSpec(gain, kind),) * n

    out = [Scenario(name="1", d=(0,) * n, controllers=ctl(0.30, "atan_dz"), **common)]
    for prefix, delays, extra in (("2", (5,) * n, {}), ("3", big, {"delay_range": (8, 12), "delay_seed": delay_seed})):
        out += [
            Scenario(name=f"{prefix}-1", d=delays, controllers=ctl(0.75, "atan"), **extra, **common),
            Scenario(name=f"{prefix}-2", d=delays, controllers=ctl(0.75, "atan_dz"), **extra, **common),
            Scenario(name=f"{prefix}-3", d=delays, controllers=ctl(0.75, "atan_dz"), compensator=True,
                     nominal_delay=5 if prefix == "2" else "max", **extra, **common),
        ]
    return out


def reference_test(test_id: str, **kw) -> Scenario:
    for sc in build_reference_tests(**kw):
        if sc.name == test_id:
            return sc
    raise ParameterError(f"unknown reference test {test_id!r}; expected one of {REFERENCE_IDS}")
