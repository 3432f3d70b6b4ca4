"""Scenario files (TOML) and trace CSV files.

Scenario grammar, one table per section; unknown keys are rejected::

    [topology]          cyclic = N            | n_processes = N, routes = [[1, 2], ...]
    [plant]             h = 0.1 | [...]       per process
                        d = 0 | [...]         per process, in ticks
                        d_range = [8, 12], d_seed = 0   (draws d when d is absent)
                        x0 = [x_in_1, x_out_1, ..., x_in_N, x_out_N]
                        clamp = false
    [controller]        gain, normalizer, delta, theta_m   scalar or per-route list;
                        delta may be "min"
    [compensator]       enabled = false, nominal_delay = 5 | "max"
    [exogenous]         inflow = [{process, buffer, rate}], outflow = [...]
    [disturbances]      events = [{t, process, buffer, amount, sign}]
    [run]               name, horizon, seed, replicates, drift

Processes are 1-based; buffers are ``"in"`` or ``"out"``; stocks and
amounts are in material units, rates in units per tick.
"""

from __future__ import annotations

import csv
import math
import re
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from probctl.control import ControllerSpec
from probctl.engine import Disturbance, Flow, Scenario, Trace
from probctl.errors import ProbCtlError, ScenarioError
from probctl.topology import NetworkTopology, build_cyclic

__all__ = [
    "load_scenario",
    "parse_scenario",
    "dump_scenario",
    "scenario_to_dict",
    "save_scenario",
    "write_trace_csv",
    "read_trace_csv",
    "trace_header",
]

SECTIONS = {
    "topology": {"cyclic", "n_processes", "routes"},
    "plant": {"h", "d", "d_range", "d_seed", "x0", "clamp"},
    "controller": {"gain", "normalizer", "delta", "theta_m"},
    "compensator": {"enabled", "nominal_delay"},
    "exogenous": {"inflow", "outflow"},
    "disturbances": {"events"},
    "run": {"name", "horizon", "seed", "replicates", "drift"},
}
REQUIRED = ("topology", "plant", "controller")
FLOW_KEYS = {"process", "buffer", "rate"}
EVENT_KEYS = {"t", "process", "buffer", "amount", "sign"}


def _locate(text, section, key=None):
    """1-based (line, column) of a section header or a key inside it."""
    if text is None:
        return None, None
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_]+)\s*\]")
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no, line.index("[") + 1
            continue
        if key is not None and current == section:
            m = re.match(rf"^(\s*){re.escape(key)}\s*=", line)
            if m:
                return no, len(m.group(1)) + 1
    return None, None


class _Reader:
    def __init__(self, doc, text):
        self.doc = doc
        self.text = text

    def fail(self, msg, section, key=None):
        line, col = _locate(self.text, section, key)
        if line is None and key is not None:
            line, col = _locate(self.text, section)
        raise ScenarioError(msg, line, col)

    def section(self, name):
        sec = self.doc.get(name, {})
        if not isinstance(sec, dict):
            self.fail(f"[{name}] must be a table", name)
        return sec

    def per(self, section, key, count, kind, default=None):
        sec = self.section(section)
        if key not in sec:
            if default is None:
                self.fail(f"missing key '{key}' in [{section}]", section)
            return [default] * count
        val = sec[key]
        vals = val if isinstance(val, list) else [val] * count
        if len(vals) != count:
            self.fail(f"'{key}' needs 1 or {count} values, got {len(vals)}", section, key)
        try:
            return [kind(v) for v in vals]
        except (TypeError, ValueError) as exc:
            self.fail(f"bad value for '{key}': {exc}", section, key)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", str(exc))
        raise ScenarioError(f"TOML syntax error: {msg}", line, col) from None
    return scenario_from_dict(doc, text)


def scenario_from_dict(doc: dict, text: str | None = None) -> Scenario:
    r = _Reader(doc, text)
    for name, val in doc.items():
        if name not in SECTIONS:
            line, col = _locate(text, name)
            raise ScenarioError(f"unknown section [{name}]", line, col)
        for key in val if isinstance(val, dict) else ():
            if key not in SECTIONS[name]:
                r.fail(f"unknown key '{key}' in [{name}]", name, key)
    for name in REQUIRED:
        if name not in doc:
            raise ScenarioError(f"missing required section [{name}]")
    try:
        return _build(r)
    except ScenarioError:
        raise
    except ProbCtlError as exc:
        raise ScenarioError(str(exc)) from None


def _build(r: _Reader) -> Scenario:
    topo_sec = r.section("topology")
    if "cyclic" in topo_sec:
        if "routes" in topo_sec:
            r.fail("give either 'cyclic' or 'routes', not both", "topology", "routes")
        topo = build_cyclic(topo_sec["cyclic"])
    elif "routes" in topo_sec and "n_processes" in topo_sec:
        try:
            routes = tuple((int(s), int(d)) for s, d in topo_sec["routes"])
        except (TypeError, ValueError):
            r.fail("routes must be a list of [source, destination] pairs", "topology", "routes")
        topo = NetworkTopology(int(topo_sec["n_processes"]), routes)
    else:
        r.fail("[topology] needs 'cyclic' or both 'n_processes' and 'routes'", "topology")
    n, m = topo.n_processes, topo.n_routes

    plant = r.section("plant")
    h = r.per("plant", "h", n, float)
    delay_range = delay_seed = None
    if "d" in plant:
        d = r.per("plant", "d", n, int)
    elif "d_range" in plant:
        lo, hi = (int(v) for v in plant["d_range"])
        delay_seed = int(plant.get("d_seed", 0))
        delay_range = (lo, hi)
        d = [int(v) for v in np.random.default_rng(delay_seed).integers(lo, hi + 1, size=n)]
    else:
        d = [0] * n
    if "d_range" in plant and "d" in plant:
        delay_range = tuple(int(v) for v in plant["d_range"])
        delay_seed = int(plant["d_seed"]) if "d_seed" in plant else None
    if "x0" not in plant:
        r.fail("missing key 'x0' in [plant]", "plant")
    x0 = r.per("plant", "x0", 2 * n, float)

    ctl = r.section("controller")
    gains = r.per("controller", "gain", m, float)
    kinds = r.per("controller", "normalizer", m, str, default="atan_dz")
    delta_auto = ctl.get("delta") == "min"
    deltas = [0.0] * m if delta_auto else r.per("controller", "delta", m, float, default=0.0)
    theta = r.per("controller", "theta_m", m, float) if "theta_m" in ctl else [None] * m
    try:
        controllers = tuple(ControllerSpec(g, k, 0.0 if delta_auto else dl, tm)
                            for g, k, dl, tm in zip(gains, kinds, deltas, theta))
    except ProbCtlError as exc:
        r.fail(str(exc), "controller")

    comp = r.section("compensator")
    nominal = comp.get("nominal_delay")

    exo = r.section("exogenous")
    flows = {}
    for key in ("inflow", "outflow"):
        items = exo.get(key, [])
        flows[key] = tuple(_flow(r, it, key) for it in items)
    events = tuple(_event(r, ev) for ev in r.section("disturbances").get("events", []))

    run = r.section("run")
    return Scenario(
        topology=topo,
        h=h,
        d=d,
        controllers=controllers,
        x0=x0,
        horizon=int(run.get("horizon", 300)),
        compensator=bool(comp.get("enabled", False)),
        nominal_delay=nominal,
        delta_auto=delta_auto,
        inflows=flows["inflow"],
        outflows=flows["outflow"],
        disturbances=events,
        seed=int(run.get("seed", 0)),
        replicates=int(run.get("replicates", 1)),
        delay_range=delay_range,
        delay_seed=delay_seed,
        clamp=bool(plant.get("clamp", False)),
        compute_drift=bool(run.get("drift", False)),
        name=str(run.get("name", "")),
    )


def _flow(r, item, key):
    if not isinstance(item, dict) or set(item) - FLOW_KEYS or not {"process", "rate"} <= set(item):
        r.fail(f"each {key} entry needs process, rate and optional buffer", "exogenous", key)
    default = "in" if key == "inflow" else "out"
    return Flow(int(item["process"]), item.get("buffer", default), float(item["rate"]))


def _event(r, ev):
    if not isinstance(ev, dict) or set(ev) - EVENT_KEYS or not {"t", "process", "amount"} <= set(ev):
        r.fail("each event needs t, process, amount and optional buffer, sign", "disturbances", "events")
    return Disturbance(int(ev["t"]), int(ev["process"]), ev.get("buffer", "out"),
                       float(ev["amount"]), int(ev.get("sign", -1)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from None
    return parse_scenario(text)


def _compact(values):
    values = list(values)
    return values[0] if all(v == values[0] for v in values) else values


def scenario_to_dict(sc: Scenario) -> dict:
    topo = sc.topology
    if topo.is_cyclic():
        topo_sec = {"cyclic": topo.n_processes}
    else:
        topo_sec = {"n_processes": topo.n_processes, "routes": [list(rt) for rt in topo.routes]}
    plant = {"h": _compact(sc.h), "d": _compact(sc.d), "x0": list(sc.x0), "clamp": sc.clamp}
    if sc.delay_range is not None:
        plant["d_range"] = list(sc.delay_range)
        if sc.delay_seed is not None:
            plant["d_seed"] = sc.delay_seed
    ctl = {
        "gain": _compact(c.gain for c in sc.controllers),
        "normalizer": _compact(c.normalizer for c in sc.controllers),
        "delta": "min" if sc.delta_auto else _compact(c.delta for c in sc.controllers),
    }
    if any(c.theta_m is not None for c in sc.controllers):
        ctl["theta_m"] = _compact(c.theta_m for c in sc.controllers)
    comp = {"enabled": sc.compensator}
    if sc.nominal_delay is not None:
        comp["nominal_delay"] = sc.nominal_delay
    flow = lambda f: {"process": f.process, "buffer": f.buffer, "rate": f.rate}  # noqa: E731
    return {
        "topology": topo_sec,
        "plant": plant,
        "controller": ctl,
        "compensator": comp,
        "exogenous": {"inflow": [flow(f) for f in sc.inflows], "outflow": [flow(f) for f in sc.outflows]},
        "disturbances": {"events": [
            {"t": e.t, "process": e.process, "buffer": e.buffer, "amount": e.amount, "sign": e.sign}
            for e in sc.disturbances
        ]},
        "run": {"name": sc.name, "horizon": sc.horizon, "seed": sc.seed,
                "replicates": sc.replicates, "drift": sc.compute_drift},
    }


def dump_scenario(sc: Scenario) -> str:
    return tomli_w.dumps(scenario_to_dict(sc))


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dump_scenario(sc))


# -- trace CSV ---------------------------------------------------------------

def trace_header(n_processes: int, n_routes: int) -> list[str]:
    cols = ["t"]
    for i in range(1, n_processes + 1):
        cols += [f"x_in_{i}", f"x_out_{i}"]
    for name in ("y_c", "u_c", "u_a"):
        cols += [f"{name}_{k}" for k in range(1, n_routes + 1)]
    return cols + ["V", "drift", "consensus_error"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return format(float(v), ".12g")


def write_trace_csv(trace: Trace, path) -> None:
    T = trace.horizon
    n2, m = trace.x.shape[1], trace.u_c.shape[1]
    err = trace.consensus
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(n2 // 2, m))
        for t in range(T + 1):
            row = [str(t)] + [_fmt(v) for v in trace.x[t]]
            if t < T:
                row += [_fmt(v) for v in trace.y_c[t]] + [_fmt(v) for v in trace.u_c[t]]
                row += [str(int(v)) for v in trace.u_a[t]]
            else:
                row += [""] * (3 * m)
            row += [_fmt(trace.V[t]), _fmt(trace.drift[t]), _fmt(err[t])]
            w.writerow(row)


def read_trace_csv(path) -> Trace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n2 = sum(1 for c in header if c.startswith("x_"))
    m = sum(1 for c in header if c.startswith("u_a_"))
    if header != trace_header(n2 // 2, m):
        raise ScenarioError(f"{path}: unexpected trace header")
    num = lambda s: float(s) if s != "" else np.nan  # noqa: E731
    data = np.array([[num(s) for s in row] for row in body])
    T = data.shape[0] - 1
    x = data[:, 1:1 + n2]
    sig = data[:T, 1 + n2:1 + n2 + 3 * m]
    return Trace(
        x=x,
        y_c=sig[:, :m],
        u_c=sig[:, m:2 * m],
        u_a=sig[:, 2 * m:].astype(np.int8),
        V=data[:, -3],
        level=None,
        total=None,
        drift=data[:, -2],
        err=data[:, -1],
    )
