"""Command-line front end.

Exit codes: 0 success / all checks pass, 1 a verification check failed,
2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from probctl.compensator import build_omega, build_output_map, gamma_min_delay, gamma_min_nodelay
from probctl.control import verify_osp_margin
from probctl.dissipativity import (
    bisect_gamma,
    check_local_dissipativity,
    delay_certificate,
    is_nsd,
    local_certificate,
    max_eig,
    min_eig,
    network_margin,
)
from probctl.engine import (
    REFERENCE_IDS,
    Scenario,
    design_gammas,
    reference_test,
    run,
    run_replicates,
    settling_time,
    window_disagreement,
    window_variance,
)
from probctl.errors import NumericError, ProbCtlError, ScenarioError
from probctl.plant import ProcessParams, augment
from probctl.scenario_io import load_scenario, write_trace_csv
from probctl.topology import incidence

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
SD_TOL = 1e-9
CROSS_TOL = 1e-12
GAMMA_AGREE = 1e-6
SETTLE_BAND = 2.5


@dataclass(frozen=True)
class Check:
    name: str
    params: str
    passed: bool
    value: float
    threshold: float

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<24} {self.params:<34} {status:<5} {self.value:>+14.6e} {self.threshold:>14.6e}"


def _bisect_local(h, tol=1e-12):
    return bisect_gamma(lambda g: check_local_dissipativity(h, g, tol))


def _bisect_delay(h, d, tol=1e-12):
    omega = build_omega(h, d)
    c_bar = np.hstack(build_output_map(h, d, omega))
    return bisect_gamma(lambda g: is_nsd(delay_certificate(h, d, g, omega, c_bar), tol))


def verification_checks(sc: Scenario, tol: float = SD_TOL) -> list[Check]:
    """Every design condition for a scenario, one record per check."""
    checks = []
    dn = sc.d_n
    gammas = design_gammas(sc)
    for i, h in enumerate(sc.h, 1):
        if dn == 0:
            g = gamma_min_nodelay(h)
            lam = max_eig(local_certificate(h, g))
            gap = abs(_bisect_local(h) - g)
            checks.append(Check(f"local_kyp[{i}]", f"h={h:g} gamma_m={g:.6f}",
                                lam <= tol and gap <= GAMMA_AGREE, lam, tol))
            continue
        g = gamma_min_delay(h, dn)
        plant = augment(ProcessParams(h, dn))
        omega = build_omega(h, dn)
        c_bar = np.hstack(build_output_map(h, dn, omega))
        O = omega.omega
        lam_b = max_eig(plant.B_bar.T @ O @ plant.B_bar) / 2
        checks.append(Check(f"local_kyp[{i}]", f"h={h:g} d={dn} gamma_m={g:.6f}",
                            abs(lam_b - g) <= tol, lam_b - g, tol))
        lam = min_eig(O)
        checks.append(Check(f"omega_pd[{i}]", f"h={h:g} d={dn}", lam > tol, lam, tol))
        lam = max_eig(plant.A_bar.T @ O @ plant.A_bar - O)
        checks.append(Check(f"omega_decay_nsd[{i}]", f"h={h:g} d={dn}", lam <= tol, lam, tol))
        cross = float(np.abs(plant.A_bar.T @ O @ plant.B_bar - c_bar.T).max())
        checks.append(Check(f"cross_block_zero[{i}]", f"h={h:g} d={dn}", cross <= CROSS_TOL, cross, CROSS_TOL))
        lam = max_eig(delay_certificate(h, dn, g, omega, c_bar))
        checks.append(Check(f"kyp_nsd[{i}]", f"h={h:g} d={dn} gamma={g:.6f}", lam <= tol, lam, tol))
    B = incidence(sc.topology)
    lam = network_margin(sc.deltas, gammas, B)
    checks.append(Check("network_condition", f"delta_min={sc.deltas.min():.6f}", lam >= -tol, lam, -tol))
    for k, (label, spec) in enumerate(zip(sc.topology.route_labels(), sc.controllers), 1):
        rep = verify_osp_margin(spec, spec.delta)
        checks.append(Check(f"osp_margin[{k}]", f"{label} {spec.normalizer} delta={spec.delta:.4f}",
                            rep.passed, rep.worst_margin, 0.0))
    return checks


def cmd_verify(args) -> int:
    sc = load_scenario(args.scenario)
    checks = verification_checks(sc, args.tol)
    print(f"{'check':<24} {'parameters':<34} {'':<5} {'extreme value':>14} {'threshold':>14}")
    for c in checks:
        print(c.row())
    failed = [c.name for c in checks if not c.passed]
    if any(d for d in sc.d) and not sc.compensator:
        print("note: plant has transport delay but no compensator; checks assume the undelayed plant")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gamma(args) -> int:
    if args.d is None or args.d == 0:
        closed = gamma_min_nodelay(args.h)
        bis = _bisect_local(args.h)
        label = f"h={args.h:g}"
    else:
        closed = gamma_min_delay(args.h, args.d)
        bis = _bisect_delay(args.h, args.d)
        label = f"h={args.h:g} d={args.d}"
    print(f"{label}")
    print(f"gamma_m closed form : {closed:.6f}")
    print(f"gamma_m KYP bisect  : {bis:.6f}")
    print(f"difference          : {abs(closed - bis):.3e}")
    return EXIT_OK


def _write_summary(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "consensus_error_mean", "consensus_error_std"])
        for t, (m, s) in enumerate(zip(summary.mean, summary.std)):
            w.writerow([t, format(m, ".12g"), format(s, ".12g")])


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    R = args.replicates or sc.replicates
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = run_replicates(sc, R, workers=args.workers)
    for tr in summary.traces:
        write_trace_csv(tr, out / f"trace_r{tr.replicate:03d}.csv")
    _write_summary(out / "summary.csv", summary)
    print(f"wrote {R} trace(s) and summary.csv to {out}")
    return EXIT_OK


def _case_metrics(test_id, seed, replicates):
    sc = replace(reference_test(test_id), seed=seed)
    traces = [run(sc, r) for r in range(replicates)]
    return sc, traces


def reproduce_summary(test_id: str, seed: int = 1, replicates: int = 1):
    sc, traces = _case_metrics(test_id, seed, replicates)
    summary = {"test": test_id, "seed": seed, "replicates": replicates}
    if test_id == "1":
        settle = [settling_time(t.consensus, SETTLE_BAND, 0, 149) for t in traces]
        resettle = [settling_time(t.consensus, SETTLE_BAND, 151, sc.horizon) for t in traces]
        summary.update({
            "settling_time": settle,
            "settled_before_100": [s is not None and s < 100 for s in settle],
            "level_drop_at_150": [float(t.level[150] - t.level[151]) for t in traces],
            "resettling_time": resettle,
            "resettled_before_250": [s is not None and s < 250 for s in resettle],
        })
        return sc, traces, summary
    summary["window_variance"] = [window_variance(t) for t in traces]
    summary["window_disagreement"] = [window_disagreement(t) for t in traces]
    summary["final_consensus_error"] = [float(t.consensus[-1]) for t in traces]
    prefix = test_id.split("-")[0]
    siblings = {f"{prefix}-3"} | ({"2-3"} if test_id == "3-3" else set())
    for other in sorted(siblings - {test_id}):
        _, o_traces = _case_metrics(other, seed, replicates)
        ratio = [window_variance(a) / max(window_variance(b), 1e-300) for a, b in zip(traces, o_traces)]
        summary[f"variance_ratio_vs_{other}"] = ratio
    return sc, traces, summary


def cmd_reproduce(args) -> int:
    if args.test not in REFERENCE_IDS:
        print(f"error: unknown test id {args.test!r}; choose from {', '.join(REFERENCE_IDS)}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc, traces, summary = reproduce_summary(args.test, args.seed, args.replicates)
    tag = args.test.replace("-", "_")
    write_trace_csv(traces[0], out / f"trace_test{tag}.csv")
    x = np.mean([t.x for t in traces], axis=0)
    with open(out / f"plot_test{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"{b}_{i}" for i in range(1, sc.n_processes + 1) for b in ("x_in", "x_out")])
        for t, row in enumerate(x):
            w.writerow([t] + [format(v, ".12g") for v in row])
    (out / f"summary_test{tag}.json").write_text(json.dumps(summary, indent=2) + "\n")
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario file and write trace CSVs")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--out", default="out")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", help="check the design conditions of a scenario")
    s.add_argument("scenario")
    s.add_argument("--tol", type=float, default=SD_TOL)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("gamma", help="minimal dissipativity level: closed form vs KYP bisection")
    s.add_argument("--h", type=float, required=True)
    s.add_argument("--d", type=int, default=None)
    s.set_defaults(func=cmd_gamma)

    s = sub.add_parser("reproduce", help="run a built-in reference test")
    s.add_argument("--test", required=True)
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--replicates", type=int, default=1)
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProbCtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
