"""Acceptance criteria 1-10.

Each test records one ``criterion N: PASS|FAIL`` line with its measured
value and tolerance; the lines are printed in the pytest terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from probctl.actuation import RngStream, outcome_distribution, sample_array
from probctl.cli import verification_checks
from probctl.compensator import build_omega, build_output_map, gamma_min_delay, gamma_min_nodelay
from probctl.control import ControllerSpec
from probctl.dissipativity import bisect_gamma, check_local_dissipativity, expected_drift, max_eig, min_eig
from probctl.engine import (
    REFERENCE_IDS,
    ClosedLoop,
    reference_test,
    run,
    settling_time,
    window_disagreement,
    window_variance,
)
from probctl.plant import B_IN, B_OUT, ProcessParams, augment, local_dynamics_matrix
from probctl.scenario_io import load_scenario

DELAY_GRID = [(h, d) for h in (0.1, 0.3) for d in range(1, 13)]
DRIFT_TOL = 1e-9
TICKS = np.linspace(0, 299, 20).round().astype(int)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_closed_forms_vs_kyp():
    t0 = time.perf_counter()
    gaps = []
    for h in np.arange(1, 10) / 10:
        found = bisect_gamma(lambda g: check_local_dissipativity(h, g, 1e-12))
        gaps.append(abs(found - gamma_min_nodelay(h)))
    eig_gaps = []
    for h, d in DELAY_GRID:
        plant = augment(ProcessParams(h, d))
        om = build_omega(h, d).omega
        eig_gaps.append(abs(max_eig(plant.B_bar.T @ om @ plant.B_bar) / 2 - gamma_min_delay(h, d)))
    dt = time.perf_counter() - t0
    ok = max(gaps) <= 1e-6 and max(eig_gaps) <= 1e-9 and dt < 10
    report(1, ok, f"bisection gap {max(gaps):.2e} (tol 1e-6), eigen gap {max(eig_gaps):.2e} (tol 1e-9), "
                  f"{dt:.2f}s (limit 10s)")


def test_criterion_2_storage_identities():
    worst_pd, worst_nsd, worst_cross = np.inf, -np.inf, 0.0
    for h, d in DELAY_GRID:
        plant = augment(ProcessParams(h, d))
        om = build_omega(h, d).omega
        c_bar = np.hstack(build_output_map(h, d))
        worst_pd = min(worst_pd, min_eig(om))
        worst_nsd = max(worst_nsd, max_eig(plant.A_bar.T @ om @ plant.A_bar - om))
        worst_cross = max(worst_cross, float(np.abs(plant.A_bar.T @ om @ plant.B_bar - c_bar.T).max()))
    ok = worst_pd > 0 and worst_nsd <= 1e-9 and worst_cross <= 1e-12
    report(2, ok, f"min eig Omega {worst_pd:.3e} (>0), max eig decay {worst_nsd:.2e} (tol 1e-9), "
                  f"cross block {worst_cross:.2e} (tol 1e-12)")


def _drifts(sc, replicates=10):
    return np.concatenate([run(sc, r, drift_ticks=TICKS).drift[TICKS] for r in range(replicates)])


def test_criterion_3_supermartingale():
    t0 = time.perf_counter()
    sc = reference_test("1")
    drift = _drifts(sc)
    weak = replace(sc, delta_auto=False, controllers=tuple(replace(c, delta=0.5) for c in sc.controllers))
    weak_drift = _drifts(weak)
    dt = time.perf_counter() - t0
    ok = drift.max() <= DRIFT_TOL and weak_drift.max() > 0 and dt < 60
    report(3, ok, f"max drift {drift.max():.3e} over {drift.size} states (tol 1e-9); "
                  f"delta=0.5 max drift {weak_drift.max():+.3e} (>0 required); {dt:.1f}s (limit 60s)")


def test_criterion_4_supermartingale_with_delay():
    t0 = time.perf_counter()
    drift = _drifts(reference_test("2-3"))
    dt = time.perf_counter() - t0
    ok = drift.max() <= DRIFT_TOL and dt < 300
    report(4, ok, f"case 2-3 max drift {drift.max():.3e} over {drift.size} states (tol 1e-9); {dt:.1f}s (limit 300s)")


def _mc_drift(loop, state, n, rng, chunk=100_000):
    """One-step storage change by direct sampling, written against the model
    equations rather than the engine's transition code."""
    sc = loop.scenario
    N = sc.n_processes
    B = loop.B
    d = np.array(sc.d)
    dn = sc.d_n
    u_c = loop.commands(state)
    A = np.stack([local_dynamics_matrix(h) for h in sc.h])
    hist = state.hist  # oldest first, H slots
    H = hist.shape[0]
    transit = sum(hist[H - d[i]:, i, 0].sum() for i in range(N) if d[i])
    level = (state.x.sum() + transit) / (2 * N)
    P = [build_omega(h, dn).omega if dn else np.eye(2) for h in sc.h]

    def V(x, h_slots):
        v = 0.0
        for i in range(N):
            e = x[..., i, :] - level
            if dn:
                z = h_slots[..., H - dn:, i, :].reshape(h_slots.shape[:-3] + (2 * dn,))
                e = np.concatenate([e, z], axis=-1)
            v = v + 0.5 * np.einsum("...a,ab,...b->...", e, P[i], e)
        return v

    v0 = V(state.x, hist)
    out = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        r = rng.random((m, B.shape[1]))
        u_a = np.where(r < np.abs(u_c), np.sign(u_c), 0.0)
        u = (u_a @ B.T).reshape(m, N, 2)
        late = np.empty((m, N))
        for i in range(N):
            late[:, i] = hist[H - d[i], i, 0] if d[i] else u[:, i, 0]
        x1 = np.einsum("nij,nj->...ni", A, state.x) + u @ B_OUT + late[..., None] * np.diag(B_IN)
        h1 = np.concatenate([np.broadcast_to(hist[1:], (m,) + hist[1:].shape), u[:, None]], axis=1) if H else None
        out.append(V(x1, h1) - v0)
    dv = np.concatenate(out)
    return dv.mean(), dv.std(ddof=1) / np.sqrt(n)


def test_criterion_5_drift_vs_monte_carlo():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(20):
        sc = reference_test(("1", "2-3", "2-2", "3-3")[k % 4])
        loop = ClosedLoop(sc)
        x = 18 + rng.normal(scale=4, size=(6, 2))
        hist = rng.integers(-2, 3, size=(loop.H, 6, 2)).astype(float)
        state = loop.state_from(x, hist, t=0)
        exact = expected_drift(state, loop)
        mean, se = _mc_drift(loop, state, 1_000_000, rng)
        z = abs(mean - exact) / se if se > 0 else (0.0 if abs(mean - exact) < 1e-9 else np.inf)
        worst = max(worst, z)
    report(5, worst <= 4, f"worst |enumeration - MC| = {worst:.2f} sigma over 20 states at 1e6 samples (tol 4 sigma)")


def _transit(tr, d):
    """Material dispatched to a delayed input buffer that has not arrived yet."""
    T = tr.horizon
    topo = reference_test("1").topology
    out = np.zeros(T + 1)
    for k, (_, dest) in enumerate(topo.routes):
        dj = d[dest - 1]
        if not dj:
            continue
        c = np.concatenate([[0], np.cumsum(tr.u_a[:, k])])
        for t in range(T + 1):
            out[t] += c[t] - c[max(0, t - dj)]
    return out


def test_criterion_6_conservation():
    worst, literal = 0.0, 0.0
    for tid in REFERENCE_IDS:
        sc = reference_test(tid)
        tr = run(sc)
        total = tr.x.sum(axis=1) + _transit(tr, sc.d)
        expected = np.full(sc.horizon, sum(f.rate for f in sc.inflows) - sum(f.rate for f in sc.outflows))
        for ev in sc.disturbances:
            expected[ev.t] += ev.delta
        worst = max(worst, float(np.abs(np.diff(total) - expected).max()))
        if tid == "1":
            literal = float(np.abs(np.diff(tr.x.sum(axis=1)) - expected).max())
    ok = worst <= 1e-12 and literal <= 1e-12
    report(6, ok, f"worst balance residual {worst:.2e} over 7 scenarios incl. in-transit; "
                  f"buffers-only residual on test 1 {literal:.2e} (tol 1e-12)")


def test_criterion_7_test1_statistics():
    sc = reference_test("1")
    settle, resettle, drops = [], [], []
    for r in range(50):
        tr = run(sc, r)
        settle.append(settling_time(tr.consensus, 2.5, 0, 149))
        s = settling_time(tr.consensus, 2.5, 151, sc.horizon)
        resettle.append(s is not None and s < 250)
        drops.append(tr.level[150] - tr.level[151])
    settle = np.array([np.inf if s is None else s for s in settle], dtype=float)
    med = float(np.median(settle))
    drop_err = float(np.max(np.abs(np.array(drops) - 15 / 12)))
    frac = float(np.mean(resettle))
    ok = med < 100 and drop_err <= 1e-12 and frac >= 0.9
    report(7, ok, f"median settling {med:.0f} (<100), level drop error {drop_err:.1e} (tol 1e-12), "
                  f"re-settled before 250 in {frac:.0%} (>=90%)")


def test_criterion_8_delay_ordering():
    R = 50
    var = {tid: np.array([window_variance(run(reference_test(tid), r)) for r in range(R)])
           for tid in REFERENCE_IDS[1:]}
    fracs = {}
    for p in ("2", "3"):
        chain = (var[f"{p}-3"] < var[f"{p}-2"]) & (var[f"{p}-2"] < var[f"{p}-1"])
        fracs[p] = float(chain.mean())
    means = ", ".join(f"{k}={v.mean():.3f}" for k, v in var.items())
    ok = min(fracs.values()) >= 0.8
    report(8, ok, f"chain 2-3<2-2<2-1 in {fracs['2']:.0%}, 3-3<3-2<3-1 in {fracs['3']:.0%} of paired replicates "
                  f"(>=80%); window variance means {means}")


@pytest.mark.parametrize("tid", ["2-1", "2-2", "2-3", "3-1", "3-2", "3-3"])
def test_window_disagreement_recorded(tid):
    # spatial spread in the late window; informational, not a criterion
    vals = [window_disagreement(run(reference_test(tid), r)) for r in range(5)]
    assert np.all(np.isfinite(vals))


def test_criterion_9_actuator_statistics():
    n = 100_000
    worst = 0.0
    for k, u in enumerate((-1.0, -0.5, 0.0, 0.3, 1.0)):
        out = sample_array(np.full(n, u), RngStream(99, k).uniforms(n))
        for val, p in zip((1, 0, -1), outcome_distribution(u).as_tuple()):
            freq = (out == val).mean()
            sd = np.sqrt(p * (1 - p) / n)
            z = 0.0 if sd == 0 and freq == p else abs(freq - p) / sd if sd else np.inf
            worst = max(worst, z)
    moment_err = 0.0
    for u in np.linspace(-1, 1, 101):
        probs = outcome_distribution(u).as_tuple()
        m1 = sum(o * p for o, p in zip((1, 0, -1), probs))
        m2 = sum(o * o * p for o, p in zip((1, 0, -1), probs))
        moment_err = max(moment_err, abs(m1 - u), abs(m2 - abs(u)))
    ok = worst <= 3 and moment_err <= 1e-15
    report(9, ok, f"worst frequency deviation {worst:.2f} sigma (tol 3), moment error {moment_err:.1e} on 101 points")


def test_criterion_10_verify_outcomes(scenario_dir):
    def failing(sc):
        return {c.name.split("[")[0] for c in verification_checks(sc) if not c.passed}

    base = load_scenario(scenario_dir / "test1.toml")
    low = replace(base, delta_auto=False, controllers=tuple(replace(c, delta=1.0) for c in base.controllers))
    f_base, f_low = failing(base), failing(low)
    f_21 = failing(load_scenario(scenario_dir / "test2-1.toml"))
    ok = f_base == set() and f_low == {"network_condition"} and f_21 == {"osp_margin"}
    report(10, ok, f"test 1 failures {sorted(f_base)}, delta=1.0 failures {sorted(f_low)}, "
                   f"case 2-1 failures {sorted(f_21)}")
