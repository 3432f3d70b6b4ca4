from dataclasses import replace

import numpy as np
import pytest

from probctl.control import ControllerSpec
from probctl.engine import (
    REFERENCE_X0,
    REFERENCE_IDS,
    ClosedLoop,
    Disturbance,
    Flow,
    Scenario,
    build_reference_tests,
    consensus_error,
    equilibrium,
    reference_test,
    run,
    run_replicates,
    settling_time,
    step,
    window_disagreement,
    window_variance,
    _streams,
)
from probctl.errors import NumericError, ParameterError
from probctl.plant import local_dynamics_matrix
from probctl.topology import build_cyclic


def _ring(n=3, **kw):
    base = dict(topology=build_cyclic(n), h=(0.2,) * n, d=(0,) * n,
                controllers=(ControllerSpec(0.5),) * n, x0=tuple(float(v) for v in range(2 * n)), horizon=20)
    base.update(kw)
    return Scenario(**base)


def test_reference_table():
    tests = build_reference_tests()
    assert [t.name for t in tests] == list(REFERENCE_IDS)
    t1 = tests[0]
    assert t1.horizon == 300 and t1.n_processes == 6 and t1.d == (0,) * 6
    assert {c.gain for c in t1.controllers} == {0.30}
    for t in tests[1:4]:
        assert {c.gain for c in t.controllers} == {0.75} and t.d == (5,) * 6
    assert tests[6].d_n == 12 == max(tests[6].d)
    assert tests[3].d_n == 5
    assert tests[1].controllers[0].normalizer == "atan"
    np.testing.assert_allclose(t1.deltas, 2 / (2 * 0.9))
    with pytest.raises(ParameterError):
        reference_test("4-1")


def test_initial_equilibrium():
    eq = equilibrium(REFERENCE_X0)
    assert eq.level == pytest.approx(218 / 12)
    assert round(eq.level, 4) == 18.1667


def test_deadzone_tick_is_pure_production():
    sc = _ring(controllers=(ControllerSpec(0.5, delta=1e6),) * 3)
    loop = ClosedLoop(sc)
    s0 = loop.initial_state()
    s1, rec = step(s0, loop, _streams(sc, 0))
    assert not rec["u_a"].any()
    A = local_dynamics_matrix(0.2)
    np.testing.assert_allclose(s1.x, s0.x @ A.T)


def test_conservation_one_tick():
    sc = _ring(inflows=(Flow(1, "in", 0.3),), outflows=(Flow(2, "out", 0.1),),
               disturbances=(Disturbance(0, 3, "in", 2.0, 1),))
    loop = ClosedLoop(sc)
    s0 = loop.initial_state()
    s1, _ = step(s0, loop, _streams(sc, 0))
    assert s1.x.sum() - s0.x.sum() == pytest.approx(0.3 - 0.1 + 2.0, abs=1e-12)


def test_delayed_arrival():
    # one route 1->2 with delay 3 at the destination, forced to fire every tick
    sc = _ring(n=2, h=(0.1, 0.1), d=(0, 3), x0=(0, 100, 0, 0), horizon=6,
               controllers=(ControllerSpec(100.0, "sat_dz", theta_m=1.0),) * 2)
    tr = run(sc)
    assert tr.u_a[0, 0] == 1
    loop = ClosedLoop(sc)
    s = loop.initial_state()
    nxt = loop.advance(s, np.array([1.0, 0.0]), exogenous=False)
    assert nxt.x[0, 1] == pytest.approx(90 - 1)  # leaves at once
    assert nxt.x[1, 0] == 0  # nothing has arrived yet
    assert loop.total(nxt) == pytest.approx(loop.total(s))


def test_determinism():
    sc = reference_test("2-3")
    a, b = run(sc, 3), run(sc, 3)
    for f in ("x", "u_a", "u_c", "V"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(run(sc, 4).u_a, a.u_a)


def test_zero_horizon():
    tr = run(_ring(horizon=0))
    assert tr.x.shape == (1, 6) and tr.u_a.shape == (0, 3) and tr.horizon == 0


def test_test1_shape_and_level():
    tr = run(reference_test("1"))
    assert tr.x.shape == (301, 12) and tr.u_a.shape == (300, 6)
    assert tr.level[150] - tr.level[151] == pytest.approx(15 / 12, abs=1e-12)
    assert round(tr.level[151], 4) == 16.9167


def test_consensus_error_zero_at_equilibrium():
    sc = _ring(x0=(3.0,) * 6)
    tr = run(sc)
    assert not tr.u_a.any()
    np.testing.assert_allclose(tr.consensus, 0, atol=1e-12)
    mx, ms = consensus_error(tr, equilibrium(sc.x0))
    np.testing.assert_allclose(mx, 0, atol=1e-12)
    np.testing.assert_allclose(ms, 0, atol=1e-24)
    tr.level = None
    with pytest.raises(ParameterError):
        consensus_error(tr)


def test_settling_time():
    err = np.array([5, 4, 3, 1, 2, 3, 1, 1, 1.0])
    assert settling_time(err, 2.5) == 6
    assert settling_time(err, 10) == 0
    assert settling_time(err, 2.5, 0, 5) is None
    assert settling_time(err, 3.5, 2, 5) == 2


def test_window_metrics():
    tr = run(_ring(x0=(3.0,) * 6, horizon=300))
    assert window_variance(tr) < 1e-24 and window_disagreement(tr) < 1e-24


def test_clamp():
    sc = _ring(x0=(0.0, 0.0, 5.0, 5.0, 5.0, 5.0), outflows=(Flow(1, "out", 1.0),), clamp=True)
    tr = run(sc)
    assert tr.x.min() >= 0


def test_non_finite_raises():
    sc = _ring(x0=(1e308,) * 6, inflows=(Flow(1, "in", 1e308),), controllers=(ControllerSpec(0.5, delta=1e6),) * 3)
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        run(sc)


def test_scenario_validation():
    with pytest.raises(ParameterError):
        _ring(h=(0.2, 0.2))
    with pytest.raises(ParameterError):
        _ring(controllers=(ControllerSpec(0.5),))
    with pytest.raises(ParameterError):
        _ring(disturbances=(Disturbance(99, 1, "in", 1.0),))
    with pytest.raises(ParameterError):
        _ring(nominal_delay=-2)
    with pytest.raises(ParameterError):
        Flow(1, "middle", 1.0)


def test_parallel_matches_serial():
    sc = replace(reference_test("1"), horizon=60, disturbances=())
    a = run_replicates(sc, 4)
    b = run_replicates(sc, 4, workers=2)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std, b.std)


def test_pinned_disturbed_trajectory():
    tr = run(reference_test("1"), 0)
    assert settling_time(tr.consensus, 2.5, 0, 149) == 48
    assert settling_time(tr.consensus, 2.5, 151, 300) == 168
    np.testing.assert_array_equal(tr.u_a.sum(axis=0), [-11, 19, 17, -5, -3, -33])
    np.testing.assert_allclose(tr.x[300, :4], [17.53167079430377, 17.468329205696744, 17.50000000039006,
                                               17.499999999610125], rtol=0, atol=1e-9)


def _mann_kendall_z(series):
    x = np.asarray(series)
    n = len(x)
    s = sum(np.sign(x[j] - x[i]) for i in range(n - 1) for j in range(i + 1, n))
    var = n * (n - 1) * (2 * n + 5) / 18
    return (s - np.sign(s)) / np.sqrt(var)


def test_mean_error_trends_down():
    summary = run_replicates(reference_test("1"), 50)
    z = _mann_kendall_z(summary.mean[:101])
    assert z < -1.645
