import numpy as np
import pytest
from scipy.linalg import expm

from dcmg.config import load_spec
from dcmg.equilibrium import certificate, build_flow_system, solve_equilibrium
from dcmg.errors import NotSettled
from dcmg.events import Scenario, ScenarioEvent
from dcmg.plant import GlobalState, ZipLoad, assemble_system
from dcmg.simulate import (
    CONVERGED,
    NUMERICAL_FAILURE,
    VOLTAGE_COLLAPSE,
    balancing_error,
    band_distance,
    compute_metrics,
    integrate,
    phase_certificates,
    primary_steady_state,
    sharing_error,
    steady_state_of,
)


@pytest.fixture(scope="module")
def six():
    return load_spec("six_dgu.cfg")


def scenario(initial="equilibrium", t_end=0.1, events=(), lines=True, comm=True):
    return Scenario(initial, lines, comm, 0.0, t_end, tuple(events))


def test_equilibrium_start_stays_put(six):
    spec = six.replace(scenario=scenario(t_end=1.0))
    eq = solve_equilibrium(spec)
    traj = integrate(spec)
    assert traj.verdict == CONVERGED
    X = eq.state.to_vector()
    dev = np.max(np.abs(traj.states - X[None, :]), axis=0)
    assert np.all(dev <= 1e-6 * np.maximum(np.abs(X), 1.0))


def test_affine_case_matches_matrix_exponential(six):
    spec = six.replace(loads=tuple(ZipLoad(l.Y, l.I, 0.0) for l in six.loads), scenario=scenario(t_end=0.02))
    eq = solve_equilibrium(spec)
    x0 = eq.state.to_vector().copy()
    x0[:6] += np.linspace(-1, 1, 6)
    x0[6:12] += 0.5
    traj = integrate(spec, initial=x0, dt=1e-5, decimation=500)
    A = assemble_system(spec).A
    xbar = eq.state.to_vector()
    for t, x in zip(traj.times, traj.states):
        exact = xbar + expm(A * t) @ (x0 - xbar)
        assert np.max(np.abs(x - exact)) <= 1e-7 * np.max(np.abs(exact))


def test_sample_times_and_decimation(six):
    spec = six.replace(scenario=scenario(t_end=0.01))
    traj = integrate(spec, decimation=100)
    assert len(traj) == 11
    assert np.all(np.diff(traj.times) > 0)
    assert traj.times[-1] == pytest.approx(0.01)
    assert traj.states.shape == (11, 31)


def test_event_lands_exactly(six):
    t_ev = 0.0123457
    ev = ScenarioEvent(t_ev, "load_step", bus=2, load=ZipLoad(0.12, 2.0, 200.0))
    spec = six.replace(scenario=scenario(t_end=0.03, events=[ev]))
    traj = integrate(spec)
    assert t_ev in traj.times
    assert [p.time for p in traj.phases] == [0.0, t_ev]
    k = int(np.flatnonzero(traj.times == t_ev)[0])
    assert traj.phase_index[k] == 1 and traj.phase_index[k - 1] == 0
    assert traj.phases[1].spec.loads[2].P == 200.0
    # the step split at the event still lands the following steps on the grid
    assert np.any(np.isclose(traj.times, 0.013, rtol=0, atol=1e-15))


def test_isolated_units_and_partial_plug_in(six):
    ev = ScenarioEvent(0.005, "plug_in", lines=(0, 1))
    spec = six.replace(scenario=scenario("isolated_primary", 0.02, [ev], lines=False, comm=False))
    x0 = primary_steady_state(spec)
    np.testing.assert_array_equal(x0.V, spec.v_ref)
    traj = integrate(spec)
    I = traj.block("I")
    before = traj.times <= 0.005
    # isolated units sit at their primary equilibrium, no line current
    assert np.max(np.abs(traj.block("V")[before] - spec.v_ref)) <= 1e-9
    assert np.all(I[before] == 0)
    assert np.all(I[:, 2:] == 0)
    assert np.any(I[~before, :2] != 0)


def test_comm_collapse_freezes_and_restore_resumes(six):
    evs = [ScenarioEvent(0.01, "comm_collapse"), ScenarioEvent(0.05, "comm_restore")]
    spec = six.replace(
        loads=tuple(ZipLoad(l.Y, l.I, l.P * 1.3) for l in six.loads),
        scenario=scenario(t_end=0.08, events=evs),
    )
    traj = integrate(spec)
    O = traj.block("Omega")
    frozen = (traj.times >= 0.01) & (traj.times <= 0.05)
    assert np.all(O[frozen] == O[frozen][0])
    after = traj.times > 0.05
    assert np.max(np.abs(O[after] - O[frozen][0])) > 0
    assert [p.comm_active for p in traj.phases] == [True, False, True]


def test_set_reference_moves_weighted_sum(six):
    ev = ScenarioEvent(0.01, "set_reference", bus=0, value=51.0)
    spec = six.replace(scenario=scenario(t_end=1.0, events=[ev]))
    traj = integrate(spec, decimation=1000)
    ref = traj.v_ref_samples()
    assert ref[0, 0] == six.v_ref[0] and ref[-1, 0] == 51.0
    err = balancing_error(traj.block("V")[-1], ref[-1], six.ratings)
    assert err[0] <= 1e-6 * abs(six.ratings @ ref[-1])


def test_collapse_config():
    spec = load_spec("collapse.cfg")
    traj = integrate(spec)
    assert traj.verdict == VOLTAGE_COLLAPSE
    assert traj.collapse_bus == 5
    assert traj.times[-1] < spec.scenario.t_end
    assert traj.collapse_time == pytest.approx(traj.times[-1])
    assert traj.block("V")[-1, 5] <= spec.solver.v_min


def test_divergence_is_numerical_failure(six):
    spec = six.replace(scenario=scenario(t_end=0.01))
    eq = solve_equilibrium(spec)
    x0 = eq.state.to_vector().copy()
    x0[0] += 1.0
    traj = integrate(spec, initial=x0, dt=2e-4)
    assert traj.verdict == NUMERICAL_FAILURE
    assert "diverged" in traj.message


def test_bad_arguments(six):
    with pytest.raises(ValueError):
        integrate(six, dt=-1.0)
    with pytest.raises(ValueError):
        integrate(six, initial=np.zeros(5))


def test_metric_definitions():
    It = np.array([[2.0, 4.0, 3.0], [1.0, 2.0, 1.5]])
    ratings = np.array([1.0, 2.0, 1.5])
    np.testing.assert_allclose(sharing_error(It, ratings), [0.0, 0.0])
    np.testing.assert_allclose(sharing_error([3.0, 4.0, 3.0], ratings), [1.0])
    V = np.array([[50.0, 51.0, 49.0]])
    np.testing.assert_allclose(balancing_error(V, [50.0, 50.0, 50.0], ratings), [abs(2.0 - 1.5)])


def test_band_distance(six):
    cert = certificate(build_flow_system(six), six.load_arrays()[2])
    inside = cert.V_star
    outside = cert.upper + np.array([0.3, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(band_distance(np.vstack([inside, outside]), cert), [0.0, 0.3])


def test_metrics_and_steady_state_on_run(six):
    spec = six.replace(scenario=scenario(t_end=0.6))
    traj = integrate(spec)
    m = compute_metrics(traj, spec, phase_certificates(traj))
    assert m.terminal()["sharing_error"] <= 1e-9
    assert np.all(m.band_violation == 0)
    ss = steady_state_of(traj, 0.1)
    assert ss.settled
    np.testing.assert_allclose(ss.state.V, traj.final.V, atol=1e-9)


def test_not_settled_detected(six):
    spec = six.replace(scenario=scenario("isolated_primary", 0.05, [ScenarioEvent(0.0, "plug_in")], False, True))
    traj = integrate(spec)
    ss = steady_state_of(traj, 0.01)
    assert not ss.settled
    with pytest.raises(NotSettled):
        steady_state_of(traj, 0.01, strict=True)
    with pytest.raises(ValueError):
        steady_state_of(traj, 1.0)


def test_uncertified_phases_get_nan(six):
    ev = ScenarioEvent(0.01, "comm_collapse")
    spec = six.replace(scenario=scenario(t_end=0.02, events=[ev]))
    traj = integrate(spec)
    m = compute_metrics(traj, spec, phase_certificates(traj))
    assert np.all(np.isnan(m.band_violation[traj.times >= 0.01]))
    assert np.all(np.isfinite(m.band_violation[traj.times < 0.01]))


def test_final_state_accessor(six):
    spec = six.replace(scenario=scenario(t_end=0.002))
    traj = integrate(spec)
    assert isinstance(traj.final, GlobalState)
    np.testing.assert_array_equal(traj.final.to_vector(), traj.states[-1])
