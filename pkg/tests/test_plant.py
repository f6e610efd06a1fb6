import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcmg.config import MicrogridSpec, load_spec
from dcmg.control import ControllerGains, closed_loop_coefficients
from dcmg.equilibrium import solve_equilibrium
from dcmg.errors import DimensionMismatch, MissingGains, NonPositiveVoltage
from dcmg.network import CommGraph, ElectricalGraph, build_incidence, comm_laplacian
from dcmg.plant import (
    DguParams,
    GlobalState,
    ZipLoad,
    assemble_system,
    blockwise_rhs,
    full_rhs,
    line_rhs,
    state_slices,
    zip_current,
)
from factory import random_spec


@pytest.fixture(scope="module")
def six():
    return load_spec("six_dgu.cfg")


def state_for(N, M, rng, v_scale=50.0):
    return GlobalState(
        v_scale + rng.uniform(-2, 2, N),
        rng.uniform(-5, 10, N),
        rng.uniform(-3, 3, N),
        rng.uniform(-4, 4, M),
        rng.uniform(-1, 1, N),
    )


def single_dgu_spec(gains=None, load=ZipLoad(), comm_weight=None):
    graph = ElectricalGraph(1, (), np.array([]), np.array([]))
    return MicrogridSpec(
        graph=graph,
        comm=CommGraph(np.zeros((1, 1))),
        dgus=(DguParams(0.2, 1.8e-3, 2.2e-3, 1.0),),
        gains=(gains or ControllerGains(-2.0, 0.0, 100.0, -2.0),),
        loads=(load,),
        v_ref=[48.0],
    )


# line_rhs

def test_line_rhs_zero_drive():
    g = ElectricalGraph(2, ((0, 1),), [1.0], [1.0])
    s = GlobalState([5.0, 5.0], [0, 0], [0, 0], [0.0], [0, 0])
    np.testing.assert_array_equal(line_rhs(s, g), [0.0])


def test_line_rhs_hand_kvl():
    g = ElectricalGraph(2, ((0, 1),), [1.0], [1.0])
    s = GlobalState([2.0, 1.0], [0, 0], [0, 0], [0.0], [0, 0])
    np.testing.assert_allclose(line_rhs(s, g), [-1.0])


def test_line_rhs_steady_line(six, rng):
    V = 50 + rng.uniform(-1, 1, six.N)
    I = build_incidence(six.graph).T @ V / six.graph.resistance
    s = GlobalState(V, np.zeros(6), np.zeros(6), I, np.zeros(6))
    np.testing.assert_allclose(line_rhs(s, six.graph), 0, atol=1e-9)


# zip_current

def test_zip_current_arithmetic():
    assert zip_current(ZipLoad(0.1, 2.0, 50.0), 50.0) == pytest.approx(8.0, abs=1e-12)


def test_zip_current_pure_conductance():
    np.testing.assert_allclose(zip_current(ZipLoad(0.25), np.array([4.0, 8.0])), [1.0, 2.0])


def test_zip_current_guard():
    load = ZipLoad(0.0, 0.0, 100.0)
    assert zip_current(load, 1e-3) == pytest.approx(1e5)
    with pytest.raises(NonPositiveVoltage):
        zip_current(load, 0.0)
    with pytest.raises(NonPositiveVoltage):
        zip_current(load, 0.5, v_min=1.0)


def test_zip_load_validation():
    with pytest.raises(ValueError):
        ZipLoad(-0.1)
    with pytest.raises(ValueError):
        ZipLoad(0.1, 0.0, -5.0)
    with pytest.raises(ValueError):
        DguParams(0.1, 0.0, 1e-3, 1.0)


# assemble_system

def test_single_dgu_reduces_to_primary_loop():
    spec = single_dgu_spec(load=ZipLoad(0.1, 1.0, 0.0))
    m = assemble_system(spec)
    assert m.A.shape == (4, 4)
    a, b, g, d = closed_loop_coefficients(spec.gains[0], spec.dgus[0])
    C = spec.dgus[0].Ct
    expected = np.array(
        [
            [-0.1 / C, 1 / C, 0, 0],
            [a, b, g, 0],
            [-1, 0, 0, 0],
            [0, 0, 0, 0],
        ]
    )
    np.testing.assert_allclose(m.A, expected)


def test_k4_zero_decouples_consensus(six):
    spec = six.replace(gains=tuple(ControllerGains(g.k1, g.k2, g.k3, 0.0) for g in six.gains))
    m = assemble_system(spec)
    s = state_slices(6, 7)
    assert np.all(m.A[s["It"], s["Omega"]] == 0)


def test_fig3_dimension(six):
    assert assemble_system(six).A.shape == (31, 31)


def test_exact_line_and_consensus_rows(six):
    m = assemble_system(six)
    s = state_slices(6, 7)
    B = build_incidence(six.graph)
    Lc = comm_laplacian(six.comm)
    R, L = six.graph.resistance, six.graph.inductance
    row_I = m.A[s["I"]]
    np.testing.assert_array_equal(row_I[:, s["V"]], B.T / L[:, None])
    np.testing.assert_array_equal(row_I[:, s["I"]], np.diag(-R / L))
    for blk in ("It", "v", "Omega"):
        assert np.all(row_I[:, s[blk]] == 0)
    row_O = m.A[s["Omega"]]
    np.testing.assert_array_equal(row_O[:, s["It"]], Lc / six.ratings[None, :])
    for blk in ("V", "v", "I", "Omega"):
        assert np.all(row_O[:, s[blk]] == 0)


def test_matrix_is_state_independent(six, rng):
    a = assemble_system(six).A
    full_rhs(assemble_system(six), state_for(6, 7, rng))
    np.testing.assert_array_equal(a, assemble_system(six).A)


def test_assemble_errors(six):
    with pytest.raises(MissingGains):
        assemble_system(six.replace(gains=None))
    with pytest.raises(DimensionMismatch):
        assemble_system(six, active_lines=np.ones(3, bool))


# full_rhs

def test_full_rhs_at_equilibrium(six):
    eq = solve_equilibrium(six)
    assert np.max(np.abs(full_rhs(assemble_system(six), eq.state))) <= 1e-8


def test_zero_gains_zero_loads_integrator_at_rest():
    spec = single_dgu_spec(gains=ControllerGains(0.0, 0.0, 0.0, 0.0))
    s = GlobalState([48.0], [0.0], [0.0], [], [0.0])
    d = GlobalState.from_vector(full_rhs(assemble_system(spec), s), 1, 0)
    assert d.v[0] == 0.0


def test_full_rhs_guard(six, rng):
    s = state_for(6, 7, rng)
    s.V[2] = 0.5
    with pytest.raises(NonPositiveVoltage) as info:
        full_rhs(assemble_system(six), s)
    assert list(info.value.buses) == [2]


def test_blockwise_matches_matrix_on_bundled(six, rng):
    m = assemble_system(six)
    for _ in range(100):
        s = state_for(6, 7, rng)
        a = full_rhs(m, s)
        b = blockwise_rhs(six, s).to_vector()
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@given(seed=st.integers(0, 2**32 - 1), comm_on=st.booleans())
def test_blockwise_matches_matrix_random(seed, comm_on):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    active = rng.random(spec.M) < 0.7
    m = assemble_system(spec, active, comm_on)
    s = state_for(spec.N, spec.M, rng)
    a = full_rhs(m, s)
    b = blockwise_rhs(spec, s, active, comm_on).to_vector()
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@given(seed=st.integers(0, 2**32 - 1))
def test_consensus_sum_has_zero_rate(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    s = state_for(spec.N, spec.M, rng)
    d = GlobalState.from_vector(full_rhs(assemble_system(spec), s), spec.N, spec.M)
    assert abs(d.Omega.sum()) <= 1e-12 * max(1.0, np.abs(d.Omega).max())


def test_no_power_load_is_affine(six, rng):
    spec = six.replace(loads=tuple(ZipLoad(l.Y, l.I, 0.0) for l in six.loads))
    m = assemble_system(spec)
    x, y = state_for(6, 7, rng).to_vector(), state_for(6, 7, rng).to_vector()
    lam = 0.3
    lhs = full_rhs(m, lam * x + (1 - lam) * y)
    rhs = lam * full_rhs(m, x) + (1 - lam) * full_rhs(m, y)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)
    np.testing.assert_array_equal(m.injection(x[:6]), m.injection(y[:6]))


def test_inactive_lines_hold_current(six, rng):
    active = np.zeros(7, bool)
    m = assemble_system(six, active, comm_active=False)
    s = state_for(6, 7, rng)
    d = GlobalState.from_vector(full_rhs(m, s), 6, 7)
    np.testing.assert_array_equal(d.I, np.zeros(7))
    np.testing.assert_array_equal(d.Omega, np.zeros(6))


def test_state_round_trip(rng):
    s = state_for(4, 5, rng)
    t = GlobalState.from_vector(s.to_vector(), 4, 5)
    np.testing.assert_array_equal(t.to_vector(), s.to_vector())
    with pytest.raises(DimensionMismatch):
        GlobalState.from_vector(np.zeros(20), 4, 5)
