import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holstein_rnn.dynamics import (
    LatticeState,
    PhysicsParams,
    build_hamiltonian,
    cdw_ground_state,
    check_invariants,
    eval_rhs,
    free_fermi_ground_state,
    hermiticity_error,
    rk4_step,
    simulate,
    total_energy,
)
from holstein_rnn.errors import ConvergenceError, IntegrityError, InvalidInputError


def test_params_defaults():
    p = PhysicsParams.from_dimensionless(L=16, g=0.8)
    assert p.spring_k == pytest.approx(p.mass * p.omega**2, rel=0, abs=1e-15)
    assert p.adiabatic_ratio == pytest.approx(0.4)
    assert p.n_electrons == 8
    assert p.with_coupling(1.0).coupling_ratio == pytest.approx(1.0)
    assert p.mass == pytest.approx(1.5625)
    assert p.q_star == pytest.approx(0.8 / 0.25)


@pytest.mark.parametrize("L", [2, 3, 15])
def test_params_reject_bad_L(L):
    with pytest.raises(InvalidInputError):
        PhysicsParams(L=L)


def test_params_reject_off_half_filling():
    with pytest.raises(InvalidInputError):
        PhysicsParams(L=8, n_electrons=3)


def test_hamiltonian_ring_spectrum():
    p = PhysicsParams(L=4, g=0.7)
    H = build_hamiltonian(np.zeros(4), p)
    # brute force: the 4-ring circulant with -1 on neighbours
    ref = np.zeros((4, 4))
    for i in range(4):
        ref[i, (i + 1) % 4] = ref[i, (i - 1) % 4] = -1.0
    assert np.allclose(H, ref)
    assert np.allclose(np.sort(np.linalg.eigvalsh(H)), [-2, 0, 0, 2])
    assert H[0, 3] == -1.0


def test_hamiltonian_coupling_off_ignores_q():
    p = PhysicsParams(L=6, g=0.0)
    Q = np.array([5, -3, 1, 0, 2, 7.0])
    assert np.array_equal(build_hamiltonian(Q, p), build_hamiltonian(np.zeros(6), p))


def test_hamiltonian_diagonal_and_validation():
    p = PhysicsParams(L=4, g=0.5)
    Q = np.array([1.0, 2.0, 3.0, 4.0])
    H = build_hamiltonian(Q, p)
    assert np.allclose(np.diag(H).real, -0.5 * Q)
    assert hermiticity_error(H) == 0
    with pytest.raises(InvalidInputError):
        build_hamiltonian(np.array([1.0, np.nan, 0, 0]), p)
    with pytest.raises(InvalidInputError):
        build_hamiltonian(np.zeros(5), p)


def test_free_fermi_state_l16():
    p = PhysicsParams(L=16, g=0.0)
    s = free_fermi_ground_state(p)
    assert np.all(s.Q == 0) and np.all(s.P == 0)
    assert np.trace(s.rho).real == pytest.approx(8, abs=1e-12)
    w, v = np.linalg.eigh(s.rho)
    halves = np.isclose(w, 0.5, atol=1e-10)
    assert halves.sum() == 2
    # the half-filled pair is the E=0 doublet at k = +-L/4
    H = build_hamiltonian(s.Q, p)
    for vec in v[:, halves].T:
        assert abs(np.vdot(vec, H @ vec)) < 1e-10


@pytest.mark.parametrize("L", [4, 6, 8, 10, 12])
def test_free_fermi_spectrum(L):
    s = free_fermi_ground_state(PhysicsParams(L=L, g=0.0))
    w = np.linalg.eigvalsh(s.rho)
    assert np.all(np.min(np.abs(w[:, None] - np.array([0, 0.5, 1])[None]), axis=1) < 1e-10)
    assert np.trace(s.rho).real == pytest.approx(L / 2, abs=1e-12)


def test_free_gas_stationary():
    p = PhysicsParams(L=16, g=0.0)
    s = free_fermi_ground_state(p)
    d = eval_rhs(s, p)
    assert np.max(np.abs(d.drho)) < 1e-12 and np.all(d.dQ == 0) and np.all(d.dP == 0)
    tr = simulate(s, p, 0.01, 1000, record_stride=10)
    assert np.max(np.abs(tr.rho - s.rho)) < 1e-10


def test_cdw_ground_state():
    p = PhysicsParams.from_dimensionless(L=16, g=0.5)
    s = cdw_ground_state(p)
    stag = (-1.0) ** np.arange(16)
    assert abs(np.mean(s.Q * stag)) > 0
    assert np.max(np.abs(s.rho @ s.rho - s.rho)) < 1e-8
    assert np.all(s.P == 0)
    # fixed point: Q = g n / K
    assert np.max(np.abs(s.Q - p.g * np.diag(s.rho).real / p.spring_k)) < 1e-9
    flipped = cdw_ground_state(p, seed_sign=-1.0)
    assert np.allclose(s.Q - s.Q.mean(), -(flipped.Q - flipped.Q.mean()), atol=1e-8)
    assert np.allclose(s.Q, np.roll(flipped.Q, 1), atol=1e-8)


def test_cdw_weak_coupling_limit():
    norms = [np.linalg.norm(cdw_ground_state(PhysicsParams.from_dimensionless(L=8, g=g)).Q) for g in (0.2, 0.05, 0.01)]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] < 0.1


def test_cdw_nonconvergence():
    p = PhysicsParams.from_dimensionless(L=16, g=0.5)
    with pytest.raises(ConvergenceError) as exc:
        cdw_ground_state(p, max_iter=2)
    assert exc.value.residual > 0


def test_rhs_examples():
    p = PhysicsParams(L=8, g=0.0)
    Q = np.zeros(8)
    Q[0] = 1.0
    s = LatticeState(Q, np.zeros(8), free_fermi_ground_state(p).rho)
    d = eval_rhs(s, p)
    assert np.allclose(d.dP, -p.spring_k * Q)
    assert np.allclose(d.dQ, 0)
    p = PhysicsParams(L=8, g=0.9)
    rng = np.random.default_rng(3)
    Q = rng.normal(size=8)
    P = rng.normal(size=8)
    d = eval_rhs(LatticeState(Q, P, 0.5 * np.eye(8)), p)
    assert np.max(np.abs(d.drho)) < 1e-15
    assert np.allclose(d.dP, p.g / 2 - p.spring_k * Q, atol=1e-14)
    assert np.allclose(d.dQ, P / p.mass)


def _random_state(rng, p):
    gs = cdw_ground_state(p) if p.g > 0 else free_fermi_ground_state(p)
    Q = gs.Q + 0.1 * rng.normal(size=p.L)
    P = 0.1 * rng.normal(size=p.L)
    # evolve a little so rho carries coherences
    s = LatticeState(Q, P, gs.rho)
    for _ in range(20):
        s = rk4_step(s, p, 0.05)
    return s


def test_rhs_trace_and_hermitian_structure():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    s = _random_state(np.random.default_rng(0), p)
    d = eval_rhs(s, p)
    assert abs(np.trace(d.drho)) < 1e-10
    # -(i)[H, rho] is Hermitian for Hermitian H, rho
    assert hermiticity_error(d.drho) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 15), st.integers(0, 2**31 - 1))
def test_rhs_translation_covariance(shift, seed):
    p = PhysicsParams.from_dimensionless(L=16, g=0.8)
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    rho = (A + A.conj().T) / 8
    s = LatticeState(rng.normal(size=16), rng.normal(size=16), rho)
    d = eval_rhs(s, p)
    shifted = LatticeState(np.roll(s.Q, shift), np.roll(s.P, shift), np.roll(s.rho, (shift, shift), axis=(0, 1)))
    ds = eval_rhs(shifted, p)
    assert np.max(np.abs(ds.dQ - np.roll(d.dQ, shift))) < 1e-12
    assert np.max(np.abs(ds.dP - np.roll(d.dP, shift))) < 1e-12
    assert np.max(np.abs(ds.drho - np.roll(d.drho, (shift, shift), axis=(0, 1)))) < 1e-12


def test_rk4_harmonic_oscillator():
    p = PhysicsParams(L=4, g=0.0)
    rho = free_fermi_ground_state(p).rho
    q0 = 0.3
    errs = []
    for dt in (0.2, 0.1):
        s = LatticeState(np.array([q0, 0, 0, 0]), np.zeros(4), rho)
        n = int(round(10 / dt))
        for _ in range(n):
            s = rk4_step(s, p, dt)
        errs.append(abs(s.Q[0] - q0 * np.cos(p.omega * 10)))
        assert s.time == pytest.approx(10)
    assert errs[1] < 1e-6
    assert 3.5 < np.log2(errs[0] / errs[1]) < 4.5


def test_rk4_tiny_dt_and_validation():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    s = _random_state(np.random.default_rng(1), p)
    s2 = rk4_step(s, p, 1e-12)
    assert np.max(np.abs(s2.rho - s.rho)) < 1e-10
    with pytest.raises(InvalidInputError):
        rk4_step(s, p, 0.0)


def test_rk4_symmetrized_output_hermitian():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    s = _random_state(np.random.default_rng(2), p)
    for _ in range(100):
        raw = rk4_step(s, p, 0.01, symmetrize=False)
        assert hermiticity_error(raw.rho) < 1e-9
        s = rk4_step(s, p, 0.01)
        assert hermiticity_error(s.rho) < 1e-12


def test_energy_examples():
    p = PhysicsParams(L=4, g=0.0)
    e = total_energy(free_fermi_ground_state(p), p)
    assert e.electronic == pytest.approx(-2.0, abs=1e-12)
    assert e.kinetic == 0 and e.elastic == 0
    z = LatticeState(np.zeros(4), np.zeros(4), np.zeros((4, 4)))
    assert total_energy(z, p).electronic == 0
    assert e.total == e.electronic + e.kinetic + e.elastic


def test_energy_conserved_short():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    s = _random_state(np.random.default_rng(4), p)
    e0 = total_energy(s, p).total
    tr = simulate(s, p, 0.01, 2000, record_stride=200)
    e = [total_energy(tr.snapshot(i), p).total for i in range(len(tr))]
    assert np.max(np.abs(np.array(e) - e0)) / abs(e0) < 1e-6


def test_spectrum_and_projector_conservation():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    gs = cdw_ground_state(p.with_coupling(0.5))
    tr = simulate(gs, p, 0.01, 1000, record_stride=100)
    w0 = np.sort(np.linalg.eigvalsh(gs.rho))[::-1]
    for rho in tr.rho:
        assert np.max(np.abs(np.sort(np.linalg.eigvalsh(rho))[::-1] - w0)) < 1e-6
        assert np.max(np.abs(rho @ rho - rho)) < 1e-6
        assert abs(np.trace(rho).real - 4) < 1e-8


def test_simulate_counts_and_zero_steps():
    p = PhysicsParams.from_dimensionless(L=8, g=0.8)
    s = cdw_ground_state(p.with_coupling(0.5))
    tr = simulate(s, p, 0.01, 0)
    assert len(tr) == 1
    assert np.array_equal(tr.rho[0], s.rho) and np.array_equal(tr.Q[0], s.Q)
    tr = simulate(s, p, 0.01, 64, record_stride=16, record_midpoints=True)
    assert len(tr) == 5 and tr.n_midpoints == 4
    assert np.allclose(np.diff(tr.times), 0.16)
    with pytest.raises(InvalidInputError):
        simulate(s, p, 0.01, 10, record_stride=3)


def test_simulate_integrity_error_names_step():
    p = PhysicsParams.from_dimensionless(L=4, g=0.8)
    bad = LatticeState.__new__(LatticeState)
    bad.Q, bad.P, bad.time = np.zeros(4), np.zeros(4), 0.0
    bad.rho = np.eye(4, dtype=complex)  # trace 4, not 2
    with pytest.raises(IntegrityError) as exc:
        simulate(bad, p, 0.01, 10)
    assert exc.value.step == 0


def test_check_invariants():
    p = PhysicsParams(L=4, g=0.0)
    s = free_fermi_ground_state(p)
    check_invariants(s, 2)
    s2 = LatticeState(s.Q, s.P, s.rho * 1.1)
    with pytest.raises(IntegrityError):
        check_invariants(s2, 2)
    with pytest.raises(IntegrityError):
        LatticeState(s.Q, s.P, s.rho + 1e-6j * np.triu(np.ones((4, 4)), 1))


def test_shallow_quench_oscillates():
    # coherent oscillations of the CDW order after a small quench
    p = PhysicsParams.from_dimensionless(L=16, g=0.8)
    s = cdw_ground_state(p.with_coupling(0.5))
    tr = simulate(s, p, 0.01, 64 * 200, record_stride=64)
    d = (np.real(np.diagonal(tr.rho, axis1=1, axis2=2)) * (-1.0) ** np.arange(16)).mean(axis=1)
    slope = np.sign(np.diff(d))
    assert np.sum(slope[1:] != slope[:-1]) >= 10
