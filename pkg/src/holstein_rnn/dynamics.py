"""Ehrenfest dynamics of the 1D semiclassical Holstein chain.

Classical oscillators (Q, P) evolve under Newton's equations with the on-site
electron density as driving force; the single-particle density matrix evolves
under the von Neumann equation of the Q-dependent tight-binding Hamiltonian.
Everything runs on stacked arrays so a batch of trajectories shares one loop;
a single trajectory is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError, IntegrityError, InvalidInputError


@dataclass(frozen=True)
class PhysicsParams:
    """Model constants in units t_nn = hbar = 1.

    The defaults give r = hbar*omega/t_nn = 0.4 and lambda = g^2/(W K) = 1 at
    g = 1 (W = 4 t_nn), i.e. K = 0.25 and m = K / omega^2 = 1.5625.
    """

    L: int = 16
    g: float = 1.0
    t_nn: float = 1.0
    hbar: float = 1.0
    omega: float = 0.4
    spring_k: float = 0.25
    n_electrons: int | None = None

    def __post_init__(self):
        if self.L < 4 or self.L % 2:
            raise InvalidInputError(f"L must be even and >= 4, got {self.L}")
        if self.n_electrons is None:
            object.__setattr__(self, "n_electrons", self.L // 2)
        if self.n_electrons != self.L // 2:
            raise InvalidInputError("only half filling (n_electrons = L/2) is supported")
        if self.omega <= 0 or self.spring_k <= 0:
            raise InvalidInputError("omega and spring_k must be positive")

    @classmethod
    def from_dimensionless(cls, L=16, g=1.0, r=0.4, lam=1.0, g_ref=1.0, t_nn=1.0, hbar=1.0):
        """Fix omega from r and K from lambda at the reference coupling g_ref."""
        omega = r * t_nn / hbar
        bandwidth = 4.0 * t_nn
        spring_k = g_ref**2 / (bandwidth * lam)
        return cls(L=L, g=g, t_nn=t_nn, hbar=hbar, omega=omega, spring_k=spring_k)

    @property
    def mass(self) -> float:
        return self.spring_k / self.omega**2

    @property
    def bandwidth(self) -> float:
        return 4.0 * self.t_nn

    @property
    def adiabatic_ratio(self) -> float:
        return self.hbar * self.omega / self.t_nn

    @property
    def coupling_ratio(self) -> float:
        return self.g**2 / (self.bandwidth * self.spring_k)

    @property
    def q_star(self) -> float:
        return self.g / self.spring_k

    def with_coupling(self, g: float) -> PhysicsParams:
        return replace(self, g=float(g))


@dataclass
class LatticeState:
    """Full dynamical state: oscillator coordinates, momenta and density matrix."""

    Q: np.ndarray
    P: np.ndarray
    rho: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.complex128)
        L = self.Q.shape[0]
        if self.Q.shape != (L,) or self.P.shape != (L,) or self.rho.shape != (L, L):
            raise InvalidInputError(
                f"inconsistent shapes Q{self.Q.shape} P{self.P.shape} rho{self.rho.shape}"
            )
        if hermiticity_error(self.rho) >= 1e-12:
            raise IntegrityError("density matrix is not Hermitian")

    @property
    def L(self) -> int:
        return self.Q.shape[0]

    def copy(self) -> LatticeState:
        return LatticeState(self.Q.copy(), self.P.copy(), self.rho.copy(), self.time)


@dataclass
class StateDerivative:
    dQ: np.ndarray
    dP: np.ndarray
    drho: np.ndarray


@dataclass
class EnergyBreakdown:
    electronic: float
    kinetic: float
    elastic: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.electronic + self.kinetic + self.elastic


@dataclass
class Trajectory:
    """Snapshots of one run stored as stacked arrays.

    ``midpoint_*`` hold states half a record interval after each snapshot
    except the last, when recorded.
    """

    Q: np.ndarray  # (T, L)
    P: np.ndarray  # (T, L)
    rho: np.ndarray  # (T, L, L)
    times: np.ndarray  # (T,)
    mid_Q: np.ndarray | None = None
    mid_P: np.ndarray | None = None
    mid_rho: np.ndarray | None = None
    offset: int = 0
    seed: int | None = None

    def __len__(self):
        return self.Q.shape[0]

    @property
    def L(self) -> int:
        return self.Q.shape[1]

    @property
    def has_midpoints(self) -> bool:
        return self.mid_Q is not None

    @property
    def n_midpoints(self) -> int:
        return 0 if self.mid_Q is None else self.mid_Q.shape[0]

    def snapshot(self, i: int) -> LatticeState:
        return LatticeState(self.Q[i].copy(), self.P[i].copy(), self.rho[i].copy(), float(self.times[i]))

    def midpoint(self, i: int) -> LatticeState:
        if self.mid_Q is None:
            raise IndexError("trajectory has no midpoints")
        dt = self.times[1] - self.times[0]
        return LatticeState(
            self.mid_Q[i].copy(), self.mid_P[i].copy(), self.mid_rho[i].copy(), float(self.times[i] + dt / 2)
        )

    @property
    def snapshots(self) -> list[LatticeState]:
        return [self.snapshot(i) for i in range(len(self))]


def hermiticity_error(rho: np.ndarray) -> float:
    return float(np.max(np.abs(rho - np.conj(np.swapaxes(rho, -1, -2))), initial=0.0))


def check_invariants(state: LatticeState, n_electrons: int, trace_tol=1e-10, spec_tol=1e-10):
    """Raise IntegrityError if the trace or spectrum of rho is unphysical."""
    tr = np.trace(state.rho)
    if abs(tr.real - n_electrons) > trace_tol or abs(tr.imag) > trace_tol:
        raise IntegrityError(f"trace(rho) = {tr} differs from {n_electrons}")
    w = np.linalg.eigvalsh(state.rho)
    if w[0] < -spec_tol or w[-1] > 1 + spec_tol:
        raise IntegrityError(f"rho eigenvalues outside [0, 1]: [{w[0]}, {w[-1]}]")


def check_stack_invariants(rho, n_electrons, herm_tol=1e-12, trace_tol=1e-8, spec_tol=1e-6, name="states"):
    """Vectorised invariant check over a (T, L, L) stack of density matrices.

    The spectral tolerance matches the drift RK4 accumulates over long
    (1e5+ step) trajectories; fresh states are held to ``check_invariants``.
    """
    if rho.shape[0] == 0:
        return
    if hermiticity_error(rho) >= herm_tol:
        raise IntegrityError(f"{name}: non-Hermitian density matrix")
    tr = np.trace(rho, axis1=-2, axis2=-1)
    if np.max(np.abs(tr - n_electrons)) > trace_tol:
        raise IntegrityError(f"{name}: trace deviates from {n_electrons}")
    w = np.linalg.eigvalsh(rho)
    if w.min() < -spec_tol or w.max() > 1 + spec_tol:
        raise IntegrityError(f"{name}: density-matrix eigenvalues outside [0, 1]")


def hopping_matrix(L: int, t_nn: float = 1.0) -> np.ndarray:
    T = np.zeros((L, L))
    idx = np.arange(L)
    T[idx, (idx + 1) % L] = -t_nn
    T[idx, (idx - 1) % L] = -t_nn
    return T


def build_hamiltonian(Q, params: PhysicsParams) -> np.ndarray:
    """Single-particle Hamiltonian H_ij = -t_nn (d_{j,i+1} + d_{j,i-1}) - g d_ij Q_i on a ring."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (params.L,):
        raise InvalidInputError(f"Q must have shape ({params.L},), got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InvalidInputError("Q contains non-finite values")
    H = hopping_matrix(params.L, params.t_nn) - params.g * np.diag(Q)
    return H.astype(np.complex128)


def _occupations(energies: np.ndarray, n_electrons: int, degeneracy_tol=1e-9) -> np.ndarray:
    # a degenerate shell straddling the Fermi level is filled with equal fractional weight
    order = np.argsort(energies, kind="stable")
    e = energies[order]
    e_f = e[n_electrons - 1]
    below = np.sum(e < e_f - degeneracy_tol)
    shell = np.abs(e - e_f) <= degeneracy_tol
    occ_sorted = np.zeros_like(e)
    occ_sorted[: below] = 1.0
    occ_sorted[shell] = (n_electrons - below) / np.sum(shell)
    occ = np.empty_like(occ_sorted)
    occ[order] = occ_sorted
    return occ


def _density_from_eigs(vecs: np.ndarray, occ: np.ndarray) -> np.ndarray:
    # rho_ij = <c_j^dag c_i> = sum_n f_n psi_n(i) psi_n(j)^*
    rho = (vecs * occ) @ vecs.conj().T
    return 0.5 * (rho + rho.conj().T)


def free_fermi_ground_state(params: PhysicsParams) -> LatticeState:
    """Half-filled free Fermi sea built from plane waves, oscillators at rest."""
    L = params.L
    k = 2 * np.pi * np.arange(L) / L
    energies = -2.0 * params.t_nn * np.cos(k)
    vecs = np.exp(1j * np.outer(np.arange(L), k)) / np.sqrt(L)
    occ = _occupations(energies, params.n_electrons)
    rho = _density_from_eigs(vecs, occ)
    return LatticeState(np.zeros(L), np.zeros(L), rho, 0.0)


def zero_temperature_density(Q, params: PhysicsParams) -> np.ndarray:
    H = build_hamiltonian(Q, params)
    energies, vecs = np.linalg.eigh(H)
    return _density_from_eigs(vecs, _occupations(energies, params.n_electrons))


def cdw_ground_state(
    params: PhysicsParams, tol=1e-10, max_iter=10_000, mixing=0.5, seed_sign=1.0
) -> LatticeState:
    """Self-consistent CDW ground state: Q_i = g rho_ii / K with rho the Fermi sea of H(Q).

    Iterates with linear mixing from a small staggered seed. ``seed_sign``
    selects which sublattice the seed favours.
    """
    if params.g <= 0:
        raise InvalidInputError("CDW ground state needs g > 0")
    L = params.L
    stagger = (-1.0) ** np.arange(L)
    Q = seed_sign * 0.1 * stagger * params.q_star
    residual = np.inf
    for _ in range(max_iter):
        rho = zero_temperature_density(Q, params)
        Q_target = params.g * np.real(np.diag(rho)) / params.spring_k
        residual = float(np.max(np.abs(Q_target - Q)))
        if residual < tol:
            Q = Q_target
            rho = zero_temperature_density(Q, params)
            return LatticeState(Q, np.zeros(L), rho, 0.0)
        Q = (1 - mixing) * Q + mixing * Q_target
    raise ConvergenceError(f"CDW self-consistency did not converge in {max_iter} iterations", residual)


# -- equations of motion on stacked arrays: Q, P (..., L), rho (..., L, L) ----


def _rhs_arrays(Q, P, rho, g, t_nn, hbar, K, m):
    n = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
    dQ = P / m
    dP = g * n - K * Q
    # X = H rho with nearest-neighbour ring hopping and on-site -g Q_i
    X = -t_nn * (np.roll(rho, 1, axis=-2) + np.roll(rho, -1, axis=-2)) - g * Q[..., :, None] * rho
    comm = X - np.conj(np.swapaxes(X, -1, -2))  # [H, rho] since H is real symmetric
    drho = (-1j / hbar) * comm
    return dQ, dP, drho


def _rk4_arrays(Q, P, rho, coeffs, dt, symmetrize=True):
    k1 = _rhs_arrays(Q, P, rho, *coeffs)
    h = 0.5 * dt
    k2 = _rhs_arrays(Q + h * k1[0], P + h * k1[1], rho + h * k1[2], *coeffs)
    k3 = _rhs_arrays(Q + h * k2[0], P + h * k2[1], rho + h * k2[2], *coeffs)
    k4 = _rhs_arrays(Q + dt * k3[0], P + dt * k3[1], rho + dt * k3[2], *coeffs)
    s = dt / 6.0
    Q = Q + s * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    P = P + s * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    rho = rho + s * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    if symmetrize:
        rho = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    return Q, P, rho


def _coeffs(params: PhysicsParams):
    return (params.g, params.t_nn, params.hbar, params.spring_k, params.mass)


def eval_rhs(state: LatticeState, params: PhysicsParams) -> StateDerivative:
    dQ, dP, drho = _rhs_arrays(state.Q, state.P, state.rho, *_coeffs(params))
    return StateDerivative(dQ, dP, drho)


def rk4_step(state: LatticeState, params: PhysicsParams, dt: float, symmetrize=True) -> LatticeState:
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    Q, P, rho = _rk4_arrays(state.Q, state.P, state.rho, _coeffs(params), dt, symmetrize)
    if not symmetrize:
        # skip the Hermiticity check in LatticeState for raw diagnostics
        out = LatticeState.__new__(LatticeState)
        out.Q, out.P, out.rho, out.time = Q, P, rho, state.time + dt
        return out
    return LatticeState(Q, P, rho, state.time + dt)


def total_energy(state: LatticeState, params: PhysicsParams) -> EnergyBreakdown:
    """Energy consistent with the equations of motion (coupling -g n_i Q_i)."""
    H = build_hamiltonian(state.Q, params)
    electronic = float(np.real(np.sum(H * state.rho.T)))
    kinetic = float(np.sum(state.P**2) / (2 * params.mass))
    elastic = float(np.sum(params.spring_k * state.Q**2) / 2)
    return EnergyBreakdown(electronic, kinetic, elastic)


def propagate_batch(
    Q, P, rho, params: PhysicsParams, dt, n_steps, record_stride, record_midpoints=False, trace_tol=1e-6
):
    """Integrate a stack of states and record every ``record_stride`` steps.

    Returns ``(Qs, Ps, rhos, mids)`` with shapes (B, T, ...) where
    T = n_steps // record_stride + 1; ``mids`` is None or a triple of
    (B, T-1, ...) arrays taken half-way between records.
    """
    if record_stride < 1 or n_steps % record_stride:
        raise InvalidInputError("record_stride must divide n_steps")
    if record_midpoints and record_stride % 2:
        raise InvalidInputError("midpoints need an even record_stride")
    Q = np.array(Q, dtype=np.float64)
    P = np.array(P, dtype=np.float64)
    rho = np.array(rho, dtype=np.complex128)
    B, L = Q.shape
    n_rec = n_steps // record_stride + 1
    Qs = np.empty((B, n_rec, L))
    Ps = np.empty((B, n_rec, L))
    rhos = np.empty((B, n_rec, L, L), dtype=np.complex128)
    mids = None
    if record_midpoints:
        mids = (
            np.empty((B, n_rec - 1, L)),
            np.empty((B, n_rec - 1, L)),
            np.empty((B, n_rec - 1, L, L), dtype=np.complex128),
        )
    coeffs = _coeffs(params)
    n_el = params.n_electrons
    half = record_stride // 2

    def store(target, idx, step):
        drift = np.max(np.abs(np.real(np.trace(rho, axis1=-2, axis2=-1)) - n_el))
        if not np.isfinite(drift) or drift > trace_tol:
            raise IntegrityError(f"trace drift {drift:.3e} at integration step {step}", step=step)
        target[0][:, idx] = Q
        target[1][:, idx] = P
        target[2][:, idx] = rho

    store((Qs, Ps, rhos), 0, 0)
    for step in range(1, n_steps + 1):
        Q, P, rho = _rk4_arrays(Q, P, rho, coeffs, dt)
        if step % record_stride == 0:
            store((Qs, Ps, rhos), step // record_stride, step)
        elif mids is not None and step % record_stride == half:
            store(mids, step // record_stride, step)
    return Qs, Ps, rhos, mids


def advance_batch(Q, P, rho, params: PhysicsParams, dt, n_steps):
    """Integrate a stack of states for ``n_steps`` without recording."""
    coeffs = _coeffs(params)
    Q = np.array(Q, dtype=np.float64)
    P = np.array(P, dtype=np.float64)
    rho = np.array(rho, dtype=np.complex128)
    for _ in range(n_steps):
        Q, P, rho = _rk4_arrays(Q, P, rho, coeffs, dt)
    return Q, P, rho


def simulate(
    state0: LatticeState, params: PhysicsParams, dt: float, n_steps: int, record_stride: int = 1,
    record_midpoints=False,
) -> Trajectory:
    Qs, Ps, rhos, mids = propagate_batch(
        state0.Q[None], state0.P[None], state0.rho[None], params, dt, n_steps, record_stride, record_midpoints
    )
    times = state0.time + dt * record_stride * np.arange(Qs.shape[1])
    traj = Trajectory(Qs[0], Ps[0], rhos[0], times)
    if mids is not None:
        traj.mid_Q, traj.mid_P, traj.mid_rho = mids[0][0], mids[1][0], mids[2][0]
    return traj
