"""Interaction-quench datasets: generation, scaling statistics and on-disk layout."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import storage
from .dynamics import (
    LatticeState,
    PhysicsParams,
    StateDerivative,
    Trajectory,
    _coeffs,
    _rhs_arrays,
    advance_batch,
    cdw_ground_state,
    check_stack_invariants,
    eval_rhs,
    free_fermi_ground_state,
    propagate_batch,
)
from .errors import DegenerateDataError, FormatError, IntegrityError, InvalidInputError, VersionMismatchError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAPER_SCALE_DEEP_TRAJECTORIES = 1228


@dataclass(frozen=True)
class QuenchProtocol:
    kind: str = "shallow"
    g_initial: float = 0.5
    g_final: float = 0.8
    L: int = 16
    dt_integration: float = 0.01
    prediction_stride: int = 64
    n_prediction_steps: int = 1200
    n_trajectories: int = 64
    transient_skip: float = 0.0
    q_noise_sigma: float = 0.0
    record_midpoints: bool = False
    seed: int = 0
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("shallow", "deep"):
            raise InvalidInputError(f"unknown quench kind {self.kind!r}")
        if self.prediction_stride < 1:
            raise InvalidInputError("prediction_stride must be >= 1")
        if self.q_noise_sigma < 0:
            raise InvalidInputError("q_noise_sigma must be >= 0")
        if self.n_trajectories < 1 or self.n_prediction_steps < 0:
            raise InvalidInputError("need at least one trajectory and a non-negative step count")
        if self.dt_integration <= 0 or self.transient_skip < 0:
            raise InvalidInputError("dt_integration must be positive and transient_skip non-negative")
        if self.record_midpoints and self.prediction_stride % 2:
            raise InvalidInputError("midpoints need an even prediction_stride")
        if not 0 <= self.test_fraction <= 1:
            raise InvalidInputError("test_fraction must lie in [0, 1]")
        PhysicsParams(L=self.L)  # validates L

    @classmethod
    def shallow(cls, **overrides) -> QuenchProtocol:
        return cls(**overrides)

    @classmethod
    def deep(cls, paper_scale=False, **overrides) -> QuenchProtocol:
        base = dict(
            kind="deep", g_initial=0.0, g_final=1.0, prediction_stride=256, n_prediction_steps=1000,
            n_trajectories=PAPER_SCALE_DEEP_TRAJECTORIES if paper_scale else 8,
            transient_skip=64.0, q_noise_sigma=1e-4, record_midpoints=True,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def delta_t(self) -> float:
        return self.prediction_stride * self.dt_integration

    @property
    def n_snapshots(self) -> int:
        return self.n_prediction_steps + 1

    @property
    def skip_steps(self) -> int:
        return int(round(self.transient_skip / self.dt_integration))

    def params(self, g=None) -> PhysicsParams:
        return PhysicsParams.from_dimensionless(L=self.L, g=self.g_final if g is None else g)

    def offsets(self) -> list[int]:
        if self.kind == "shallow":
            return list(range(self.n_trajectories))
        return [k % self.prediction_stride for k in range(self.n_trajectories)]

    def trajectory_seeds(self) -> list[int]:
        children = np.random.SeedSequence(self.seed).spawn(self.n_trajectories)
        return [int(c.generate_state(1)[0]) for c in children]

    def split(self) -> dict[str, list[int]]:
        return split_indices(self.n_trajectories, self.seed, self.test_fraction)

    @classmethod
    def from_dict(cls, d) -> QuenchProtocol:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def split_indices(n, seed, test_fraction=0.1) -> dict[str, list[int]]:
    """Deterministic train/test assignment by hashing (seed, trajectory index)."""
    if test_fraction >= 1:
        return {"train": [], "test": list(range(n))}
    if test_fraction <= 0:
        return {"train": list(range(n)), "test": []}
    test = []
    for k in range(n):
        h = int.from_bytes(hashlib.sha256(f"{seed}:{k}".encode()).digest()[:8], "little")
        if h / 2**64 < test_fraction:
            test.append(k)
    if not test and n > 1:
        test = [n - 1]
    if len(test) == n and n > 1:
        test = test[1:]
    train = [k for k in range(n) if k not in set(test)]
    return {"train": train, "test": test}


@dataclass
class Dataset:
    protocol: QuenchProtocol
    trajectories: list[Trajectory]
    split: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.split:
            self.split = self.protocol.split()

    @property
    def params(self) -> PhysicsParams:
        return self.protocol.params()

    @property
    def L(self) -> int:
        return self.protocol.L

    @property
    def delta_t(self) -> float:
        return self.protocol.delta_t

    def __len__(self):
        return len(self.trajectories)

    def subset(self, part: str) -> list[Trajectory]:
        return [self.trajectories[i] for i in self.split[part]]


@dataclass(frozen=True)
class ScalingCoefficients:
    """Largest magnitudes of state, time derivative and per-step update, per field."""

    r: float
    q: float
    p: float
    r_d: float
    q_d: float
    p_d: float
    r_delta: float
    q_delta: float
    p_delta: float

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @classmethod
    def ones(cls):
        return cls(*([1.0] * 9))

    def validate(self):
        bad = [k for k, v in self.as_dict().items() if not (np.isfinite(v) and v > 0)]
        if bad:
            raise DegenerateDataError(f"scaling coefficients not strictly positive: {', '.join(bad)}")
        return self

    @property
    def state(self):
        return (self.r, self.q, self.p)

    @property
    def derivative(self):
        return (self.r_d, self.q_d, self.p_d)

    @property
    def update(self):
        return (self.r_delta, self.q_delta, self.p_delta)


def _rho_max(rho) -> float:
    # the network sees Re and Im as separate channels
    return float(max(np.max(np.abs(rho.real), initial=0.0), np.max(np.abs(rho.imag), initial=0.0)))


def state_maxima(Q, P, rho) -> tuple[float, float, float]:
    return _rho_max(rho), float(np.max(np.abs(Q), initial=0.0)), float(np.max(np.abs(P), initial=0.0))


def compute_scaling_coefficients(trajectories, params: PhysicsParams, validate=True) -> ScalingCoefficients:
    """Nine max-abs statistics over a set of trajectories.

    Derivatives are evaluated with the equations of motion on every stored
    state (snapshots and midpoints); updates are consecutive snapshot
    differences.
    """
    if isinstance(trajectories, Dataset):
        trajectories = trajectories.trajectories
    trajectories = list(trajectories)
    if not trajectories or all(len(t) == 0 for t in trajectories):
        raise DegenerateDataError("cannot compute scaling coefficients of an empty dataset")
    acc = np.zeros(9)
    coeffs = _coeffs(params)
    for tr in trajectories:
        blocks = [(tr.Q, tr.P, tr.rho)]
        if tr.has_midpoints:
            blocks.append((tr.mid_Q, tr.mid_P, tr.mid_rho))
        for Q, P, rho in blocks:
            acc[0:3] = np.maximum(acc[0:3], state_maxima(Q, P, rho))
            dQ, dP, drho = _rhs_arrays(Q, P, rho, *coeffs)
            acc[3:6] = np.maximum(acc[3:6], state_maxima(dQ, dP, drho))
        if len(tr) > 1:
            acc[6:9] = np.maximum(
                acc[6:9], state_maxima(np.diff(tr.Q, axis=0), np.diff(tr.P, axis=0), np.diff(tr.rho, axis=0))
            )
    sc = ScalingCoefficients(*acc.tolist())
    return sc.validate() if validate else sc


def midpoint_derivative(midstate: LatticeState, params: PhysicsParams) -> StateDerivative:
    """Supervision target for the differentiator: the exact RHS at the mid-interval state."""
    return eval_rhs(midstate, params)


# -- generation -----------------------------------------------------------------


def _initial_batch(protocol: QuenchProtocol, indices):
    """Initial (Q, P, rho) stacks for the selected trajectories, before offsetting."""
    L = protocol.L
    seeds = protocol.trajectory_seeds()
    if protocol.kind == "shallow":
        if protocol.g_initial <= 0:
            raise InvalidInputError("shallow quench needs g_initial > 0")
        gs = cdw_ground_state(protocol.params(protocol.g_initial))
        Q = np.tile(gs.Q, (len(indices), 1))
        P = np.tile(gs.P, (len(indices), 1))
        rho = np.tile(gs.rho, (len(indices), 1, 1))
        return Q, P, rho
    if protocol.g_initial != 0:
        raise InvalidInputError("deep quench starts from the decoupled state g_initial = 0")
    fs = free_fermi_ground_state(protocol.params(0.0))
    Q = np.stack([np.random.default_rng(seeds[k]).normal(0.0, protocol.q_noise_sigma, L) for k in indices])
    P = np.zeros((len(indices), L))
    rho = np.tile(fs.rho, (len(indices), 1, 1))
    return Q, P, rho


def _generate_chunk(protocol: QuenchProtocol, indices):
    params = protocol.params()
    offsets = protocol.offsets()
    seeds = protocol.trajectory_seeds()
    Q, P, rho = _initial_batch(protocol, indices)
    # phase offsets, then the transient skip, all under the final coupling
    offs = np.array([offsets[k] for k in indices])
    for s in range(int(offs.max(initial=0))):
        active = offs > s
        nQ, nP, nrho = advance_batch(Q[active], P[active], rho[active], params, protocol.dt_integration, 1)
        Q[active], P[active], rho[active] = nQ, nP, nrho
    Q, P, rho = advance_batch(Q, P, rho, params, protocol.dt_integration, protocol.skip_steps)
    n_steps = protocol.n_prediction_steps * protocol.prediction_stride
    Qs, Ps, rhos, mids = propagate_batch(
        Q, P, rho, params, protocol.dt_integration, n_steps, protocol.prediction_stride, protocol.record_midpoints
    )
    out = []
    for b, k in enumerate(indices):
        t0 = (offsets[k] + protocol.skip_steps) * protocol.dt_integration
        tr = Trajectory(
            Qs[b], Ps[b], rhos[b], t0 + protocol.delta_t * np.arange(Qs.shape[1]), offset=offsets[k], seed=seeds[k]
        )
        if mids is not None:
            tr.mid_Q, tr.mid_P, tr.mid_rho = mids[0][b], mids[1][b], mids[2][b]
        out.append(tr)
    return out


def generate_dataset(protocol: QuenchProtocol, batch_size=32, jobs=1) -> Dataset:
    indices = list(range(protocol.n_trajectories))
    chunks = [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]
    trajectories = []
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_generate_chunk, [protocol] * len(chunks), chunks):
                trajectories.extend(part)
    else:
        for chunk in chunks:
            log.info("integrating trajectories %d..%d", chunk[0], chunk[-1])
            trajectories.extend(_generate_chunk(protocol, chunk))
    return Dataset(protocol, trajectories)


def generate_shallow_dataset(protocol: QuenchProtocol | None = None, **kw) -> Dataset:
    protocol = protocol or QuenchProtocol.shallow()
    if protocol.kind != "shallow":
        raise InvalidInputError("expected a shallow-quench protocol")
    return generate_dataset(protocol, **kw)


def generate_deep_dataset(protocol: QuenchProtocol | None = None, **kw) -> Dataset:
    protocol = protocol or QuenchProtocol.deep()
    if protocol.kind != "deep":
        raise InvalidInputError("expected a deep-quench protocol")
    return generate_dataset(protocol, **kw)


# -- persistence ------------------------------------------------------------------


def _traj_name(k):
    return f"traj_{k:05d}.bin"


def write_dataset(dataset: Dataset, path, source="simulation") -> Path:
    """Write metadata plus one blob per trajectory.

    ``source`` other than "simulation" (e.g. "predicted") marks states that
    need not satisfy the density-matrix invariants on reading.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, tr in enumerate(dataset.trajectories):
        mid = (tr.mid_Q, tr.mid_P, tr.mid_rho) if tr.has_midpoints else None
        storage.write_bytes_atomic(path / _traj_name(k), storage.encode_trajectory(tr.Q, tr.P, tr.rho, mid))
        entries.append({
            "file": _traj_name(k), "offset": int(tr.offset), "seed": tr.seed, "t0": float(tr.times[0]),
            "n_snapshots": len(tr), "n_midpoints": tr.n_midpoints,
        })
    meta = {
        "schema_version": SCHEMA_VERSION,
        "protocol": asdict(dataset.protocol),
        "L": dataset.L,
        "delta_t": dataset.delta_t,
        "n_trajectories": len(dataset),
        "trajectories": entries,
        "split": dataset.split,
        "source": source,
    }
    (path / "metadata.json").write_text(json.dumps(meta, indent=2))
    return path


def read_metadata(path) -> dict:
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise FormatError(f"{path} has no metadata.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatchError(f"dataset schema {meta.get('schema_version')}, expected {SCHEMA_VERSION}")
    return meta


def read_trajectory(path, meta, k, check=True) -> Trajectory:
    entry = meta["trajectories"][k]
    fname = Path(path) / entry["file"]
    Q, P, rho, mid = storage.decode_trajectory(fname.read_bytes(), expected_L=meta["L"], name=str(fname))
    if len(Q) != entry["n_snapshots"] or (0 if mid is None else len(mid[0])) != entry["n_midpoints"]:
        raise IntegrityError(f"{fname}: snapshot counts disagree with metadata")
    tr = Trajectory(Q, P, rho, entry["t0"] + meta["delta_t"] * np.arange(len(Q)), offset=entry["offset"], seed=entry["seed"])
    if mid is not None:
        tr.mid_Q, tr.mid_P, tr.mid_rho = mid
    if check:
        check_stack_invariants(tr.rho, meta["L"] // 2, name=str(fname))
        if mid is not None:
            check_stack_invariants(tr.mid_rho, meta["L"] // 2, name=str(fname))
    return tr


def read_dataset(path, indices=None, check=None) -> Dataset:
    """Load a dataset; ``check=None`` verifies invariants only for simulated data."""
    meta = read_metadata(path)
    if check is None:
        check = meta.get("source", "simulation") == "simulation"
    protocol = QuenchProtocol.from_dict(meta["protocol"])
    n = meta["n_trajectories"]
    if len(meta["trajectories"]) != n:
        raise IntegrityError("metadata trajectory list does not match n_trajectories")
    idx = range(n) if indices is None else indices
    trajs = [read_trajectory(path, meta, k, check) for k in idx]
    split = meta["split"]
    if indices is not None:
        # renumber the split to positions within the loaded subset
        pos = {k: i for i, k in enumerate(idx)}
        split = {part: [pos[k] for k in ks if k in pos] for part, ks in split.items()}
    return Dataset(protocol, trajs, split)
