"""Recurrent CNN surrogates: the single-network stepper and the PARC pair.

States travel through the models in embedded form, a (B, 4, L, L) array
with channels (Re rho, Im rho, diag Q, diag P). Every network output is
multiplied by the embedding support mask, which is the same as extracting
(rho, Q, P) and embedding them again, so off-diagonal content in the Q and P
channels never reaches the state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import storage
from .datagen import ScalingCoefficients
from .dynamics import Trajectory
from .errors import DivergenceError, InvalidInputError
from .tensor.autograd import NonFiniteError, Tensor, add, mul, tanh
from .tensor.nn import ResidualBlock, conv2d_circular, layer_norm, uniform_init

VARIANTS = ("standard", "parc")


@dataclass(frozen=True)
class ModelConfig:
    L: int = 16
    hidden_channels: int = 12
    n_blocks: int = 2
    kernel: int = 3
    dropout_p: float = 0.1
    variant: str = "standard"
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}")
        if self.kernel % 2 == 0:
            raise InvalidInputError("kernel size must be odd")
        if not 0 <= self.dropout_p < 1:
            raise InvalidInputError("dropout_p must be in [0, 1)")


# -- embedding ---------------------------------------------------------------------


def embed_state(rho, Q, P) -> np.ndarray:
    """(rho, Q, P) -> (4, L, L) or, for stacked inputs, (B, 4, L, L)."""
    rho = np.asarray(rho)
    Q = np.asarray(Q)
    P = np.asarray(P)
    L = Q.shape[-1]
    if P.shape != Q.shape or rho.shape != Q.shape + (L,):
        raise InvalidInputError(f"shape mismatch: rho{rho.shape} Q{Q.shape} P{P.shape}")
    lead = Q.shape[:-1]
    out = np.zeros(lead + (4, L, L))
    out[..., 0, :, :] = rho.real
    out[..., 1, :, :] = rho.imag
    idx = np.arange(L)
    out[..., 2, idx, idx] = Q
    out[..., 3, idx, idx] = P
    return out


def extract_state(t):
    """Inverse of :func:`embed_state`; off-diagonal content of channels 2 and 3 is discarded."""
    t = np.asarray(t.data if isinstance(t, Tensor) else t)
    if t.shape[-3] != 4 or t.shape[-1] != t.shape[-2]:
        raise InvalidInputError(f"expected a (..., 4, L, L) tensor, got {t.shape}")
    rho = t[..., 0, :, :] + 1j * t[..., 1, :, :]
    Q = np.diagonal(t[..., 2, :, :], axis1=-2, axis2=-1).copy()
    P = np.diagonal(t[..., 3, :, :], axis1=-2, axis2=-1).copy()
    return rho, Q, P


def support_mask(L, dtype=np.float32) -> np.ndarray:
    m = np.ones((4, L, L), dtype=dtype)
    eye = np.eye(L, dtype=dtype)
    m[2] = eye
    m[3] = eye
    return m


def channel_scale(triple, dtype=np.float32) -> np.ndarray:
    r, q, p = triple
    return np.array([r, r, q, p], dtype=dtype)[:, None, None]


# -- network -----------------------------------------------------------------------


class LatticeCNN:
    """Stem conv, pre-activation residual blocks, final norm + tanh, head conv."""

    def __init__(self, cfg: ModelConfig, rng, prefix):
        dt = np.dtype(cfg.dtype)
        C, k = cfg.hidden_channels, cfg.kernel
        self.prefix = prefix
        self.stem_w = Tensor(uniform_init(rng, (C, 4, k, k), 4 * k * k, dt), True, f"{prefix}.stem.weight")
        self.stem_b = Tensor(np.zeros(C, dt), True, f"{prefix}.stem.bias")
        self.blocks = [
            ResidualBlock(C, k, cfg.dropout_p, rng, dt, prefix=f"{prefix}.block{i}") for i in range(cfg.n_blocks)
        ]
        self.norm_gain = Tensor(np.ones(C, dt), True, f"{prefix}.norm.gain")
        self.norm_bias = Tensor(np.zeros(C, dt), True, f"{prefix}.norm.bias")
        self.head_w = Tensor(uniform_init(rng, (4, C, k, k), C * k * k, dt), True, f"{prefix}.head.weight")
        self.head_b = Tensor(np.zeros(4, dt), True, f"{prefix}.head.bias")

    def parameters(self) -> list[Tensor]:
        ps = [self.stem_w, self.stem_b]
        for b in self.blocks:
            ps.extend(b.parameters())
        return ps + [self.norm_gain, self.norm_bias, self.head_w, self.head_b]

    def __call__(self, x, training=False, rng=None) -> Tensor:
        h = conv2d_circular(x, self.stem_w, self.stem_b)
        for b in self.blocks:
            h = b(h, training, rng)
        h = tanh(layer_norm(h, self.norm_gain, self.norm_bias))
        return conv2d_circular(h, self.head_w, self.head_b)


class Model:
    def __init__(self, config: ModelConfig, scaling: ScalingCoefficients):
        self.config = config
        self.scaling = scaling.validate()
        rng = np.random.default_rng(config.init_seed)
        if config.variant == "standard":
            self.nets = {"net": LatticeCNN(config, rng, "net")}
        else:
            self.nets = {
                "differentiator": LatticeCNN(config, rng, "differentiator"),
                "integrator": LatticeCNN(config, rng, "integrator"),
            }
        dt = np.dtype(config.dtype)
        mask = support_mask(config.L, dt)
        self._inv_state = 1.0 / channel_scale(scaling.state, dt)
        self._inv_deriv = 1.0 / channel_scale(scaling.derivative, dt)
        self._deriv_out = channel_scale(scaling.derivative, dt) * mask
        self._update_out = channel_scale(scaling.update, dt) * mask
        self._mask = mask

    @property
    def variant(self):
        return self.config.variant

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets.values() for p in net.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, sd):
        named = self.named_parameters()
        if set(sd) != set(named):
            raise InvalidInputError("state dict keys do not match the model")
        for k, p in named.items():
            if sd[k].shape != p.shape:
                raise InvalidInputError(f"{k}: shape {sd[k].shape} vs {p.shape}")
            p.data = np.array(sd[k], dtype=self.dtype)

    def _check(self, x: Tensor):
        if x.shape[-1] != self.config.L or x.shape[-2] != self.config.L:
            raise InvalidInputError(f"model built for L={self.config.L}, got input {x.shape}")

    # -- differentiable building blocks on embedded tensors --

    def normalize_state(self, x) -> Tensor:
        return mul(x, self._inv_state)

    def update_from_normalized(self, h, training=False, rng=None) -> Tensor:
        """Standard network: normalised state -> physical update (masked)."""
        return mul(self.nets["net"](h, training, rng), self._update_out)

    def derivative_from_normalized(self, h, training=False, rng=None) -> Tensor:
        return mul(self.nets["differentiator"](h, training, rng), self._deriv_out)

    def integrate(self, deriv, training=False, rng=None) -> Tensor:
        return mul(self.nets["integrator"](mul(deriv, self._inv_deriv), training, rng), self._update_out)

    def step_tensor(self, x, training=False, rng=None, noise=None):
        """One recurrent step on an embedded physical-unit tensor.

        ``noise`` (normalised units) is added to the network input and the
        update is applied to the perturbed state. Returns (next, update,
        derivative-or-None).
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        self._check(x)
        h = self.normalize_state(x)
        if noise is not None:
            h = add(h, noise)
            x = add(x, noise * (1.0 / self._inv_state))
        if self.variant == "standard":
            upd = self.update_from_normalized(h, training, rng)
            return add(x, upd), upd, None
        deriv = self.derivative_from_normalized(h, training, rng)
        upd = self.integrate(deriv, training, rng)
        return add(x, upd), upd, deriv


# -- numpy-level operations ----------------------------------------------------------


def _to_tensor(model, rho, Q, P):
    return Tensor(embed_state(rho, Q, P).astype(model.dtype))


def standard_step(model: Model, rho, Q, P):
    if model.variant != "standard":
        raise InvalidInputError("standard_step needs a standard model")
    nxt, _, _ = model.step_tensor(_to_tensor(model, rho, Q, P))
    return extract_state(nxt)


def parc_differentiate(model: Model, rho, Q, P):
    """Predicted time derivative (drho, dQ, dP) at the mid-interval."""
    if model.variant != "parc":
        raise InvalidInputError("parc_differentiate needs a PARC model")
    x = _to_tensor(model, rho, Q, P)
    model._check(x)
    return extract_state(model.derivative_from_normalized(model.normalize_state(x)))


def parc_integrate(model: Model, drho, dQ, dP):
    """Map a derivative triple to a state update (delta rho, delta Q, delta P)."""
    if model.variant != "parc":
        raise InvalidInputError("parc_integrate needs a PARC model")
    d = _to_tensor(model, drho, dQ, dP)
    model._check(d)
    return extract_state(model.integrate(d))


def parc_step(model: Model, rho, Q, P):
    if model.variant != "parc":
        raise InvalidInputError("parc_step needs a PARC model")
    nxt, _, _ = model.step_tensor(_to_tensor(model, rho, Q, P))
    return extract_state(nxt)


def model_step(model: Model, rho, Q, P):
    return standard_step(model, rho, Q, P) if model.variant == "standard" else parc_step(model, rho, Q, P)


def rollout_embedded(model: Model, x0, n_steps: int) -> np.ndarray:
    """Recurrent self-fed prediction in eval mode; returns (B, n_steps+1, 4, L, L)."""
    if n_steps < 0:
        raise InvalidInputError("n_steps must be non-negative")
    x = np.asarray(x0, dtype=model.dtype)
    out = np.empty((x.shape[0], n_steps + 1) + x.shape[1:], dtype=model.dtype)
    out[:, 0] = x
    for s in range(1, n_steps + 1):
        try:
            nxt, _, _ = model.step_tensor(Tensor(x))
        except NonFiniteError as exc:
            raise DivergenceError(f"rollout produced non-finite values at step {s}", s) from exc
        x = nxt.data
        out[:, s] = x
    return out


def rollout_batch(model: Model, rho, Q, P, n_steps: int):
    """Stacked initial states -> (rhos, Qs, Ps) of shape (B, n_steps+1, ...)."""
    traj = rollout_embedded(model, embed_state(rho, Q, P), n_steps)
    return extract_state(traj)


def rollout(model: Model, state, n_steps: int, delta_t=1.0) -> Trajectory:
    """Roll a single state (LatticeState or (rho, Q, P)) forward ``n_steps`` prediction steps."""
    if hasattr(state, "rho"):
        rho, Q, P, t0 = state.rho, state.Q, state.P, state.time
    else:
        (rho, Q, P), t0 = state, 0.0
    rhos, Qs, Ps = rollout_batch(model, np.asarray(rho)[None], np.asarray(Q)[None], np.asarray(P)[None], n_steps)
    times = t0 + delta_t * np.arange(n_steps + 1)
    Qs, Ps, rhos = Qs[0].astype(np.float64), Ps[0].astype(np.float64), rhos[0].astype(np.complex128)
    # snapshot 0 is the caller's state, not its model-precision copy
    Qs[0], Ps[0], rhos[0] = Q, P, rho
    return Trajectory(Qs, Ps, rhos, times)


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(model: Model, path, extra=None) -> Path:
    meta = {
        "config": asdict(model.config),
        "scaling": model.scaling.as_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    storage.write_bytes_atomic(path, storage.encode_weights(model.state_dict(), meta))
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    tensors, meta = storage.decode_weights(path.read_bytes(), name=str(path))
    model = Model(ModelConfig(**meta["config"]), ScalingCoefficients.from_dict(meta["scaling"]))
    model.load_state_dict(tensors)
    return model, meta.get("extra", {})


def describe(model: Model) -> str:
    return json.dumps({"config": asdict(model.config), "n_parameters": model.n_parameters()})
