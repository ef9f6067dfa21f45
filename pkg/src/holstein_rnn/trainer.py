"""Multi-step rollout training with input noise and a curriculum."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .dynamics import PhysicsParams, Trajectory, _coeffs, _rhs_arrays
from .errors import DivergenceError, HolsteinError, InvalidInputError
from .models import Model, channel_scale, embed_state, rollout_embedded, save_checkpoint, support_mask
from .tensor.autograd import NonFiniteError, Tensor, add, masked_norms, mul, neg, tsum
from .tensor.optim import AdamW, LrSchedule, clip_gradients, global_grad_norm, lr_at

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "stage", "lr", "loss_total", "loss_diff_term", "loss_int_term", "grad_norm")


@dataclass
class CurriculumStage:
    rollout_steps: int
    noise_sigma: float = 0.0
    n_epochs: int = 1
    max_windows: int | None = None  # cap on windows drawn per epoch
    cycle_length: int | None = None  # LR cycle in optimizer steps; None = the stage's step count

    def __post_init__(self):
        if self.rollout_steps < 1 or self.noise_sigma < 0 or self.n_epochs < 1:
            raise InvalidInputError("stage needs rollout_steps >= 1, noise_sigma >= 0, n_epochs >= 1")
        if (self.max_windows is not None and self.max_windows < 1) or (self.cycle_length is not None and self.cycle_length < 1):
            raise InvalidInputError("max_windows and cycle_length must be positive")


def default_curriculum(n_epochs=1, max_windows=None) -> list[CurriculumStage]:
    return [
        CurriculumStage(n, s, n_epochs, max_windows)
        for n, s in ((1, 0.0), (2, 2e-3), (4, 5e-3), (8, 1e-2))
    ]


@dataclass
class TrainingConfig:
    stages: list[CurriculumStage] = field(default_factory=default_curriculum)
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_max_norm: float = 1.0
    seed: int = 0
    validation_steps: int = 10
    validation_starts: int = 8
    precision: str | None = None  # "float32" | "float64"; None follows the model

    def __post_init__(self):
        if not self.stages:
            raise InvalidInputError("at least one curriculum stage is required")
        ns = [s.rollout_steps for s in self.stages]
        sig = [s.noise_sigma for s in self.stages]
        if ns != sorted(ns) or sig != sorted(sig):
            raise InvalidInputError("stages must be non-decreasing in rollout_steps and noise_sigma")
        if self.batch_size < 1 or self.clip_max_norm <= 0 or self.lr_max <= 0:
            raise InvalidInputError("batch_size, clip_max_norm and lr_max must be positive")
        if self.lr_min < 0 or self.lr_min > self.lr_max or self.weight_decay < 0 or self.warmup_steps < 0:
            raise InvalidInputError("need 0 <= lr_min <= lr_max, weight_decay >= 0, warmup_steps >= 0")
        if self.precision not in (None, "float32", "float64"):
            raise InvalidInputError(f"unknown precision {self.precision!r}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = [CurriculumStage(**s) for s in d.get("stages", [])] or default_curriculum()
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- batches ---------------------------------------------------------------------


@dataclass
class Batch:
    states: np.ndarray  # (B, N+1, 4, L, L) physical units
    mid_derivs: np.ndarray | None  # (B, N, 4, L, L)
    windows: list[tuple[int, int]]


def window_index(trajectories, N) -> list[tuple[int, int]]:
    out = []
    for ti, tr in enumerate(trajectories):
        if len(tr) < N + 1:
            raise InvalidInputError(f"trajectory {ti} has {len(tr)} snapshots, need {N + 1}")
        out.extend((ti, s) for s in range(len(tr) - N))
    return out


def _embed_window(tr: Trajectory, s, N):
    return embed_state(tr.rho[s : s + N + 1], tr.Q[s : s + N + 1], tr.P[s : s + N + 1])


def _mid_derivative_window(tr: Trajectory, s, N, params):
    if not tr.has_midpoints:
        raise InvalidInputError("PARC training needs midpoint snapshots")
    dQ, dP, drho = _rhs_arrays(tr.mid_Q[s : s + N], tr.mid_P[s : s + N], tr.mid_rho[s : s + N], *_coeffs(params))
    return embed_state(drho, dQ, dP)


def make_batches(trajectories, N, batch_size, rng, params: PhysicsParams | None = None, max_windows=None, dtype=np.float32):
    """Yield shuffled batches of (N+1)-snapshot windows covering each window once per pass.

    With ``params`` given, the exact midpoint derivatives of each window are
    attached for the differentiator loss.
    """
    windows = window_index(trajectories, N)
    order = rng.permutation(len(windows))
    if max_windows is not None:
        order = order[:max_windows]
    for i in range(0, len(order), batch_size):
        sel = [windows[j] for j in order[i : i + batch_size]]
        states = np.stack([_embed_window(trajectories[t], s, N) for t, s in sel]).astype(dtype)
        mids = None
        if params is not None:
            mids = np.stack([_mid_derivative_window(trajectories[t], s, N, params) for t, s in sel]).astype(dtype)
        yield Batch(states, mids, sel)


def add_input_noise(x, sigma, rng, mask=None):
    """Gaussian perturbation in normalised units, restricted to the embedding support."""
    if sigma < 0:
        raise InvalidInputError("noise sigma must be non-negative")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    noise = sigma * rng.standard_normal(x.shape)
    if mask is not None:
        noise = noise * mask
    return (x + noise).astype(x.dtype)


# -- losses ----------------------------------------------------------------------


def component_masks(L, dtype=np.float32) -> np.ndarray:
    """Masks selecting rho diagonal, rho off-diagonal, Q and P within a (4, L, L) embedding."""
    eye = np.eye(L, dtype=dtype)
    m = np.zeros((4, 4, L, L), dtype=dtype)
    m[0, 0] = m[0, 1] = eye
    m[1, 0] = m[1, 1] = 1 - eye
    m[2, 2] = eye
    m[3, 3] = eye
    return m


def _term(pred: Tensor, target: np.ndarray, inv_scale, comp_masks) -> Tensor:
    resid = mul(add(pred, -target), inv_scale)
    norms = masked_norms(resid, comp_masks)  # (B, 4)
    return mul(tsum(norms), 1.0 / pred.shape[0])


def _as_windows(x, dtype):
    x = np.asarray(x, dtype=dtype)
    return x[None] if x.ndim == 4 else x


def rollout_loss(model: Model, states, mid_derivs=None, noise_sigma=0.0, rng=None, training=False):
    """Summed per-component L2 losses over an N-step self-fed rollout.

    ``states`` holds N+1 ground-truth embedded snapshots (optionally batched).
    The update term compares each predicted increment with the true one in
    update-normalised units; for PARC the derivative term compares the
    differentiator output with the exact midpoint derivative in
    derivative-normalised units. Returns (loss, derivative_term, update_term).
    """
    X = _as_windows(states, model.dtype)
    B, n1 = X.shape[:2]
    N = n1 - 1
    if N < 1:
        raise InvalidInputError("segment needs at least two snapshots")
    if model.variant == "parc":
        if mid_derivs is None:
            raise InvalidInputError("PARC loss needs midpoint derivatives")
        D = _as_windows(mid_derivs, model.dtype)
        if D.shape[1] < N:
            raise InvalidInputError("fewer midpoint derivatives than rollout steps")
    L = X.shape[-1]
    comp = component_masks(L, model.dtype)
    mask = support_mask(L, model.dtype)
    inv_upd = 1.0 / channel_scale(model.scaling.update, model.dtype)
    inv_der = 1.0 / channel_scale(model.scaling.derivative, model.dtype)
    noise = None
    if noise_sigma > 0:
        noise = (noise_sigma * rng.standard_normal(X[:, 0].shape) * mask).astype(model.dtype)
    x = Tensor(X[:, 0])
    upd_terms, der_terms = [], []
    for n in range(N):
        x, upd, deriv = model.step_tensor(x, training, rng, noise if n == 0 else None)
        upd_terms.append(_term(upd, X[:, n + 1] - X[:, n], inv_upd, comp))
        if deriv is not None:
            der_terms.append(_term(deriv, D[:, n], inv_der, comp))
    update_term = _sum(upd_terms)
    if der_terms:
        deriv_term = _sum(der_terms)
        return add(deriv_term, update_term), deriv_term, update_term
    return update_term, None, update_term


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def loss_standard(model: Model, segment, noise_sigma=0.0, rng=None, training=False) -> Tensor:
    if model.variant != "standard":
        raise InvalidInputError("loss_standard needs a standard model")
    return rollout_loss(model, _segment_states(segment), None, noise_sigma, rng, training)[0]


def loss_parc(model: Model, segment, mid_derivs=None, params=None, noise_sigma=0.0, rng=None, training=False) -> Tensor:
    """PARC loss; ``segment`` may be a Trajectory (derivatives from its midpoints and ``params``)."""
    if model.variant != "parc":
        raise InvalidInputError("loss_parc needs a PARC model")
    if isinstance(segment, Trajectory):
        if not segment.has_midpoints:
            raise InvalidInputError("PARC loss needs midpoint snapshots")
        mid_derivs = _mid_derivative_window(segment, 0, len(segment) - 1, params)
    if mid_derivs is None:
        raise InvalidInputError("PARC loss needs midpoint derivatives")
    return rollout_loss(model, _segment_states(segment), mid_derivs, noise_sigma, rng, training)[0]


def _segment_states(segment):
    if isinstance(segment, Trajectory):
        return embed_state(segment.rho, segment.Q, segment.P)
    return segment


# -- validation -------------------------------------------------------------------


def normalized_state_error(pred, truth, scaling) -> np.ndarray:
    """Relative L2 error per step between embedded states, each field divided by its state coefficient."""
    inv = 1.0 / channel_scale(scaling.state, np.float64)
    d = (np.asarray(pred, np.float64) - np.asarray(truth, np.float64)) * inv
    t = np.asarray(truth, np.float64) * inv
    axes = tuple(range(d.ndim - 3, d.ndim))
    return np.sqrt(np.sum(d * d, axis=axes)) / np.sqrt(np.sum(t * t, axis=axes))


def validation_error(model: Model, trajectories, n_steps=10, n_starts=8, rng=None) -> float:
    rng = rng or np.random.default_rng(0)
    errs = []
    for tr in trajectories:
        if len(tr) <= n_steps:
            continue
        starts = np.linspace(0, len(tr) - n_steps - 1, n_starts).astype(int)
        X = np.stack([_embed_window(tr, s, n_steps) for s in starts])
        try:
            pred = rollout_embedded(model, X[:, 0], n_steps)
        except DivergenceError:
            return math.inf
        errs.append(normalized_state_error(pred[:, 1:], X[:, 1:], model.scaling).mean())
    return float(np.mean(errs)) if errs else math.nan


# -- optimisation loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    validation: list[dict]
    best_stage: int | None
    wall_clock: float


class TrainingDivergedError(HolsteinError):
    def __init__(self, message, stage, step):
        super().__init__(f"{message} (stage {stage}, step {step})")
        self.stage = stage
        self.step = step


def _stage_steps(n_windows, stage: CurriculumStage, batch_size):
    used = n_windows if stage.max_windows is None else min(n_windows, stage.max_windows)
    return stage.n_epochs * math.ceil(used / batch_size)


def train(model: Model, dataset: Dataset, config: TrainingConfig, metrics_path=None, checkpoint_dir=None,
          progress=None) -> TrainResult:
    """Curriculum training; returns the best model by held-out 10-step rollout error."""
    train_set = dataset.subset("train")
    if not train_set:
        raise InvalidInputError("dataset has no training trajectories")
    val_set = dataset.subset("test")
    if config.precision is not None and np.dtype(config.precision) != model.dtype:
        raise InvalidInputError(f"config precision {config.precision} but model is {model.dtype}")
    params = dataset.params if model.variant == "parc" else None
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), config.lr_max, config.betas, config.eps, config.weight_decay)
    cycle = [
        s.cycle_length or _stage_steps(len(window_index(train_set, s.rollout_steps)), s, config.batch_size)
        for s in config.stages
    ]
    metrics, validation = [], []
    writer = fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
    best = (math.inf, None, None)
    step = 0
    t_start = time.process_time()
    try:
        for si, stage in enumerate(config.stages):
            # warm restart aligned with the stage boundary
            schedule = LrSchedule(config.lr_max, config.lr_min, config.warmup_steps, [cycle[si]])
            stage_step = 0
            for _ in range(stage.n_epochs):
                for batch in make_batches(
                    train_set, stage.rollout_steps, config.batch_size, rng, params, stage.max_windows, model.dtype
                ):
                    lr = lr_at(stage_step % cycle[si], schedule)
                    for p in opt.params:
                        p.grad = None
                    try:
                        loss, dterm, uterm = rollout_loss(
                            model, batch.states, batch.mid_derivs, stage.noise_sigma, rng, training=True
                        )
                    except NonFiniteError as exc:
                        raise TrainingDivergedError("non-finite activations", si, step) from exc
                    if not np.isfinite(loss.item()):
                        raise TrainingDivergedError("loss is not finite", si, step)
                    loss.backward()
                    gnorm = global_grad_norm(opt.params)
                    clip_gradients(opt.params, config.clip_max_norm)
                    opt.step(lr)
                    row = {
                        "step": step, "stage": si, "lr": lr, "loss_total": loss.item(),
                        "loss_diff_term": dterm.item() if dterm is not None else 0.0,
                        "loss_int_term": uterm.item(), "grad_norm": gnorm,
                    }
                    metrics.append(row)
                    if writer:
                        writer.writerow(row)
                    if progress and step % 100 == 0:
                        progress(row)
                    step += 1
                    stage_step += 1
            val = validation_error(model, val_set, config.validation_steps, config.validation_starts) if val_set else math.nan
            validation.append({"stage": si, "step": step, "validation_error": val})
            log.info("stage %d done at step %d: validation error %.4g", si, step, val)
            if checkpoint_dir is not None:
                save_checkpoint(model, Path(checkpoint_dir) / f"stage{si}.ckpt", {"stage": si, "validation_error": val})
            if not val_set or val <= best[0] or best[1] is None:
                best = (val, si, model.state_dict())
    finally:
        if fh:
            fh.close()
    if best[2] is not None:
        model.load_state_dict(best[2])
    return TrainResult(model, metrics, validation, best[1], time.process_time() - t_start)


def write_config_echo(config: TrainingConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))
