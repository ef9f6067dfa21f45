"""Order parameters, ensemble autocorrelation and trace export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .dynamics import PhysicsParams, Trajectory, propagate_batch
from .errors import DegenerateDataError, DivergenceError, InvalidInputError
from .models import Model, embed_state, extract_state, rollout_embedded


def _stagger(L):
    # origin at site 0, so cos(pi x_i / a) = (-1)^i
    return np.where(np.arange(L) % 2 == 0, 1.0, -1.0)


def order_param_rho(rho) -> np.ndarray | float:
    """CDW order from site occupations; accepts (..., L, L)."""
    rho = np.asarray(rho)
    n = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
    out = np.sum(n * _stagger(n.shape[-1]), axis=-1) / n.shape[-1]
    return float(out) if np.ndim(out) == 0 else out


def order_param_q(Q) -> np.ndarray | float:
    """Staggered lattice distortion; accepts (..., L)."""
    Q = np.asarray(Q, dtype=np.float64)
    out = np.sum(Q * _stagger(Q.shape[-1]), axis=-1) / Q.shape[-1]
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class OrderParamTrace:
    observable: str  # "delta_rho" | "delta_q"
    source: str  # "ground_truth" | "predicted"
    stride: float
    values: np.ndarray
    trajectory_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.stride <= 0:
            raise InvalidInputError("stride must be positive")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("order-parameter trace contains non-finite values")


def traces_from_trajectory(tr: Trajectory, stride, source="ground_truth", trajectory_id=0):
    return [
        OrderParamTrace("delta_rho", source, stride, order_param_rho(tr.rho), trajectory_id),
        OrderParamTrace("delta_q", source, stride, order_param_q(tr.Q), trajectory_id),
    ]


def autocorrelation(ensemble, tau_max: int) -> np.ndarray:
    """Normalised autocovariance pooled over start times and ensemble members.

    Mean and variance come from the pooled sample of every X(t0) that starts a
    pair; each lag divides by its own pair count.
    """
    series = [np.asarray(x, dtype=np.float64).ravel() for x in ensemble]
    if not series:
        raise InvalidInputError("autocorrelation needs a non-empty ensemble")
    if tau_max < 0:
        raise InvalidInputError("tau_max must be non-negative")
    if any(len(x) < tau_max + 1 for x in series):
        raise InvalidInputError(f"every trace needs at least tau_max + 1 = {tau_max + 1} samples")
    out = np.empty(tau_max + 1)
    for tau in range(tau_max + 1):
        heads = np.concatenate([x[: len(x) - tau] for x in series])
        tails = np.concatenate([x[tau:] for x in series])
        mu = heads.mean()
        h = heads - mu
        var = np.mean(h * h)
        if not var > 1e-300:
            raise DegenerateDataError("autocorrelation of a constant ensemble is undefined")
        out[tau] = np.mean(h * (tails - mu)) / var
    out[0] = 1.0
    return out


# -- climate ----------------------------------------------------------------------


class ExactModel:
    """Oracle plug: advances with the ground-truth integrator instead of a network."""

    variant = "exact"

    def __init__(self, params: PhysicsParams, dt_integration, stride):
        self.params = params
        self.dt = dt_integration
        self.stride = int(stride)

    def rollout(self, Q, P, rho, n_steps):
        Qs, Ps, rhos, _ = propagate_batch(Q, P, rho, self.params, self.dt, n_steps * self.stride, self.stride)
        return Qs, Ps, rhos

    @classmethod
    def for_dataset(cls, dataset: Dataset):
        p = dataset.protocol
        return cls(dataset.params, p.dt_integration, p.prediction_stride)


def predict_rollouts(model, Q, P, rho, n_steps):
    """(B, n_steps+1, ...) predictions for a stack of initial states, or raise DivergenceError."""
    if isinstance(model, ExactModel):
        return model.rollout(Q, P, rho, n_steps)
    traj = rollout_embedded(model, embed_state(rho, Q, P), n_steps)
    rhos, Qs, Ps = extract_state(traj)
    return Qs.astype(np.float64), Ps.astype(np.float64), rhos.astype(np.complex128)


@dataclass
class ClimateReport:
    tau_max: int
    n_steps: int
    stride: float
    a_gt: dict = field(default_factory=dict)  # observable -> A(tau)
    a_pred: dict = field(default_factory=dict)
    max_deviation: dict = field(default_factory=dict)
    n_ground_truth: int = 0
    n_predicted: int = 0
    n_diverged: int = 0
    diverged_at: dict = field(default_factory=dict)  # trajectory id -> step
    traces: list = field(default_factory=list)

    def to_dict(self, include_traces=False):
        d = {
            "tau_max": self.tau_max,
            "n_steps": self.n_steps,
            "stride": self.stride,
            "a_gt": {k: v.tolist() for k, v in self.a_gt.items()},
            "a_pred": {k: v.tolist() for k, v in self.a_pred.items()},
            "max_deviation": self.max_deviation,
            "n_ground_truth": self.n_ground_truth,
            "n_predicted": self.n_predicted,
            "n_diverged": self.n_diverged,
            "diverged_at": {str(k): v for k, v in self.diverged_at.items()},
        }
        if include_traces:
            d["traces"] = [_trace_dict(t) for t in self.traces]
        return d


def climate_report(gt: Dataset, model, n_traj, n_steps, tau_max, part="test", batch_size=8) -> ClimateReport:
    """Compare ensemble autocorrelations of ground truth and model rollouts."""
    if tau_max >= n_steps:
        raise InvalidInputError("tau_max must be smaller than n_steps")
    trajs = gt.subset(part)[:n_traj]
    if not trajs:
        raise InvalidInputError(f"dataset has no {part!r} trajectories")
    short = [i for i, tr in enumerate(trajs) if len(tr) < n_steps + 1]
    if short:
        raise InvalidInputError(f"{len(short)} trajectories hold fewer than {n_steps + 1} snapshots")
    stride = gt.delta_t
    rep = ClimateReport(tau_max, n_steps, stride)
    pred_traces = []
    for b in range(0, len(trajs), batch_size):
        chunk = list(range(b, min(b + batch_size, len(trajs))))
        Q0 = np.stack([trajs[i].Q[0] for i in chunk])
        P0 = np.stack([trajs[i].P[0] for i in chunk])
        r0 = np.stack([trajs[i].rho[0] for i in chunk])
        try:
            preds = [predict_rollouts(model, Q0, P0, r0, n_steps)]
            ids = [chunk]
        except DivergenceError:
            # isolate the offending trajectories
            preds, ids = [], []
            for i in chunk:
                try:
                    preds.append(predict_rollouts(model, Q0[i - b : i - b + 1], P0[i - b : i - b + 1], r0[i - b : i - b + 1], n_steps))
                    ids.append([i])
                except DivergenceError as exc:
                    rep.n_diverged += 1
                    rep.diverged_at[i] = exc.step
        for (Qs, _, rhos), idx in zip(preds, ids):
            for k, i in enumerate(idx):
                pred_traces.append((i, order_param_rho(rhos[k]), order_param_q(Qs[k])))
    gt_rho = [order_param_rho(tr.rho[: n_steps + 1]) for tr in trajs]
    gt_q = [order_param_q(tr.Q[: n_steps + 1]) for tr in trajs]
    for i in range(len(trajs)):
        rep.traces.append(OrderParamTrace("delta_rho", "ground_truth", stride, gt_rho[i], i))
        rep.traces.append(OrderParamTrace("delta_q", "ground_truth", stride, gt_q[i], i))
    for i, dr, dq in pred_traces:
        rep.traces.append(OrderParamTrace("delta_rho", "predicted", stride, dr, i))
        rep.traces.append(OrderParamTrace("delta_q", "predicted", stride, dq, i))
    rep.n_ground_truth = len(trajs)
    rep.n_predicted = len(pred_traces)
    for name, gt_series, k in (("delta_rho", gt_rho, 1), ("delta_q", gt_q, 2)):
        rep.a_gt[name] = autocorrelation(gt_series, tau_max)
        if pred_traces:
            rep.a_pred[name] = autocorrelation([t[k] for t in pred_traces], tau_max)
            rep.max_deviation[name] = float(np.max(np.abs(rep.a_gt[name] - rep.a_pred[name])))
        else:
            rep.max_deviation[name] = math.nan
    return rep


# -- export --------------------------------------------------------------------------

TRACE_FIELDS = ("observable", "source", "trajectory_id", "stride", "values")


def _trace_dict(t: OrderParamTrace):
    return {
        "observable": t.observable,
        "source": t.source,
        "trajectory_id": t.trajectory_id,
        "stride": t.stride,
        "values": [float(v) for v in t.values],
    }


def export_traces(traces, path, fmt=None) -> Path:
    """Write traces as CSV (values space separated, repr precision) or JSON.

    Accepts a list of OrderParamTrace or a ClimateReport.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if isinstance(traces, ClimateReport):
        traces = traces.traces
    rows = [_trace_dict(t) for t in traces]
    if fmt == "json":
        path.write_text(json.dumps({"fields": list(TRACE_FIELDS), "traces": rows}, indent=1))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_FIELDS)
            for r in rows:
                w.writerow([r["observable"], r["source"], r["trajectory_id"], repr(r["stride"]),
                            " ".join(repr(v) for v in r["values"])])
    else:
        raise InvalidInputError(f"unknown export format {fmt!r}")
    return path


def load_traces(path, fmt=None) -> list[OrderParamTrace]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "json":
        rows = json.loads(path.read_text())["traces"]
    elif fmt == "csv":
        with open(path, newline="") as fh:
            rows = [
                dict(r, values=[float(v) for v in r["values"].split()]) for r in csv.DictReader(fh)
            ]
    else:
        raise InvalidInputError(f"unknown export format {fmt!r}")
    return [
        OrderParamTrace(r["observable"], r["source"], float(r["stride"]), np.array(r["values"], dtype=np.float64),
                        int(r["trajectory_id"]))
        for r in rows
    ]


def export_curves(report: ClimateReport, path) -> Path:
    """A(tau) table: tau, then gt/pred columns per observable."""
    path = Path(path)
    names = sorted(report.a_gt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "time"] + [f"{n}_{s}" for n in names for s in ("gt", "pred")])
        for tau in range(report.tau_max + 1):
            row = [tau, repr(tau * report.stride)]
            for n in names:
                row.append(repr(float(report.a_gt[n][tau])))
                row.append(repr(float(report.a_pred[n][tau])) if n in report.a_pred else "")
            w.writerow(row)
    return path


def count_oscillations(trace, hysteresis=0.5) -> int:
    """Number of upward swings through the mean of ``trace``.

    A swing counts once the mean-removed signal climbs from below
    ``-hysteresis * std`` to above ``+hysteresis * std``, so sampling jitter
    riding on the slow oscillation is ignored.
    """
    x = np.asarray(trace, dtype=np.float64)
    x = x - x.mean()
    h = hysteresis * x.std()
    if h == 0:
        return 0
    count, state = 0, 0
    for v in x:
        if v < -h:
            state = -1
        elif v > h:
            if state == -1:
                count += 1
            state = 1
    return count


def relative_l2(pred, truth) -> float:
    pred, truth = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))
