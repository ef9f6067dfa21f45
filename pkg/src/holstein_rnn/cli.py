"""Command-line pipeline: simulate, gen-data, train, rollout, climate.

Exit codes: 0 success, 2 usage or input error, 3 numerical integrity failure.
Settings resolve as flags > ``--config`` JSON file > built-in defaults, and
every run writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import os
import sys

if "--allow-threads" not in sys.argv:
    # deterministic single-threaded BLAS unless opted out; must precede numpy
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import platform  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict  # noqa: E402
from importlib import metadata  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import analysis, plotting  # noqa: E402
from .datagen import (  # noqa: E402
    Dataset,
    QuenchProtocol,
    compute_scaling_coefficients,
    generate_dataset,
    read_dataset,
    read_metadata,
    write_dataset,
)
from .dynamics import Trajectory, hermiticity_error, total_energy  # noqa: E402
from .errors import (  # noqa: E402
    ConvergenceError,
    DivergenceError,
    HolsteinError,
    IntegrityError,
    InvalidInputError,
    StorageError,
)
from .models import Model, ModelConfig, embed_state, load_checkpoint, save_checkpoint  # noqa: E402
from .tensor.autograd import NonFiniteError  # noqa: E402
from .trainer import (  # noqa: E402
    CurriculumStage,
    TrainingConfig,
    TrainingDivergedError,
    default_curriculum,
    normalized_state_error,
    train,
    write_config_echo,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("holstein_rnn")


class UsageError(HolsteinError):
    pass


DEFAULTS = {
    "simulate": dict(
        L=16, g_initial=0.5, g_final=0.8, dt=0.01, steps=76800, record_stride=64, seed=0, q_noise=None,
        skip=0.0, midpoints=False, out=None, force=False,
    ),
    "gen-data": dict(
        kind="shallow", L=16, trajectories=None, steps=None, seed=0, paper_scale=False, test_fraction=0.1,
        out=None, force=False, jobs=None, batch_size=32,
    ),
    "train": dict(
        variant="standard", dataset=None, out=None, force=False, stages="default", epochs=1, max_windows=None,
        batch_size=16, lr_max=1e-3, lr_min=1e-5, warmup=200, weight_decay=1e-4, clip=1.0, seed=0,
        hidden=12, blocks=2, kernel=3, dropout=0.1, precision="float32", validation_steps=10,
        max_trajectories=None,
    ),
    "rollout": dict(
        model=None, dataset=None, part="test", trajectory=0, start=0, steps=1000, out=None, force=False,
    ),
    "climate": dict(
        model=None, dataset=None, part="test", trajectories=256, steps=1000, tau_max=250, out=None, force=False,
        jobs=None,
    ),
}


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="holstein-rnn", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--allow-threads", action="store_true", help="allow multi-threaded BLAS (not bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON file with settings (flags take precedence)")
        p.add_argument("--out", default=S, help=out_help)
        p.add_argument("--force", action="store_true", default=S, help="allow writing into a non-empty directory")

    p = sub.add_parser("simulate", help="integrate one quench trajectory")
    common(p, "output dataset directory")
    p.add_argument("--L", type=int, default=S)
    p.add_argument("--g-initial", type=float, default=S)
    p.add_argument("--g-final", type=float, default=S)
    p.add_argument("--dt", type=float, default=S)
    p.add_argument("--steps", type=int, default=S, help="integration steps")
    p.add_argument("--record-stride", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--q-noise", type=float, default=S, help="initial Q noise when starting from g=0 (default 1e-4)")
    p.add_argument("--skip", type=float, default=S, help="transient to discard, in time units")
    p.add_argument("--midpoints", action="store_true", default=S)

    p = sub.add_parser("gen-data", help="generate a quench dataset")
    common(p, "output dataset directory")
    p.add_argument("--kind", choices=("shallow", "deep"), default=S)
    p.add_argument("--L", type=int, default=S)
    p.add_argument("--trajectories", type=int, default=S)
    p.add_argument("--steps", type=int, default=S, help="prediction steps per trajectory")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--paper-scale", action="store_true", default=S)
    p.add_argument("--test-fraction", type=float, default=S)
    p.add_argument("--jobs", type=int, default=S, help="worker processes (env HOLSTEIN_JOBS)")
    p.add_argument("--batch-size", type=int, default=S, help="trajectories integrated together")

    p = sub.add_parser("train", help="train a standard or PARC surrogate")
    common(p, "output run directory")
    p.add_argument("--variant", choices=("standard", "parc"), default=S)
    p.add_argument("--dataset", default=S)
    p.add_argument("--stages", default=S, help="'default' or 'N:sigma[:epochs[:max_windows]],...'")
    p.add_argument("--epochs", type=int, default=S, help="epochs per default stage")
    p.add_argument("--max-windows", type=int, default=S, help="cap on windows per epoch")
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr-max", type=float, default=S)
    p.add_argument("--lr-min", type=float, default=S)
    p.add_argument("--warmup", type=int, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--clip", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--blocks", type=int, default=S)
    p.add_argument("--kernel", type=int, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--precision", choices=("float32", "float64"), default=S)
    p.add_argument("--validation-steps", type=int, default=S)
    p.add_argument("--max-trajectories", type=int, default=S, help="load only the first K trajectories")

    p = sub.add_parser("rollout", help="recurrent prediction from a dataset state")
    common(p, "output directory")
    p.add_argument("--model", default=S, help="checkpoint path or 'exact'")
    p.add_argument("--dataset", default=S)
    p.add_argument("--part", choices=("train", "test", "all"), default=S)
    p.add_argument("--trajectory", type=int, default=S, help="index within the chosen part")
    p.add_argument("--start", type=int, default=S, help="snapshot index of the initial state")
    p.add_argument("--steps", type=int, default=S)

    p = sub.add_parser("climate", help="autocorrelation climate comparison")
    common(p, "output directory")
    p.add_argument("--model", default=S, help="checkpoint path or 'exact'")
    p.add_argument("--dataset", default=S)
    p.add_argument("--part", choices=("train", "test", "all"), default=S)
    p.add_argument("--trajectories", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--tau-max", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (in rising precedence)."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "allow_threads")}
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from exc
        if isinstance(file_cfg, dict) and "command" in file_cfg and isinstance(file_cfg.get("config"), dict):
            # a run manifest: replay its resolved settings
            if file_cfg["command"] != args.command:
                raise UsageError(f"manifest {path} is for {file_cfg['command']!r}, not {args.command!r}")
            file_cfg = file_cfg["config"]
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    return cfg


def _jobs(cfg):
    if cfg.get("jobs") is not None:
        return int(cfg["jobs"])
    return int(os.environ.get("HOLSTEIN_JOBS", "1"))


def _prepare_out(cfg) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not cfg.get("force"):
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_dataset(cfg) -> Path:
    if not cfg.get("dataset"):
        raise UsageError("--dataset is required")
    path = Path(cfg["dataset"])
    if not (path / "metadata.json").is_file():
        raise UsageError(f"{path} is not a dataset directory")
    return path


def _write_manifest(out: Path, command, cfg, seeds, inputs, outputs, t0, extra=None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "tool_version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_s": time.time() - t0,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _emit(rows):
    """Delimited key/value summary on stdout."""
    for k, v in rows:
        print(f"{k}\t{v}")


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(cfg, t0):
    L, stride, steps = cfg["L"], cfg["record_stride"], cfg["steps"]
    if L < 4 or L % 2:
        raise UsageError(f"--L must be even and >= 4, got {L}")
    if steps < 0 or stride < 1 or steps % stride:
        raise UsageError("--steps must be a non-negative multiple of --record-stride")
    if cfg["dt"] <= 0:
        raise UsageError("--dt must be positive")
    kind = "deep" if cfg["g_initial"] == 0 else "shallow"
    q_noise = cfg["q_noise"] if cfg["q_noise"] is not None else (1e-4 if kind == "deep" else 0.0)
    protocol = QuenchProtocol(
        kind=kind, g_initial=cfg["g_initial"], g_final=cfg["g_final"], L=L, dt_integration=cfg["dt"],
        prediction_stride=stride, n_prediction_steps=steps // stride, n_trajectories=1,
        transient_skip=cfg["skip"], q_noise_sigma=q_noise, record_midpoints=cfg["midpoints"], seed=cfg["seed"],
        test_fraction=0.0,
    )
    out = _prepare_out(cfg)
    ds = generate_dataset(protocol)
    write_dataset(ds, out)
    tr = ds.trajectories[0]
    params = ds.params
    energies = np.array([total_energy(tr.snapshot(i), params).total for i in range(len(tr))])
    trace = np.real(np.trace(tr.rho, axis1=-2, axis2=-1))
    e_drift = float(np.max(np.abs(energies - energies[0])) / max(abs(energies[0]), 1e-300))
    dr, dq = analysis.order_param_rho(tr.rho), analysis.order_param_q(tr.Q)
    fig = plotting.plot_order_parameters(tr.times, gt={"delta_rho": dr, "delta_q": dq}, path=out / "order_parameters.png")
    rows = [
        ("snapshots", len(tr)),
        ("time_span", tr.times[-1] - tr.times[0]),
        ("trace_drift", float(np.max(np.abs(trace - params.n_electrons)))),
        ("hermiticity_max", hermiticity_error(tr.rho)),
        ("relative_energy_drift", e_drift),
        ("delta_rho_final", float(np.atleast_1d(dr)[-1])),
        ("delta_q_final", float(np.atleast_1d(dq)[-1])),
    ]
    _emit(rows)
    _write_manifest(out, "simulate", cfg, {"seed": cfg["seed"]}, [], list(out.iterdir()) + [fig], t0,
                    {"protocol": asdict(protocol), "diagnostics": dict(rows)})


def cmd_gen_data(cfg, t0):
    if cfg["L"] < 4 or cfg["L"] % 2:
        raise UsageError(f"--L must be even and >= 4, got {cfg['L']}")
    over = {"L": cfg["L"], "seed": cfg["seed"], "test_fraction": cfg["test_fraction"]}
    if cfg["trajectories"] is not None:
        over["n_trajectories"] = cfg["trajectories"]
    if cfg["steps"] is not None:
        over["n_prediction_steps"] = cfg["steps"]
    if cfg["kind"] == "shallow":
        if cfg["paper_scale"]:
            raise UsageError("--paper-scale applies to deep quenches only")
        protocol = QuenchProtocol.shallow(**over)
    else:
        protocol = QuenchProtocol.deep(paper_scale=cfg["paper_scale"], **over)
    out = _prepare_out(cfg)
    jobs = _jobs(cfg)
    ds = generate_dataset(protocol, batch_size=cfg["batch_size"], jobs=jobs)
    write_dataset(ds, out)
    tr = ds.trajectories[0]
    _emit([
        ("trajectories", len(ds)),
        ("snapshots", len(tr)),
        ("midpoints", tr.n_midpoints),
        ("time_span", tr.times[-1] - tr.times[0]),
        ("train", len(ds.split["train"])),
        ("test", len(ds.split["test"])),
    ])
    _write_manifest(out, "gen-data", dict(cfg, jobs=jobs), {"seed": protocol.seed, "trajectory_seeds": protocol.trajectory_seeds()},
                    [], list(out.iterdir()), t0, {"protocol": asdict(protocol)})


def parse_stages(spec, epochs=1, max_windows=None) -> list[CurriculumStage]:
    """'default' or comma-separated 'N:sigma[:epochs[:max_windows]]' items."""
    if isinstance(spec, list):
        return [CurriculumStage(**s) for s in spec]
    if spec in (None, "default"):
        return default_curriculum(epochs, max_windows)
    stages = []
    for item in str(spec).split(","):
        parts = item.strip().split(":")
        if not 1 <= len(parts) <= 4:
            raise UsageError(f"bad stage spec {item!r}; expected N:sigma[:epochs[:max_windows]]")
        try:
            n = int(parts[0])
            sigma = float(parts[1]) if len(parts) > 1 else 0.0
            ep = int(parts[2]) if len(parts) > 2 else epochs
            cap = int(parts[3]) if len(parts) > 3 else max_windows
        except ValueError as exc:
            raise UsageError(f"bad stage spec {item!r}") from exc
        stages.append(CurriculumStage(n, sigma, ep, cap))
    return stages


def cmd_train(cfg, t0):
    data_path = _need_dataset(cfg)
    meta = read_metadata(data_path)
    n = meta["n_trajectories"]
    idx = None if cfg["max_trajectories"] is None else list(range(min(n, cfg["max_trajectories"])))
    ds = read_dataset(data_path, idx)
    if cfg["variant"] == "parc" and not ds.trajectories[0].has_midpoints:
        raise UsageError("PARC training needs a dataset with midpoints (deep quench)")
    tconf = TrainingConfig(
        stages=parse_stages(cfg["stages"], cfg["epochs"], cfg["max_windows"]), batch_size=cfg["batch_size"],
        lr_max=cfg["lr_max"], lr_min=cfg["lr_min"], warmup_steps=cfg["warmup"], weight_decay=cfg["weight_decay"],
        clip_max_norm=cfg["clip"], seed=cfg["seed"], validation_steps=cfg["validation_steps"],
        precision=cfg["precision"],
    )
    out = _prepare_out(cfg)
    scaling = compute_scaling_coefficients(ds.subset("train"), ds.params)
    mconf = ModelConfig(
        L=ds.L, hidden_channels=cfg["hidden"], n_blocks=cfg["blocks"], kernel=cfg["kernel"],
        dropout_p=cfg["dropout"], variant=cfg["variant"], dtype=cfg["precision"], init_seed=cfg["seed"],
    )
    model = Model(mconf, scaling)
    write_config_echo(tconf, out / "training_config.json")

    def progress(row):
        log.info("step %d stage %d loss %.4g lr %.3g", row["step"], row["stage"], row["loss_total"], row["lr"])

    result = train(model, ds, tconf, out / "metrics.csv", out / "checkpoints", progress)
    # timing stays in the manifest so identical runs give identical checkpoint bytes
    extra = {"validation": result.validation, "best_stage": result.best_stage, "delta_t": ds.delta_t,
             "n_trajectories": len(ds), "n_train": len(ds.subset("train"))}
    ckpt = save_checkpoint(result.model, out / "model.ckpt", extra)
    (out / "validation.json").write_text(json.dumps(result.validation, indent=2))
    fig = plotting.plot_training(result.metrics, out / "training.png")
    final = result.metrics[-1] if result.metrics else {}
    _emit([
        ("parameters", model.n_parameters()),
        ("optimizer_steps", len(result.metrics)),
        ("final_loss", final.get("loss_total", float("nan"))),
        ("best_stage", result.best_stage),
        ("best_validation_error", min((v["validation_error"] for v in result.validation), default=float("nan"))),
        ("cpu_seconds", round(result.wall_clock, 2)),
        ("checkpoint", ckpt),
    ])
    _write_manifest(out, "train", cfg, {"seed": cfg["seed"]}, [data_path], list(out.rglob("*")) + [fig], t0,
                    {"model": asdict(mconf), "training": tconf.to_dict(), "scaling": scaling.as_dict(),
                     "cpu_seconds": result.wall_clock})


def _load_model(spec, ds: Dataset):
    if spec is None:
        raise UsageError("--model is required (checkpoint path or 'exact')")
    if spec == "exact":
        return analysis.ExactModel.for_dataset(ds)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    model, _ = load_checkpoint(path)
    if model.config.L != ds.L:
        raise UsageError(f"model built for L={model.config.L}, dataset has L={ds.L}")
    return model


def _part(ds: Dataset, part):
    trajs = ds.trajectories if part == "all" else ds.subset(part)
    if not trajs:
        raise UsageError(f"dataset has no {part!r} trajectories")
    return trajs


def cmd_rollout(cfg, t0):
    data_path = _need_dataset(cfg)
    ds = read_dataset(data_path)
    model = _load_model(cfg["model"], ds)
    trajs = _part(ds, cfg["part"])
    if not 0 <= cfg["trajectory"] < len(trajs):
        raise UsageError(f"--trajectory must lie in [0, {len(trajs) - 1}]")
    tr = trajs[cfg["trajectory"]]
    if not 0 <= cfg["start"] < len(tr) or cfg["steps"] < 0:
        raise UsageError(f"--start must lie in [0, {len(tr) - 1}] and --steps be non-negative")
    out = _prepare_out(cfg)
    s = cfg["start"]
    Qs, Ps, rhos = analysis.predict_rollouts(model, tr.Q[s : s + 1], tr.P[s : s + 1], tr.rho[s : s + 1], cfg["steps"])
    times = tr.times[s] + ds.delta_t * np.arange(cfg["steps"] + 1)
    pred = Trajectory(Qs[0], Ps[0], rhos[0], times, offset=tr.offset, seed=tr.seed)
    proto = QuenchProtocol.from_dict(dict(asdict(ds.protocol), n_trajectories=1, n_prediction_steps=cfg["steps"],
                                          record_midpoints=False, test_fraction=0.0))
    write_dataset(Dataset(proto, [pred], {"train": [0], "test": []}), out / "prediction",
                  "simulation" if isinstance(model, analysis.ExactModel) else "predicted")
    n_gt = min(len(tr) - s, cfg["steps"] + 1)
    traces = analysis.traces_from_trajectory(pred, ds.delta_t, "predicted", cfg["trajectory"])
    gt_tr = Trajectory(tr.Q[s : s + n_gt], tr.P[s : s + n_gt], tr.rho[s : s + n_gt], times[:n_gt])
    traces += analysis.traces_from_trajectory(gt_tr, ds.delta_t, "ground_truth", cfg["trajectory"])
    analysis.export_traces(traces, out / "order_parameters.csv")
    by = {(t.observable, t.source): t.values for t in traces}
    figs = [plotting.plot_order_parameters(
        times,
        gt={"delta_rho": by["delta_rho", "ground_truth"], "delta_q": by["delta_q", "ground_truth"]},
        pred={"delta_rho": by["delta_rho", "predicted"], "delta_q": by["delta_q", "predicted"]},
        path=out / "order_parameters.png",
    )]
    rows = [("predicted_states", len(pred)), ("ground_truth_states", n_gt)]
    if isinstance(model, Model) and n_gt > 1:
        err = normalized_state_error(
            embed_state(pred.rho[1:n_gt], pred.Q[1:n_gt], pred.P[1:n_gt]),
            embed_state(gt_tr.rho[1:], gt_tr.Q[1:], gt_tr.P[1:]), model.scaling,
        )
        np.savetxt(out / "state_error.csv", np.column_stack([np.arange(1, n_gt), err]), delimiter=",",
                   header="step,normalized_state_error", comments="")
        figs.append(plotting.plot_errors(err, out / "state_error.png"))
        rows.append(("max_error_first_10", float(err[:10].max())))
    rows.append(("delta_rho_rel_l2", analysis.relative_l2(by["delta_rho", "predicted"][:n_gt], by["delta_rho", "ground_truth"])))
    _emit(rows)
    _write_manifest(out, "rollout", cfg, {}, [data_path, cfg["model"]], list(out.rglob("*")), t0)


def cmd_climate(cfg, t0):
    if cfg["tau_max"] >= cfg["steps"]:
        raise UsageError("--tau-max must be smaller than --steps")
    if cfg["tau_max"] < 0 or cfg["trajectories"] < 1:
        raise UsageError("--tau-max must be non-negative and --trajectories positive")
    data_path = _need_dataset(cfg)
    ds = read_dataset(data_path)
    model = _load_model(cfg["model"], ds)
    trajs = _part(ds, cfg["part"])
    if len(trajs[0]) < cfg["steps"] + 1:
        raise UsageError(f"dataset trajectories hold {len(trajs[0])} snapshots, need {cfg['steps'] + 1}")
    out = _prepare_out(cfg)
    view = ds if cfg["part"] != "all" else Dataset(ds.protocol, ds.trajectories, {"train": [], "test": list(range(len(ds)))})
    rep = analysis.climate_report(view, model, cfg["trajectories"], cfg["steps"], cfg["tau_max"],
                                  part="test" if cfg["part"] == "all" else cfg["part"])
    (out / "climate.json").write_text(json.dumps(rep.to_dict(), indent=2))
    analysis.export_curves(rep, out / "autocorrelation.csv")
    analysis.export_traces(rep, out / "traces.csv")
    plotting.plot_autocorrelation(rep, out / "autocorrelation.png")
    _emit([
        ("ground_truth_trajectories", rep.n_ground_truth),
        ("predicted_trajectories", rep.n_predicted),
        ("diverged", rep.n_diverged),
        ("max_deviation_delta_rho", rep.max_deviation["delta_rho"]),
        ("max_deviation_delta_q", rep.max_deviation["delta_q"]),
    ])
    _write_manifest(out, "climate", cfg, {}, [data_path, cfg["model"]], list(out.rglob("*")), t0,
                    {"max_deviation": rep.max_deviation})


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "climate": cmd_climate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg, t0)
    except (UsageError, InvalidInputError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, TrainingDivergedError) as exc:
        step = getattr(exc, "step", None)
        print(f"{parser.prog} {args.command}: numerical divergence at step {step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, ConvergenceError, NonFiniteError, StorageError) as exc:
        print(f"{parser.prog} {args.command}: integrity failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
