"""Command line entry point: ``siplab run | sweep | timing``.

Exit codes: 0 success, 2 usage error (raised before any compute), 1 runtime failure.
A JSON ``--config`` file holds a flat mapping with the same keys as the long flags
(dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import problems
from ..physics import analytic as A
from ..train import TrainConfig, TrainRecord, iterative_solve, train
from . import report

EXPERIMENTS = ("toy", "sine-sweep", "exp", "poisson", "heat", "fluid", "wavepacket")
TOY_TRAJECTORIES = ("gd", "newton", "perfect-inverse")
SWEEP_AXES = ("xi", "phi", "lr", "batch")
DEFAULT_XI = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
TOY_START, TOY_TARGET = (1.0, 1.5), (0.0, 0.25)
# task options that may be set from the command line
TASK_OPTIONS = {"sine-sweep": ("xi", "phi", "gamma"), "poisson": ("shape",), "heat": ("shape", "eps", "delta"),
                "fluid": ("n", "k0")}


class UsageError(ValueError):
    pass


def _task_name(experiment: str) -> str:
    return "sine" if experiment == "sine-sweep" else experiment


def allowed_methods(experiment: str) -> tuple[str, ...]:
    if experiment == "toy":
        return TOY_TRAJECTORIES + problems.ToyTask.methods
    methods = problems.TASKS[_task_name(experiment)].methods
    extra = {"wavepacket": ("lbfgs",), "poisson": ("gd-iterative",), "heat": ("gd-iterative",),
             "fluid": ("gd-iterative",)}.get(experiment, ())
    return tuple(methods) + extra


@dataclass
class ExperimentSpec:
    experiment: str
    methods: list[str]
    out: Path
    seed: int = 0
    iterations: int | None = None
    batch: int | None = None
    lr: float | None = None
    record_every: int = 1
    dataset_size: int = 0
    solver_steps: int = 1
    svg: bool = False
    window: int = 64
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.methods:
            raise UsageError("no methods given")
        allowed = allowed_methods(self.experiment)
        for m in self.methods:
            if m not in allowed:
                raise UsageError(f"method {m!r} is not available for {self.experiment}; expected one of {allowed}")
        for key in self.options:
            if key not in TASK_OPTIONS.get(self.experiment, ()):
                raise UsageError(f"option {key!r} does not apply to {self.experiment}")
        for name in ("iterations", "batch"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise UsageError(f"--{name} must be positive")
        if self.record_every < 1 or self.solver_steps < 1 or self.dataset_size < 0:
            raise UsageError("record-every and solver-steps must be positive, dataset-size non-negative")


# defaults per experiment: (iterations, batch)
BUDGETS = {"toy": (1000, 32), "sine-sweep": (5000, 100), "exp": (10000, 100), "poisson": (2000, 16),
           "heat": (2000, 32), "fluid": (1000, 16), "wavepacket": (500, 100)}


def _csv_path(spec: ExperimentSpec, method: str, tag: str = "") -> Path:
    return spec.out / f"{spec.experiment}{tag}_{method}_seed{spec.seed}.csv"


def _train_one(spec: ExperimentSpec, method: str, options: dict, tag: str = "") -> list[TrainRecord]:
    iters, batch = BUDGETS[spec.experiment]
    cfg = TrainConfig(_task_name(spec.experiment), method, iterations=spec.iterations or iters,
                      batch=spec.batch or batch, lr=spec.lr, seed=spec.seed, dataset_size=spec.dataset_size,
                      record_every=spec.record_every, solver_steps=spec.solver_steps, options=options)
    records: list[TrainRecord] = []
    with report.CsvLog(_csv_path(spec, method, tag)) as log:
        def keep(r):
            records.append(r)
            log.write(r)
        net, _ = train(cfg, on_record=keep)
    net.save(spec.out / f"{spec.experiment}{tag}_{method}_seed{spec.seed}.ckpt")
    return records


def _toy_trajectory(spec: ExperimentSpec, method: str) -> list[TrainRecord]:
    x0, target = np.array(TOY_START), np.array(TOY_TARGET)
    steps = spec.iterations or 10
    lr = spec.lr if spec.lr is not None else 0.1
    solution = A.toy_inverse(target, x0)
    traj = A.toy_trajectory(method, x0, target, lr, steps)
    recs = []
    with report.CsvLog(_csv_path(spec, method), extra_columns=("x1", "x2")) as log:
        for it, x in enumerate(traj):
            r = TrainRecord(it, 0.0, float(A.toy_loss(x, target)), float(np.mean(np.abs(x - solution))))
            log.write(r, x)
            recs.append(r)
    return recs


def _lbfgs_baseline(spec: ExperimentSpec) -> list[TrainRecord]:
    """Per-example L-BFGS from the centre of the admissible range on a seeded held-out set."""
    task = problems.WavePacketTask()
    _, n = BUDGETS["wavepacket"]
    batch = task.generate(np.random.default_rng([spec.seed, 2]), spec.batch or n)
    recs, elapsed = [], 0.0
    budgets = [b for b in (1, 2, 5, 10, 20, 50, 100, 200) if b <= (spec.iterations or 100)]
    with report.CsvLog(_csv_path(spec, "lbfgs")) as log:
        for b in budgets:
            start = time.perf_counter()
            t0 = task.packet.lbfgs_fit(batch.target, max_iter=b)[:, None]
            elapsed = time.perf_counter() - start
            r = TrainRecord(b, elapsed, float(np.mean(task.loss(t0, batch))), task.mae(t0, batch))
            log.write(r)
            recs.append(r)
    return recs


def _gd_iterative(spec: ExperimentSpec, options: dict) -> list[TrainRecord]:
    task = problems.make_task(_task_name(spec.experiment), **options)
    batch = task.generate(np.random.default_rng([spec.seed, 3]), spec.batch or BUDGETS[spec.experiment][1])
    with report.CsvLog(_csv_path(spec, "gd-iterative")) as log:
        _, recs = iterative_solve(task, batch, "gd", spec.iterations or 1000,
                                  lr=spec.lr if spec.lr is not None else task.gd_lr, on_record=log.write)
    return recs


def run(spec: ExperimentSpec) -> dict[str, list[TrainRecord]]:
    """Run every method of ``spec``; returns the recorded curves."""
    spec.validate()
    spec.out.mkdir(parents=True, exist_ok=True)
    if spec.experiment == "sine-sweep":
        values = spec.options.get("xi")
        values = list(values) if isinstance(values, (list, tuple)) else [values] if values else list(DEFAULT_XI)
        sweep(spec, "xi", values)
        return {}
    curves = {}
    for m in spec.methods:
        if spec.experiment == "toy" and m in TOY_TRAJECTORIES:
            curves[m] = _toy_trajectory(spec, m)
        elif m == "lbfgs":
            curves[m] = _lbfgs_baseline(spec)
        elif m == "gd-iterative":
            curves[m] = _gd_iterative(spec, spec.options)
        else:
            opts = {k: v for k, v in spec.options.items() if k in TASK_OPTIONS.get(spec.experiment, ())}
            curves[m] = _train_one(spec, m, opts)
    metric = "loss" if spec.experiment == "toy" else "mae_x"
    table = report.summary_table(curves, metric, spec.window)
    (spec.out / f"{spec.experiment}_summary_seed{spec.seed}.md").write_text(table, encoding="utf-8")
    print(table, end="")
    if spec.svg:
        svg = report.learning_curve_svg(curves, metric, spec.window, spec.experiment)
        (spec.out / f"{spec.experiment}_seed{spec.seed}.svg").write_text(svg, encoding="utf-8")
    return curves


def sweep(spec: ExperimentSpec, axis: str, values: list) -> Path:
    """One run per value; the table holds the mean of the last 10% of recorded errors."""
    spec.validate()
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if axis in ("xi", "phi") and spec.experiment != "sine-sweep":
        raise UsageError(f"axis {axis!r} only applies to sine-sweep")
    if not values:
        raise UsageError("no sweep values")
    spec.out.mkdir(parents=True, exist_ok=True)
    metric = "rel_acc" if spec.experiment == "sine-sweep" else "mae_x"
    rows = []
    for v in values:
        point = ExperimentSpec(**{**spec.__dict__, "options": dict(spec.options)})
        if axis in ("xi", "phi"):
            point.options[axis] = float(v)
        elif axis == "lr":
            point.lr = float(v)
        else:
            point.batch = int(v)
        tag = f"_{axis}{v:g}"
        for m in spec.methods:
            recs = _train_one(point, m, {k: val for k, val in point.options.items()
                                         if k in TASK_OPTIONS.get(spec.experiment, ())}, tag)
            rows.append((v, m, report.last_fraction_mean([getattr(r, metric) for r in recs])))
    path = spec.out / f"{spec.experiment}_sweep_{axis}_seed{spec.seed}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"{axis},method,{metric}_last10\n")
        for v, m, val in rows:
            fh.write(f"{v!r},{m},{val!r}\n")
    for v, m, val in rows:
        print(f"{axis}={v:g} {m}: {metric} {val:.6g}")
    return path


# -- timing ----------------------------------------------------------------------------------

def timing_report(experiment: str, checkpoint, batch: int = 64, seed: int = 0, max_iter: int = 20,
                  gd_max_iter: int = 100, options: dict | None = None) -> dict:
    """Per-example cost of network inference against iterative solvers reaching the same MAE.

    Iteration counts are seeded and deterministic; times are measured.
    """
    if experiment not in ("poisson", "heat", "fluid"):
        raise UsageError(f"timing supports poisson, heat and fluid, not {experiment!r}")
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise UsageError(f"missing checkpoint {checkpoint}")
    task = problems.make_task(experiment, **(options or {}))
    net = task.build_net(0).load(checkpoint)
    data = task.generate(np.random.default_rng([seed, 4]), batch)
    start = time.perf_counter()
    x_net = task.to_x(net.forward(data.inputs)).data
    net_time = (time.perf_counter() - start) / batch
    target = task.mae(x_net, data)
    result = {"experiment": experiment, "batch": batch, "network_ms": 1e3 * net_time, "network_mae": target}
    for name, method, lr, cap in (("sip", "sip", 1.0, max_iter), ("gd", "gd", task.gd_lr, gd_max_iter)):
        try:
            _, recs = iterative_solve(task, data, method, cap, lr=lr, target_mae=target)
            reached = recs[-1].mae_x <= target
            result[name] = {"iterations": len(recs), "ms": 1e3 * recs[-1].wall_s / batch, "mae": recs[-1].mae_x,
                            "converged": reached}
        except FloatingPointError:
            result[name] = {"iterations": cap, "ms": float("nan"), "mae": float("nan"), "converged": False}
    return result


def format_timing(res: dict) -> str:
    lines = [f"| {res['experiment']} (batch {res['batch']}) | per example | iterations | MAE |",
             "|---|---|---|---|",
             f"| network | {res['network_ms']:.4g} ms | - | {res['network_mae']:.4g} |"]
    for name in ("sip", "gd"):
        r = res[name]
        its = f"{r['iterations']}" if r["converged"] else f"{r['iterations']} (not converged)"
        lines.append(f"| {name} solver | {r['ms']:.4g} ms | {its} | {r['mae']:.4g} |")
    return "\n".join(lines) + "\n"


# -- argument handling ---------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siplab", description="SIP training experiments")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--experiment")
    common.add_argument("--method", help="comma separated list")
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file with flag values")
    common.add_argument("--out")
    common.add_argument("--iterations", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--record-every", type=int)
    common.add_argument("--dataset-size", type=int)
    common.add_argument("--solver-steps", type=int)
    common.add_argument("--svg", action="store_true", default=None)
    common.add_argument("--window", type=int)
    for opt in ("xi", "phi", "gamma", "eps", "delta", "k0"):
        common.add_argument(f"--{opt}", type=float)
    common.add_argument("--n", type=int, help="fluid grid size")
    common.add_argument("--shape", help="grid shape such as 32x32")
    sub.add_parser("run", parents=[common], help="train the listed methods")
    sw = sub.add_parser("sweep", parents=[common], help="one run per value of an axis")
    sw.add_argument("--axis")
    sw.add_argument("--values", help="comma separated list")
    tm = sub.add_parser("timing", parents=[common], help="network against iterative solvers")
    tm.add_argument("--checkpoint")
    tm.add_argument("--max-iter", type=int)
    tm.add_argument("--gd-max-iter", type=int)
    return p


def _merged(args: argparse.Namespace) -> dict:
    vals = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        vals.update({k.replace("-", "_"): v for k, v in raw.items()})
    vals.update({k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")})
    return vals


def _spec(vals: dict) -> ExperimentSpec:
    if "experiment" not in vals:
        raise UsageError("--experiment is required")
    exp = vals["experiment"]
    methods = vals.get("method", "sip")
    methods = methods.split(",") if isinstance(methods, str) else list(methods)
    if exp == "toy" and "method" not in vals:
        methods = list(TOY_TRAJECTORIES)
    options = {}
    for key in ("xi", "phi", "gamma", "eps", "delta", "k0", "n", "shape"):
        if key in vals:
            v = vals[key]
            if key == "shape" and isinstance(v, str):
                try:
                    v = tuple(int(s) for s in v.lower().split("x"))
                except ValueError as e:
                    raise UsageError(f"bad --shape {v!r}") from e
            options[key] = v
    return ExperimentSpec(experiment=exp, methods=[m.strip() for m in methods], out=Path(vals.get("out", "runs")),
                          seed=int(vals.get("seed", 0)), iterations=vals.get("iterations"), batch=vals.get("batch"),
                          lr=vals.get("lr"), record_every=int(vals.get("record_every", 1)),
                          dataset_size=int(vals.get("dataset_size", 0)), solver_steps=int(vals.get("solver_steps", 1)),
                          svg=bool(vals.get("svg", False)), window=int(vals.get("window", 64)), options=options)


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        vals = _merged(args)
        if args.command == "timing":
            if "checkpoint" not in vals:
                raise UsageError("--checkpoint is required")
            spec = _spec(vals)
            res = timing_report(spec.experiment, vals["checkpoint"], spec.batch or 64, spec.seed,
                                int(vals.get("max_iter", 20)), int(vals.get("gd_max_iter", 100)), spec.options)
            print(format_timing(res), end="")
            return 0
        spec = _spec(vals)
        spec.validate()
        if args.command == "sweep":
            axis = vals.get("axis")
            raw = vals.get("values")
            if axis is None or raw is None:
                raise UsageError("sweep needs --axis and --values")
            values = raw.split(",") if isinstance(raw, str) else list(raw)
            try:
                values = [float(v) for v in values]
            except ValueError as e:
                raise UsageError(f"bad --values {raw!r}") from e
            if spec.experiment == "sine-sweep" and axis != "xi":
                spec.options.setdefault("xi", 1.0)
            spec.options.pop(axis, None)
            sweep(spec, axis, values)
        else:
            run(spec)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
