"""Network training schemes.

* SIP: ``x0 = NN(y*)``, ``x~ = x0 + U(x0)`` from a physics-side update, and a
  first-order step on ``1/2 |x0 - stop_gradient(x~)|^2``.  The same step with
  ``U = -sign(dL/dx)`` gives the normalized-gradient method.
* end-to-end: a first-order step on ``L(P(NN(y*)))`` differentiated through
  the tape.
* supervised: a first-order step on ``1/2 |NN(y*) - x_label|^2``.
* strategy S: repeated inner gradient descent towards a fixed ``x~`` until a
  guaranteed share of the solver's loss decrease is realised.

All losses are batch means of per-example sums.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import Network
from .optim import OptState, make_optimizer, sgd
from .problems import Batch, Task, concat_batches, make_task
from .tensor import Tensor

METHODS = ("sip", "adam", "sgd", "normalized", "supervised")


@dataclass
class TrainConfig:
    """Everything that determines a run; equal configs give identical records except for wall-clock time."""

    experiment: str
    method: str = "sip"
    iterations: int = 100
    batch: int = 32
    lr: float | None = None
    optimizer: str | None = None  # network optimizer; default sgd for "sgd", adam otherwise
    seed: int = 0
    dataset_size: int = 0  # 0: fresh examples every iteration
    record_every: int = 1
    solver_steps: int = 1  # inverse-solver iterations m folded into one SIP update
    options: dict = field(default_factory=dict)  # task options such as xi, phi, shape

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("iterations", "batch", "record_every", "solver_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dataset_size < 0:
            raise ValueError("dataset_size must be non-negative")

    @property
    def optimizer_name(self) -> str:
        return self.optimizer or ("sgd" if self.method == "sgd" else "adam")


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    wall_s: float
    loss: float
    mae_x: float
    rel_acc: float = float("nan")


def _predict(net: Network, task, inputs) -> tuple[Tensor, list[Tensor]]:
    out, leaves = net.forward_with_leaves(inputs)
    return task.to_x(out), leaves


def _apply(net: Network, opt: OptState, x: Tensor, leaves, objective: Tensor) -> None:
    grads = T.grad(objective, leaves)
    opt.apply(net.theta, net.flatten(grads))


def proxy_loss(x: Tensor, x_tilde: np.ndarray) -> Tensor:
    """``1/2 |x - stop_gradient(x~)|^2`` averaged over the batch."""
    return 0.5 * T.sum(T.square(x - T.stop_gradient(x_tilde))) / x.shape[0]


def sip_step(net: Network, opt: OptState, task, batch: Batch, method: str = "sip",
             update: Callable | None = None, steps: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """One SIP iteration; returns the prediction ``x0`` and the per-example physics loss at ``x0``.

    ``update(x, batch) -> (dx, loss)`` overrides the task's physics update.  With ``steps > 1``
    the solver is iterated and ``x~ = x0 + dx_0 + ... + dx_(steps-1)``.
    """
    update = update or (lambda x, b: task.update(method, x, b))
    x0, leaves = _predict(net, task, batch.inputs)
    x_tilde = x0.data.copy()
    for k in range(steps):
        dx, step_loss = update(x_tilde, batch)
        dx = np.asarray(dx, dtype=np.float64)
        if dx.shape != x0.shape:
            raise ValueError(f"{task.name} update has shape {dx.shape}, prediction has {x0.shape}")
        if not np.all(np.isfinite(dx)):
            raise FloatingPointError(f"non-finite {method} update from the {task.name} physics")
        if k == 0:
            loss = np.asarray(step_loss)
        x_tilde = x_tilde + dx
    _apply(net, opt, x0, leaves, proxy_loss(x0, x_tilde))
    return x0.data, loss


def e2e_step(net: Network, opt: OptState, task, batch: Batch) -> tuple[np.ndarray, float]:
    """One end-to-end iteration; returns ``x0`` and the batch-mean loss that was differentiated."""
    x0, leaves = _predict(net, task, batch.inputs)
    loss = task.loss_t(x0, batch)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite end-to-end loss on {task.name}")
    _apply(net, opt, x0, leaves, loss)
    return x0.data, float(loss.data)


def supervised_step(net: Network, opt: OptState, inputs, labels, to_x: Callable = lambda t: t) -> float:
    """One step on ``1/2 |NN(y*) - x_label|^2`` (batch mean); returns the loss before the step."""
    x0, leaves = net.forward_with_leaves(inputs)
    x0 = to_x(x0)
    loss = proxy_loss(x0, np.asarray(labels))
    _apply(net, opt, x0, leaves, loss)
    return float(loss.data)


class _Data:
    """On-the-fly batches, or a fixed dataset drawn once and cycled in shuffled epochs."""

    def __init__(self, task, cfg: TrainConfig):
        self.task, self.cfg = task, cfg
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.pool = None
        if cfg.dataset_size:
            self.pool = task.generate(self.rng, cfg.dataset_size)
            self.order = np.array([], dtype=int)

    def next(self) -> Batch:
        if self.pool is None:
            return self.task.generate(self.rng, self.cfg.batch)
        picks = []
        need = self.cfg.batch
        while need:
            if not len(self.order):
                self.order = self.rng.permutation(self.cfg.dataset_size)
            take, self.order = self.order[:need], self.order[need:]
            picks.append(self.pool.subset(take))
            need -= len(take)
        return picks[0] if len(picks) == 1 else concat_batches(picks)


def train(cfg: TrainConfig, task: Task | None = None, net: Network | None = None,
          on_record: Callable[[TrainRecord], None] | None = None) -> tuple[Network, list[TrainRecord]]:
    """Run ``cfg.iterations`` steps; metrics are evaluated on each step's pre-update prediction."""
    task = task or make_task(cfg.experiment, **cfg.options)
    if cfg.method not in task.methods:
        raise ValueError(f"method {cfg.method!r} is not available for {task.name}; expected one of {task.methods}")
    net = net or task.build_net(cfg.seed)
    net.train()
    lr = cfg.lr if cfg.lr is not None else task.lr(cfg.method)
    opt = sgd(lr, task.sgd_momentum) if cfg.optimizer_name == "sgd" else make_optimizer(cfg.optimizer_name, lr)
    data = _Data(task, cfg)
    records: list[TrainRecord] = []
    elapsed = 0.0
    for it in range(1, cfg.iterations + 1):
        start = time.perf_counter()
        batch = data.next()
        if cfg.method in ("sip", "normalized"):
            x0, loss = sip_step(net, opt, task, batch, cfg.method, steps=cfg.solver_steps)
            loss = float(np.mean(loss))
        elif cfg.method == "supervised":
            if batch.solution is None:
                raise ValueError(f"{task.name} provides no labels for supervised training")
            supervised_step(net, opt, batch.inputs, batch.solution, task.to_x)
            with T.no_grad():
                x0 = task.to_x(net.forward(batch.inputs)).data
            loss = float(np.mean(task.loss(x0, batch)))
        else:
            x0, loss = e2e_step(net, opt, task, batch)
        elapsed += time.perf_counter() - start
        if it % cfg.record_every == 0 or it == cfg.iterations:
            mae, rel = task.metrics(x0, batch) if (batch.solution is not None or task.name == "sine") \
                else (float("nan"), float("nan"))
            rec = TrainRecord(it, elapsed, loss, mae, rel)
            records.append(rec)
            if on_record:
                on_record(rec)
    return net, records


def iterative_solve(task, batch: Batch, method: str, iterations: int, lr: float = 1.0,
                    x_init: np.ndarray | None = None, target_mae: float | None = None,
                    on_record: Callable[[TrainRecord], None] | None = None) -> tuple[np.ndarray, list[TrainRecord]]:
    """Network-free solver ``x <- x + lr * U(x)`` on a fixed batch, starting from zeros.

    One record per iteration describes the iterate after the update.  Stops early once the
    solution MAE reaches ``target_mae``.
    """
    x = np.zeros_like(batch.solution) if x_init is None else np.array(x_init, dtype=np.float64)
    records: list[TrainRecord] = []
    elapsed = 0.0
    for it in range(1, iterations + 1):
        start = time.perf_counter()
        dx, _ = task.update(method, x, batch)
        x = x + lr * np.asarray(dx)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"iterative {method} solver on {task.name} diverged at iteration {it}")
        elapsed += time.perf_counter() - start
        mae, rel = task.metrics(x, batch)
        rec = TrainRecord(it, elapsed, float(np.mean(task.loss(x, batch))), mae, rel)
        records.append(rec)
        if on_record:
            on_record(rec)
        if target_mae is not None and mae <= target_mae:
            break
    return x, records


# -- strategy S -------------------------------------------------------------------------------

@dataclass
class StrategyResult:
    losses: list[float]  # L(NN) at the start of each outer step, then the final value
    inner_steps: list[int]
    converged: bool
    exhausted: bool  # an inner loop hit its cap before reaching the required decrease


def strategy_s(net: Network, inputs, loss_fn: Callable[[np.ndarray], float],
               update_fn: Callable[[np.ndarray], np.ndarray], loss_star: float, tau: float,
               lr: float = 1e-2, tol: float = 1e-8, inner_cap: int = 10000, outer_cap: int = 100,
               to_x: Callable = lambda t: t) -> StrategyResult:
    """Outer loop: ``x~ = x_n + U(x_n)`` once; inner loop: plain gradient descent on
    ``1/2 |NN - x~|^2`` until ``L(x_n) - L(NN) >= tau/2 * (L(x_n) - L*)``.
    Stops once ``L(NN) - L* < tol``.  ``tau = 2`` asks each inner loop to reach the
    solution loss itself (to within ``tol/2``).
    """
    def predict():
        with T.no_grad():
            return to_x(net.forward(inputs, mode="eval")).data

    x = predict()
    losses, inner = [loss_fn(x)], []
    exhausted = False
    for _ in range(outer_cap):
        gap = losses[-1] - loss_star
        if gap < tol:
            return StrategyResult(losses, inner, True, exhausted)
        x_tilde = x + update_fn(x)
        target = max(losses[-1] - 0.5 * tau * gap, loss_star + 0.5 * tol)
        steps = 0
        while steps < inner_cap:
            out, leaves = net.forward_with_leaves(inputs, mode="eval")
            xt = to_x(out)
            # plain gradient descent on the summed proxy
            grads = T.grad(0.5 * T.sum(T.square(xt - T.stop_gradient(x_tilde))), leaves)
            net.theta -= lr * net.flatten(grads)
            steps += 1
            if loss_fn(predict()) <= target:
                break
        else:
            exhausted = True
        inner.append(steps)
        x = predict()
        losses.append(loss_fn(x))
        if exhausted:
            break
    return StrategyResult(losses, inner, losses[-1] - loss_star < tol, exhausted)


def estimate_tau(loss_fn: Callable, update_fn: Callable, xs, loss_star: float) -> float:
    """Smallest observed share ``(L(x) - L(x + U)) / (L(x) - L*)`` over sample points ``xs``."""
    shares = []
    for x in xs:
        gap = loss_fn(x) - loss_star
        if gap > 0:
            shares.append((loss_fn(x) - loss_fn(x + update_fn(x))) / gap)
    if not shares:
        raise ValueError("all sample points are already at the solution loss")
    return float(min(shares))
