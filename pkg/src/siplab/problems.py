"""Experiment registry: data generators, networks and physics updates per inverse problem.

Every task exposes the same surface so the training loop stays generic:

* ``generate(rng, n) -> Batch`` draws targets ``y*`` (and ground truth ``x*``
  when the data is forward-synthesised);
* ``build_net(seed)`` and ``to_x(net_output)`` map network outputs to ``x``;
* ``loss_t(x, batch)`` is the batch-mean physics objective on the tape;
* ``update(method, x, batch) -> (dx, loss)`` is the physics-side update used
  in place of the backpropagated physics gradient, together with the
  per-example objective at ``x``;
* ``metrics(x, batch) -> (mae_x, rel_acc)``.

Per-example objectives are ``1/2 |P(x) - y*|^2`` summed over components,
except for the fluid task (frequency-weighted marker loss) and the wave
packet (plain sum of squares).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from . import tensor as T
from .optim import normalize_gradient
from .physics import analytic as A
from .physics import fluid as FL
from .physics.field import HeatDomain, PoissonDomain
from .tensor import Tensor


@dataclass
class Batch:
    inputs: np.ndarray  # network input
    target: np.ndarray  # y*
    solution: np.ndarray | None = None  # x*, when known
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.target)

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]
        return Batch(self.inputs[idx], self.target[idx], pick(self.solution),
                     {k: v[idx] for k, v in self.extra.items()})


def concat_batches(batches: list[Batch]) -> Batch:
    cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
    return Batch(cat([b.inputs for b in batches]), cat([b.target for b in batches]),
                 cat([b.solution for b in batches]),
                 {k: cat([b.extra[k] for b in batches]) for k in batches[0].extra})


class Task:
    """Base class; subclasses fill in the physics."""

    name = "task"
    methods: tuple[str, ...] = ("adam", "sgd", "sip")
    default_lr: dict = {}
    sgd_momentum = 0.9

    def lr(self, method: str) -> float:
        if method not in self.default_lr:
            raise ValueError(f"no default learning rate for method {method!r} on {self.name}")
        return self.default_lr[method]

    def to_x(self, out: Tensor) -> Tensor:
        return out

    def loss(self, x, batch) -> np.ndarray:
        """Per-example objective at ``x``."""
        raise NotImplementedError

    @property
    def gd_lr(self) -> float:
        """Step size for the iterative gradient-descent solver."""
        return 1.0

    def gradient_update(self, x, batch) -> np.ndarray:
        """``-dL_i/dx`` for every example, by reverse mode through ``loss_t``."""
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        (g,) = T.grad(self.loss_t(xt, batch), [xt])
        return -len(batch) * g

    def _unsupported(self, method, x=None, batch=None):
        if method == "gd" and x is not None:
            return self.gradient_update(x, batch), self.loss(x, batch)
        raise ValueError(f"method {method!r} is not available for {self.name}; expected one of {self.methods}")

    def mae(self, x, batch) -> float:
        return float(np.mean(np.abs(np.asarray(x) - batch.solution)))

    def metrics(self, x, batch) -> tuple[float, float]:
        return self.mae(x, batch), float("nan")


# -- low-dimensional problems ---------------------------------------------------------

class ToyTask(Task):
    """``P(x) = (x1, x2^2)`` with targets from ``x* in [-1, 1] x [0.2, 1.5]``."""

    name = "toy"
    methods = ("adam", "sgd", "sip", "supervised")
    default_lr = {"adam": 1e-3, "sgd": 1e-3, "sip": 1e-3, "supervised": 1e-3}

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_mlp([2, 32, 32, 2], seed=seed)

    def generate(self, rng, n) -> Batch:
        x = np.stack([rng.uniform(-1, 1, n), rng.uniform(0.2, 1.5, n)], axis=1)
        y = A.toy_forward(x)
        return Batch(y, y, x)

    def loss_t(self, x, batch) -> Tensor:
        return 0.5 * T.sum(T.square(A.toy_forward_t(x) - batch.target)) / len(batch)

    def loss(self, x, batch):
        return A.toy_loss(x, batch.target)

    def update(self, method, x, batch):
        if method == "sip":
            return A.toy_update("newton", x, batch.target, 1.0), self.loss(x, batch)
        return self._unsupported(method, x, batch)

    def mae(self, x, batch) -> float:
        # both signs of x2 solve the problem
        x = np.asarray(x)
        return float(np.mean(np.abs(np.stack([x[:, 0], np.abs(x[:, 1])], 1) - batch.solution)))


@dataclass
class SineTask(Task):
    xi: float = 1.0
    phi: float = 0.0
    gamma: float = 10.0

    name = "sine"
    methods = ("adam", "sgd", "sip")
    sgd_momentum = 0.0  # the 1/xi^2 step size is tuned for plain SGD

    def __post_init__(self):
        self.problem = A.SineProblem(self.xi, self.phi, self.gamma)
        self.default_lr = {"adam": 1e-3, "sip": 1e-3, "sgd": 3e-3 / self.xi ** 2}

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_mlp([2, 32, 64, 32, 2], seed=seed)

    def generate(self, rng, n) -> Batch:
        y = rng.uniform(-1, 1, size=(n, 2))
        return Batch(y, y)

    def loss_t(self, x, batch) -> Tensor:
        return 0.5 * T.sum(T.square(self.problem.forward_t(x) - batch.target)) / len(batch)

    def loss(self, x, batch):
        return self.problem.loss(x, batch.target)

    def update(self, method, x, batch):
        if method == "sip":
            return self.problem.sip_update(x, batch.target, 1.0), self.loss(x, batch)
        return self._unsupported(method, x, batch)

    def metrics(self, x, batch):
        sol = self.problem.nearest_solution(batch.target, x)
        return float(np.mean(np.abs(x - sol))), float(np.mean(self.problem.relative_accuracy(x, batch.target)))


class ExpTask(Task):
    """``P(x) = e^x`` with ``x* ~ U[-12, 0]``."""

    name = "exp"
    methods = ("adam", "sgd", "normalized")
    default_lr = {"adam": 1e-3, "sgd": 1e-2, "normalized": 1e-3}

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_mlp([1, 16, 64, 16, 1], activation="sigmoid", seed=seed)

    def generate(self, rng, n) -> Batch:
        x = rng.uniform(-12.0, 0.0, size=(n, 1))
        y = np.exp(x)
        return Batch(y, y, x)

    def loss_t(self, x, batch) -> Tensor:
        return 0.5 * T.sum(T.square(T.exp(x) - batch.target)) / len(batch)

    def loss(self, x, batch):
        return 0.5 * np.sum((np.exp(x) - batch.target) ** 2, axis=1)

    def update(self, method, x, batch):
        if method == "normalized":
            return -normalize_gradient(A.exp_gradient(x, batch.target)), self.loss(x, batch)
        return self._unsupported(method, x, batch)


@dataclass
class WavePacketTask(Task):
    packet: A.WavePacket = field(default_factory=A.WavePacket)

    name = "wavepacket"
    methods = ("adam", "sgd")
    default_lr = {"adam": 1e-3, "sgd": 1e-5}

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_wavepacket_net(seed)

    def generate(self, rng, n) -> Batch:
        t0, obs = self.packet.sample(rng, n)
        return Batch(obs, obs, t0[:, None])

    def loss_t(self, x, batch) -> Tensor:
        return T.sum(T.square(self.packet.eval_t(x) - batch.target)) / len(batch)

    def loss(self, x, batch) -> np.ndarray:
        return self.packet.objective(np.asarray(x)[:, 0], batch.target)

    def update(self, method, x, batch):
        return self._unsupported(method, x, batch)


# -- grid problems ------------------------------------------------------------------------

def _channels(a: np.ndarray) -> np.ndarray:
    return a[:, None]


def _squeeze(out: Tensor) -> Tensor:
    return T.reshape(out, (out.shape[0],) + out.shape[2:])


@dataclass
class PoissonTask(Task):
    shape: tuple[int, int] = (32, 32)
    modes: int = 8

    name = "poisson"
    methods = ("adam", "sgd", "sip")
    default_lr = {"adam": 1e-3, "sgd": 3e-12, "sip": 1e-3}

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.domain = PoissonDomain(shape=self.shape)

    @property
    def gd_lr(self) -> float:
        # 1 / largest curvature of the loss, whose Hessian is the squared inverse Laplacian
        return self.domain.min_eigenvalue() ** 2

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_unet(4, 16, 1, 1, seed=seed)

    def generate(self, rng, n) -> Batch:
        x = self.domain.sample(rng, n, self.modes)
        y = self.domain.forward(x)
        return Batch(_channels(y), y, x)

    def to_x(self, out):
        return _squeeze(out)

    def loss_t(self, x, batch) -> Tensor:
        return 0.5 * T.sum(T.square(self.domain.forward_t(x) - batch.target)) / len(batch)

    def loss(self, x, batch):
        return 0.5 * np.sum((self.domain.forward(x) - batch.target) ** 2, axis=(1, 2))

    def update(self, method, x, batch):
        y = self.domain.forward(x)
        loss = 0.5 * np.sum((y - batch.target) ** 2, axis=(1, 2))
        if method == "sip":
            return self.domain.sip_update(y, batch.target, 1.0), loss
        if method == "gd":
            return self.domain.gd_update(y, batch.target, 1.0), loss
        return self._unsupported(method, x, batch)


@dataclass
class HeatTask(Task):
    shape: tuple[int, int] = (32, 32)
    eps: float = 0.05
    delta: float = 1.0

    name = "heat"
    methods = ("adam", "sgd", "sip")
    default_lr = {"adam": 1e-3, "sgd": 1e-3, "sip": 1e-3}

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.domain = HeatDomain(shape=self.shape, eps=self.eps, delta=self.delta)

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_unet(4, 16, 1, 1, seed=seed)

    def generate(self, rng, n) -> Batch:
        x = self.domain.sample(rng, n)
        y = self.domain.forward(x)
        return Batch(_channels(y), y, x)

    def to_x(self, out):
        return _squeeze(out)

    def loss_t(self, x, batch) -> Tensor:
        return 0.5 * T.sum(T.square(self.domain.forward_t(x) - batch.target)) / len(batch)

    def loss(self, x, batch):
        return 0.5 * np.sum((self.domain.forward(x) - batch.target) ** 2, axis=(1, 2))

    def update(self, method, x, batch):
        y = self.domain.forward(x)
        loss = 0.5 * np.sum((y - batch.target) ** 2, axis=(1, 2))
        if method == "sip":
            return self.domain.sip_update(y, batch.target, 1.0), loss
        if method == "gd":
            return self.domain.gd_update(y, batch.target, 1.0), loss
        return self._unsupported(method, x, batch)


@dataclass
class FluidTask(Task):
    n: int = 32
    k0: float | None = None

    name = "fluid"
    methods = ("adam", "sgd", "sip")
    default_lr = {"adam": 5e-3, "sgd": 1e-3, "sip": 5e-3}

    def __post_init__(self):
        self.sim = FL.FluidSim(n=self.n)

    def build_net(self, seed: int) -> nets.Network:
        return nets.build_unet(5, 16, 2, 2, seed=seed)

    def generate(self, rng, n) -> Batch:
        m0, v0, mt = FL.generate_fluid_examples(rng, self.sim, n)
        return Batch(np.stack([m0, mt], axis=1), mt, v0, {"m0": m0})

    def to_x(self, out):
        return FL.centers_to_faces(out)

    def loss_t(self, x, batch) -> Tensor:
        final = self.sim.simulate(batch.extra["m0"], x)[-1].marker
        return FL.spectral_loss_t(final, batch.target, self.k0)

    def loss(self, x, batch):
        return FL.spectral_loss(self.sim.final_marker(batch.extra["m0"], x), batch.target, self.k0)

    def update(self, method, x, batch):
        with T.no_grad():
            traj = self.sim.simulate(batch.extra["m0"], x)
        loss = FL.spectral_loss(traj[-1].marker.data, batch.target, self.k0)
        if method == "sip":
            est = FL.sip_estimate(self.sim, batch.extra["m0"], batch.target, x, traj)
            return est - x, loss
        return self._unsupported(method, x, batch)


TASKS = {
    "toy": ToyTask,
    "sine": SineTask,
    "exp": ExpTask,
    "poisson": PoissonTask,
    "heat": HeatTask,
    "fluid": FluidTask,
    "wavepacket": WavePacketTask,
}


def make_task(experiment: str, **options) -> Task:
    if experiment not in TASKS:
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {sorted(TASKS)}")
    return TASKS[experiment](**options)


def generate_batch(experiment: str, seed: int, n: int, **options) -> Batch:
    """Deterministic batch for ``(experiment, seed, n)``."""
    return make_task(experiment, **options).generate(np.random.default_rng(seed), n)
