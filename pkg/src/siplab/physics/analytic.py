"""Low-dimensional forward processes with closed-form derivatives.

All functions are batched over a leading example axis.  Each problem offers
a numpy forward, analytic gradient (and Hessian where needed) of
``L(x) = 1/2 |P(x) - y*|^2``, the update rules used as physics-side updates,
and a tape version of the forward for end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..optim import EIG_FLOOR, newton_step, saddle_free_newton_step
from ..tensor import Tensor, as_tensor


def _pairs(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ValueError(f"expected a trailing axis of length 2, got shape {x.shape}")
    return x


# -- toy problem: P(x) = (x1, x2^2) -------------------------------------------

def toy_forward(x) -> np.ndarray:
    x = _pairs(x)
    return np.stack([x[..., 0], x[..., 1] ** 2], axis=-1)


def toy_forward_t(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return T.stack([x[:, 0], x[:, 1] * x[:, 1]], axis=1)


def toy_loss(x, y) -> np.ndarray:
    return 0.5 * np.sum((toy_forward(x) - y) ** 2, axis=-1)


def toy_gradient(x, y) -> np.ndarray:
    x, y = _pairs(x), _pairs(y)
    return np.stack([x[..., 0] - y[..., 0], 2 * x[..., 1] * (x[..., 1] ** 2 - y[..., 1])], axis=-1)


def toy_hessian(x, y) -> np.ndarray:
    x, y = _pairs(x), _pairs(y)
    h = np.zeros(x.shape + (2,))
    h[..., 0, 0] = 1.0
    h[..., 1, 1] = 6 * x[..., 1] ** 2 - 2 * y[..., 1]
    return h


def toy_inverse(y, x) -> np.ndarray:
    """Exact preimage of ``y`` taking the square root on the side of ``x2`` (positive when ``x2 == 0``)."""
    x, y = _pairs(x), _pairs(y)
    if np.any(y[..., 1] < 0):
        raise ValueError("toy inverse needs a non-negative second target component")
    sign = np.where(x[..., 1] < 0, -1.0, 1.0)
    return np.stack([y[..., 0], sign * np.sqrt(y[..., 1])], axis=-1)


def toy_update(method: str, x, y, lr: float) -> np.ndarray:
    """Step ``dx`` for ``gd``, ``newton`` or ``perfect-inverse``."""
    if method == "gd":
        return -lr * toy_gradient(x, y)
    if method == "newton":
        return newton_step(toy_gradient(x, y), toy_hessian(x, y), lr, EIG_FLOOR)
    if method == "perfect-inverse":
        return lr * (toy_inverse(y, x) - _pairs(x))
    raise ValueError(f"unknown toy method {method!r}")


def toy_trajectory(method: str, x0, y, lr: float, steps: int) -> np.ndarray:
    xs = [np.asarray(x0, dtype=np.float64)]
    for _ in range(steps):
        xs.append(xs[-1] + toy_update(method, xs[-1], y, lr))
    return np.array(xs)


# -- sine problem: P(x) = (sin(xh1)/xi, xi * xh2), xh = gamma * R(phi) x -----------

@dataclass(frozen=True)
class SineProblem:
    """Anisotropic test system: ``xi`` sets the conditioning, ``phi`` couples the coordinates."""

    xi: float = 1.0
    phi: float = 0.0
    gamma: float = 10.0

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.phi), np.sin(self.phi)
        return np.array([[c, -s], [s, c]])

    def to_hat(self, x) -> np.ndarray:
        return self.gamma * _pairs(x) @ self.rotation.T

    def from_hat(self, xh) -> np.ndarray:
        return _pairs(xh) @ self.rotation / self.gamma

    def forward(self, x) -> np.ndarray:
        xh = self.to_hat(x)
        return np.stack([np.sin(xh[..., 0]) / self.xi, self.xi * xh[..., 1]], axis=-1)

    def forward_t(self, x: Tensor) -> Tensor:
        xh = as_tensor(x) @ (self.gamma * self.rotation.T)
        return T.stack([T.sin(xh[:, 0]) / self.xi, xh[:, 1] * self.xi], axis=1)

    def loss(self, x, y) -> np.ndarray:
        return 0.5 * np.sum((self.forward(x) - y) ** 2, axis=-1)

    def _hat_derivatives(self, x, y):
        xh = self.to_hat(x)
        y = _pairs(y)
        s, c = np.sin(xh[..., 0]), np.cos(xh[..., 0])
        r1 = s / self.xi - y[..., 0]
        r2 = self.xi * xh[..., 1] - y[..., 1]
        g = np.stack([r1 * c / self.xi, r2 * self.xi], axis=-1)
        h = np.zeros(xh.shape + (2,))
        h[..., 0, 0] = c * c / self.xi ** 2 - r1 * s / self.xi
        h[..., 1, 1] = self.xi ** 2
        return g, h

    def gradient(self, x, y) -> np.ndarray:
        g, _ = self._hat_derivatives(x, y)
        return self.gamma * g @ self.rotation

    def hessian(self, x, y) -> np.ndarray:
        _, h = self._hat_derivatives(x, y)
        r = self.rotation
        return self.gamma ** 2 * np.einsum("ki,...kl,lj->...ij", r, h, r)

    def gd_update(self, x, y, lr: float) -> np.ndarray:
        return -lr * self.gradient(x, y)

    def sip_update(self, x, y, lr: float, max_phase_step: float | None = 1.0) -> np.ndarray:
        """Saddle-free Newton step on the analytic gradient and Hessian.

        Where the curvature of the sine term passes through zero the step blows
        up, so its phase component is limited to ``max_phase_step`` radians
        (``None`` disables the limit).
        """
        g, h = self._hat_derivatives(x, y)
        r = self.rotation
        step = saddle_free_newton_step(self.gamma * g @ r, self.gamma ** 2 * np.einsum("ki,...kl,lj->...ij", r, h, r), lr)
        if max_phase_step is None:
            return step
        hat = self.gamma * step @ r.T
        hat[..., 0] = np.clip(hat[..., 0], -max_phase_step, max_phase_step)
        return hat @ r / self.gamma

    def nearest_solution(self, y, x, window: int = 3) -> np.ndarray:
        """Closest exact preimage of ``y`` to ``x`` among arcsine branches within +-``window`` periods.

        When ``|xi * y1| > 1`` there is no exact solution; the arcsine argument
        is clipped to [-1, 1], giving the closest reachable first component.
        """
        y = _pairs(y)
        xh = self.to_hat(x)
        a = np.arcsin(np.clip(self.xi * y[..., 0], -1.0, 1.0))
        two_pi = 2 * np.pi
        n = np.arange(-window, window + 1)
        centre = np.round((xh[..., 0] - a) / two_pi)[..., None]
        cands = np.concatenate([a[..., None] + two_pi * (centre + n), np.pi - a[..., None] + two_pi * (centre + n)],
                               axis=-1)
        best = np.take_along_axis(cands, np.argmin(np.abs(cands - xh[..., :1]), axis=-1)[..., None], axis=-1)[..., 0]
        sol_hat = np.stack([best, y[..., 1] / self.xi], axis=-1)
        return self.from_hat(sol_hat)

    def relative_accuracy(self, x, y) -> np.ndarray:
        """``|x - x*|_2 / xi`` with ``x*`` the nearest exact solution."""
        return np.linalg.norm(_pairs(x) - self.nearest_solution(y, x), axis=-1) / self.xi


# -- exponential problem: P(x) = e^x --------------------------------------------

def exp_forward(x) -> np.ndarray:
    return np.exp(np.asarray(x, dtype=np.float64))


def exp_gradient(x, y) -> np.ndarray:
    e = exp_forward(x)
    return (e - y) * e


def exp_update(method: str, x, y, lr: float = 1.0) -> np.ndarray:
    """``gd``: ``-lr * dL/dx``; ``normalized``: ``-lr * sign(dL/dx)``."""
    g = exp_gradient(x, y)
    if method == "gd":
        return -lr * g
    if method == "normalized":
        return -lr * np.sign(g)
    raise ValueError(f"unknown exp method {method!r}")


# -- wave packet ------------------------------------------------------------------

@dataclass(frozen=True)
class WavePacket:
    """``A sin(f (t - t0)) exp(-(t - t0)^2 / (2 sigma^2))`` sampled at ``t = 0..n-1``."""

    amplitude: float = 1.0
    frequency: float = 0.7
    sigma: float = 20.0
    samples: int = 256
    noise: float = 0.1
    t0_low: float = 25.6
    t0_high: float = 128.0

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.samples, dtype=np.float64)

    def eval(self, t0) -> np.ndarray:
        """Signals for each offset in ``t0`` (shape ``(b,)`` or ``(b, 1)``) -> ``(b, samples)``."""
        d = self.t[None, :] - np.reshape(np.asarray(t0, dtype=np.float64), (-1, 1))
        return self.amplitude * np.sin(self.frequency * d) * np.exp(-0.5 * d * d / self.sigma ** 2)

    def eval_t(self, t0: Tensor) -> Tensor:
        t0 = as_tensor(t0)
        d = T.neg(t0 - self.t[None, :])
        return self.amplitude * T.sin(self.frequency * d) * T.exp(d * d * (-0.5 / self.sigma ** 2))

    def objective(self, t0, observed) -> np.ndarray:
        return np.sum((self.eval(t0) - observed) ** 2, axis=-1)

    def objective_gradient(self, t0, observed) -> np.ndarray:
        d = self.t[None, :] - np.reshape(np.asarray(t0, dtype=np.float64), (-1, 1))
        env = np.exp(-0.5 * d * d / self.sigma ** 2)
        resid = self.amplitude * np.sin(self.frequency * d) * env - observed
        dy_dd = self.amplitude * env * (self.frequency * np.cos(self.frequency * d)
                                        - np.sin(self.frequency * d) * d / self.sigma ** 2)
        return -2.0 * np.sum(resid * dy_dd, axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Offsets uniform on ``[t0_low, t0_high)`` and noisy observations."""
        t0 = rng.uniform(self.t0_low, self.t0_high, size=n)
        obs = self.eval(t0) + rng.normal(0.0, self.noise, size=(n, self.samples))
        return t0, obs

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.t0_low + self.t0_high)

    def lbfgs_fit(self, observed, t_init: float | None = None, max_iter: int = 100) -> np.ndarray:
        """Per-example bounded L-BFGS fit of ``t0`` started from ``t_init`` (default: midpoint)."""
        from ..optim import lbfgs_minimize

        obs = np.atleast_2d(observed)
        start = self.midpoint if t_init is None else t_init
        bounds = (np.array([self.t0_low]), np.array([self.t0_high]))
        out = np.empty(obs.shape[0])
        for i, o in enumerate(obs):
            fun = lambda v, o=o: (float(self.objective(v, o[None])[0]), self.objective_gradient(v, o[None]))
            out[i] = lbfgs_minimize(fun, np.array([start]), bounds=bounds, max_iter=max_iter)[0][0]
        return out
