"""Update rules: network optimizers and the solvers embedded in physics updates.

First-order optimizers act in place on a flat parameter vector so they can
drive :attr:`siplab.nets.Network.theta` directly.  SGD uses the heavy-ball
form ``buf <- momentum * buf + g; p <- p - lr * buf``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

EIG_FLOOR = 1e-6


def _check_grads(grads: np.ndarray, params: np.ndarray, who: str) -> None:
    if grads.shape != params.shape:
        raise ValueError(f"{who}: gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError(f"{who}: non-finite gradient")


@dataclass
class OptState:
    """Moment buffers, step counter and hyperparameters of one optimizer."""

    kind: str
    lr: float
    hyper: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    step: int = 0

    def apply(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return sgd_step(self, params, grads)
        if self.kind == "adam":
            return adam_step(self, params, grads)
        raise ValueError(f"unknown optimizer {self.kind!r}")


def sgd(lr: float, momentum: float = 0.9) -> OptState:
    return OptState("sgd", lr, {"momentum": momentum})


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    return OptState("adam", lr, {"beta1": beta1, "beta2": beta2, "eps": eps})


def make_optimizer(name: str, lr: float) -> OptState:
    if name == "sgd":
        return sgd(lr)
    if name == "adam":
        return adam(lr)
    raise ValueError(f"unknown optimizer {name!r}; expected 'sgd' or 'adam'")


def sgd_step(state: OptState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Momentum SGD, updating ``params`` in place."""
    _check_grads(grads, params, "sgd_step")
    mu = state.hyper.get("momentum", 0.0)
    if mu:
        buf = state.buffers.get("momentum")
        if buf is None:
            buf = state.buffers["momentum"] = np.array(grads, dtype=np.float64)
        else:
            buf *= mu
            buf += grads
        step = buf
    else:
        step = grads
    params -= state.lr * step
    state.step += 1
    return params


def adam_step(state: OptState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam, updating ``params`` in place."""
    _check_grads(grads, params, "adam_step")
    h = state.hyper
    b1, b2, eps = h["beta1"], h["beta2"], h["eps"]
    m = state.buffers.setdefault("m", np.zeros_like(params))
    v = state.buffers.setdefault("v", np.zeros_like(params))
    state.step += 1
    m *= b1
    m += (1 - b1) * grads
    v *= b2
    v += (1 - b2) * grads * grads
    mhat = m / (1 - b1 ** state.step)
    vhat = v / (1 - b2 ** state.step)
    params -= state.lr * mhat / (np.sqrt(vhat) + eps)
    return params


# -- L-BFGS ----------------------------------------------------------------

@dataclass
class LBFGSHistory:
    m: int = 10
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    step: int = 0

    def push(self, s: np.ndarray, y: np.ndarray) -> None:
        if float(s @ y) > 1e-12 * max(float(y @ y), 1e-300):
            self.s.append(s)
            self.y.append(y)
            if len(self.s) > self.m:
                self.s.pop(0)
                self.y.pop(0)

    def reset(self) -> None:
        self.s.clear()
        self.y.clear()

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Two-loop recursion: ``-H g`` with ``H`` the implicit inverse-Hessian estimate."""
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((a, rho))
            q -= a * y
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= float(s @ y) / float(y @ y)
        for (a, rho), s, y in zip(reversed(alphas), self.s, self.y):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


def _project(x, bounds):
    if bounds is None:
        return x
    return np.clip(x, bounds[0], bounds[1])


def lbfgs_step(history: LBFGSHistory, params: np.ndarray, grad: np.ndarray,
               objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
               value: float | None = None, bounds=None, c1: float = 1e-4, c2: float = 0.9,
               max_trials: int = 40) -> tuple[np.ndarray, float, np.ndarray]:
    """One L-BFGS iteration.

    ``objective(x)`` returns ``(f, grad)``.  The step length comes from a
    bisection/expansion search for the weak Wolfe conditions (sufficient
    decrease plus curvature); if only sufficient decrease can be met within
    the trial budget, the best such point is taken.  A quadratic-interpolation
    trial is compared against the accepted point, which makes the search exact
    on quadratics.  Each trial point is projected onto ``bounds = (lower,
    upper)`` when given.  If the two-loop direction is not a descent direction
    the history is cleared and steepest descent is used.  Returns ``(x, f, grad)``.
    """
    x = np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    f0 = objective(x)[0] if value is None else value
    history.step += 1
    if not np.any(g):
        return x.copy(), f0, g.copy()
    d = history.direction(g)
    if not history.s:
        d = d / max(np.linalg.norm(g), 1.0)
    if not float(g @ d) < 0:
        history.reset()
        d = -g / max(np.linalg.norm(g), 1.0)

    def trial(t):
        xt = _project(x + t * d, bounds)
        ft, gt = objective(xt)
        return xt, ft, gt

    def armijo(xt, ft):
        return np.isfinite(ft) and ft <= f0 + c1 * float(g @ (xt - x))

    lo, hi, t = 0.0, np.inf, 1.0
    best = None
    for _ in range(max_trials):
        xt, ft, gt = trial(t)
        if not armijo(xt, ft):
            hi = t
        else:
            if best is None or ft < best[1]:
                best = (xt, ft, gt)
            step = xt - x
            if float(gt @ step) >= c2 * float(g @ step) or np.array_equal(xt, _project(x + 2 * t * d, bounds)):
                break
            lo = t
        t = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * lo
    if best is None:
        return x.copy(), f0, g.copy()
    xt, ft, _ = best
    # compare with the minimizer of the quadratic through f(0), f'(0), f(t)
    t = float((xt - x) @ d) / float(d @ d)
    dd = float(g @ d)
    curv = ft - f0 - dd * t
    if curv > 0 and t > 0:
        ts = -dd * t * t / (2 * curv)
        if abs(ts - t) > 1e-12 * t:
            xs, fs, gs = trial(ts)
            if fs < best[1] and armijo(xs, fs):
                best = (xs, fs, gs)
    xn, fn, gn = best
    history.push(xn - x, gn - g)
    return xn, fn, gn


def lbfgs_minimize(objective, x0, bounds=None, max_iter: int = 100, m: int = 10,
                   gtol: float = 1e-10) -> tuple[np.ndarray, float, int]:
    """Run :func:`lbfgs_step` until the (projected) gradient is small or the budget is spent."""
    x = _project(np.asarray(x0, dtype=np.float64).copy(), bounds)
    f, g = objective(x)
    hist = LBFGSHistory(m=m)
    it = 0
    for it in range(1, max_iter + 1):
        pg = _project(x - g, bounds) - x
        if np.linalg.norm(pg) <= gtol:
            it -= 1
            break
        xn, fn, gn = lbfgs_step(hist, x, g, objective, value=f, bounds=bounds)
        if np.array_equal(xn, x):
            break
        x, f, g = xn, fn, gn
    return x, f, it


# -- second-order updates for low-dimensional problems -----------------------

def saddle_free_newton_step(grad, hessian, lr: float, floor: float = EIG_FLOOR) -> np.ndarray:
    """``-lr * V diag(1/max(|lambda|, floor)) V^T g``, batched over leading axes."""
    g = np.asarray(grad, dtype=np.float64)
    lam, vec = np.linalg.eigh(np.asarray(hessian, dtype=np.float64))
    inv = 1.0 / np.maximum(np.abs(lam), floor)
    coeff = np.einsum("...ji,...j->...i", vec, g) * inv
    return -lr * np.einsum("...ij,...j->...i", vec, coeff)


def newton_step(grad, hessian, lr: float, floor: float = EIG_FLOOR) -> np.ndarray:
    """Plain Newton step; eigenvalues keep their sign but are kept at least ``floor`` from zero."""
    g = np.asarray(grad, dtype=np.float64)
    lam, vec = np.linalg.eigh(np.asarray(hessian, dtype=np.float64))
    safe = np.where(lam >= 0, 1.0, -1.0) * np.maximum(np.abs(lam), floor)
    coeff = np.einsum("...ji,...j->...i", vec, g) / safe
    return -lr * np.einsum("...ij,...j->...i", vec, coeff)


def normalize_gradient(grads) -> np.ndarray:
    """Per-example sign (one value per example) or unit-length vector; zeros stay zero."""
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 0:
        raise ValueError("normalize_gradient needs a leading batch axis")
    per_example = g.reshape(g.shape[0], -1)
    if per_example.shape[1] == 1:
        return np.sign(g)
    # rescale by the largest entry first so tiny vectors do not underflow
    peak = np.max(np.abs(per_example), axis=1, keepdims=True)
    scaled = per_example / np.where(peak > 0, peak, 1.0)
    norms = np.linalg.norm(scaled, axis=1, keepdims=True)
    return (scaled / np.where(norms > 0, norms, 1.0)).reshape(g.shape)
