"""Grid PDE processes with analytic inverses.

Poisson: ``P(x) = lap^-1 x`` with the 5-point Laplacian under zero-Dirichlet
boundaries on unit cells, solved by batched conjugate gradients on the SPD
operator ``-lap``.  The Laplacian is self-adjoint, so the adjoint of the
solve reuses the same solver.

Heat: periodic domain, ``P(x) = F^-1(F(x) * exp(-|k|^2 * t_nu))`` with
``k = 2 pi n / N``.  The stable inverse multiplies each frequency bin of the
residual by ``p(signal | residual) * exp(+|k|^2 * t_nu)``, capped.

Fields are batched: ``(batch, h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import spectral
from ..tensor import Tensor, as_tensor, custom_vjp


class SolverError(RuntimeError):
    """An iterative solve did not reach its tolerance."""


def _batched(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (batch, h, w) or (h, w), got shape {x.shape}")
    return x


def dirichlet_laplacian(x: np.ndarray) -> np.ndarray:
    """5-point Laplacian of ``x[..., h, w]`` with zero values outside the grid."""
    out = -4.0 * x
    out[..., 1:, :] += x[..., :-1, :]
    out[..., :-1, :] += x[..., 1:, :]
    out[..., :, 1:] += x[..., :, :-1]
    out[..., :, :-1] += x[..., :, 1:]
    return out


def cg_solve(apply_a, b: np.ndarray, tol: float, max_iter: int, axes=(-2, -1)) -> tuple[np.ndarray, int]:
    """Batched CG for an SPD operator; every example stops at ``|r| <= tol * |b|``.

    Returns the solution and the number of iterations of the slowest example.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.sum(r * r, axis=axes, keepdims=True)
    target = tol ** 2 * rs
    done = rs <= target
    it = 0
    while not np.all(done):
        if it >= max_iter:
            rel = np.sqrt(np.max(rs / np.where(target > 0, target / tol ** 2, 1.0)))
            raise SolverError(f"CG did not converge in {max_iter} iterations (relative residual {rel:.3e})")
        ap = apply_a(p)
        pap = np.sum(p * ap, axis=axes, keepdims=True)
        alpha = np.where(done, 0.0, rs / np.where(done, 1.0, pap))
        x += alpha * p
        r -= alpha * ap
        rs_new = np.sum(r * r, axis=axes, keepdims=True)
        beta = np.where(done, 0.0, rs_new / np.where(rs > 0, rs, 1.0))
        p = r + beta * p
        rs = rs_new
        done = done | (rs <= target)
        it += 1
    return x, it


@dataclass
class PoissonDomain:
    shape: tuple[int, int] = (80, 60)
    tol: float = 1e-10
    max_iter: int = 10000
    cg_iterations: int = field(default=0, compare=False)

    def laplacian(self, x) -> np.ndarray:
        return dirichlet_laplacian(_batched(x))

    def solve(self, rhs) -> np.ndarray:
        """``u`` with ``lap u = rhs``."""
        rhs = _batched(rhs)
        u, it = cg_solve(lambda v: -dirichlet_laplacian(v), -rhs, self.tol, self.max_iter)
        self.cg_iterations += it
        return u

    def forward(self, x) -> np.ndarray:
        return self.solve(x)

    def forward_t(self, x) -> Tensor:
        x = as_tensor(x)
        return custom_vjp("poisson_solve", self.solve(x.data), (x,), lambda g: (self.solve(g),))

    def gd_update(self, y, y_target, lr: float) -> np.ndarray:
        """``-lr * lap^-1 (y - y*)``, the gradient step of ``1/2 |P(x) - y*|^2``."""
        return -lr * self.solve(_batched(y) - y_target)

    def sip_update(self, y, y_target, lr: float) -> np.ndarray:
        """``-lr * lap (y - y*)``; no solve needed."""
        return -lr * dirichlet_laplacian(_batched(y) - y_target)

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue of ``-lap``; explicit GD on the loss is stable for ``lr < 2 / lambda^-2``."""
        h, w = self.shape
        return 4 * np.sin(np.pi / (2 * (h + 1))) ** 2 + 4 * np.sin(np.pi / (2 * (w + 1))) ** 2

    def sample(self, rng: np.random.Generator, n: int, modes: int = 8) -> np.ndarray:
        """Random solutions: Dirichlet sine modes up to ``modes`` per axis with amplitudes decaying as 1/|n|."""
        h, w = self.shape
        i = np.arange(1, h + 1)[:, None]
        j = np.arange(1, w + 1)[:, None]
        m = np.arange(1, modes + 1)[None, :]
        sy = np.sin(np.pi * i * m / (h + 1))  # (h, modes)
        sx = np.sin(np.pi * j * m / (w + 1))  # (w, modes)
        decay = 1.0 / np.sqrt(m.T ** 2 + m ** 2)
        amp = rng.normal(size=(n, modes, modes)) * decay
        return np.einsum("hm,bmn,wn->bhw", sy, amp, sx)


@dataclass
class HeatDomain:
    shape: tuple[int, int] = (64, 64)
    diffusion: float = 8.0  # t * nu
    eps: float = 0.05
    delta: float = 1.0
    cap: float = 1e6

    @property
    def k2(self) -> np.ndarray:
        return spectral.wavenumber_squared(self.shape)

    @property
    def damping(self) -> np.ndarray:
        return np.exp(-self.k2 * self.diffusion)

    def forward(self, x) -> np.ndarray:
        x = _batched(x)
        return np.fft.ifft2(np.fft.fft2(x) * self.damping).real

    def forward_t(self, x) -> Tensor:
        return spectral.real(spectral.ifft2(spectral.fft2(as_tensor(x)) * self.damping))

    def gd_update(self, y, y_target, lr: float) -> np.ndarray:
        return -lr * self.forward(_batched(y) - y_target)

    def amplification(self, residual_hat: np.ndarray, y_target) -> np.ndarray:
        """Per-bin factor ``min(p(s|r) * exp(|k|^2 t_nu), cap)`` for orthonormal residual spectra.

        ``p(s|r)`` compares zero-mean Gaussians with ``sigma_s = delta * exp(-|k|^2 t_nu)`` and
        ``sigma_n = eps * rms(y*)`` at ``|r_k|`` with equal priors, evaluated in log space.
        """
        y_target = _batched(y_target)
        rms = np.sqrt(np.mean(y_target ** 2, axis=(-2, -1), keepdims=True))
        log_sn = np.log(np.maximum(self.eps * rms, 1e-300))
        log_ss = np.log(self.delta) - self.k2 * self.diffusion
        mag = np.abs(residual_hat)
        with np.errstate(over="ignore"):
            log_ps = -0.5 * (mag * np.exp(-log_ss)) ** 2 - log_ss
        log_pn = -0.5 * (mag * np.exp(-log_sn)) ** 2 - log_sn
        log_post = -np.logaddexp(0.0, log_pn - log_ps)  # log sigmoid
        return np.exp(np.minimum(log_post + self.k2 * self.diffusion, np.log(self.cap)))

    def sip_update(self, y, y_target, lr: float) -> np.ndarray:
        """``-lr * F^-1(amp * F(y - y*))`` with the damped inverse amplification."""
        r_hat = np.fft.fft2(_batched(y) - y_target, norm="ortho")
        amp = self.amplification(r_hat, y_target)
        return -lr * np.fft.ifft2(amp * r_hat, norm="ortho").real

    def sample(self, rng: np.random.Generator, n: int, count=(4, 10), amplitude=(0.2, 1.0)) -> np.ndarray:
        """Between ``count[0]`` and ``count[1]`` axis-aligned positive rectangles per example."""
        h, w = self.shape
        out = np.zeros((n, h, w))
        for b in range(n):
            for _ in range(rng.integers(count[0], count[1] + 1)):
                rh = rng.integers(max(1, h // 16), h // 3 + 1)
                rw = rng.integers(max(1, w // 16), w // 3 + 1)
                top = rng.integers(0, h - rh + 1)
                left = rng.integers(0, w - rw + 1)
                out[b, top:top + rh, left:left + rw] += rng.uniform(*amplitude)
        return out
