"""Incompressible 2-D flow on a periodic staggered grid, advecting a passive marker.

Layout (arrays indexed ``[batch, y, x]``, unit cells):

* velocity ``vel[:, 0]`` (``u``) lives on x-faces at ``(x=i, y=j+1/2)``,
  ``vel[:, 1]`` (``v``) on y-faces at ``(x=i+1/2, y=j)``;
* the marker ``m`` lives at cell centres ``(i+1/2, j+1/2)``.

One step advects the marker and both velocity components with a MacCormack
scheme (forward and backward semi-Lagrangian passes, error correction, clamp
to the extrema of the interpolation stencil), projects the velocity onto the
divergence-free subspace with a CG pressure solve and rescales it to the
kinetic energy it had at the start of the step.  Every stage is recorded on
the tape, so losses of the final marker can be differentiated with respect
to the initial velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, as_tensor, custom_vjp
from .field import cg_solve


# -- staggered-grid operators (numpy) -------------------------------------------

def divergence(vel: np.ndarray) -> np.ndarray:
    """Net outflow of each cell, ``(b, 2, n, n) -> (b, n, n)``."""
    u, v = vel[:, 0], vel[:, 1]
    return np.roll(u, -1, axis=-1) - u + np.roll(v, -1, axis=-2) - v


def gradient(p: np.ndarray) -> np.ndarray:
    """Face differences of a cell field; the negative adjoint of :func:`divergence`."""
    return np.stack([p - np.roll(p, 1, axis=-1), p - np.roll(p, 1, axis=-2)], axis=1)


def cell_gradient(m: np.ndarray) -> np.ndarray:
    """Central differences of a cell field, ``(b, n, n) -> (b, 2, n, n)`` as (d/dx, d/dy)."""
    return 0.5 * np.stack([np.roll(m, -1, axis=-1) - np.roll(m, 1, axis=-1),
                           np.roll(m, -1, axis=-2) - np.roll(m, 1, axis=-2)], axis=1)


def faces_to_centers(vel) -> np.ndarray:
    vel = np.asarray(vel)
    return 0.5 * np.stack([vel[:, 0] + np.roll(vel[:, 0], -1, axis=-1),
                           vel[:, 1] + np.roll(vel[:, 1], -1, axis=-2)], axis=1)


def centers_to_faces(c: Tensor) -> Tensor:
    """Resample a cell-centred ``(b, 2, n, n)`` velocity to faces by averaging neighbours."""
    c = as_tensor(c)
    u = 0.5 * (c[:, 0] + T.roll(c[:, 0], 1, axis=-1))
    v = 0.5 * (c[:, 1] + T.roll(c[:, 1], 1, axis=-2))
    return T.stack([u, v], axis=1)


def kinetic_energy(vel) -> np.ndarray:
    vel = np.asarray(vel.data if isinstance(vel, Tensor) else vel)
    return 0.5 * np.sum(vel ** 2, axis=(1, 2, 3))


# -- differentiable building blocks ---------------------------------------------------

def gather(field: Tensor, flat: np.ndarray) -> Tensor:
    """``field.ravel()[flat]``; the adjoint scatters with ``bincount``."""
    field = as_tensor(field)
    size, shape = field.data.size, field.shape

    def vjp(g):
        return (np.bincount(flat.ravel(), weights=g.ravel(), minlength=size).reshape(shape),)

    return custom_vjp("gather", field.data.ravel()[flat], (field,), vjp)


def sample_periodic(field: Tensor, py: Tensor, px: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Bilinear value of a periodic ``(b, n, n)`` field at fractional indices, plus stencil min and max.

    Differentiable in the field and in the positions (through the bilinear
    weights; the stencil choice is piecewise constant).
    """
    field, py, px = as_tensor(field), as_tensor(py), as_tensor(px)
    b, h, w = field.shape
    y0 = np.floor(py.data)
    x0 = np.floor(px.data)
    fy = py - y0
    fx = px - x0
    y0 = y0.astype(np.int64) % h
    x0 = x0.astype(np.int64) % w
    y1, x1 = (y0 + 1) % h, (x0 + 1) % w
    base = np.arange(b).reshape(b, 1, 1) * (h * w)
    c00 = gather(field, base + y0 * w + x0)
    c01 = gather(field, base + y0 * w + x1)
    c10 = gather(field, base + y1 * w + x0)
    c11 = gather(field, base + y1 * w + x1)
    top = c00 + fx * (c01 - c00)
    bottom = c10 + fx * (c11 - c10)
    value = top + fy * (bottom - top)
    lo = T.minimum(T.minimum(c00, c01), T.minimum(c10, c11))
    hi = T.maximum(T.maximum(c00, c01), T.maximum(c10, c11))
    return value, lo, hi


def maccormack(field: Tensor, vx: Tensor, vy: Tensor, dt: float) -> Tensor:
    """Advect ``field`` by the velocity sampled at its own points, second order with clamping."""
    field = as_tensor(field)
    _, h, w = field.shape
    jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    fwd, lo, hi = sample_periodic(field, jj - dt * vy, ii - dt * vx)
    back, _, _ = sample_periodic(fwd, jj + dt * vy, ii + dt * vx)
    corrected = fwd + 0.5 * (field - back)
    return T.minimum(T.maximum(corrected, lo), hi)


@dataclass(frozen=True)
class FluidState:
    vel: Tensor  # (b, 2, n, n) face velocities
    marker: Tensor  # (b, n, n)

    @property
    def energy(self) -> np.ndarray:
        return kinetic_energy(self.vel)


@dataclass
class FluidSim:
    """Periodic N x N simulator; ``tol`` is the relative CG tolerance of the pressure solve."""

    n: int = 64
    dt: float = 0.25
    t_end: float = 2.0
    tol: float = 1e-10
    max_iter: int = 5000

    @property
    def steps(self) -> int:
        ratio = self.t_end / abs(self.dt)
        steps = int(round(ratio))
        if abs(steps - ratio) > 1e-9 or steps < 1:
            raise ValueError(f"t_end / dt must be a positive integer, got {ratio}")
        return steps

    def pressure(self, div: np.ndarray) -> np.ndarray:
        """Solve ``div grad p = div`` for zero-mean ``p``; the periodic operator is singular on constants."""
        rhs = div - div.mean(axis=(-2, -1), keepdims=True)
        p, _ = cg_solve(lambda q: -divergence(gradient(q)), -rhs, self.tol, self.max_iter)
        return p

    def project_np(self, vel: np.ndarray) -> np.ndarray:
        return vel - gradient(self.pressure(divergence(vel)))

    def project(self, vel: Tensor) -> Tensor:
        """Remove the gradient part; the projection is symmetric, so it is its own adjoint."""
        vel = as_tensor(vel)
        return custom_vjp("project", self.project_np(vel.data), (vel,), lambda g: (self.project_np(g),))

    def step(self, state: FluidState, dt: float | None = None) -> FluidState:
        dt = self.dt if dt is None else dt
        if dt == 0:
            raise ValueError("time step must be non-zero")
        vel, m = as_tensor(state.vel), as_tensor(state.marker)
        u, v = vel[:, 0], vel[:, 1]
        u_right = T.roll(u, -1, axis=-1)
        v_up = T.roll(v, -1, axis=-2)
        # velocities at cell centres, x-faces and y-faces
        uc, vc = 0.5 * (u + u_right), 0.5 * (v + v_up)
        v_at_u = 0.25 * (v + v_up + T.roll(v, 1, axis=-1) + T.roll(v_up, 1, axis=-1))
        u_at_v = 0.25 * (u + u_right + T.roll(u, 1, axis=-2) + T.roll(u_right, 1, axis=-2))
        m_new = maccormack(m, uc, vc, dt)
        u_new = maccormack(u, u, v_at_u, dt)
        v_new = maccormack(v, u_at_v, v, dt)
        vel_new = self.project(T.stack([u_new, v_new], axis=1))
        return FluidState(renormalize(vel_new, vel), m_new)

    def simulate(self, marker, vel, dt: float | None = None) -> list[FluidState]:
        """Trajectory of ``steps + 1`` states from ``t = 0`` to ``t_end`` (backwards when ``dt < 0``)."""
        dt = self.dt if dt is None else dt
        states = [FluidState(as_tensor(vel), as_tensor(marker))]
        for _ in range(self.steps):
            states.append(self.step(states[-1], dt))
        return states

    def final_marker(self, marker, vel) -> np.ndarray:
        with T.no_grad():
            return self.simulate(marker, vel)[-1].marker.data


def renormalize(vel: Tensor, reference: Tensor) -> Tensor:
    """Scale each example of ``vel`` to the kinetic energy of ``reference``; zero fields stay zero."""
    e_new = 0.5 * T.sum(T.square(vel), axis=(1, 2, 3), keepdims=True)
    e_ref = 0.5 * T.sum(T.square(as_tensor(reference)), axis=(1, 2, 3), keepdims=True)
    live = (e_new.data > 0) & (e_ref.data > 0)
    ratio = (e_ref + (~live)) / (e_new + (~live))
    return vel * T.where(live, T.sqrt(ratio), np.ones_like(e_new.data))


# -- objective -------------------------------------------------------------------------

def spectral_weights(n: int, k0: float | None = None) -> np.ndarray:
    """``exp(-|k| / k0)`` over integer frequencies; ``k0`` defaults to ``n / 8``."""
    k0 = n / 8 if k0 is None else k0
    f = np.fft.fftfreq(n, d=1.0 / n)
    return np.exp(-np.hypot(f[:, None], f[None, :]) / k0)


def spectral_loss(pred, target, k0: float | None = None) -> np.ndarray:
    """Per-example ``1/2 sum_k w_k |F(pred - target)_k|^2`` with the orthonormal FFT."""
    r = np.asarray(pred) - np.asarray(target)
    w = spectral_weights(r.shape[-1], k0)
    return 0.5 * np.sum(w * np.abs(np.fft.fft2(r, norm="ortho")) ** 2, axis=(-2, -1))


def spectral_loss_t(pred: Tensor, target, k0: float | None = None) -> Tensor:
    """Batch mean of :func:`spectral_loss` on the tape; the adjoint is ``F^-1(w F(r))``."""
    pred = as_tensor(pred)
    r = pred.data - np.asarray(target)
    w = spectral_weights(r.shape[-1], k0)
    b = r.shape[0]

    def vjp(g):
        return (g / b * np.fft.ifft2(w * np.fft.fft2(r, norm="ortho"), norm="ortho").real,)

    return custom_vjp("spectral_loss", np.mean(spectral_loss(pred.data, target, k0)), (pred,), vjp)


# -- velocity prior ---------------------------------------------------------------------

def _curl(psi: np.ndarray) -> np.ndarray:
    """Face velocities from a stream function at cell corners ``psi[j, i]`` at ``(x=i, y=j)``; exactly divergence-free."""
    return np.stack([np.roll(psi, -1, axis=-2) - psi, -(np.roll(psi, -1, axis=-1) - psi)], axis=1)


def _wrapped(d: np.ndarray, n: int) -> np.ndarray:
    return (d + n / 2) % n - n / 2


def vortex_velocity(n: int, center, strength, radius: float) -> np.ndarray:
    """Gaussian vortex: speed ``strength * (d / r) * exp((1 - d^2 / r^2) / 2)``, peaking at ``strength`` for ``d = r``.

    Positive strength turns counter-clockwise with x to the right and y up.
    """
    center = np.atleast_2d(np.asarray(center, dtype=np.float64))  # (b, 2) as (x, y)
    strength = np.reshape(np.asarray(strength, dtype=np.float64), (-1, 1, 1))
    grid = np.arange(n, dtype=np.float64)
    dx = _wrapped(grid[None, None, :] - center[:, 0, None, None], n)
    dy = _wrapped(grid[None, :, None] - center[:, 1, None, None], n)
    psi = strength * radius * np.exp(0.5 - 0.5 * (dx ** 2 + dy ** 2) / radius ** 2)
    return _curl(psi)


def uniform_velocity(n: int, velocity) -> np.ndarray:
    velocity = np.atleast_2d(np.asarray(velocity, dtype=np.float64))
    return np.broadcast_to(velocity[:, :, None, None], (velocity.shape[0], 2, n, n)).copy()


def perturbation_velocity(rng: np.random.Generator, n: int, batch: int, max_speed: float, kmax: int = 6) -> np.ndarray:
    """Small-scale divergence-free noise: stream-function modes with amplitudes ``U[0, |k|^-2]`` and random phases."""
    f = np.fft.fftfreq(n, d=1.0 / n)
    kmag = np.hypot(f[:, None], f[None, :])
    band = (kmag >= 1) & (kmag <= kmax)
    amp = rng.uniform(0.0, 1.0, size=(batch, n, n)) * np.where(band, 1.0 / np.maximum(kmag, 1.0) ** 2, 0.0)
    phase = rng.uniform(0.0, 2 * np.pi, size=(batch, n, n))
    psi = np.fft.ifft2(amp * np.exp(1j * phase)).real
    vel = _curl(psi)
    peak = np.abs(vel).max(axis=(1, 2, 3), keepdims=True)
    return vel * max_speed / np.where(peak > 0, peak, 1.0)


def center_of_mass(marker) -> np.ndarray:
    """Periodic (circular-mean) centre of mass in cell units, ``(b, 2)`` as (x, y)."""
    m = np.asarray(marker.data if isinstance(marker, Tensor) else marker)
    mass = m.sum(axis=(-2, -1))
    if np.any(mass <= 0):
        raise ValueError("marker has no mass; its centre is undefined")
    n = m.shape[-1]
    theta = 2 * np.pi * (np.arange(n) + 0.5) / n
    out = []
    for axis in (-1, -2):
        profile = m.sum(axis=-2 if axis == -1 else -1)
        ang = np.arctan2(profile @ np.sin(theta), profile @ np.cos(theta))
        out.append((ang % (2 * np.pi)) * n / (2 * np.pi))
    return np.stack(out, axis=-1)


@dataclass(frozen=True)
class VelocityPrior:
    """Ranges of the generated flows: centre-seeking translation, one vortex at the marker, small-scale noise."""

    pull: tuple[float, float] = (0.2, 0.6)  # fraction of the offset to the domain centre covered in t_end
    strength: tuple[float, float] = (0.5, 2.0)
    radius_fraction: float = 1 / 8
    perturbation: float = 0.2

    def radius(self, n: int) -> float:
        return self.radius_fraction * n


def generate_marker(rng: np.random.Generator, n: int, batch: int, roughness: float = 0.5) -> np.ndarray:
    """Low-pass noise fluctuations on a smooth bump filling a half-domain box at a random centre, peak 1."""
    out = np.zeros((batch, n, n))
    half = n // 2
    f = np.fft.fftfreq(half, d=1.0 / half)
    low = np.exp(-(f[:, None] ** 2 + f[None, :] ** 2) / 4.0)
    window = np.sin(np.pi * (np.arange(half) + 0.5) / half) ** 2
    for b in range(batch):
        noise = np.fft.ifft2(np.fft.fft2(rng.normal(size=(half, half))) * low).real
        blob = np.maximum(1.0 + roughness * noise / noise.std(), 0.0) * window[:, None] * window[None, :]
        blob /= blob.max()
        cy, cx = rng.integers(n // 4, 3 * n // 4, size=2)
        patch = np.zeros((n, n))
        patch[:half, :half] = blob
        out[b] = np.roll(patch, (cy - half // 2, cx - half // 2), axis=(0, 1))
    return out


def generate_fluid_examples(rng: np.random.Generator, sim: FluidSim, batch: int,
                            prior: VelocityPrior = VelocityPrior()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(m0, v0, m_t)`` with ``m_t`` simulated from the ground-truth ``v0``."""
    n = sim.n
    m0 = generate_marker(rng, n, batch)
    center = center_of_mass(m0)
    pull = rng.uniform(*prior.pull, size=(batch, 1))
    translation = (n / 2 - center) * pull / sim.t_end
    strength = rng.uniform(*prior.strength, size=batch) * rng.choice([-1.0, 1.0], size=batch)
    v0 = (uniform_velocity(n, translation) + vortex_velocity(n, center, strength, prior.radius(n))
          + perturbation_velocity(rng, n, batch, prior.perturbation))
    return m0, v0, sim.final_marker(m0, v0)


# -- reverse-simulation estimate of the initial velocity ------------------------------------

def vortex_rate(n: int, center, marker, radius: float) -> np.ndarray:
    """Rate of change of the marker under a unit-strength vortex, ``-(V . grad m)`` at cell centres."""
    vel = faces_to_centers(vortex_velocity(n, center, np.ones(len(marker)), radius))
    return -np.sum(vel * cell_gradient(marker), axis=1)


def sip_estimate(sim: FluidSim, m0, mt, guess, guess_trajectory=None,
                 prior: VelocityPrior = VelocityPrior()) -> np.ndarray:
    """Prior-shaped estimate of the initial velocity from the observed markers and the current guess.

    * translation: shift of the marker centre of mass divided by ``t_end``;
    * vortex centre: centre of mass of ``m0``, carried along by the mean guessed flow;
    * vortex strength: the guess projected on a unit vortex, corrected by a
      least-squares fit of the marker mismatch between a reverse run (from
      ``m_t`` with the guessed final velocity) and the forward guess trajectory,
      averaged over the reverse steps.
    """
    m0, mt = np.asarray(m0, dtype=np.float64), np.asarray(mt, dtype=np.float64)
    guess = np.asarray(guess.data if isinstance(guess, Tensor) else guess, dtype=np.float64)
    n, radius, t = sim.n, prior.radius(sim.n), sim.t_end
    if guess_trajectory is None:
        with T.no_grad():
            guess_trajectory = sim.simulate(m0, guess)
    c0 = center_of_mass(m0)
    translation = _wrapped(center_of_mass(mt) - c0, n) / t
    unit = vortex_velocity(n, c0, np.ones(len(m0)), radius)
    s_guess = np.sum(guess * unit, axis=(1, 2, 3)) / np.sum(unit * unit, axis=(1, 2, 3))

    with T.no_grad():
        reverse = sim.simulate(mt, guess_trajectory[-1].vel.data, dt=-sim.dt)
    drift = guess.mean(axis=(2, 3))
    # translation the guess is missing; it displaces the reverse run by missing * t at every step
    missing = translation - drift
    steps = sim.steps
    num = np.zeros(len(m0))
    count = np.zeros(len(m0))
    for k in range(steps + 1):
        tk = t - k * sim.dt
        fwd = shift_periodic(guess_trajectory[steps - k].marker.data, missing * t)
        mismatch = reverse[k].marker.data - fwd
        rate = vortex_rate(n, c0 + drift * tk + missing * t, fwd, radius)
        norm = np.sum(rate * rate, axis=(1, 2))
        ok = norm > 1e-12
        num += np.where(ok, np.sum(mismatch * rate, axis=(1, 2)) / np.where(ok, t * norm, 1.0), 0.0)
        count += ok
    # a vortex stronger by ds moves the observed marker by about ds * t * rate, and the reverse run keeps that offset
    ds = num / np.maximum(count, 1)
    return uniform_velocity(n, translation) + vortex_velocity(n, c0, s_guess + ds, radius)


def shift_periodic(field: np.ndarray, offset) -> np.ndarray:
    """Translate ``(b, n, n)`` fields by ``offset`` (``(b, 2)`` as (x, y), in cells) with a Fourier phase ramp."""
    field = np.asarray(field, dtype=np.float64)
    offset = np.atleast_2d(offset)
    ky = np.fft.fftfreq(field.shape[-2])[None, :, None]
    kx = np.fft.fftfreq(field.shape[-1])[None, None, :]
    ramp = np.exp(-2j * np.pi * (kx * offset[:, 0, None, None] + ky * offset[:, 1, None, None]))
    return np.fft.ifft2(np.fft.fft2(field) * ramp).real
