import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, tape_grad
from siplab import tensor as T
from siplab.physics import fluid as F


def smooth_velocity(rng, n, batch=1, speed=1.0):
    return F.perturbation_velocity(rng, n, batch, speed, kmax=2) + F.uniform_velocity(n, rng.normal(size=(batch, 2)))


def random_faces(rng, n, batch=1):
    return rng.normal(size=(batch, 2, n, n))


class TestGridOperators:
    def test_gradient_is_negative_adjoint_of_divergence(self, rng):
        vel = random_faces(rng, 6, 2)
        p = rng.normal(size=(2, 6, 6))
        assert np.sum(F.divergence(vel) * p) == pytest.approx(-np.sum(vel * F.gradient(p)), rel=1e-12)

    def test_curl_field_divergence_free(self, rng):
        vel = F.vortex_velocity(16, [[5.3, 9.1]], [1.7], 3.0)
        assert np.abs(F.divergence(vel)).max() < 1e-13

    def test_faces_centres_round_trip_on_constant(self):
        c = np.ones((1, 2, 5, 5)) * np.array([2.0, -1.0])[None, :, None, None]
        np.testing.assert_allclose(F.centers_to_faces(c).data, c)
        np.testing.assert_allclose(F.faces_to_centers(c), c)


class TestSampling:
    def test_integer_positions_exact(self, rng):
        f = rng.normal(size=(2, 5, 7))
        jj, ii = np.meshgrid(np.arange(5.0), np.arange(7.0), indexing="ij")
        val, lo, hi = F.sample_periodic(f, jj + 5, ii - 7)
        np.testing.assert_array_equal(val.data, f)

    def test_bilinear_oracle(self, rng):
        f = rng.normal(size=(1, 4, 4))
        val, lo, hi = F.sample_periodic(f, np.array([[[1.25]]]), np.array([[[3.5]]]))
        # x wraps from column 3 to column 0
        top = 0.5 * f[0, 1, 3] + 0.5 * f[0, 1, 0]
        bottom = 0.5 * f[0, 2, 3] + 0.5 * f[0, 2, 0]
        assert val.data[0, 0, 0] == pytest.approx(0.75 * top + 0.25 * bottom)
        corners = [f[0, 1, 3], f[0, 1, 0], f[0, 2, 3], f[0, 2, 0]]
        assert lo.data[0, 0, 0] == min(corners) and hi.data[0, 0, 0] == max(corners)

    def test_gradients_match_finite_differences(self, rng):
        f = rng.normal(size=(1, 5, 5))
        py = rng.uniform(0, 5, size=(1, 3, 3))
        px = rng.uniform(0, 5, size=(1, 3, 3))
        w = rng.normal(size=(1, 3, 3))
        fun = lambda a, b, c: T.sum(F.sample_periodic(a, b, c)[0] * w)
        for i, arr in enumerate([f, py, px]):
            args = [f, py, px]

            def scalar(x, i=i):
                a = list(args)
                a[i] = x
                return float(fun(*a).data)

            (g,) = tape_grad(lambda x, i=i: fun(*[x if j == i else args[j] for j in range(3)]), arr)
            np.testing.assert_allclose(g, numeric_grad(scalar, arr), rtol=1e-6, atol=1e-8)


class TestStep:
    def test_zero_velocity_unchanged(self, rng):
        sim = F.FluidSim(n=16)
        m = rng.uniform(size=(2, 16, 16))
        with T.no_grad():
            out = sim.step(F.FluidState(T.Tensor(np.zeros((2, 2, 16, 16))), T.Tensor(m)))
        np.testing.assert_array_equal(out.marker.data, m)
        np.testing.assert_array_equal(out.vel.data, 0.0)

    @pytest.mark.parametrize("velocity", [(1.0, 0.0), (0.0, -2.0), (1.3, 0.7), (-2.2, 1.6)])
    def test_uniform_translation(self, velocity):
        sim = F.FluidSim(n=64)
        m = F.generate_marker(np.random.default_rng(3), 64, 1)
        vel = F.uniform_velocity(64, [velocity])
        c0 = F.center_of_mass(m)
        with T.no_grad():
            out = sim.step(F.FluidState(T.Tensor(vel), T.Tensor(m)))
        shift = F._wrapped(F.center_of_mass(out.marker.data) - c0, 64)
        assert np.abs(shift - np.array(velocity) * sim.dt).max() < 0.1

    def test_divergence_after_projection(self, rng):
        sim = F.FluidSim(n=32)
        vel = random_faces(rng, 32, 3)
        with T.no_grad():
            out = sim.step(F.FluidState(T.Tensor(vel), T.Tensor(np.zeros((3, 32, 32)))))
        v = out.vel.data
        assert np.abs(F.divergence(v)).max() < 1e-6 * np.abs(v).max()

    def test_projection_symmetric_and_idempotent(self, rng):
        sim = F.FluidSim(n=12)
        a, b = random_faces(rng, 12), random_faces(rng, 12)
        pa, pb = sim.project_np(a), sim.project_np(b)
        assert np.sum(pa * b) == pytest.approx(np.sum(a * pb), rel=1e-9)
        np.testing.assert_allclose(sim.project_np(pa), pa, atol=1e-9)

    def test_zero_time_step_rejected(self):
        sim = F.FluidSim(n=8)
        with pytest.raises(ValueError):
            sim.step(F.FluidState(T.Tensor(np.zeros((1, 2, 8, 8))), T.Tensor(np.zeros((1, 8, 8)))), 0.0)

    def test_non_integral_step_count(self):
        with pytest.raises(ValueError):
            F.FluidSim(n=8, dt=0.3).steps

    def test_cg_failure_reported(self, rng):
        sim = F.FluidSim(n=16, max_iter=2)
        with pytest.raises(RuntimeError, match="residual"):
            sim.project_np(random_faces(rng, 16))


class TestSimulate:
    def test_eight_steps(self):
        assert F.FluidSim().steps == 8

    def test_zero_velocity_keeps_marker(self, rng):
        sim = F.FluidSim(n=16)
        m = rng.uniform(size=(1, 16, 16))
        np.testing.assert_array_equal(sim.final_marker(m, np.zeros((1, 2, 16, 16))), m)

    def test_mass_and_energy(self):
        sim = F.FluidSim(n=64)
        m0, v0, _ = F.generate_fluid_examples(np.random.default_rng(5), sim, 4)
        with T.no_grad():
            traj = sim.simulate(m0, v0)
        mass0 = m0.sum(axis=(1, 2))
        for prev, cur in zip(traj, traj[1:]):
            np.testing.assert_allclose(cur.energy, prev.energy, rtol=1e-10)
        assert np.abs(traj[-1].marker.data.sum(axis=(1, 2)) / mass0 - 1).max() < 0.01

    def test_reverse_run_approaches_start(self):
        sim = F.FluidSim(n=32)
        m0, v0, mt = F.generate_fluid_examples(np.random.default_rng(11), sim, 20)
        with T.no_grad():
            fwd = sim.simulate(m0, v0)
            rev = sim.simulate(mt, fwd[-1].vel.data, dt=-sim.dt)
        closer = (np.linalg.norm(rev[-1].marker.data - m0, axis=(1, 2))
                  < np.linalg.norm(mt - m0, axis=(1, 2)))
        assert closer.mean() >= 0.9

    def test_gradient_through_simulation(self, rng):
        # 8x8 grid, two steps: autodiff through advection, projection and renormalisation
        sim = F.FluidSim(n=8, t_end=0.5)
        m0 = F.generate_marker(rng, 8, 1)
        target = F.generate_marker(rng, 8, 1)
        v0 = smooth_velocity(rng, 8, speed=0.8)

        def loss(v):
            return F.spectral_loss_t(sim.simulate(m0, v)[-1].marker, target)

        vt = T.Tensor(v0, requires_grad=True)
        (g,) = T.grad(loss(vt), [vt])
        h = 1e-6
        fd = np.zeros_like(v0)
        with T.no_grad():
            for idx in np.ndindex(v0.shape):
                e = np.zeros_like(v0)
                e[idx] = h
                fd[idx] = (loss(v0 + e).data - loss(v0 - e).data) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3


class TestSpectralLoss:
    def test_zero_for_match(self, rng):
        m = rng.normal(size=(2, 8, 8))
        np.testing.assert_array_equal(F.spectral_loss(m, m), 0.0)

    def test_adjoint_finite_differences(self, rng):
        target = rng.normal(size=(2, 8, 8))
        x = rng.normal(size=(2, 8, 8))
        (g,) = tape_grad(lambda t: F.spectral_loss_t(t, target), x)
        fd = numeric_grad(lambda a: float(np.mean(F.spectral_loss(a, target))), x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)

    @pytest.mark.parametrize("high,low", [(12, 1), (20, 3), (8, 2)])
    def test_frequency_ratio(self, high, low):
        n = 64
        c = np.arange(n)
        e_high = np.broadcast_to(np.cos(2 * np.pi * high * c / n), (n, n))[None]
        e_low = np.broadcast_to(np.cos(2 * np.pi * low * c / n), (n, n))[None]
        zero = np.zeros((1, n, n))
        w = F.spectral_weights(n)
        ratio = F.spectral_loss(e_high, zero)[0] / F.spectral_loss(e_low, zero)[0]
        assert ratio == pytest.approx(w[0, high] / w[0, low], rel=1e-12)
        assert w[0, high] == pytest.approx(np.exp(-high / 8), rel=1e-12)

    def test_unit_weights_give_parseval(self, rng):
        r = rng.normal(size=(1, 8, 8))
        assert F.spectral_loss(r, 0.0, k0=1e300)[0] == pytest.approx(0.5 * np.sum(r ** 2))


class TestCenterOfMass:
    def test_point_mass(self):
        m = np.zeros((1, 16, 16))
        m[0, 3, 10] = 1.0
        np.testing.assert_allclose(F.center_of_mass(m), [[10.5, 3.5]], atol=1e-12)

    def test_wrapping_blob(self):
        m = np.zeros((1, 16, 16))
        m[0, 5, [15, 0]] = 1.0
        x = F.center_of_mass(m)[0, 0]
        assert min(abs(x - 16.0), abs(x)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            F.center_of_mass(np.zeros((1, 8, 8)))


class TestVelocityPrior:
    def test_vortex_peak_speed(self):
        vel = F.faces_to_centers(F.vortex_velocity(64, [[32.0, 32.0]], [1.5], 8.0))
        speed = np.hypot(vel[0, 0], vel[0, 1])
        assert speed.max() == pytest.approx(1.5, rel=0.05)

    def test_vortex_gaussian_decay(self):
        vel = F.faces_to_centers(F.vortex_velocity(64, [[32.0, 32.0]], [1.0], 6.0))
        speed = np.hypot(vel[0, 0], vel[0, 1])
        # cell centre (x=32+d+0.5, y=32.5): distance ~ d; speed ~ d/r exp((1 - d^2/r^2)/2)
        for d in [12, 18]:
            r = np.hypot(d + 0.5, 0.5)
            assert speed[32, 32 + d] == pytest.approx(r / 6.0 * np.exp(0.5 - 0.5 * r * r / 36.0), rel=0.05)

    def test_rotation_sense(self):
        vel = F.faces_to_centers(F.vortex_velocity(32, [[16.0, 16.0]], [1.0], 4.0))
        # right of the centre a counter-clockwise vortex moves +y
        assert vel[0, 1, 16, 20] > 0
        assert vel[0, 0, 20, 16] < 0


class TestGenerator:
    def test_deterministic(self):
        sim = F.FluidSim(n=16)
        a = F.generate_fluid_examples(np.random.default_rng(4), sim, 2)
        b = F.generate_fluid_examples(np.random.default_rng(4), sim, 2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_marker_fits_half_box(self, seed):
        m = F.generate_marker(np.random.default_rng(seed), 32, 1)[0]
        assert m.min() >= 0 and m.max() == pytest.approx(1.0)
        for axis in (0, 1):
            occupied = np.any(m > 0, axis=axis)
            assert occupied.sum() <= 16

    def test_ground_truth_is_a_solution(self):
        sim = F.FluidSim(n=16)
        m0, v0, mt = F.generate_fluid_examples(np.random.default_rng(9), sim, 2)
        np.testing.assert_array_equal(F.spectral_loss(sim.final_marker(m0, v0), mt), 0.0)


class TestEstimator:
    def test_no_motion(self, rng):
        sim = F.FluidSim(n=32)
        m0 = F.generate_marker(rng, 32, 2)
        est = F.sip_estimate(sim, m0, m0, np.zeros((2, 2, 32, 32)))
        np.testing.assert_allclose(est, 0.0, atol=1e-12)

    def test_translation_recovered(self):
        sim = F.FluidSim(n=64)
        rng = np.random.default_rng(21)
        m0 = F.generate_marker(rng, 64, 6)
        u = rng.uniform(-2, 2, size=(6, 2))
        mt = sim.final_marker(m0, F.uniform_velocity(64, u))
        est = F.sip_estimate(sim, m0, mt, np.zeros((6, 2, 64, 64)))
        np.testing.assert_allclose(est.mean(axis=(2, 3)), u, atol=0.2 / sim.t_end)

    def test_vortex_sign(self):
        sim = F.FluidSim(n=32)
        rng = np.random.default_rng(17)
        n_trials = 40
        m0 = F.generate_marker(rng, 32, n_trials)
        c = F.center_of_mass(m0)
        s = rng.uniform(0.5, 2.0, n_trials) * rng.choice([-1.0, 1.0], n_trials)
        mt = sim.final_marker(m0, F.vortex_velocity(32, c, s, 4.0))
        est = F.sip_estimate(sim, m0, mt, np.zeros((n_trials, 2, 32, 32)))
        unit = F.vortex_velocity(32, c, np.ones(n_trials), 4.0)
        assert np.mean(np.sign(np.sum(est * unit, axis=(1, 2, 3))) == np.sign(s)) >= 0.95

    def test_damped_iteration_reduces_loss(self):
        sim = F.FluidSim(n=32)
        m0, v0, mt = F.generate_fluid_examples(np.random.default_rng(2), sim, 8)
        x = np.zeros_like(v0)
        losses = []
        for _ in range(4):
            losses.append(F.spectral_loss(sim.final_marker(m0, x), mt).mean())
            x = x + 0.5 * (F.sip_estimate(sim, m0, mt, x) - x)
        assert np.all(np.diff(losses) < 0)
        assert losses[-1] < 0.2 * losses[0]

    def test_empty_marker_rejected(self):
        sim = F.FluidSim(n=8)
        with pytest.raises(ValueError):
            F.sip_estimate(sim, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), np.zeros((1, 2, 8, 8)))

    def test_shift_periodic(self, rng):
        f = rng.normal(size=(1, 8, 8))
        np.testing.assert_allclose(F.shift_periodic(f, [[3.0, -2.0]]), np.roll(f, (-2, 3), axis=(1, 2)), atol=1e-12)
