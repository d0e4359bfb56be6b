import numpy as np
import pytest

from flowmaplab.errors import ConfigError, SingularTimeError
from flowmaplab.gaussian_world import GaussianWorld, optimal_cm, optimal_velocity
from flowmaplab.teachers import (GaussianTeacher, GmmTeacher, GuidanceSpec, euler_solve,
                                 gmm_velocity, guided_velocity, make_ring_teacher,
                                 make_weak_teacher)


def single_component(c=0.5):
    return GmmTeacher(weights=[1.0], means=[[0.0, 0.0]], comp_std=c)


class TestGmmTeacher:
    def test_weights_must_be_simplex(self):
        with pytest.raises(ValueError):
            GmmTeacher([0.5, 0.6], [[0.0], [1.0]], 0.1)
        with pytest.raises(ValueError):
            GmmTeacher([1.5, -0.5], [[0.0], [1.0]], 0.1)

    def test_stds_positive(self):
        with pytest.raises(ValueError):
            GmmTeacher([1.0], [[0.0]], 0.0)

    def test_single_component_matches_gaussian_world(self):
        teacher = single_component(0.5)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((100, 2)) * 2
        for t in (1e-4, 0.2, 0.5, 0.9, 1.0):
            got = teacher.velocity(x, t)
            want = optimal_velocity(x, t, 0.5)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_velocity_at_pure_noise_is_x_minus_prior_mean(self):
        teacher = make_ring_teacher()
        x = np.array([[1.0, -2.0], [0.5, 3.5]])
        prior_mean = (teacher.weights[:, None] * teacher.means).sum(axis=0)
        np.testing.assert_allclose(teacher.velocity(x, 1.0), x - prior_mean, atol=1e-9)

    def test_symmetry_point(self):
        teacher = GmmTeacher([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], 0.1)
        v = teacher.velocity(np.array([[0.0, 0.0]]), 0.5)
        np.testing.assert_allclose(v, [[0.0, 0.0]], atol=1e-12)

    def test_posterior_mean_against_monte_carlo(self):
        teacher = GmmTeacher([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], 0.1)
        rng = np.random.default_rng(7)
        t = 0.5
        x0, _ = teacher.sample(4_000_000, rng), None
        x1 = rng.standard_normal(x0.shape)
        x_t = (1 - t) * x0 + t * x1
        query = np.array([0.6, 0.4])
        window = np.linalg.norm(x_t - query, axis=1) < 0.05
        mc_mean = x0[window].mean(axis=0)
        exact = teacher.posterior_mean(query[None, :], t)[0]
        assert np.linalg.norm(mc_mean - exact) / np.linalg.norm(exact) < 0.01

    def test_log_space_responsibilities_stay_finite(self):
        teacher = make_ring_teacher()
        for scale in (1.0, 1e3, 1e6):
            x = np.array([[scale, scale]])
            v = teacher.velocity(x, 0.5)
            assert np.all(np.isfinite(v))

    def test_singular_at_zero(self):
        with pytest.raises(SingularTimeError):
            make_ring_teacher().velocity(np.zeros((1, 2)), 0.0)

    def test_conditional_velocity_restricts_components(self):
        teacher = make_ring_teacher(labeled=True)
        x = np.zeros((1, 2))
        v_cond = teacher.velocity(x, 0.5, labels=np.array([0]))
        single = GmmTeacher([1.0], [teacher.means[0]], teacher.comp_std[:1])
        np.testing.assert_allclose(v_cond, single.velocity(x, 0.5), atol=1e-12)

    def test_per_sample_times(self):
        teacher = make_ring_teacher()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 2))
        t = rng.uniform(0.2, 1.0, 5)
        stacked = teacher.velocity(x, t)
        rowwise = np.vstack([teacher.velocity(x[i:i + 1], t[i]) for i in range(5)])
        np.testing.assert_allclose(stacked, rowwise, atol=1e-12)


class TestGuidance:
    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            GuidanceSpec(lam=2.0, mode="none")
        with pytest.raises(ConfigError):
            GuidanceSpec(mode="autoguidance")
        with pytest.raises(ConfigError):
            GuidanceSpec(mode="cfg")
        with pytest.raises(ConfigError):
            GuidanceSpec(mode="sideways")

    def test_lambda_one_is_main(self):
        teacher = make_ring_teacher()
        weak = make_weak_teacher(teacher, 2.0, seed=0)
        spec = GuidanceSpec(lam=1.0, mode="autoguidance", weak=weak)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 2))
        np.testing.assert_allclose(guided_velocity(spec, teacher, x, 0.5),
                                   teacher.velocity(x, 0.5), atol=1e-12)

    def test_affine_combination(self):
        class Const:
            def __init__(self, value):
                self.value = np.asarray(value, dtype=float)

            def velocity(self, x, t, labels=None):
                return np.broadcast_to(self.value, np.atleast_2d(x).shape).copy()

        spec = GuidanceSpec(lam=2.0, mode="autoguidance", weak=Const([0.0, 1.0]))
        out = guided_velocity(spec, Const([1.0, 0.0]), np.zeros((1, 2)), 0.5)
        np.testing.assert_allclose(out, [[2.0, -1.0]])

    def test_linearity_in_lambda(self):
        teacher = make_ring_teacher()
        weak = make_weak_teacher(teacher, 2.0, seed=0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((16, 2))
        vals = {}
        for lam in (0.0, 1.0, 2.0):
            spec = GuidanceSpec(lam=lam, mode="autoguidance", weak=weak)
            vals[lam] = guided_velocity(spec, teacher, x, 0.6)
        np.testing.assert_allclose(vals[2.0] - vals[1.0], vals[1.0] - vals[0.0], atol=1e-12)

    def test_cfg_uses_unconditional_field(self):
        teacher = make_ring_teacher(labeled=True)
        spec = GuidanceSpec(lam=3.0, mode="cfg", uncond=teacher)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 2))
        labels = np.array([0, 1, 2, 3])
        got = guided_velocity(spec, teacher, x, 0.5, labels=labels)
        want = 3.0 * teacher.velocity(x, 0.5, labels) - 2.0 * teacher.velocity(x, 0.5)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestWeakTeacher:
    def test_multiplier_must_exceed_one(self):
        with pytest.raises(ValueError):
            make_weak_teacher(make_ring_teacher(), 0.5, seed=0)
        with pytest.raises(ValueError):
            make_weak_teacher(make_ring_teacher(), 1.0, seed=0)

    def test_blurred_modes(self):
        teacher = make_ring_teacher()
        weak = make_weak_teacher(teacher, 2.0, seed=0)
        rng = np.random.default_rng(0)
        pts, comps = [], []
        samples = weak.sample(40_000, rng)
        d2 = ((samples[:, None, :] - weak.means[None]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        for k in range(8):
            spread = samples[nearest == k].std(axis=0).mean()
            assert spread > 1.5 * teacher.comp_std[k]

    def test_deterministic_in_seed(self):
        teacher = make_ring_teacher()
        a = make_weak_teacher(teacher, 2.0, seed=5)
        b = make_weak_teacher(teacher, 2.0, seed=5)
        np.testing.assert_array_equal(a.means, b.means)

    def test_near_unit_multiplier_stays_close(self):
        teacher = make_ring_teacher()
        weak = make_weak_teacher(teacher, 1.0 + 1e-9, seed=0)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((32, 2))
        v0 = teacher.velocity(x, 0.7)
        v1 = weak.velocity(x, 0.7)
        # jitter dominates the difference; it is 0.1 * spread scaled noise
        assert np.linalg.norm(v1 - v0) / np.linalg.norm(v0) < 0.5


class TestEulerSolve:
    def test_identity_when_times_equal(self):
        teacher = make_ring_teacher()
        x = np.ones((3, 2))
        np.testing.assert_array_equal(euler_solve(teacher, x, 0.5, 0.5, 10), x)

    def test_gaussian_world_oracle(self):
        world = GaussianWorld(0.5, 2)
        teacher = GaussianTeacher(world)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((64, 2))
        out = euler_solve(teacher, x, 1.0, 0.0, 10_000)
        np.testing.assert_allclose(out, optimal_cm(x, 1.0, 0.5), atol=1e-3)

    def test_final_step_never_queries_singularity(self):
        teacher = make_ring_teacher()
        rng = np.random.default_rng(1)
        x = rng.standard_normal((16, 2))
        out = euler_solve(teacher, x, 1.0, 0.0, 64)   # mixture field singular at 0
        assert np.all(np.isfinite(out))

    def test_step_count_validated(self):
        with pytest.raises(ValueError):
            euler_solve(make_ring_teacher(), np.zeros((1, 2)), 1.0, 0.0, 0)


def test_gmm_velocity_helper_matches_method():
    teacher = make_ring_teacher()
    x = np.array([[0.3, -0.7]])
    np.testing.assert_array_equal(gmm_velocity(teacher, x, 0.4), teacher.velocity(x, 0.4))
