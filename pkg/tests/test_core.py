import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gsocc.core import (
    GaussianSet,
    assert_spd,
    build_covariance,
    effective_opacity,
    eval_kernel,
    kernel_point_grads,
    tempered_opacity,
    tempered_opacity_grad,
)
from gsocc.errors import InvalidParameterError, NumericalDegeneracyError

from conftest import make_gaussians


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance((1, 0, 0, 0), (0, 0, 0))
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-15)

    def test_axis_aligned_scaling(self):
        cov = build_covariance((1, 0, 0, 0), (np.log(2), 0, 0))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotated_scaling(self):
        # 90 degrees about z maps the x-variance onto the y axis.
        q = (np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))
        cov = build_covariance(q, (np.log(2), 0, 0))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_spectrum_matches_scales(self, rng):
        """Rotation preserves the eigenvalue spectrum exp(2 s)."""
        for _ in range(50):
            q = rng.normal(size=4)
            s = rng.uniform(-2, 1, 3)
            cov = build_covariance(q, s)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(np.exp(2 * s)),
                                       rtol=1e-9, atol=1e-12)

    def test_symmetric_positive_definite(self, rng):
        for _ in range(20):
            cov = build_covariance(rng.normal(size=4), rng.uniform(-2, 1, 3))
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.linalg.eigvalsh(cov).min() > 0

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_covariance((np.nan, 0, 0, 0), (0, 0, 0))
        with pytest.raises(InvalidParameterError):
            build_covariance((1, 0, 0, 0), (np.inf, 0, 0))


class TestEvalKernel:
    def test_peak_at_mean(self, rng):
        g = make_gaussians(rng, 1)
        assert eval_kernel(g, g.means[0])[0] == pytest.approx(1.0)

    def test_unit_isotropic_at_distance_one(self):
        g = GaussianSet.single(mean=(0, 0, 0))
        val = eval_kernel(g, (1.0, 0.0, 0.0))[0]
        assert val == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_far_field_decay(self):
        g = GaussianSet.single(mean=(0, 0, 0))
        assert eval_kernel(g, (10.0, 0.0, 0.0))[0] < 1e-21

    def test_rigid_invariance(self, rng):
        """Jointly transforming means, rotations, and the query point leaves
        the kernel unchanged."""
        for _ in range(20):
            g = make_gaussians(rng, 3)
            x = rng.normal(size=3)
            rot = Rotation.random(random_state=int(rng.integers(1 << 30)))
            t = rng.normal(size=3)
            q_rot = rot.as_quat()  # (x, y, z, w)
            q_rot = np.array([q_rot[3], q_rot[0], q_rot[1], q_rot[2]])
            new_quats = np.array([_quat_mul(q_rot, q) for q in g.quats])
            g2 = GaussianSet(g.means @ rot.as_matrix().T + t, new_quats,
                             g.log_scales, g.opacity_logits, g.embeddings)
            v1 = eval_kernel(g, x)
            v2 = eval_kernel(g2, rot.as_matrix() @ x + t)
            np.testing.assert_allclose(v1, v2, rtol=1e-9, atol=1e-12)

    def test_assert_spd_raises_on_singular(self):
        with pytest.raises(NumericalDegeneracyError):
            assert_spd(np.diag([1.0, 1.0, 1e-14]))


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


class TestTemperedOpacity:
    def test_symmetry_point(self):
        for tau in (1e-6, 1e-3, 1.0, 100.0):
            assert tempered_opacity(0.0, tau) == pytest.approx(0.5)

    def test_scalar_value(self):
        assert tempered_opacity(2.0, 1.0) == pytest.approx(1 / (1 + np.exp(-2)),
                                                           rel=1e-12)

    def test_hard_saturation(self):
        assert tempered_opacity(2.0, 1e-3) == pytest.approx(1.0, abs=1e-12)
        assert tempered_opacity(-2.0, 1e-3) == pytest.approx(0.0, abs=1e-12)

    def test_never_nan(self):
        logits = np.array([-1e8, -745.0, 0.0, 745.0, 1e8])
        for tau in (1e-6, 1.0, 1e3):
            out = tempered_opacity(logits, tau)
            assert np.all(np.isfinite(out))

    def test_sharpening_toward_extremes(self, rng):
        """Smaller tau moves positive logits up and negative logits down."""
        logits = rng.normal(size=200)
        a_small = tempered_opacity(logits, 0.1)
        a_large = tempered_opacity(logits, 1.0)
        pos = logits > 0
        assert np.all(a_small[pos] >= a_large[pos])
        assert np.all(a_small[~pos] <= a_large[~pos])

    def test_monotone_in_logit(self):
        xs = np.linspace(-5, 5, 101)
        out = tempered_opacity(xs, 0.7)
        assert np.all(np.diff(out) > 0)

    def test_invalid_tau(self):
        with pytest.raises(InvalidParameterError):
            tempered_opacity(0.0, 0.0)
        with pytest.raises(InvalidParameterError):
            tempered_opacity(0.0, -1.0)


class TestEffectiveOpacity:
    def test_product_at_mean(self):
        g = GaussianSet.single(mean=(0, 0, 0), opacity_logit=0.0)
        assert effective_opacity(g, (0, 0, 0), 1.0)[0] == pytest.approx(0.5)

    def test_hand_product(self):
        g = GaussianSet.single(mean=(0, 0, 0), opacity_logit=2.0)
        val = effective_opacity(g, (1.0, 0, 0), 1.0)[0]
        expected = (1 / (1 + np.exp(-2))) * np.exp(-0.5)
        assert val == pytest.approx(expected, rel=1e-12)
        assert val == pytest.approx(0.53423, rel=1e-4)

    def test_vanishing_opacity(self, rng):
        g = GaussianSet.single(mean=(0, 0, 0), opacity_logit=-50.0)
        x = rng.normal(size=3)
        assert effective_opacity(g, x, 1.0)[0] < 1e-20


class TestCoreGradients:
    def test_kernel_grads_match_fd(self, rng):
        """Analytic kernel gradients vs central differences, all fields."""
        from conftest import perturb
        for _ in range(30):
            g = make_gaussians(rng, 2)
            x = rng.normal(size=3)
            out = kernel_point_grads(g, x)
            h = 1e-4
            for field, key in (("means", "d_mean"), ("quats", "d_quat"),
                               ("log_scales", "d_log_scale")):
                size = getattr(g, field).size
                n_per = size // len(g)
                for i in range(size):
                    fd = (eval_kernel(perturb(g, field, i, h), x)[i // n_per]
                          - eval_kernel(perturb(g, field, i, -h), x)[i // n_per]
                          ) / (2 * h)
                    an = out[key].reshape(-1)[i]
                    assert an == pytest.approx(fd, rel=1e-3, abs=1e-7)

    def test_tempered_opacity_grad_matches_fd(self, rng):
        logits = rng.normal(size=50)
        for tau in (0.3, 1.0, 3.0):
            an = tempered_opacity_grad(logits, tau)
            h = 1e-6
            fd = (tempered_opacity(logits + h, tau)
                  - tempered_opacity(logits - h, tau)) / (2 * h)
            np.testing.assert_allclose(an, fd, rtol=1e-6, atol=1e-12)


class TestGaussianSetInvariants:
    def test_quats_normalized(self, rng):
        g = make_gaussians(rng, 10)
        np.testing.assert_allclose(np.linalg.norm(g.quats, axis=1), 1.0,
                                   atol=1e-6)

    def test_scales_clamped(self):
        g = GaussianSet.single(mean=(0, 0, 0), log_scale=(-100, 0, 100))
        scales = np.exp(g.log_scales[0])
        assert scales[0] == pytest.approx(1e-6)
        assert scales[2] == pytest.approx(1e3)

    def test_ragged_embeddings_rejected(self):
        with pytest.raises((InvalidParameterError, ValueError)):
            GaussianSet(
                means=np.zeros((2, 3)),
                quats=np.tile([1, 0, 0, 0], (2, 1)),
                log_scales=np.zeros((2, 3)),
                opacity_logits=np.zeros(2),
                embeddings=np.array([[1.0, 0.0], [1.0, 0.0, 0.0]],
                                    dtype=object),
            )

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidParameterError):
            GaussianSet.single(mean=(np.nan, 0, 0))

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InvalidParameterError):
            GaussianSet.single(mean=(0, 0, 0), quat=(0, 0, 0, 0))
