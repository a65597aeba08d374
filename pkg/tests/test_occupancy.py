import numpy as np
import pytest

from gsocc.core import GaussianSet
from gsocc.errors import ResourceLimitError, ShapeMismatchError
from gsocc.occupancy import (
    AggregationMode,
    GridSpec,
    OccupancyGrid,
    aggregate,
    aggregate_bernoulli,
    aggregate_gf2,
    aggregate_poisson,
    g2o_backward,
    mean_measure,
    voxelize,
)

from conftest import check_param_grads, make_gaussians


def _pair_with_h(h_value, tau=1.0):
    """Two unit-covariance gaussians whose effective opacity at the origin is
    h_value each: place them at distance 0 and solve the logit."""
    logit = tau * np.log(h_value / (1 - h_value))
    return GaussianSet(
        means=np.zeros((2, 3)),
        quats=np.tile([1.0, 0, 0, 0], (2, 1)),
        log_scales=np.zeros((2, 3)),
        opacity_logits=np.full(2, logit),
        embeddings=np.zeros((2, 2)),
    )


class TestPointwiseAggregates:
    def test_empty_set(self):
        g = GaussianSet.empty(d=3)
        assert aggregate_gf2(g, (0, 0, 0)) == 0.0
        assert aggregate_bernoulli(g, (0, 0, 0), 1.0) == 0.0
        assert aggregate_poisson(g, (0, 0, 0), 1.0) == 0.0

    def test_gf2_saturates_at_any_mean(self, rng):
        """Kernel-only union hits 1 at a mean regardless of opacity."""
        g = make_gaussians(rng, 4)
        g.opacity_logits[:] = -50.0
        assert aggregate_gf2(g, g.means[2]) == pytest.approx(1.0)

    def test_gf2_two_halves(self):
        g = _pair_with_h(0.5)
        # kernel value 0.5 at distance sqrt(2 ln 2)
        x = (np.sqrt(2 * np.log(2)), 0.0, 0.0)
        assert aggregate_gf2(g, x) == pytest.approx(0.75, rel=1e-12)

    def test_bernoulli_single(self):
        g = _pair_with_h(0.5).subset([0])
        assert aggregate_bernoulli(g, (0, 0, 0), 1.0) == pytest.approx(0.5)

    def test_bernoulli_two_halves(self):
        g = _pair_with_h(0.5)
        assert aggregate_bernoulli(g, (0, 0, 0), 1.0) == pytest.approx(0.75)

    def test_poisson_unit_intensity(self):
        g = _pair_with_h(0.5)
        val = aggregate_poisson(g, (0, 0, 0), 1.0)
        assert val == pytest.approx(1 - np.exp(-1.0), rel=1e-12)

    def test_poisson_single_full_hit(self):
        logit = np.log(0.999999 / (1 - 0.999999)) * 1e3
        g = GaussianSet.single(mean=(0, 0, 0), opacity_logit=50.0)
        val = aggregate_poisson(g, (0, 0, 0), 1.0)
        assert val == pytest.approx(1 - np.exp(-1.0), rel=1e-6)

    def test_mean_measure_additivity(self, rng):
        g = make_gaussians(rng, 6)
        x = rng.normal(size=3)
        a, b = g.subset(range(3)), g.subset(range(3, 6))
        za = mean_measure(a, x, 0.8)
        zb = mean_measure(b, x, 0.8)
        assert mean_measure(g, x, 0.8) == pytest.approx(za + zb, rel=1e-12)
        pa = aggregate_poisson(a, x, 0.8)
        pb = aggregate_poisson(b, x, 0.8)
        combined = 1 - (1 - pa) * (1 - pb)
        assert aggregate_poisson(g, x, 0.8) == pytest.approx(combined,
                                                             rel=1e-12)

    def test_intensity_scale(self, rng):
        g = make_gaussians(rng, 3)
        x = rng.normal(size=3)
        z1 = mean_measure(g, x, 1.0)
        assert mean_measure(g, x, 1.0, intensity_scale=2.5) == \
            pytest.approx(2.5 * z1, rel=1e-12)


class TestOrderingProperties:
    def test_pointwise_ordering_and_gap(self, rng):
        """poisson <= bernoulli <= gf2 and the z^2/2 gap bound."""
        for _ in range(200):
            g = make_gaussians(rng, int(rng.integers(1, 8)))
            x = rng.uniform(-2, 2, 3)
            tau = float(10 ** rng.uniform(-2, 1))
            pg = aggregate_gf2(g, x)
            pb = aggregate_bernoulli(g, x, tau)
            pp = aggregate_poisson(g, x, tau)
            z = mean_measure(g, x, tau)
            assert pp <= pb + 1e-12
            assert pb <= pg + 1e-12
            assert -1e-12 <= pb - pp <= z * z / 2 + 1e-12

    def test_permutation_invariance(self, rng):
        g = make_gaussians(rng, 7)
        x = rng.normal(size=3)
        perm = rng.permutation(7)
        for mode in AggregationMode:
            v1 = aggregate(g, x, mode, 0.9)
            v2 = aggregate(g.subset(perm), x, mode, 0.9)
            assert v1 == pytest.approx(v2, rel=1e-12, abs=1e-15)

    def test_monotone_in_set_growth(self, rng):
        g = make_gaussians(rng, 5)
        x = rng.normal(size=3)
        for mode in AggregationMode:
            smaller = aggregate(g.subset(range(4)), x, mode, 0.9)
            assert aggregate(g, x, mode, 0.9) >= smaller - 1e-15


class TestVoxelize:
    def test_empty_set_zero_grid(self):
        spec = GridSpec((3, 3, 3), (0, 0, 0), 1.0)
        grid = voxelize(GaussianSet.empty(2), spec, "poisson", 1.0)
        assert np.all(grid.values == 0.0)

    def test_peak_voxel(self):
        spec = GridSpec((3, 3, 3), (-1.5, -1.5, -1.5), 1.0)
        g = GaussianSet.single(mean=(0, 0, 0), log_scale=(-1, -1, -1),
                               opacity_logit=3.0)
        grid = voxelize(g, spec, "poisson", 1.0)
        assert np.unravel_index(np.argmax(grid.values), (3, 3, 3)) == (1, 1, 1)

    @pytest.mark.parametrize("mode", list(AggregationMode))
    def test_matches_pointwise_oracle(self, rng, mode):
        """Grid evaluation equals the brute-force loop over voxel centers."""
        g = make_gaussians(rng, 10)
        spec = GridSpec((8, 8, 8), (-1, -1, -1), 0.25)
        grid = voxelize(g, spec, mode, 0.7, truncation=None)
        brute = np.array([aggregate(g, c, mode, 0.7)
                          for c in spec.centers()]).reshape(spec.dims)
        np.testing.assert_allclose(grid.values, brute, rtol=1e-9, atol=1e-12)

    def test_flat_index_layout(self, rng):
        """values[x, y, z] corresponds to flat index (x*Y + y)*Z + z."""
        g = make_gaussians(rng, 4)
        spec = GridSpec((4, 3, 2), (-1, -1, -1), 0.5)
        grid = voxelize(g, spec, "poisson", 1.0, truncation=None)
        flat = grid.values.reshape(-1)
        x, y, z = 2, 1, 1
        center = spec.center_of((x, y, z))
        expected = aggregate_poisson(g, center, 1.0)
        assert flat[(x * 3 + y) * 2 + z] == pytest.approx(expected, rel=1e-9)

    def test_supersample_averages_offsets(self, rng):
        g = make_gaussians(rng, 5)
        spec = GridSpec((3, 3, 3), (-1, -1, -1), 0.66)
        grid = voxelize(g, spec, "poisson", 1.0, truncation=None,
                        supersample=True)
        offs = np.array([[sx, sy, sz] for sx in (-0.25, 0.25)
                         for sy in (-0.25, 0.25)
                         for sz in (-0.25, 0.25)]) * spec.voxel_size
        brute = np.array([
            np.mean([aggregate_poisson(g, c + o, 1.0) for o in offs])
            for c in spec.centers()]).reshape(spec.dims)
        np.testing.assert_allclose(grid.values, brute, rtol=1e-9, atol=1e-12)

    def test_cell_cap(self):
        spec = GridSpec((1024, 1024, 1024), (0, 0, 0), 1.0)
        with pytest.raises(ResourceLimitError):
            voxelize(GaussianSet.empty(2), spec, "poisson", 1.0)

    def test_truncation_bounds_error(self, rng):
        g = make_gaussians(rng, 6)
        spec = GridSpec((6, 6, 6), (-1.2, -1.2, -1.2), 0.4)
        exact = voxelize(g, spec, "poisson", 1.0, truncation=None)
        truncated = voxelize(g, spec, "poisson", 1.0, truncation=6.0)
        assert np.abs(exact.values - truncated.values).max() < 1e-7

    def test_values_in_unit_interval(self, rng):
        g = make_gaussians(rng, 12)
        spec = GridSpec((5, 5, 5), (-1, -1, -1), 0.4)
        for mode in AggregationMode:
            grid = voxelize(g, spec, mode, 0.5)
            assert grid.values.min() >= 0.0 and grid.values.max() <= 1.0


class TestG2OBackward:
    def test_zero_upstream_zero_grads(self, rng):
        g = make_gaussians(rng, 4)
        spec = GridSpec((3, 3, 3), (-1, -1, -1), 0.5)
        grads = g2o_backward(g, spec, "poisson", 1.0, np.zeros(spec.dims))
        for arr in (grads.d_means, grads.d_quats, grads.d_log_scales,
                    grads.d_opacity_logits, grads.d_embeddings):
            assert np.all(arr == 0.0)

    def test_gf2_opacity_grad_identically_zero(self, rng):
        g = make_gaussians(rng, 4)
        spec = GridSpec((3, 3, 3), (-1, -1, -1), 0.5)
        grads = g2o_backward(g, spec, "gf2", 1.0,
                             rng.normal(size=spec.dims))
        assert np.all(grads.d_opacity_logits == 0.0)

    def test_embedding_grads_zero(self, rng):
        g = make_gaussians(rng, 4)
        spec = GridSpec((3, 3, 3), (-1, -1, -1), 0.5)
        grads = g2o_backward(g, spec, "poisson", 1.0,
                             rng.normal(size=spec.dims))
        assert np.all(grads.d_embeddings == 0.0)

    def test_shape_mismatch(self, rng):
        g = make_gaussians(rng, 2)
        spec = GridSpec((3, 3, 3), (-1, -1, -1), 0.5)
        with pytest.raises(ShapeMismatchError):
            g2o_backward(g, spec, "poisson", 1.0, np.zeros((2, 2, 2)))

    @pytest.mark.parametrize("mode", list(AggregationMode))
    def test_matches_finite_differences(self, rng, mode):
        g = make_gaussians(rng, 3)
        spec = GridSpec((3, 3, 3), (-0.9, -0.9, -0.9), 0.6)
        upstream = rng.normal(size=spec.dims)
        tau = 0.8
        grads = g2o_backward(g, spec, mode, tau, upstream, truncation=None)

        def loss(gs):
            return float(np.sum(
                voxelize(gs, spec, mode, tau, truncation=None).values
                * upstream))

        skip = None
        if mode is AggregationMode.GF2:
            skip = lambda field, i: field == "opacity_logits"
        check_param_grads(loss, g, grads,
                          fields=["means", "quats", "log_scales",
                                  "opacity_logits"], skip=skip)

    def test_single_gaussian_single_voxel_poisson(self, rng):
        g = make_gaussians(rng, 1)
        spec = GridSpec((1, 1, 1), tuple(g.means[0] - 0.3), 0.6)
        upstream = np.ones((1, 1, 1))
        grads = g2o_backward(g, spec, "poisson", 1.0, upstream,
                             truncation=None)

        def loss(gs):
            return float(voxelize(gs, spec, "poisson", 1.0,
                                  truncation=None).values[0, 0, 0])

        check_param_grads(loss, g, grads,
                          fields=["means", "quats", "log_scales",
                                  "opacity_logits"])

    def test_supersample_backward_matches_fd(self, rng):
        g = make_gaussians(rng, 2)
        spec = GridSpec((2, 2, 2), (-0.6, -0.6, -0.6), 0.6)
        upstream = rng.normal(size=spec.dims)
        grads = g2o_backward(g, spec, "poisson", 1.0, upstream,
                             truncation=None, supersample=True)

        def loss(gs):
            return float(np.sum(
                voxelize(gs, spec, "poisson", 1.0, truncation=None,
                         supersample=True).values * upstream))

        check_param_grads(loss, g, grads, fields=["means", "log_scales"])


class TestGridTypes:
    def test_voxel_center_formula(self):
        spec = GridSpec((4, 4, 4), (1.0, 2.0, 3.0), 0.5)
        np.testing.assert_allclose(spec.center_of((0, 0, 0)),
                                   [1.25, 2.25, 3.25])
        np.testing.assert_allclose(spec.centers()[0], [1.25, 2.25, 3.25])

    def test_occupancy_grid_validates_range(self):
        spec = GridSpec((2, 2, 2), (0, 0, 0), 1.0)
        with pytest.raises(Exception):
            OccupancyGrid(spec, np.full(spec.dims, 1.5))

    def test_bad_spec(self):
        with pytest.raises(Exception):
            GridSpec((0, 2, 2), (0, 0, 0), 1.0)
        with pytest.raises(Exception):
            GridSpec((2, 2, 2), (0, 0, 0), -1.0)
