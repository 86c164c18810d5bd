"""Tests for the implicit SDF representation and observation grids."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_gradients_close
from sdfgan import tensor as T
from sdfgan.errors import ConfigError, DimensionError, DomainError, UsageError
from sdfgan.geometry import SdfGrid, grid_coords, lattice_points
from sdfgan.implicit import (
    FeatureGrid4,
    FeatureVolume,
    GridSdf,
    ImplicitSdf,
    SdfMlp,
    build_feature_grid_global,
    build_feature_grid_local,
    global_grids_batch,
    interpolate_feature,
    local_grids_batch,
    query_sdf,
    query_sdf_gradient,
    select_local_regions,
)


def set_effective_weight(layer, effective):
    """Write a desired effective weight through the equalized-LR scaling."""
    layer.weight.data[:] = np.asarray(effective, dtype=np.float64) / layer.coef


def make_passthrough_mlp(in_channels, hidden=8, channel=0, rng=None):
    """An SdfMlp whose output is exactly input feature ``channel``.

    The first layer forms (z, -z); leaky-relu maps that pair to
    (0.96 z + 0.04|z|, -0.96 z + 0.04|z|) up to branch choice, and the
    output weights are solved so the |z| parts cancel, leaving z.
    """
    mlp = SdfMlp(in_channels=in_channels, hidden=hidden, rng=rng)
    w1 = np.zeros((hidden, in_channels))
    w1[0, channel] = 1.0
    w1[1, channel] = -1.0
    set_effective_weight(mlp.fc1, w1)
    mlp.fc1.bias.data[:] = 0.0
    w2 = np.zeros((hidden, hidden))
    w2[0, 0] = 1.0
    w2[1, 1] = 1.0
    set_effective_weight(mlp.fc2, w2)
    mlp.fc2.bias.data[:] = 0.0
    c1 = 0.96 / 0.9984
    c2 = 0.04 * c1 - 1.0
    w3 = np.zeros((1, hidden))
    w3[0, 0] = c1
    w3[0, 1] = c2
    set_effective_weight(mlp.out, w3)
    mlp.out.bias.data[:] = 0.0
    return mlp


def sphere_volume(m, radius=0.5, channels=1):
    """Feature volume whose channel 0 holds the sphere SDF at the nodes."""
    nodes = lattice_points(m)
    ch0 = (np.linalg.norm(nodes, axis=1) - radius).reshape(m, m, m)
    if channels == 1:
        return FeatureVolume(m, 1, values=ch0[None])
    extra = (np.sin(np.pi * nodes[:, 0]) * np.sin(np.pi * nodes[:, 1])
             * np.sin(np.pi * nodes[:, 2])).reshape(m, m, m)
    stack = [ch0] + [extra] * (channels - 1)
    return FeatureVolume(m, channels, values=np.stack(stack))


def sphere_implicit(m=12, radius=0.5):
    vol = sphere_volume(m, radius)
    return ImplicitSdf(vol, make_passthrough_mlp(1))


def bumpy_sphere_implicit(m=32, hidden=8, amp=0.02, seed=5):
    """Sphere SDF plus a small smooth nonlinear perturbation channel."""
    g = np.random.default_rng(seed)
    vol = sphere_volume(m, channels=2)
    mlp = SdfMlp(in_channels=2, hidden=hidden, rng=g)
    w1 = np.zeros((hidden, 2))
    w1[0, 0] = 1.0
    w1[1, 0] = -1.0
    w1[2:, 1] = g.standard_normal(hidden - 2)
    set_effective_weight(mlp.fc1, w1)
    mlp.fc1.bias.data[:] = 0.0
    w2 = np.zeros((hidden, hidden))
    w2[0, 0] = 1.0
    w2[1, 1] = 1.0
    w2[2:, 2:] = g.standard_normal((hidden - 2, hidden - 2)) * 0.5
    set_effective_weight(mlp.fc2, w2)
    mlp.fc2.bias.data[:] = 0.0
    c1 = 0.96 / 0.9984
    c2 = 0.04 * c1 - 1.0
    w3 = np.zeros((1, hidden))
    w3[0, 0] = c1
    w3[0, 1] = c2
    w3[0, 2:] = g.standard_normal(hidden - 2) * amp
    set_effective_weight(mlp.out, w3)
    mlp.out.bias.data[:] = 0.0
    return ImplicitSdf(vol, mlp)


class AnalyticSphere:
    """Exact sphere SDF source, used as an interpolation-free reference."""

    def __init__(self, radius=0.5):
        self.radius = radius

    def query(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return np.linalg.norm(pts, axis=-1) - self.radius

    sample = query


def sphere_grid(resolution, radius=0.5):
    values = AnalyticSphere(radius).sample(lattice_points(resolution))
    return SdfGrid(values.reshape(resolution, resolution, resolution))


class TestFeatureVolume:
    def test_stores_given_values(self, rng):
        values = rng.standard_normal((3, 4, 4, 4))
        vol = FeatureVolume(4, 3, values=values)
        np.testing.assert_allclose(vol.values.data, values)
        assert vol.resolution == 4
        assert vol.channels == 3

    def test_random_init_needs_rng(self):
        with pytest.raises(UsageError):
            FeatureVolume(4, 3)

    def test_random_init_shape_and_trainability(self, rng):
        vol = FeatureVolume(5, 2, rng=rng)
        assert vol.values.shape == (2, 5, 5, 5)
        assert vol.values.requires_grad
        assert len(vol.parameters()) == 1

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(DimensionError):
            FeatureVolume(4, 3, values=rng.standard_normal((3, 4, 4, 5)))
        with pytest.raises(DimensionError):
            FeatureVolume(4, 2, values=rng.standard_normal((3, 4, 4, 4)))


class TestInterpolateFeature:
    def test_constant_volume(self, rng):
        vol = FeatureVolume(4, 2, values=np.full((2, 4, 4, 4), 1.25))
        pts = rng.uniform(-1, 1, size=(20, 3))
        out = interpolate_feature(vol, pts)
        np.testing.assert_allclose(out.data, 1.25)

    def test_exact_at_nodes(self, rng):
        m = 5
        vol = FeatureVolume(m, 3, values=rng.standard_normal((3, m, m, m)))
        nodes = lattice_points(m)
        out = interpolate_feature(vol, nodes)
        want = vol.values.data.reshape(3, -1).T
        np.testing.assert_allclose(out.data, want, atol=1e-13)

    def test_reproduces_affine_fields(self, rng):
        m = 6
        nodes = lattice_points(m)
        coef = rng.standard_normal((2, 4))
        values = (coef[:, 0:1] + nodes.T[None, 0] * coef[:, 1:2]
                  + nodes.T[None, 1] * coef[:, 2:3]
                  + nodes.T[None, 2] * coef[:, 3:4])
        vol = FeatureVolume(m, 2, values=values.reshape(2, m, m, m))
        hull = 1.0 - 1.0 / m
        pts = rng.uniform(-hull, hull, size=(30, 3))
        out = interpolate_feature(vol, pts).data
        want = coef[:, 0] + pts @ coef[:, 1:].T
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_continuous_across_cell_faces(self, rng):
        m = 6
        vol = FeatureVolume(m, 2, values=rng.standard_normal((2, m, m, m)))
        plane = -1.0 + 3.5 * 2.0 / m
        base = rng.uniform(-0.8, 0.8, size=(15, 3))
        lo = base.copy()
        hi = base.copy()
        lo[:, 0] = plane - 1e-6
        hi[:, 0] = plane + 1e-6
        gap = np.abs(interpolate_feature(vol, hi).data
                     - interpolate_feature(vol, lo).data)
        assert gap.max() <= 1e-4 * np.abs(vol.values.data).max()

    def test_constant_beyond_boundary_nodes(self, rng):
        m = 4
        vol = FeatureVolume(m, 1, values=rng.standard_normal((1, m, m, m)))
        hull = 1.0 - 1.0 / m
        inner = interpolate_feature(vol, np.array([hull, 0.1, -0.2]))
        outer = interpolate_feature(vol, np.array([1.0, 0.1, -0.2]))
        np.testing.assert_allclose(outer.data, inner.data, atol=1e-13)

    def test_rejects_points_outside_box(self, rng):
        vol = FeatureVolume(4, 1, rng=rng)
        with pytest.raises(DomainError):
            interpolate_feature(vol, np.array([1.2, 0.0, 0.0]))

    def test_single_point_shape(self, rng):
        vol = FeatureVolume(4, 3, rng=rng)
        assert interpolate_feature(vol, np.zeros(3)).shape == (3,)
        assert interpolate_feature(vol, np.zeros((7, 3))).shape == (7, 3)

    def test_gradient_wrt_values(self, rng):
        m = 3
        values = rng.standard_normal((2, m, m, m))
        pts = rng.uniform(-0.9, 0.9, size=(4, 3))
        coeff = rng.standard_normal((4, 2))

        def fn(v):
            vol = FeatureVolume(m, 2, values=v)
            return (interpolate_feature(vol, pts) * T.Tensor(coeff)).sum()

        assert_gradients_close(fn, [values])

    def test_gradient_wrt_position(self, rng):
        m = 4
        values = rng.standard_normal((2, m, m, m))
        vol = FeatureVolume(m, 2, values=values)
        pts = rng.uniform(-0.6, 0.6, size=(3, 3))
        coeff = rng.standard_normal((3, 2))

        def fn(x):
            return (interpolate_feature(vol, x) * T.Tensor(coeff)).sum()

        assert_gradients_close(fn, [pts])

    @given(seed=st.integers(0, 2 ** 16))
    @settings(max_examples=20, deadline=None)
    def test_affine_exactness_property(self, seed):
        g = np.random.default_rng(seed)
        m = 4
        nodes = lattice_points(m)
        coef = g.standard_normal(4)
        values = coef[0] + nodes @ coef[1:]
        vol = FeatureVolume(m, 1, values=values.reshape(1, m, m, m))
        hull = 1.0 - 1.0 / m
        pts = g.uniform(-hull, hull, size=(5, 3))
        out = interpolate_feature(vol, pts).data[:, 0]
        np.testing.assert_allclose(out, coef[0] + pts @ coef[1:], atol=1e-12)


class TestImplicitSdf:
    def test_zero_weights_return_bias(self, rng):
        vol = FeatureVolume(4, 2, rng=rng)
        mlp = SdfMlp(in_channels=2, hidden=8, rng=rng)
        mlp.fc1.weight.data[:] = 0.0
        mlp.fc1.bias.data[:] = 0.0
        mlp.fc2.weight.data[:] = 0.0
        mlp.fc2.bias.data[:] = 0.0
        mlp.out.weight.data[:] = 0.0
        mlp.out.bias.data[:] = 0.1
        src = ImplicitSdf(vol, mlp)
        pts = rng.uniform(-1, 1, size=(9, 3))
        np.testing.assert_allclose(src.sample(pts), 0.1, atol=1e-15)

    def test_passthrough_mlp_matches_interpolation(self, rng):
        m = 5
        vol = FeatureVolume(m, 3, values=rng.standard_normal((3, m, m, m)))
        src = ImplicitSdf(vol, make_passthrough_mlp(3, channel=1, rng=rng))
        pts = rng.uniform(-1, 1, size=(50, 3))
        want = interpolate_feature(vol, pts).data[:, 1]
        np.testing.assert_allclose(src.sample(pts), want, atol=1e-12)

    def test_query_returns_graph_tensor(self, rng):
        vol = FeatureVolume(4, 2, rng=rng)
        src = ImplicitSdf(vol, SdfMlp(in_channels=2, hidden=8, rng=rng))
        out = src.query(rng.uniform(-1, 1, size=(6, 3)))
        assert isinstance(out, T.Tensor)
        assert out.shape == (6,)
        loss = (out * out).sum()
        grads = T.grad(loss, [vol.values])
        assert np.abs(grads[0].data).max() > 0.0

    def test_gradient_wrt_volume_matches_fd(self, rng):
        m = 3
        values = rng.standard_normal((2, m, m, m))
        mlp = SdfMlp(in_channels=2, hidden=8, rng=rng)
        pts = rng.uniform(-0.9, 0.9, size=(4, 3))

        def fn(v):
            src = ImplicitSdf(FeatureVolume(m, 2, values=v), mlp)
            out = src.query(pts)
            return (out * out).sum()

        assert_gradients_close(fn, [values], rtol=1e-3)


class TestGridSdf:
    def test_smooth_point_matches_analytic(self):
        src = GridSdf(sphere_grid(128))
        got = src.query(np.array([0.3, 0.0, 0.0]))
        assert abs(got - (-0.2)) <= 1e-3

    def test_center_error_bounded_by_lattice_diagonal(self):
        for res in (64, 128):
            src = GridSdf(sphere_grid(res))
            got = src.query(np.zeros(3))
            assert abs(got - (-0.5)) <= np.sqrt(3.0) / res + 1e-9

    def test_exact_at_lattice_points(self, rng):
        res = 16
        grid = sphere_grid(res)
        src = GridSdf(grid)
        pts = lattice_points(res)
        idx = rng.choice(res ** 3, size=40, replace=False)
        got = src.query(pts[idx])
        np.testing.assert_allclose(got, grid.values.reshape(-1)[idx], atol=1e-13)

    def test_accepts_raw_array(self):
        res = 8
        values = sphere_grid(res).values
        src = GridSdf(values)
        assert isinstance(src.grid, SdfGrid)

    def test_rejects_points_outside_box(self):
        src = GridSdf(sphere_grid(8))
        with pytest.raises(DomainError):
            src.query(np.array([[0.0, -1.5, 0.0]]))


class TestQuerySdfGradient:
    def test_sphere_normal_is_radial(self):
        src = AnalyticSphere()
        pts = np.array([[0.3, 0.0, 0.0], [0.0, -0.4, 0.0], [0.0, 0.0, 0.25]])
        got = query_sdf_gradient(src, pts, h=1.0 / 32)
        want = np.array([[1, 0, 0], [0, -1, 0], [0, 0, 1]], dtype=np.float64)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_grid_sphere_normal_close_to_radial(self):
        src = GridSdf(sphere_grid(128))
        pts = np.array([[0.3, 0.0, 0.0], [0.0, 0.35, 0.0]])
        got = query_sdf_gradient(src, pts, h=1.0 / 16)
        want = np.array([[1, 0, 0], [0, 1, 0]], dtype=np.float64)
        np.testing.assert_allclose(got, want, atol=5e-3)

    def test_affine_field_gives_exact_direction(self, rng):
        res = 16
        b = np.array([0.3, -0.2, 0.1])
        values = (lattice_points(res) @ b).reshape(res, res, res)
        src = GridSdf(SdfGrid(values))
        pts = rng.uniform(-0.8, 0.8, size=(10, 3))
        got = query_sdf_gradient(src, pts, h=1.0 / 16)
        want = np.tile(b / np.linalg.norm(b), (10, 1))
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_constant_field_gives_zero_vector(self):
        src = GridSdf(SdfGrid(np.full((8, 8, 8), 0.3)))
        got = query_sdf_gradient(src, np.zeros((1, 3)), h=0.1)
        np.testing.assert_allclose(got, 0.0, atol=1e-15)

    def test_clipped_stencil_near_faces(self):
        src = AnalyticSphere()
        got = query_sdf_gradient(src, np.array([[0.99, 0.0, 0.0]]), h=0.05)
        np.testing.assert_allclose(got, [[1.0, 0.0, 0.0]], atol=1e-9)

    def test_implicit_source_stays_on_graph(self, rng):
        vol = FeatureVolume(4, 2, rng=rng)
        src = ImplicitSdf(vol, SdfMlp(in_channels=2, hidden=8, rng=rng))
        out = query_sdf_gradient(src, rng.uniform(-0.9, 0.9, size=(5, 3)), h=0.05)
        assert isinstance(out, T.Tensor)
        assert out.shape == (5, 3)
        grads = T.grad(out.sum(), [vol.values])
        assert np.isfinite(grads[0].data).all()

    def test_rejects_nonpositive_step(self):
        with pytest.raises(UsageError):
            query_sdf_gradient(AnalyticSphere(), np.zeros((1, 3)), h=0.0)

    def test_query_sdf_dispatches(self, rng):
        src = AnalyticSphere()
        pts = rng.uniform(-1, 1, size=(4, 3))
        np.testing.assert_allclose(query_sdf(src, pts), src.query(pts))


class TestGlobalFeatureGrid:
    def test_shape_origin_and_cell_size(self):
        grid = build_feature_grid_global(AnalyticSphere(), k=8)
        assert grid.values.shape == (4, 8, 8, 8)
        assert grid.resolution == 8
        np.testing.assert_allclose(grid.origin, np.full(3, -1.0 + 1.0 / 8))
        np.testing.assert_allclose(grid.cell_size, 2.0 / 8)

    def test_value_channel_matches_direct_query(self):
        src = AnalyticSphere()
        k = 8
        grid = build_feature_grid_global(src, k=k)
        want = src.query(lattice_points(k)).reshape(k, k, k)
        np.testing.assert_allclose(np.asarray(grid.values.data)[0], want,
                                   atol=1e-13)

    def test_gradient_channels_are_unit_vectors(self):
        k = 8
        grid = np.asarray(build_feature_grid_global(AnalyticSphere(), k=k)
                          .values.data)
        norms = np.sqrt((grid[1:] ** 2).sum(axis=0))
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_grid_resample_matches_implicit_source(self):
        src = bumpy_sphere_implicit(m=32)
        res = 128
        sampled = src.sample(lattice_points(res)).reshape(res, res, res)
        resampled = GridSdf(SdfGrid(sampled))
        from_implicit = np.asarray(
            build_feature_grid_global(src, k=16).values.data)
        from_grid = np.asarray(
            build_feature_grid_global(resampled, k=16).values.data)
        assert np.abs(from_implicit - from_grid).max() <= 5e-3

    def test_implicit_source_keeps_parameter_gradients(self, rng):
        vol = FeatureVolume(4, 2, rng=rng)
        src = ImplicitSdf(vol, SdfMlp(in_channels=2, hidden=8, rng=rng))
        grid = build_feature_grid_global(src, k=4)
        assert isinstance(grid.values, T.Tensor)
        grads = T.grad(grid.values.sum(), [vol.values])
        assert np.isfinite(grads[0].data).all()


class TestLocalFeatureGrid:
    def test_shape_origin_and_cell_size(self):
        center = np.array([0.2, -0.1, 0.3])
        grid = build_feature_grid_local(AnalyticSphere(), center, k=8,
                                        box_size=0.25)
        assert grid.values.shape == (4, 8, 8, 8)
        np.testing.assert_allclose(grid.origin,
                                   center - 0.125 + 0.25 / 16)
        np.testing.assert_allclose(grid.cell_size, 0.25 / 8)

    def test_value_channel_matches_direct_query(self):
        src = AnalyticSphere()
        center = np.array([0.4, 0.0, -0.2])
        k, box = 6, 0.25
        grid = build_feature_grid_local(src, center, k=k, box_size=box)
        offsets = -box / 2 + (np.arange(k) + 0.5) * (box / k)
        gx, gy, gz = np.meshgrid(*[center[i] + offsets for i in range(3)],
                                 indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        want = src.query(pts).reshape(k, k, k)
        np.testing.assert_allclose(np.asarray(grid.values.data)[0], want,
                                   atol=1e-13)

    def test_matches_independent_analytic_grid(self):
        center = np.array([0.31, 0.28, 0.19])
        k, box = 8, 0.25
        got = np.asarray(build_feature_grid_local(AnalyticSphere(), center,
                                                  k=k, box_size=box).values.data)
        offsets = -box / 2 + (np.arange(k) + 0.5) * (box / k)
        gx, gy, gz = np.meshgrid(*[center[i] + offsets for i in range(3)],
                                 indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        r = np.linalg.norm(pts, axis=1)
        want = np.concatenate([(r - 0.5)[None], (pts / r[:, None]).T],
                              axis=0).reshape(4, k, k, k)
        assert np.abs(got - want).max() <= 2e-3

    def test_rejects_windows_leaving_the_box(self):
        with pytest.raises(DomainError):
            build_feature_grid_local(AnalyticSphere(), np.array([0.95, 0, 0]),
                                     k=4, box_size=0.25)

    def test_window_touching_face_is_allowed(self):
        center = np.array([1.0 - 0.125, 0.0, 0.0])
        grid = build_feature_grid_local(AnalyticSphere(), center, k=4,
                                        box_size=0.25)
        assert np.isfinite(np.asarray(grid.values.data)).all()


class TestFeatureGrid4:
    def test_rejects_bad_shapes(self):
        with pytest.raises(DimensionError):
            FeatureGrid4(np.zeros((3, 4, 4, 4)), np.zeros(3), 0.1)
        with pytest.raises(DimensionError):
            FeatureGrid4(np.zeros((4, 4, 4, 5)), np.zeros(3), 0.1)


class TestSelectLocalRegions:
    def test_matches_brute_force_pool(self, rng):
        src = AnalyticSphere()
        k, box, n0, s = 12, 0.25, 60, 12
        centers = select_local_regions(src, n_candidates=n0, n_regions=s,
                                       box_size=box, rng=np.random.default_rng(3),
                                       k=k)
        pts = lattice_points(k)
        sdf = np.abs(src.sample(pts))
        eligible = np.nonzero((np.abs(pts) <= 1 - box / 2 + 1e-12).all(axis=1))[0]
        order = eligible[np.lexsort((eligible, sdf[eligible]))]
        pool = {tuple(p) for p in pts[order[:n0]]}
        got = {tuple(c) for c in centers}
        assert len(got) == s
        assert got <= pool

    def test_pool_equal_to_count_returns_exact_set(self):
        src = AnalyticSphere()
        k, box, s = 10, 0.25, 9
        centers = select_local_regions(src, n_candidates=s, n_regions=s,
                                       box_size=box, rng=np.random.default_rng(0),
                                       k=k)
        pts = lattice_points(k)
        sdf = np.abs(src.sample(pts))
        eligible = np.nonzero((np.abs(pts) <= 1 - box / 2 + 1e-12).all(axis=1))[0]
        order = eligible[np.lexsort((eligible, sdf[eligible]))]
        want = {tuple(p) for p in pts[order[:s]]}
        assert {tuple(c) for c in centers} == want

    def test_centers_lie_on_lattice(self):
        k = 8
        centers = select_local_regions(AnalyticSphere(), n_candidates=20,
                                       n_regions=5, rng=np.random.default_rng(1),
                                       k=k)
        lattice = {tuple(p) for p in lattice_points(k)}
        assert all(tuple(c) in lattice for c in centers)

    def test_deterministic_under_seed(self):
        kwargs = dict(n_candidates=30, n_regions=6, k=10)
        a = select_local_regions(AnalyticSphere(),
                                 rng=np.random.default_rng(7), **kwargs)
        b = select_local_regions(AnalyticSphere(),
                                 rng=np.random.default_rng(7), **kwargs)
        np.testing.assert_array_equal(a, b)

    def test_accepts_precomputed_values(self):
        src = AnalyticSphere()
        k = 8
        values = src.sample(lattice_points(k))
        a = select_local_regions(src, n_candidates=15, n_regions=4,
                                 rng=np.random.default_rng(2), k=k)
        b = select_local_regions(src, n_candidates=15, n_regions=4,
                                 rng=np.random.default_rng(2), k=k,
                                 values=values)
        np.testing.assert_array_equal(a, b)

    def test_pool_smaller_than_count_rejected(self):
        with pytest.raises(ConfigError):
            select_local_regions(AnalyticSphere(), n_candidates=3, n_regions=4)

    def test_too_few_eligible_centers_rejected(self):
        with pytest.raises(ConfigError):
            select_local_regions(AnalyticSphere(), n_candidates=64,
                                 n_regions=60, k=4, box_size=1.5,
                                 rng=np.random.default_rng(0))

    def test_defaults(self):
        import inspect

        sig = inspect.signature(select_local_regions)
        assert sig.parameters["n_candidates"].default == 2048
        assert sig.parameters["n_regions"].default == 16
        assert sig.parameters["box_size"].default == 0.25


class TestBatchedGrids:
    def _batch(self, rng, n=3, m=6, channels=2):
        values = rng.standard_normal((n, channels, m, m, m))
        mlp = SdfMlp(in_channels=channels, hidden=8, rng=rng)
        return values, mlp

    def test_global_batch_matches_single(self, rng):
        values, mlp = self._batch(rng)
        k = 5
        batched = global_grids_batch(T.Tensor(values), mlp, k=k)
        assert batched.shape == (values.shape[0], 4, k, k, k)
        for i in range(values.shape[0]):
            vol = FeatureVolume(6, 2, values=values[i])
            single = build_feature_grid_global(ImplicitSdf(vol, mlp), k=k)
            np.testing.assert_allclose(batched.data[i],
                                       np.asarray(single.values.data),
                                       atol=1e-12)

    def test_local_batch_matches_single(self, rng):
        values, mlp = self._batch(rng, n=2)
        k, box = 4, 0.25
        centers = rng.uniform(-0.5, 0.5, size=(2, 3, 3))
        batched = local_grids_batch(T.Tensor(values), mlp, centers, k=k,
                                    box_size=box)
        assert batched.shape == (6, 4, k, k, k)
        for i in range(2):
            vol = FeatureVolume(6, 2, values=values[i])
            src = ImplicitSdf(vol, mlp)
            for j in range(3):
                single = build_feature_grid_local(src, centers[i, j], k=k,
                                                  box_size=box)
                np.testing.assert_allclose(batched.data[i * 3 + j],
                                           np.asarray(single.values.data),
                                           atol=1e-12)

    def test_center_batch_mismatch_rejected(self, rng):
        values, mlp = self._batch(rng, n=2)
        with pytest.raises(DimensionError):
            local_grids_batch(T.Tensor(values), mlp,
                              np.zeros((3, 2, 3)), k=4, box_size=0.25)

    def test_batched_gradients_match_fd(self, rng):
        m, k = 3, 2
        values = rng.standard_normal((2, 1, m, m, m))
        mlp = SdfMlp(in_channels=1, hidden=4, rng=rng)
        coeff = rng.standard_normal((2, 4, k, k, k))

        def fn(v):
            grids = global_grids_batch(v, mlp, k=k)
            return (grids * T.Tensor(coeff)).sum()

        assert_gradients_close(fn, [values], rtol=1e-3, atol=1e-6)

    def test_batched_second_order_gradients(self, rng):
        m, k = 3, 2
        values = T.Tensor(rng.standard_normal((1, 1, m, m, m)),
                          requires_grad=True)
        mlp = SdfMlp(in_channels=1, hidden=4, rng=rng)
        grids = global_grids_batch(values, mlp, k=k)
        first = T.grad((grids * grids).sum(), [values], create_graph=True)[0]
        second = T.grad((first * first).sum(), [values])[0]
        assert np.isfinite(second.data).all()
        assert np.abs(second.data).max() > 0.0
