"""Implicit SDF sources and the value/gradient grids built from them.

An SDF source is either a feature volume paired with a shared MLP head
(differentiable, used for generated shapes) or a discrete sample grid with
trilinear lookup (used for dataset shapes).  Both are turned into 4-channel
grids of SDF value plus unit-normalized finite-difference gradient, the
observation format both discriminators consume.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, UsageError
from .geometry import SdfGrid, grid_coords, lattice_points
from .nn import EqualizedLinear, Module

_EPS = 1e-8
_BOX_TOL = 1e-9


class FeatureVolume(Module):
    """Latent feature field stored at the cell centers of [-1, 1]^3.

    ``values`` has shape (channels, m, m, m); node i sits at
    ``-1 + (2 i + 1) / m`` per axis.  When no values are given, a trainable
    standard-normal parameter is created.
    """

    def __init__(self, resolution=32, channels=16, values=None, rng=None):
        if values is None:
            if rng is None:
                raise UsageError("FeatureVolume needs either values or an rng")
            self._param = T.Parameter(
                rng.standard_normal((channels, resolution, resolution, resolution)),
                name="volume")
            values = self._param.tensor
        else:
            self._param = None
            if not isinstance(values, T.Tensor):
                values = T.Tensor(np.asarray(values, dtype=np.float64))
        shape = values.shape
        if len(shape) != 4 or shape[1:] != (resolution,) * 3 or shape[0] != channels:
            raise DimensionError(
                f"feature volume values must have shape ({channels}, {resolution}, "
                f"{resolution}, {resolution}), got {shape}")
        self.resolution = resolution
        self.channels = channels
        self.values = values


class SdfMlp(Module):
    """Two-hidden-layer MLP mapping a feature vector to one signed distance."""

    def __init__(self, in_channels=16, hidden=64, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.fc1 = EqualizedLinear(in_channels, hidden, rng)
        self.fc2 = EqualizedLinear(hidden, hidden, rng)
        self.out = EqualizedLinear(hidden, 1, rng)

    def __call__(self, features):
        h = T.leaky_relu(self.fc1(features))
        h = T.leaky_relu(self.fc2(h))
        return self.out(h)


def _check_in_box(points):
    if points.size and np.abs(points).max() > 1.0 + _BOX_TOL:
        raise DomainError("query points must lie inside [-1, 1]^3")


def _as_points(x):
    data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    single = data.ndim == 1
    if single:
        data = data.reshape(1, 3)
        x = x.reshape((1, 3)) if isinstance(x, T.Tensor) else data
    if data.ndim != 2 or data.shape[1] != 3:
        raise DimensionError("points must have shape (n, 3)")
    return x, data, single


def interpolate_feature(volume, x):
    """Trilinear feature lookup, differentiable in the volume values and x.

    Coordinates between the boundary nodes and the box faces clamp to the
    boundary node (constant extrapolation), so the lookup is defined on all
    of [-1, 1]^3.  Accepts a single point (3,) or a batch (n, 3); returns
    (channels,) or (n, channels).
    """
    x, data, single = _as_points(x)
    _check_in_box(data)
    m = volume.resolution
    pts = x if isinstance(x, T.Tensor) else T.Tensor(data)
    u = (pts + 1.0) * (m / 2.0) - 0.5
    i0 = np.clip(np.floor(u.data), 0, m - 2).astype(np.int64)
    frac = u - T.Tensor(i0.astype(np.float64))
    # clamp to [0, 1] as a constant mask so clipped coordinates stop
    # contributing position gradients
    inside = ((frac.data > 0.0) & (frac.data < 1.0)).astype(np.float64)
    high = (frac.data >= 1.0).astype(np.float64)
    frac = frac * T.Tensor(inside) + T.Tensor(high)

    axis_frac = [T.narrow(frac, 1, axis, 1) for axis in range(3)]
    flat = volume.values.reshape((volume.channels, m ** 3))
    acc = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                lin = ((i0[:, 0] + dx) * m + (i0[:, 1] + dy)) * m + (i0[:, 2] + dz)
                plan = T.GatherPlan(lin, size=m ** 3)
                gathered = T.index_select_last(flat, plan)
                weight = None
                for axis, d in enumerate((dx, dy, dz)):
                    f = axis_frac[axis]
                    w = f if d else 1.0 - f
                    weight = w if weight is None else weight * w
                term = gathered * weight.reshape((1, -1))
                acc = term if acc is None else acc + term
    out = acc.transpose((1, 0))
    return out.reshape((volume.channels,)) if single else out


class ImplicitSdf:
    """SDF source defined by a feature volume and a shared MLP head."""

    def __init__(self, volume, mlp):
        self.volume = volume
        self.mlp = mlp

    def query(self, points):
        """Signed distances as a graph-attached Tensor of shape (n,)."""
        points, _, single = _as_points(points)
        feats = interpolate_feature(self.volume, points)
        out = self.mlp(feats).reshape((-1,))
        return out.reshape(()) if single else out

    def sample(self, points):
        """Plain ndarray of signed distances, off the differentiation graph."""
        with T.no_grad():
            out = self.query(points)
        return np.asarray(out.data, dtype=np.float64).reshape(-1)


class GridSdf:
    """SDF source backed by a discrete sample grid with trilinear lookup."""

    def __init__(self, grid):
        if not isinstance(grid, SdfGrid):
            grid = SdfGrid(grid)
        self.grid = grid

    def query(self, points):
        _, data, single = _as_points(points)
        _check_in_box(data)
        out = self.grid.sample(data)
        return out[0] if single else out

    sample = query


def query_sdf(src, points):
    """Signed distances of a source at the given points.

    Implicit sources return a Tensor on the differentiation graph; grid
    sources return a plain ndarray.
    """
    return src.query(points)


def query_sdf_gradient(src, points, h):
    """Unit-normalized central-difference SDF gradients, shape (n, 3).

    Offset points are clipped into the box and each difference is divided
    by the actual span, so queries within ``h`` of a face degrade to
    one-sided differences.  The epsilon-guarded normalization returns a
    zero vector where the field is locally constant.  For implicit sources
    the result stays on the differentiation graph.
    """
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    _, pts, _ = _as_points(points)
    _check_in_box(pts)
    stacked = []
    spans = []
    for axis in range(3):
        plus = pts.copy()
        minus = pts.copy()
        plus[:, axis] = np.clip(plus[:, axis] + h, -1.0, 1.0)
        minus[:, axis] = np.clip(minus[:, axis] - h, -1.0, 1.0)
        spans.append(plus[:, axis] - minus[:, axis])
        stacked.append(plus)
        stacked.append(minus)
    values = src.query(np.concatenate(stacked, axis=0))
    n = pts.shape[0]
    if isinstance(values, T.Tensor):
        diffs = []
        for axis in range(3):
            plus = T.narrow(values, 0, 2 * axis * n, n)
            minus = T.narrow(values, 0, (2 * axis + 1) * n, n)
            diffs.append(((plus - minus) / T.Tensor(spans[axis])).reshape((n, 1)))
        grad = T.concat(diffs, axis=1)
        norm = T.sqrt((grad * grad).sum(axis=1, keepdims=True) + _EPS * _EPS)
        return grad / (norm + _EPS)
    values = np.asarray(values)
    grad = np.stack(
        [(values[2 * axis * n:(2 * axis + 1) * n]
          - values[(2 * axis + 1) * n:(2 * axis + 2) * n]) / spans[axis]
         for axis in range(3)], axis=1)
    norm = np.sqrt((grad * grad).sum(axis=1, keepdims=True) + _EPS * _EPS)
    return grad / (norm + _EPS)


class FeatureGrid4:
    """A 4 x K x K x K observation grid: SDF value plus unit gradient.

    ``origin`` is the first cell center and ``cell_size`` the lattice pitch
    of the sampling window the grid was built on.
    """

    def __init__(self, values, origin, cell_size):
        if not isinstance(values, T.Tensor):
            values = T.Tensor(np.asarray(values, dtype=np.float64))
        shape = values.shape
        if len(shape) != 4 or shape[0] != 4 or len(set(shape[1:])) != 1:
            raise DimensionError(
                f"feature grid values must have shape (4, k, k, k), got {shape}")
        self.values = values
        self.origin = np.broadcast_to(
            np.asarray(origin, dtype=np.float64), (3,)).copy()
        self.cell_size = float(cell_size)

    @property
    def resolution(self):
        return self.values.shape[1]


def _assemble_grid(src, axes, h, origin, cell_size):
    k = len(axes[0])
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values = src.query(pts)
    grads = query_sdf_gradient(src, pts, h)
    if isinstance(values, T.Tensor):
        value_row = values.reshape((1, -1))
        grad_rows = grads.transpose((1, 0))
        stacked = T.concat([value_row, grad_rows], axis=0)
    else:
        stacked = np.concatenate([values.reshape(1, -1), grads.T], axis=0)
    return FeatureGrid4(T.reshape(T.as_tensor(stacked), (4, k, k, k)),
                        origin, cell_size)


def build_feature_grid_global(src, k=32):
    """Sample a source over [-1, 1]^3 into a 4 x k x k x k grid.

    Values and gradients are taken at the k^3 cell centers with
    finite-difference step 1/k.
    """
    coords = grid_coords(k)
    return _assemble_grid(src, (coords, coords, coords), 1.0 / k,
                          origin=coords[0], cell_size=2.0 / k)


def build_feature_grid_local(src, center, k=16, box_size=0.25):
    """Sample a source over a cube of side ``box_size`` at ``center``.

    The window is divided into k^3 cells sampled at their centers with
    finite-difference step ``box_size / (2 k)``.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if np.abs(center).max() + box_size / 2.0 > 1.0 + _BOX_TOL:
        raise DomainError("local region escapes the [-1, 1]^3 box")
    offsets = -box_size / 2.0 + (np.arange(k) + 0.5) * (box_size / k)
    axes = tuple(center[i] + offsets for i in range(3))
    return _assemble_grid(src, axes, box_size / (2.0 * k),
                          origin=center + offsets[0], cell_size=box_size / k)


def select_local_regions(src, n_candidates=2048, n_regions=16, box_size=0.25,
                         rng=None, k=32, values=None):
    """Pick region centers near the surface of a source.

    Of the k^3 global cell centers whose ``box_size`` window fits inside
    the box, the ``n_candidates`` with smallest |SDF| (ties broken by
    lattice index) form the candidate pool; a uniform random
    ``n_regions``-subset is returned, shape (n_regions, 3).  ``values``
    may carry precomputed SDF values on the k^3 lattice to skip the query.
    """
    if n_regions < 1:
        raise ConfigError("region count must be positive")
    if n_candidates < n_regions:
        raise ConfigError(
            f"candidate pool ({n_candidates}) smaller than region count ({n_regions})")
    rng = np.random.default_rng(rng)
    pts = lattice_points(k)
    if values is None:
        values = src.sample(pts) if hasattr(src, "sample") else src.query(pts)
    if isinstance(values, T.Tensor):
        values = values.data
    magnitude = np.abs(np.asarray(values, dtype=np.float64).reshape(-1))
    if magnitude.shape[0] != k ** 3:
        raise DimensionError(f"expected {k ** 3} lattice values, got {magnitude.shape[0]}")
    limit = 1.0 - box_size / 2.0 + 1e-12
    eligible = np.nonzero((np.abs(pts) <= limit).all(axis=1))[0]
    if eligible.shape[0] < n_regions:
        raise ConfigError(
            f"only {eligible.shape[0]} eligible region centers for {n_regions} regions")
    ranked = eligible[np.lexsort((eligible, magnitude[eligible]))]
    pool = ranked[:min(n_candidates, ranked.shape[0])]
    pick = rng.choice(pool.shape[0], size=n_regions, replace=False)
    return pts[pool[pick]]


# ---------------------------------------------------------------------------
# Batched grid construction for training
#
# All stencil queries of a whole batch are folded into one gather and one
# MLP evaluation.  Points are sampled with the 7-point stencil
# [center, +x, -x, +y, -y, +z, -z] so one query pass yields both the value
# channel and all finite differences.

_STENCIL_CACHE = {}


def _stencil_points(axes, h):
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    base = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    blocks = [base]
    for axis in range(3):
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[:, axis] += sign * h
            blocks.append(shifted)
    return np.concatenate(blocks, axis=0)


def _interpolation_plan(points, m, n_samples, sample_of):
    """Per-corner gather plans and weights for a batched volume lookup."""
    u = (points + 1.0) * (m / 2.0) - 0.5
    i0 = np.clip(np.floor(u), 0, m - 2).astype(np.int64)
    frac = np.clip(u - i0, 0.0, 1.0)
    plans = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                lin = (((i0[:, 0] + dx) * m + (i0[:, 1] + dy)) * m
                       + (i0[:, 2] + dz)) + sample_of * (m ** 3)
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                plans.append((T.GatherPlan(lin, size=n_samples * m ** 3),
                              wx * wy * wz))
    return plans


def _batched_query(volumes, mlp, plans):
    """Evaluate MLP(interpolated features) for precomputed gather plans."""
    n, channels = volumes.shape[0], volumes.shape[1]
    m3 = volumes.shape[2] * volumes.shape[3] * volumes.shape[4]
    flat = volumes.reshape((n, channels, m3)).transpose((1, 0, 2)) \
        .reshape((channels, n * m3))
    acc = None
    for plan, weight in plans:
        term = T.index_select_last(flat, plan) * T.Tensor(weight[None, :])
        acc = term if acc is None else acc + term
    return mlp(acc.transpose((1, 0))).reshape((-1,))


def _grids_from_stencil(values, count, k, h):
    """Turn stencil values (count * 7 * k^3,) into (count, 4, k, k, k)."""
    blocks = values.reshape((count, 7, k ** 3))
    value = T.narrow(blocks, 1, 0, 1)
    diffs = []
    for axis in range(3):
        plus = T.narrow(blocks, 1, 1 + 2 * axis, 1)
        minus = T.narrow(blocks, 1, 2 + 2 * axis, 1)
        diffs.append((plus - minus) / (2.0 * h))
    grad = T.concat(diffs, axis=1)
    norm = T.sqrt((grad * grad).sum(axis=1, keepdims=True) + _EPS * _EPS)
    unit = grad / (norm + _EPS)
    return T.concat([value, unit], axis=1).reshape((count, 4, k, k, k))


def global_grids_batch(volumes, mlp, k):
    """Global 4-channel grids for a batch of feature volumes.

    ``volumes`` is a Tensor (n, channels, m, m, m); returns a Tensor
    (n, 4, k, k, k).  The sampling lattice is fixed, so gather plans are
    cached per (m, k, n).
    """
    if isinstance(volumes, T.Parameter):
        volumes = volumes.tensor
    n, m = volumes.shape[0], volumes.shape[2]
    h = 1.0 / k
    key = (m, k, n)
    if key not in _STENCIL_CACHE:
        coords = grid_coords(k)
        pts = _stencil_points((coords, coords, coords), h)
        pts = np.tile(pts, (n, 1))
        sample_of = np.repeat(np.arange(n), 7 * k ** 3)
        _STENCIL_CACHE[key] = _interpolation_plan(pts, m, n, sample_of)
    values = _batched_query(volumes, mlp, _STENCIL_CACHE[key])
    return _grids_from_stencil(values, n, k, h)


def local_grids_batch(volumes, mlp, centers, k, box_size):
    """Local 4-channel grids for per-sample region centers.

    ``centers`` has shape (n, regions, 3); returns a Tensor
    (n * regions, 4, k, k, k) with regions varying fastest.
    """
    if isinstance(volumes, T.Parameter):
        volumes = volumes.tensor
    centers = np.asarray(centers, dtype=np.float64)
    n, regions = centers.shape[0], centers.shape[1]
    if n != volumes.shape[0]:
        raise DimensionError("centers batch does not match volumes batch")
    m = volumes.shape[2]
    h = box_size / (2.0 * k)
    offsets = -box_size / 2.0 + (np.arange(k) + 0.5) * (box_size / k)
    base = _stencil_points((offsets, offsets, offsets), h)
    pts = (centers.reshape(n * regions, 1, 3) + base[None, :, :]).reshape(-1, 3)
    pts = np.clip(pts, -1.0, 1.0)
    sample_of = np.repeat(np.arange(n), regions * base.shape[0])
    plans = _interpolation_plan(pts, m, n, sample_of)
    values = _batched_query(volumes, mlp, plans)
    return _grids_from_stencil(values, n * regions, k, h)
