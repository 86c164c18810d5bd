"""Latent-space tools: inversion, completion, style editing, interpolation.

A trained generator is inverted by free-latent optimization: a latent is
optimized with Adam against probe points, with monotone acceptance (only
improving iterates are kept) and several random restarts.  Completion
reuses the same machinery with a surface-only objective, style editing
moves codes across a fitted separating hyperplane, and interpolation is
linear in the chosen latent space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import (DataError, DimensionError, DomainError, NumericError,
                     UsageError)
from .geometry import marching_cubes
from .implicit import FeatureVolume, GridSdf, ImplicitSdf
from .nn import Adam

SPACES = ("z", "w")
NEAR_SURFACE_BAND = 0.1


@dataclass
class LatentCode:
    """A latent vector tagged with the space it lives in ("z" or "w")."""

    space: str
    vector: np.ndarray

    def __post_init__(self):
        if self.space not in SPACES:
            raise UsageError(
                f"latent space must be one of {SPACES}, got {self.space!r}")
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise DimensionError(
                f"latent vector must be 1-d, got shape {self.vector.shape}")
        if not np.isfinite(self.vector).all():
            raise NumericError("latent vector contains non-finite values")


@dataclass
class StyleHyperplane:
    """Separating boundary n.x + d = 0 in a latent space, unit normal."""

    normal: np.ndarray
    offset: float
    space: str = "w"

    def __post_init__(self):
        if self.space not in SPACES:
            raise UsageError(
                f"latent space must be one of {SPACES}, got {self.space!r}")
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if self.normal.ndim != 1:
            raise DimensionError(
                f"hyperplane normal must be 1-d, got shape "
                f"{self.normal.shape}")
        self.offset = float(self.offset)
        if not (np.isfinite(self.normal).all() and np.isfinite(self.offset)):
            raise NumericError("hyperplane contains non-finite values")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise UsageError("hyperplane normal must have unit length")

    def signed_distance(self, code):
        """n . y + d for a latent code in the same space."""
        if code.space != self.space:
            raise UsageError(
                f"code lives in {code.space!r} but the hyperplane in "
                f"{self.space!r}")
        return float(self.normal @ code.vector + self.offset)


# ---------------------------------------------------------------------------
# decoding latents back to fields and meshes


def decode_sdf(generator, code):
    """ImplicitSdf for a latent code under zero synthesis noise."""
    if code.vector.shape[0] != generator.config.latent_dim:
        raise DimensionError(
            f"latent has {code.vector.shape[0]} entries, generator expects "
            f"{generator.config.latent_dim}")
    if code.space == "z":
        return generator.generate_sdf(code.vector)
    with T.no_grad():
        volume = generator.synthesize(T.as_tensor(code.vector))
    feat = FeatureVolume(generator.config.feature_resolution,
                         generator.config.feature_channels,
                         values=T.Tensor(np.asarray(volume.data)))
    return ImplicitSdf(feat, generator.mlp)


def decode_mesh(generator, code, resolution=64):
    """Zero-isosurface mesh of a latent code."""
    return marching_cubes(decode_sdf(generator, code), resolution)


# ---------------------------------------------------------------------------
# latent optimization


def _as_source(target):
    if hasattr(target, "sample"):
        return target
    if isinstance(target, np.ndarray):
        return GridSdf(target)
    raise UsageError("target must be an SDF source or a sample grid")


def _require_points(points, what):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"{what} must have shape (n, 3), "
                             f"got {points.shape}")
    if points.shape[0] == 0:
        raise UsageError(f"{what} must be nonempty")
    if np.abs(points).max() > 1.0:
        raise DomainError(f"{what} must lie inside [-1, 1]^3")
    return points


def sample_inversion_points(target, n, rng, band=NEAR_SURFACE_BAND,
                            max_rounds=64):
    """Probe points for inversion: half uniform, half near the surface.

    Near-surface points are rejection-sampled from the box with
    |sdf| <= band; if the field offers too few (e.g. no surface inside
    the box), the remainder falls back to uniform samples.
    """
    if n < 2:
        raise UsageError("need at least 2 probe points")
    rng = np.random.default_rng(rng)
    n_near = n // 2
    uniform = rng.uniform(-1.0, 1.0, (n - n_near, 3))
    chunks, have = [], 0
    for _ in range(max_rounds):
        if have >= n_near:
            break
        cand = rng.uniform(-1.0, 1.0, (max(4 * n_near, 256), 3))
        values = np.asarray(target.sample(cand), dtype=np.float64)
        keep = cand[np.abs(values) <= band]
        chunks.append(keep)
        have += keep.shape[0]
    near = (np.concatenate(chunks)[:n_near] if chunks
            else np.empty((0, 3)))
    if near.shape[0] < n_near:
        fill = rng.uniform(-1.0, 1.0, (n_near - near.shape[0], 3))
        near = np.concatenate([near, fill])
    return np.concatenate([uniform, near])


def _point_objective(generator, space, points, targets):
    """Mean absolute SDF error at fixed points as a function of the latent."""
    points = np.asarray(points, dtype=np.float64)
    targets = T.Tensor(np.asarray(targets, dtype=np.float64))
    config = generator.config

    def objective(y):
        w = generator.map_latent(y) if space == "z" else y
        volume = generator.synthesize(w)
        feat = FeatureVolume(config.feature_resolution,
                             config.feature_channels, values=volume)
        pred = ImplicitSdf(feat, generator.mlp).query(points)
        return T.absolute(pred - targets).mean()

    return objective


def _optimize_latent(objective, y0, iters, lr, restart):
    """Adam descent with monotone acceptance; returns (best y, best loss)."""
    param = T.Parameter(np.array(y0, dtype=np.float64, copy=True),
                        name="latent")
    opt = Adam([param], lr=lr, beta1=0.9, beta2=0.999)
    best_loss, best = np.inf, np.array(param.data, copy=True)
    for it in range(iters + 1):
        opt.zero_grad()
        loss = objective(param.tensor)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite latent-optimization loss at restart {restart}, "
                f"iteration {it}")
        if value < best_loss:
            best_loss = value
            best = np.array(param.data, copy=True)
        if it == iters:
            break
        T.backward(loss)
        opt.step()
    return best, best_loss


def _restart_init(generator, space, rng):
    z = rng.standard_normal(generator.config.latent_dim)
    if space == "z":
        return z
    with T.no_grad():
        return np.asarray(generator.map_latent(z).data, dtype=np.float64)


def _best_of_restarts(generator, objective, space, iters, lr, restarts, rng):
    if restarts < 1:
        raise UsageError("need at least one restart")
    if iters < 0:
        raise UsageError("iteration count must be nonnegative")
    best_code, best_loss = None, np.inf
    for restart in range(restarts):
        y0 = _restart_init(generator, space, rng)
        y, loss = _optimize_latent(objective, y0, iters, lr, restart)
        if loss < best_loss:
            best_code, best_loss = y, loss
    return LatentCode(space, best_code), best_loss


def invert(target, generator, sample_count=4096, iters=250, rng=None,
           space="w", restarts=4, lr=0.03):
    """Embed an SDF source into the latent space by direct optimization.

    Minimizes the mean absolute difference between the generator's SDF and
    the target's at probe points (half uniform, half near the target
    surface), with ``restarts`` random initializations optimized under
    monotone acceptance, keeping the one with the lowest final loss.
    """
    if space not in SPACES:
        raise UsageError(f"latent space must be one of {SPACES}, "
                         f"got {space!r}")
    src = _as_source(target)
    rng = np.random.default_rng(rng)
    points = sample_inversion_points(src, sample_count, rng)
    targets = np.asarray(src.sample(points), dtype=np.float64)
    objective = _point_objective(generator, space, points, targets)
    code, _ = _best_of_restarts(generator, objective, space, iters, lr,
                                restarts, rng)
    return code


def finetune_latent(y, surface_points, generator, iters=1000, lr=0.01):
    """Refine a code so its SDF vanishes on the given surface points.

    The default iteration count follows the reference protocol of 1000
    optimization steps per input point cloud.
    """
    points = _require_points(surface_points, "surface points")
    objective = _point_objective(generator, y.space, points,
                                 np.zeros(points.shape[0]))
    best, _ = _optimize_latent(objective, y.vector, iters, lr, 0)
    return LatentCode(y.space, best)


def complete(partial_points, generator, iters=1000, rng=None, space="w",
             restarts=4, lr=0.03, resolution=64):
    """Recover a full shape from partial surface points.

    Optimizes a latent from scratch against the surface-only objective
    (zero SDF at the given points); the generator's prior fills in the
    missing geometry.  Returns the code and its extracted mesh.
    """
    if space not in SPACES:
        raise UsageError(f"latent space must be one of {SPACES}, "
                         f"got {space!r}")
    points = _require_points(partial_points, "partial points")
    rng = np.random.default_rng(rng)
    objective = _point_objective(generator, space, points,
                                 np.zeros(points.shape[0]))
    code, _ = _best_of_restarts(generator, objective, space, iters, lr,
                                restarts, rng)
    return code, decode_mesh(generator, code, resolution)


# ---------------------------------------------------------------------------
# style editing and interpolation


def _latent_matrix(latents, space):
    if len(latents) == 0:
        raise UsageError("need at least one latent")
    if isinstance(latents[0], LatentCode):
        spaces = {code.space for code in latents}
        if len(spaces) > 1:
            raise UsageError("latents live in different spaces")
        found = spaces.pop()
        if space is not None and space != found:
            raise UsageError(f"latents live in {found!r}, not {space!r}")
        return np.stack([code.vector for code in latents]), found
    return np.asarray(latents, dtype=np.float64), (space or "w")


def fit_style_hyperplane(latents, binary_labels, space=None, ridge=1e-6,
                         max_iter=100, tol=1e-10):
    """Logistic-regression boundary between two groups of latents.

    Newton iterations on the ridge-regularized logistic loss until the
    gradient vanishes; the returned normal is unit length with the offset
    rescaled to keep the same boundary.
    """
    x, space = _latent_matrix(latents, space)
    labels = np.asarray(binary_labels, dtype=np.float64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise DimensionError(
            f"{labels.shape[0]} labels for {x.shape[0]} latents")
    if set(np.unique(labels)) != {0.0, 1.0}:
        raise UsageError("labels must contain both classes, coded 0 and 1")
    n, d = x.shape
    a = np.concatenate([x, np.ones((n, 1))], axis=1)
    theta = np.zeros(d + 1)
    for _ in range(max_iter):
        logits = a @ theta
        p = 1.0 / (1.0 + np.exp(-logits))
        grad = a.T @ (p - labels) / n + ridge * theta
        if np.abs(grad).max() < tol:
            break
        hess = (a.T * (p * (1.0 - p))) @ a / n + ridge * np.eye(d + 1)
        try:
            theta = theta - np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular Hessian while fitting the "
                               "hyperplane") from exc
    norm = np.linalg.norm(theta[:d])
    if norm < 1e-12:
        raise NumericError("degenerate separator: zero normal")
    return StyleHyperplane(theta[:d] / norm, theta[d] / norm, space)


def edit_style(y, plane, eta):
    """Move a code across the style boundary: y - eta (n.y + d) n."""
    if eta < 0:
        raise UsageError("eta must be nonnegative")
    signed = plane.signed_distance(y)
    return LatentCode(y.space, y.vector - eta * signed * plane.normal)


def interpolate(a, b, steps):
    """Linear path between two codes in their shared space, endpoints exact."""
    if steps < 2:
        raise UsageError("need at least 2 interpolation steps")
    if a.space != b.space:
        raise UsageError(
            f"cannot interpolate between {a.space!r} and {b.space!r}")
    if a.vector.shape != b.vector.shape:
        raise DimensionError("latent sizes differ")
    path = []
    for i in range(steps):
        t = i / (steps - 1)
        path.append(LatentCode(a.space, (1.0 - t) * a.vector + t * b.vector))
    return path


# ---------------------------------------------------------------------------
# latent and hyperplane files


def save_latent(path, code):
    """Write a latent file: a checkpoint container with a "latent" record."""
    checkpoint.write_records(path, {
        "latent": code.vector,
        "space": np.frombuffer(code.space.encode("utf-8"),
                               dtype=np.uint8).copy(),
    })


def load_latent(path):
    records = checkpoint.read_records(path)
    if "latent" not in records:
        raise DataError(f"{path}: no 'latent' record")
    space = (bytes(records["space"]).decode("utf-8")
             if "space" in records else "w")
    return LatentCode(space, records["latent"])


def save_plane(path, plane):
    """Write a hyperplane file: records "normal", "offset", "space"."""
    checkpoint.write_records(path, {
        "normal": plane.normal,
        "offset": np.array([plane.offset]),
        "space": np.frombuffer(plane.space.encode("utf-8"),
                               dtype=np.uint8).copy(),
    })


def load_plane(path):
    records = checkpoint.read_records(path)
    for key in ("normal", "offset"):
        if key not in records:
            raise DataError(f"{path}: no {key!r} record")
    space = (bytes(records["space"]).decode("utf-8")
             if "space" in records else "w")
    return StyleHyperplane(records["normal"], float(records["offset"][0]),
                           space)
