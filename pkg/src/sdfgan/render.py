"""Orthographic multi-view rendering of meshes for image-based metrics.

Twenty fixed view directions (the vertices of a regular dodecahedron)
look at the origin with an orthographic [-1, 1]^2 window.  Shading images
use headlight Lambertian shading on geometric normals; silhouettes mark
ray hits.  A translation/scale-normalized Zernike-moment descriptor over
the 20 silhouettes gives a light-field-style shape signature.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, DimensionError, UsageError
from .geometry import Bvh, triangle_normals

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
NUM_VIEWS = 20
ZERNIKE_ORDER = 8
COEFFS_PER_VIEW = 25


def camera_rig():
    """The 20 unit view directions, deterministic order, shape (20, 3).

    Vertices of a regular dodecahedron: all sign choices of
    (1, 1, 1)/sqrt(3) plus cyclic permutations of (0, 1/phi, phi)/sqrt(3).
    """
    dirs = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                dirs.append((sx, sy, sz))
    a, b = 1.0 / GOLDEN, GOLDEN
    for sa in (1.0, -1.0):
        for sb in (1.0, -1.0):
            dirs.append((0.0, sa * a, sb * b))
            dirs.append((sb * b, 0.0, sa * a))
            dirs.append((sa * a, sb * b, 0.0))
    return np.asarray(dirs, dtype=np.float64) / math.sqrt(3.0)


def view_basis(view):
    """Right/up unit vectors of a view's image plane.

    The up direction is derived from the smallest-index world axis not
    parallel to the view, making the full rig deterministic.
    """
    view = np.asarray(view, dtype=np.float64)
    norm = np.linalg.norm(view)
    if view.shape != (3,) or norm == 0.0:
        raise DimensionError("view must be a nonzero 3-vector")
    view = view / norm
    for i in range(3):
        axis = np.zeros(3)
        axis[i] = 1.0
        if abs(float(view @ axis)) < 1.0 - 1e-9:
            break
    right = np.cross(axis, view)
    right /= np.linalg.norm(right)
    up = np.cross(view, right)
    return right, up


def _pixel_rays(view, res):
    view = np.asarray(view, dtype=np.float64)
    view = view / np.linalg.norm(view)
    right, up = view_basis(view)
    c = (np.arange(res) + 0.5) * (2.0 / res) - 1.0
    px, py = np.meshgrid(c, -c, indexing="xy")
    origins = (2.0 * view + px[..., None] * right + py[..., None] * up)
    directions = np.broadcast_to(-view, origins.shape)
    return origins.reshape(-1, 3), np.ascontiguousarray(
        directions.reshape(-1, 3))


def _raycast_view(mesh, view, res, bvh=None):
    if mesh.num_triangles == 0:
        return (np.zeros(res * res, dtype=bool), np.zeros(res * res),
                None, None)
    if bvh is None:
        bvh = Bvh(mesh)
    origins, directions = _pixel_rays(view, res)
    t, tri = bvh.raycast(origins, directions)
    hit = np.isfinite(t)
    return hit, t, tri, bvh


def render_shading(mesh, view, res=299, bvh=None):
    """Headlight Lambertian shading image, shape (res, res, 3) in [0, 1].

    One orthographic ray per pixel; intensity max(0, n . l) with the light
    along the view direction and geometric normals oriented toward the
    camera, background 0.
    """
    if res < 1:
        raise UsageError("image resolution must be positive")
    hit, _, tri, _ = _raycast_view(mesh, view, res, bvh)
    image = np.zeros(res * res)
    if hit.any():
        view = np.asarray(view, dtype=np.float64)
        view = view / np.linalg.norm(view)
        normals = triangle_normals(mesh)[tri[hit]]
        cosine = normals @ view
        image[hit] = np.maximum(0.0, np.abs(cosine))
    image = image.reshape(res, res)
    return np.repeat(image[:, :, None], 3, axis=2)


def render_silhouette(mesh, view, res=299, bvh=None):
    """Binary hit mask of the same rays, shape (res, res) with values {0, 1}."""
    if res < 1:
        raise UsageError("image resolution must be positive")
    hit, _, _, _ = _raycast_view(mesh, view, res, bvh)
    return hit.astype(np.float64).reshape(res, res)


def render_views(mesh, res=299, kind="shading"):
    """Render all 20 rig views; one shared BVH build.

    Returns (20, res, res, 3) for shading or (20, res, res) for silhouettes.
    """
    if kind not in ("shading", "silhouette"):
        raise UsageError(f"unknown render kind {kind!r}")
    bvh = Bvh(mesh) if mesh.num_triangles else None
    render = render_shading if kind == "shading" else render_silhouette
    return np.stack([render(mesh, view, res, bvh) for view in camera_rig()])


# ---------------------------------------------------------------------------
# Zernike-style silhouette descriptor


def _zernike_indices():
    pairs = []
    for n in range(ZERNIKE_ORDER + 1):
        for m in range(n % 2, n + 1, 2):
            pairs.append((n, m))
    return pairs


_ZERNIKE_PAIRS = _zernike_indices()


def _radial_poly(n, m, r):
    total = np.zeros_like(r)
    for k in range((n - m) // 2 + 1):
        c = ((-1.0) ** k * math.factorial(n - k)
             / (math.factorial(k)
                * math.factorial((n + m) // 2 - k)
                * math.factorial((n - m) // 2 - k)))
        total += c * r ** (n - 2 * k)
    return total


def _moments_single(image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError("silhouettes must be 2-D images")
    on = image > 0.5
    if not on.any():
        return np.zeros(COEFFS_PER_VIEW)
    res = image.shape[0]
    h = 2.0 / res
    ys, xs = np.nonzero(on)
    x = (xs + 0.5) * h - 1.0
    y = 1.0 - (ys + 0.5) * h
    x = x - x.mean()
    y = y - y.mean()
    r2 = x * x + y * y
    scale = math.sqrt(2.0 * r2.mean())
    if scale == 0.0:
        scale = h
    r = np.sqrt(r2) / scale
    theta = np.arctan2(y, x)
    # the RMS scale puts a disc's rim at r = 1 exactly; the cap keeps the
    # boundary ring of pixelized shapes while bounding polynomial growth
    keep = r <= 1.25
    r, theta = r[keep], theta[keep]
    cell = (h / scale) ** 2
    out = np.empty(COEFFS_PER_VIEW)
    for i, (n, m) in enumerate(_ZERNIKE_PAIRS):
        basis = _radial_poly(n, m, r)
        re = (basis * np.cos(m * theta)).sum()
        im = (basis * np.sin(m * theta)).sum()
        out[i] = (n + 1) / math.pi * cell * math.hypot(re, im)
    return out


def silhouette_descriptor(images):
    """Concatenated per-view Zernike moment magnitudes, shape (500,).

    Each of the 20 silhouettes contributes 25 translation/scale-normalized
    coefficients (orders n <= 8).  All-empty silhouettes give zeros.
    """
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[0] != NUM_VIEWS:
        raise DimensionError(
            f"expected {NUM_VIEWS} silhouette images, got shape {images.shape}")
    return np.concatenate([_moments_single(im) for im in images])


def descriptor_distance(a, b):
    """L1 distance between two silhouette descriptors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("descriptor shapes differ")
    return float(np.abs(a - b).sum())


# ---------------------------------------------------------------------------
# Image files (binary PGM/PPM)


def write_image(path, image):
    """Write a [0, 1] image as binary PGM (2-D) or PPM (3-D, 3 channels)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise DimensionError(
            f"image must be (h, w) or (h, w, 3), got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_image(path):
    """Read a binary PGM/PPM written by write_image back to [0, 1] floats."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise DataError(f"{path} is not a binary PGM/PPM image")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise DataError(f"bad PGM/PPM header in {path}") from exc
    if maxval != 255:
        raise DataError("only 8-bit images are supported")
    channels = 1 if parts[0] == b"P5" else 3
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * channels)
    if pixels.size < w * h * channels:
        raise DataError(f"truncated image payload in {path}")
    image = pixels.astype(np.float64) / 255.0
    shape = (h, w) if channels == 1 else (h, w, 3)
    return image.reshape(shape)
