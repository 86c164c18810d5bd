"""Triangle meshes, signed-distance grids, and conversions between them.

Provides OBJ mesh I/O, mesh normalization, a bounding-volume hierarchy with
point-distance, winding-number, and ray queries, robust mesh to SDF-grid
conversion (signs from the generalized winding number), marching-cubes
isosurface extraction, and area-weighted surface sampling.
"""

import math
import struct
import warnings

import numpy as np
from numba import njit

from .errors import DataError, DimensionError, DomainError, NumericError, UsageError
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

_GRID_MAGIC = b"SDFG"
_GRID_VERSION = 1
_DIAMETER_BOUND = 2.0 * math.sqrt(3.0)
_DEGENERATE_AREA = 1e-12


def _corner_arrays(vertices, triangles):
    return (vertices[triangles[:, 0]], vertices[triangles[:, 1]],
            vertices[triangles[:, 2]])


def _areas(vertices, triangles):
    a, b, c = _corner_arrays(vertices, triangles)
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class TriMesh:
    """Indexed triangle mesh with float64 vertices.

    Degenerate triangles (area at or below 1e-12) are dropped on
    construction so area-weighted code downstream never divides by zero.
    Vertices left unreferenced by the cleaning are kept.
    """

    def __init__(self, vertices, triangles):
        vertices = np.asarray(vertices, dtype=np.float64)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.size == 0:
            vertices = vertices.reshape(0, 3)
        if triangles.size == 0:
            triangles = triangles.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise DimensionError("mesh vertices must have shape (n, 3)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise DimensionError("mesh triangles must have shape (m, 3)")
        if vertices.size and not np.isfinite(vertices).all():
            raise NumericError("mesh vertices contain non-finite values")
        if triangles.shape[0]:
            if triangles.min() < 0 or triangles.max() >= vertices.shape[0]:
                raise DataError("triangle vertex index out of range")
            keep = _areas(vertices, triangles) > _DEGENERATE_AREA
            triangles = np.ascontiguousarray(triangles[keep])
        self.vertices = np.ascontiguousarray(vertices)
        self.triangles = np.ascontiguousarray(triangles)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]


def triangle_areas(mesh):
    """Area of each triangle, shape (m,)."""
    return _areas(mesh.vertices, mesh.triangles)


def triangle_normals(mesh):
    """Unit normal of each triangle (right-hand rule), shape (m, 3)."""
    a, b, c = _corner_arrays(mesh.vertices, mesh.triangles)
    n = np.cross(b - a, c - a)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def read_obj(path):
    """Read a triangle mesh from an OBJ file.

    Only ``v`` and ``f`` records are interpreted; faces with more than three
    vertices are fan-triangulated, slashed references keep the vertex index,
    and negative indices count back from the vertices read so far.
    """
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise DataError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise DataError(f"line {lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise DataError(f"line {lineno}: face needs at least 3 vertices")
                idx = [_face_index(p, len(vertices), lineno) for p in parts[1:]]
                for second, third in zip(idx[1:], idx[2:]):
                    faces.append((idx[0], second, third))
    return TriMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _face_index(token, num_vertices, lineno):
    field = token.split("/", 1)[0]
    try:
        value = int(field)
    except ValueError:
        raise DataError(f"line {lineno}: bad face index {field!r}") from None
    if value == 0:
        raise DataError(f"line {lineno}: face index 0 is not allowed")
    index = value - 1 if value > 0 else num_vertices + value
    if not 0 <= index < num_vertices:
        raise DataError(f"line {lineno}: face index {value} out of range")
    return index


def write_obj(path, mesh):
    """Write a mesh as OBJ ``v`` and ``f`` records (1-based indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"f {i + 1} {j + 1} {k + 1}\n")


def normalize_mesh(mesh):
    """Center a mesh and scale it so the longest axis spans [-0.8, 0.8].

    Translation is by the bounding-box center; scaling is uniform.
    """
    if mesh.num_vertices == 0:
        raise DomainError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = (hi - lo).max()
    if extent <= 0.0:
        raise DomainError("mesh has zero spatial extent")
    center = 0.5 * (lo + hi)
    return TriMesh((mesh.vertices - center) * (1.6 / extent), mesh.triangles)


def normalize_to_unit_sphere(mesh):
    """Center a mesh on its vertex centroid and scale the farthest vertex to radius 1."""
    if mesh.num_vertices == 0:
        raise DomainError("cannot normalize an empty mesh")
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius <= 0.0:
        raise DomainError("mesh has zero spatial extent")
    return TriMesh(centered / radius, mesh.triangles)


def grid_coords(resolution):
    """Cell-center coordinates of a lattice over [-1, 1], shape (resolution,)."""
    i = np.arange(resolution, dtype=np.float64)
    return -1.0 + (i + 0.5) * (2.0 / resolution)


def lattice_points(resolution):
    """All cell centers of the [-1, 1]^3 lattice, shape (resolution^3, 3), x slowest."""
    c = grid_coords(resolution)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


class SdfGrid:
    """Discrete SDF sampled at the cell centers of a lattice over [-1, 1]^3.

    ``values[ix, iy, iz]`` holds the signed distance at the cell center
    ``(-1 + (ix + 0.5) * 2 / R, ...)``.  Magnitudes are bounded by the
    diameter of the domain box.
    """

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise DimensionError("SDF grid values must be a cube-shaped 3-d array")
        if not np.isfinite(values).all():
            raise NumericError("SDF grid contains non-finite values")
        if np.abs(values).max(initial=0.0) > _DIAMETER_BOUND + 1e-6:
            raise DataError("SDF magnitude exceeds the [-1, 1]^3 diameter bound")
        self.values = np.ascontiguousarray(values)

    @property
    def resolution(self):
        return self.values.shape[0]

    def sample(self, points):
        """Trilinear interpolation at arbitrary points, clamped at the border."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        r = self.resolution
        u = (pts + 1.0) * (r / 2.0) - 0.5
        i0 = np.clip(np.floor(u), 0, r - 2).astype(np.int64)
        f = np.clip(u - i0, 0.0, 1.0)
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        c00 = v[ix, iy, iz] * (1 - fx) + v[ix + 1, iy, iz] * fx
        c10 = v[ix, iy + 1, iz] * (1 - fx) + v[ix + 1, iy + 1, iz] * fx
        c01 = v[ix, iy, iz + 1] * (1 - fx) + v[ix + 1, iy, iz + 1] * fx
        c11 = v[ix, iy + 1, iz + 1] * (1 - fx) + v[ix + 1, iy + 1, iz + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz

    def save(self, path):
        """Write the grid: "SDFG", u32 version, u32 R, f32 box, f32 values x-fastest."""
        header = struct.pack("<4sIIff", _GRID_MAGIC, _GRID_VERSION,
                             self.resolution, -1.0, 1.0)
        payload = self.values.transpose(2, 1, 0).astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = fh.read(20)
            if len(header) < 20:
                raise DataError("truncated SDF grid header")
            magic, version, resolution, lo, hi = struct.unpack("<4sIIff", header)
            if magic != _GRID_MAGIC:
                raise DataError("not an SDF grid file")
            if version != _GRID_VERSION:
                raise DataError(f"unsupported SDF grid version {version}")
            if resolution < 1:
                raise DataError("SDF grid resolution must be positive")
            if abs(lo + 1.0) > 1e-6 or abs(hi - 1.0) > 1e-6:
                raise DataError("SDF grid domain must be [-1, 1]^3")
            payload = fh.read(4 * resolution ** 3)
        if len(payload) < 4 * resolution ** 3:
            raise DataError("truncated SDF grid payload")
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        values = flat.reshape(resolution, resolution, resolution).transpose(2, 1, 0)
        return cls(values)


@njit(cache=True)
def _tri_dist_sq(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx = apx - t * abx
        qy = apy - t * aby
        qz = apz - t * abz
        return qx * qx + qy * qy + qz * qz
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx = apx - t * acx
        qy = apy - t * acy
        qz = apz - t * acz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bpx - t * (cx - bx)
        qy = bpy - t * (cy - by)
        qz = bpz - t * (cz - bz)
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = apx - v * abx - w * acx
    qy = apy - v * aby - w * acy
    qz = apz - v * abz - w * acz
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def _box_dist_sq(px, py, pz, lx, ly, lz, hx, hy, hz):
    dx = lx - px if px < lx else (px - hx if px > hx else 0.0)
    dy = ly - py if py < ly else (py - hy if py > hy else 0.0)
    dz = lz - pz if pz < lz else (pz - hz if pz > hz else 0.0)
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _bvh_distance_sq(points, bmin, bmax, left, right, start, count, order,
                     va, vb, vc, out):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = 1e300
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nid = stack[top]
            if _box_dist_sq(px, py, pz, bmin[nid, 0], bmin[nid, 1], bmin[nid, 2],
                            bmax[nid, 0], bmax[nid, 1], bmax[nid, 2]) >= best:
                continue
            if left[nid] < 0:
                for k in range(start[nid], start[nid] + count[nid]):
                    j = order[k]
                    d = _tri_dist_sq(px, py, pz,
                                     va[j, 0], va[j, 1], va[j, 2],
                                     vb[j, 0], vb[j, 1], vb[j, 2],
                                     vc[j, 0], vc[j, 1], vc[j, 2])
                    if d < best:
                        best = d
            else:
                l = left[nid]
                r = right[nid]
                dl = _box_dist_sq(px, py, pz, bmin[l, 0], bmin[l, 1], bmin[l, 2],
                                  bmax[l, 0], bmax[l, 1], bmax[l, 2])
                dr = _box_dist_sq(px, py, pz, bmin[r, 0], bmin[r, 1], bmin[r, 2],
                                  bmax[r, 0], bmax[r, 1], bmax[r, 2])
                if dl < dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out[i] = best


@njit(cache=True)
def _bvh_winding(points, left, right, start, count, order, va, vb, vc,
                 dipole, wcenter, wradius, beta2, out):
    inv4pi = 1.0 / (4.0 * np.pi)
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        qx = points[i, 0]
        qy = points[i, 1]
        qz = points[i, 2]
        acc = 0.0
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nid = stack[top]
            dx = wcenter[nid, 0] - qx
            dy = wcenter[nid, 1] - qy
            dz = wcenter[nid, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            rad = wradius[nid]
            if d2 > beta2 * rad * rad and d2 > 0.0:
                d = math.sqrt(d2)
                acc += (dipole[nid, 0] * dx + dipole[nid, 1] * dy
                        + dipole[nid, 2] * dz) / (d * d * d) * inv4pi
            elif left[nid] < 0:
                for k in range(start[nid], start[nid] + count[nid]):
                    j = order[k]
                    ax = va[j, 0] - qx
                    ay = va[j, 1] - qy
                    az = va[j, 2] - qz
                    bx = vb[j, 0] - qx
                    by = vb[j, 1] - qy
                    bz = vb[j, 2] - qz
                    cx = vc[j, 0] - qx
                    cy = vc[j, 1] - qy
                    cz = vc[j, 2] - qz
                    la = math.sqrt(ax * ax + ay * ay + az * az)
                    lb = math.sqrt(bx * bx + by * by + bz * bz)
                    lc = math.sqrt(cx * cx + cy * cy + cz * cz)
                    det = (ax * (by * cz - bz * cy)
                           - ay * (bx * cz - bz * cx)
                           + az * (bx * cy - by * cx))
                    denom = (la * lb * lc
                             + (ax * bx + ay * by + az * bz) * lc
                             + (bx * cx + by * cy + bz * cz) * la
                             + (cx * ax + cy * ay + cz * az) * lb)
                    acc += 2.0 * math.atan2(det, denom) * inv4pi
            else:
                stack[top] = left[nid]
                stack[top + 1] = right[nid]
                top += 2
        out[i] = acc


@njit(cache=True)
def _ray_box(ox, oy, oz, ix, iy, iz, lx, ly, lz, hx, hy, hz, tbest):
    tmin = 0.0
    tmax = tbest
    if ix == 0.0:
        if ox < lx or ox > hx:
            return False
    else:
        inv = 1.0 / ix
        t0 = (lx - ox) * inv
        t1 = (hx - ox) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        tmin = max(tmin, t0)
        tmax = min(tmax, t1)
    if iy == 0.0:
        if oy < ly or oy > hy:
            return False
    else:
        inv = 1.0 / iy
        t0 = (ly - oy) * inv
        t1 = (hy - oy) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        tmin = max(tmin, t0)
        tmax = min(tmax, t1)
    if iz == 0.0:
        if oz < lz or oz > hz:
            return False
    else:
        inv = 1.0 / iz
        t0 = (lz - oz) * inv
        t1 = (hz - oz) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        tmin = max(tmin, t0)
        tmax = min(tmax, t1)
    return tmin <= tmax


@njit(cache=True)
def _bvh_raycast(origins, dirs, bmin, bmax, left, right, start, count, order,
                 va, vb, vc, out_t, out_tri):
    stack = np.empty(128, dtype=np.int64)
    for i in range(origins.shape[0]):
        ox = origins[i, 0]
        oy = origins[i, 1]
        oz = origins[i, 2]
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best_t = np.inf
        best_j = -1
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nid = stack[top]
            if not _ray_box(ox, oy, oz, dx, dy, dz,
                            bmin[nid, 0], bmin[nid, 1], bmin[nid, 2],
                            bmax[nid, 0], bmax[nid, 1], bmax[nid, 2], best_t):
                continue
            if left[nid] < 0:
                for k in range(start[nid], start[nid] + count[nid]):
                    j = order[k]
                    e1x = vb[j, 0] - va[j, 0]
                    e1y = vb[j, 1] - va[j, 1]
                    e1z = vb[j, 2] - va[j, 2]
                    e2x = vc[j, 0] - va[j, 0]
                    e2y = vc[j, 1] - va[j, 1]
                    e2z = vc[j, 2] - va[j, 2]
                    px = dy * e2z - dz * e2y
                    py = dz * e2x - dx * e2z
                    pz = dx * e2y - dy * e2x
                    det = e1x * px + e1y * py + e1z * pz
                    if abs(det) < 1e-300:
                        continue
                    inv = 1.0 / det
                    tx = ox - va[j, 0]
                    ty = oy - va[j, 1]
                    tz = oz - va[j, 2]
                    u = (tx * px + ty * py + tz * pz) * inv
                    if u < -1e-9 or u > 1.0 + 1e-9:
                        continue
                    qx = ty * e1z - tz * e1y
                    qy = tz * e1x - tx * e1z
                    qz = tx * e1y - ty * e1x
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < -1e-9 or u + v > 1.0 + 1e-9:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if 1e-9 < t < best_t:
                        best_t = t
                        best_j = j
            else:
                stack[top] = left[nid]
                stack[top + 1] = right[nid]
                top += 2
        out_t[i] = best_t
        out_tri[i] = best_j


class Bvh:
    """Axis-aligned bounding-box tree over the triangles of a mesh.

    Immutable after construction.  Supports closest-distance queries,
    generalized winding numbers (exact solid angles in the near field, a
    dipole approximation for distant subtrees), and first-hit ray casting.
    """

    def __init__(self, mesh, leaf_size=8):
        if mesh.num_triangles == 0:
            raise DomainError("mesh has no triangles")
        a, b, c = _corner_arrays(mesh.vertices, mesh.triangles)
        self._va = np.ascontiguousarray(a)
        self._vb = np.ascontiguousarray(b)
        self._vc = np.ascontiguousarray(c)
        tri_min = np.minimum(np.minimum(a, b), c)
        tri_max = np.maximum(np.maximum(a, b), c)
        centroid = (a + b + c) / 3.0
        area_vec = 0.5 * np.cross(b - a, c - a)
        area = np.linalg.norm(area_vec, axis=1)

        box_min, box_max = [], []
        left, right, start, count = [], [], [], []
        dipole, wcenter, wradius = [], [], []
        flat_order = []

        def build(ids):
            nid = len(left)
            left.append(-1)
            right.append(-1)
            start.append(-1)
            count.append(-1)
            box_min.append(tri_min[ids].min(axis=0))
            box_max.append(tri_max[ids].max(axis=0))
            dipole.append(area_vec[ids].sum(axis=0))
            center = (area[ids, None] * centroid[ids]).sum(axis=0) / area[ids].sum()
            wcenter.append(center)
            rad2 = max(((a[ids] - center) ** 2).sum(axis=1).max(),
                       ((b[ids] - center) ** 2).sum(axis=1).max(),
                       ((c[ids] - center) ** 2).sum(axis=1).max())
            wradius.append(math.sqrt(rad2))
            axis = int(np.argmax(centroid[ids].max(axis=0) - centroid[ids].min(axis=0)))
            spread = centroid[ids, axis].max() - centroid[ids, axis].min()
            if len(ids) <= leaf_size or spread <= 0.0:
                start[nid] = len(flat_order)
                count[nid] = len(ids)
                flat_order.extend(ids.tolist())
                return nid
            half = len(ids) // 2
            split = np.argpartition(centroid[ids, axis], half)
            left[nid] = build(ids[split[:half]])
            right[nid] = build(ids[split[half:]])
            return nid

        build(np.arange(mesh.num_triangles))
        self._box_min = np.asarray(box_min)
        self._box_max = np.asarray(box_max)
        self._left = np.asarray(left, dtype=np.int64)
        self._right = np.asarray(right, dtype=np.int64)
        self._start = np.asarray(start, dtype=np.int64)
        self._count = np.asarray(count, dtype=np.int64)
        self._order = np.asarray(flat_order, dtype=np.int64)
        self._dipole = np.asarray(dipole)
        self._wcenter = np.asarray(wcenter)
        self._wradius = np.asarray(wradius)

    @staticmethod
    def _points(points):
        return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))

    def distance(self, points):
        """Unsigned distance from each point to the nearest triangle."""
        pts = self._points(points)
        out = np.empty(pts.shape[0])
        _bvh_distance_sq(pts, self._box_min, self._box_max, self._left,
                         self._right, self._start, self._count, self._order,
                         self._va, self._vb, self._vc, out)
        return np.sqrt(out)

    def winding(self, points, beta=4.0):
        """Generalized winding number at each point.

        Subtrees farther than ``beta`` times their bounding radius are
        replaced by their area-weighted normal dipole.
        """
        pts = self._points(points)
        out = np.empty(pts.shape[0])
        _bvh_winding(pts, self._left, self._right, self._start, self._count,
                     self._order, self._va, self._vb, self._vc, self._dipole,
                     self._wcenter, self._wradius, float(beta) ** 2, out)
        return out

    def signed_distance(self, points):
        """Distance with sign negative where |winding| > 0.5 (enclosed)."""
        sign = np.where(np.abs(self.winding(points)) > 0.5, -1.0, 1.0)
        return sign * self.distance(points)

    def raycast(self, origins, directions):
        """First-hit ray query.

        Returns ``(t, triangle)`` arrays; ``t`` is in units of the direction
        vector's length, ``inf`` with triangle -1 on a miss.
        """
        origins = self._points(origins)
        directions = self._points(directions)
        if origins.shape != directions.shape:
            raise DimensionError("origins and directions must have matching shapes")
        out_t = np.empty(origins.shape[0])
        out_tri = np.empty(origins.shape[0], dtype=np.int64)
        _bvh_raycast(origins, directions, self._box_min, self._box_max,
                     self._left, self._right, self._start, self._count,
                     self._order, self._va, self._vb, self._vc, out_t, out_tri)
        return out_t, out_tri


def mesh_to_sdf(mesh, resolution=128):
    """Sample a mesh's signed distance field on the [-1, 1]^3 lattice.

    Magnitudes come from exact BVH point-triangle distances; signs from the
    generalized winding number (negative where |winding| > 0.5), which keeps
    nested interior shells and inconsistent orientations from flipping the
    outer sign.
    """
    if mesh.num_triangles == 0:
        raise DomainError("mesh has no triangles")
    bvh = Bvh(mesh)
    values = bvh.signed_distance(lattice_points(resolution))
    return SdfGrid(values.reshape(resolution, resolution, resolution))


_EDGE_BASE = np.minimum(CORNER_OFFSETS[EDGE_CORNERS[:, 0]],
                        CORNER_OFFSETS[EDGE_CORNERS[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(CORNER_OFFSETS[EDGE_CORNERS[:, 0]]
                              - CORNER_OFFSETS[EDGE_CORNERS[:, 1]]), axis=1)


def _field_on_lattice(field, resolution):
    if isinstance(field, SdfGrid):
        if resolution is not None and resolution != field.resolution:
            raise UsageError("resolution does not match the grid resolution")
        return field.values
    if isinstance(field, np.ndarray):
        values = np.asarray(field, dtype=np.float64)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise DimensionError("field array must be a cube-shaped 3-d array")
        if resolution is not None and resolution != values.shape[0]:
            raise UsageError("resolution does not match the field array")
        return values
    if resolution is None:
        raise UsageError("resolution is required when sampling a function field")
    pts = lattice_points(resolution)
    if hasattr(field, "sample"):
        values = field.sample(pts)
    elif callable(field):
        values = field(pts)
    else:
        raise UsageError("field must be an SDF grid, an array, or a callable")
    return np.asarray(values, dtype=np.float64).reshape(
        resolution, resolution, resolution)


def marching_cubes(field, resolution=None, iso=0.0):
    """Extract the iso-surface of a field sampled on the cell-center lattice.

    Classic 256-case marching cubes with linear edge interpolation.  Shared
    vertices are welded by their lattice-edge key, and triangles are wound so
    normals point toward increasing field values.  An empty isosurface
    returns an empty mesh after raising a warning.
    """
    values = _field_on_lattice(field, resolution)
    r = values.shape[0]
    if r < 2:
        raise UsageError("marching cubes needs a lattice resolution of at least 2")
    if not np.isfinite(values).all():
        raise NumericError("field is not finite on the sample lattice")
    n = r - 1
    inside = values < iso
    cases = np.zeros((n, n, n), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        cases |= inside[dx:dx + n, dy:dy + n, dz:dz + n].astype(np.int64) << bit
    cases = cases.ravel()
    active = np.nonzero((cases != 0) & (cases != 255))[0]
    if active.size == 0:
        warnings.warn("empty isosurface: field does not cross the iso level")
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    rows = TRI_TABLE[cases[active]][:, :15].reshape(-1, 3)
    keep = rows[:, 0] >= 0
    tri_edges = rows[keep]
    cell = np.repeat(active, 5)[keep]
    cell_xyz = np.stack([cell // (n * n), (cell // n) % n, cell % n], axis=1)
    node = cell_xyz[:, None, :] + _EDGE_BASE[tri_edges]
    keys = ((node[:, :, 0] * r + node[:, :, 1]) * r + node[:, :, 2]) * 3 \
        + _EDGE_AXIS[tri_edges]
    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)

    axis = unique_keys % 3
    lin = unique_keys // 3
    nx = lin // (r * r)
    ny = (lin // r) % r
    nz = lin % r
    step = np.eye(3, dtype=np.int64)[axis]
    v0 = values[nx, ny, nz]
    v1 = values[nx + step[:, 0], ny + step[:, 1], nz + step[:, 2]]
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)
    coords = grid_coords(r)
    positions = np.stack([coords[nx], coords[ny], coords[nz]], axis=1) \
        + (t * (2.0 / r))[:, None] * step
    # the case table winds normals toward the inside; flip for outward
    triangles = inverse.reshape(-1, 3)[:, [0, 2, 1]]
    return TriMesh(positions, triangles)


def sample_surface_points(mesh, n, rng):
    """Draw n points uniformly by area from the mesh surface.

    ``rng`` is a seed or ``numpy.random.Generator``; the draw is
    deterministic per seed.
    """
    if mesh.num_triangles == 0:
        raise DomainError("mesh has no triangles")
    if n < 1:
        raise UsageError("need at least one sample point")
    rng = np.random.default_rng(rng)
    a, b, c = _corner_arrays(mesh.vertices, mesh.triangles)
    areas = _areas(mesh.vertices, mesh.triangles)
    pick = rng.choice(mesh.num_triangles, size=n, p=areas / areas.sum())
    s = np.sqrt(rng.random(n))
    v = s * (1.0 - rng.random(n))
    u = 1.0 - s
    w = 1.0 - u - v
    return u[:, None] * a[pick] + v[:, None] * b[pick] + w[:, None] * c[pick]
