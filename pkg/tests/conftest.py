"""Shared oracles and fixtures.

The finite-difference helpers here are the independent reference for all
autodiff checks: they never call the reverse-mode machinery except as
the function under test.
"""

from __future__ import annotations

import numpy as np
import pytest

from sdfgan import tensor as T


def numeric_gradient(fn, arrays, step=1e-5):
    """Central finite differences of a scalar-valued fn over ndarrays.

    ``fn`` receives the arrays (plain numpy) and returns a float.  One
    gradient array per input is returned.
    """
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_gradient(fn, arrays):
    """Reverse-mode gradients of a scalar graph built by ``fn`` on Tensors."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    gs = T.grad(out, leaves)
    return [g.data for g in gs]


def assert_gradients_close(fn, arrays, rtol=1e-4, step=1e-5, atol=1e-7):
    """Compare reverse-mode and finite-difference gradients of fn."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]

    def scalar_fn(*arrs):
        return fn(*[T.Tensor(a) for a in arrs]).item()

    want = numeric_gradient(scalar_fn, arrays, step=step)
    got = analytic_gradient(fn, arrays)
    for w, g in zip(want, got):
        np.testing.assert_allclose(g, w, rtol=rtol, atol=atol)


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _icosphere(radius=0.5, subdivisions=2):
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        index = {v: i for i, v in enumerate(verts)}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.asarray(verts[i]) + np.asarray(verts[j])
                m = tuple(m / np.linalg.norm(m))
                index[m] = len(verts)
                verts.append(m)
                cache[key] = index[m]
            return cache[key]

        new_faces = []
        for i, j, k in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = new_faces
    vertices = np.asarray(verts) * radius
    triangles = np.asarray(faces, dtype=np.int64)
    a, b, c = (vertices[triangles[:, 0]], vertices[triangles[:, 1]],
               vertices[triangles[:, 2]])
    if np.einsum("ij,ij->", a, np.cross(b, c)) < 0:
        triangles = triangles[:, ::-1]
    from sdfgan.geometry import TriMesh

    return TriMesh(vertices, triangles)


@pytest.fixture
def icosphere():
    """Factory for a triangulated sphere with outward-oriented faces."""
    return _icosphere
