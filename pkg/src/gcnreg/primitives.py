"""Procedural stand-in meshes for when no ModelNet10 files are supplied."""

import numpy as np

from .geometry import Mesh
from .rng import substream


def _grid_mesh(surface, nu, nv, wrap_u=True, wrap_v=False):
    """Triangulate a parametric surface sampled on an nu x nv grid."""
    us = np.linspace(0, 1, nu, endpoint=not wrap_u)
    vs = np.linspace(0, 1, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    verts = surface(uu.ravel(), vv.ravel())
    tris = []
    cols = nu if wrap_u else nu - 1
    for i in range(cols):
        i2 = (i + 1) % nu
        for j in range(nv - 1):
            a, b, c, d = i * nv + j, i2 * nv + j, i2 * nv + j + 1, i * nv + j + 1
            tris += [(a, b, c), (a, c, d)]
    return Mesh(np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64))


def ellipsoid(ax=1.0, ay=1.0, az=1.0, res=24):
    def surface(u, v):
        th, ph = 2 * np.pi * u, np.pi * v
        return np.column_stack([ax * np.sin(ph) * np.cos(th), ay * np.sin(ph) * np.sin(th), az * np.cos(ph)])

    return _grid_mesh(surface, res, res // 2 + 1)


def torus(major=1.0, minor=0.35, res=32):
    def surface(u, v):
        th, ph = 2 * np.pi * u, 2 * np.pi * v
        r = major + minor * np.cos(ph)
        return np.column_stack([r * np.cos(th), r * np.sin(th), minor * np.sin(ph)])

    return _grid_mesh(surface, res, res // 2 + 1)


def cylinder(radius=0.5, height=1.5, top_radius=None, res=32):
    """Closed (possibly tapered) cylinder; ``top_radius=0`` gives a cone."""
    top = radius if top_radius is None else top_radius

    def surface(u, v):
        th = 2 * np.pi * u
        r = radius + (top - radius) * v
        return np.column_stack([r * np.cos(th), r * np.sin(th), height * (v - 0.5)])

    side = _grid_mesh(surface, res, 6)
    verts = [side.vertices, [[0, 0, -height / 2], [0, 0, height / 2]]]
    n = len(side.vertices)
    bottom, apex = n, n + 1
    caps = []
    for i in range(res):
        i2 = (i + 1) % res
        caps.append((bottom, i2 * 6, i * 6))
        if top > 0:
            caps.append((apex, i * 6 + 5, i2 * 6 + 5))
    return Mesh(np.vstack(verts), np.vstack([side.triangles, np.asarray(caps, dtype=np.int64)]))


def box(sx=1.0, sy=1.0, sz=1.0):
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    corners *= 0.5 * np.array([sx, sy, sz])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return Mesh(corners, np.asarray(tris, dtype=np.int64))


def merge(*meshes):
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return Mesh(np.vstack(verts), np.vstack(tris))


def translated(mesh, offset):
    return Mesh(mesh.vertices + np.asarray(offset, dtype=np.float64), mesh.triangles)


def _table(rng):
    w, d = rng.uniform(1.0, 2.0), rng.uniform(0.6, 1.2)
    leg = rng.uniform(0.5, 1.0)
    parts = [translated(box(w, d, 0.08), (0, 0, leg))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(translated(box(0.08, 0.08, leg), (sx * (w / 2 - 0.06), sy * (d / 2 - 0.06), leg / 2)))
    return merge(*parts)


def _chair(rng):
    s = rng.uniform(0.8, 1.1)
    leg = rng.uniform(0.4, 0.6)
    back = rng.uniform(0.5, 0.9)
    parts = [translated(box(s, s, 0.08), (0, 0, leg)), translated(box(s, 0.08, back), (0, s / 2, leg + back / 2))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(translated(box(0.07, 0.07, leg), (sx * (s / 2 - 0.05), sy * (s / 2 - 0.05), leg / 2)))
    return merge(*parts)


_FAMILIES = {
    "ellipsoid": lambda r: ellipsoid(*r.uniform(0.5, 1.2, 3)),
    "torus": lambda r: torus(1.0, r.uniform(0.2, 0.5)),
    "cylinder": lambda r: cylinder(r.uniform(0.3, 0.7), r.uniform(0.8, 2.0)),
    "cone": lambda r: cylinder(r.uniform(0.4, 0.8), r.uniform(0.8, 1.6), top_radius=0.0),
    "box": lambda r: box(*r.uniform(0.4, 1.5, 3)),
    "table": _table,
    "chair": _chair,
}


def synthetic_models(count, seed=0):
    """``count`` (name, mesh) pairs cycling through the shape families."""
    names = sorted(_FAMILIES)
    out = []
    for i in range(count):
        family = names[i % len(names)]
        rng = substream(seed, "primitive", i)
        out.append((f"{family}_{i:03d}", _FAMILIES[family](rng)))
    return out
