"""Point-cloud primitives: OFF meshes, surface sampling, k-NN, rotation, TPS."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateMeshError, FitError, ParseError


@dataclass
class PointCloud:
    points: np.ndarray
    correspondence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ContractError(f"point cloud must be n x 3, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ContractError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------


def _content_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_off(text):
    """Parse ASCII OFF text; polygons are fan-triangulated."""
    lines = _content_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    tokens = header.split()
    if tokens[0] != "OFF":
        raise ParseError(f"expected 'OFF' header, got {tokens[0]!r}", lineno)
    # some exporters put the counts on the header line
    counts = tokens[1:]
    if not counts:
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError("missing counts line", lineno + 1) from None
        counts = line.split()
    try:
        n_vert, n_face = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError("malformed counts line", lineno) from None
    if n_vert < 0 or n_face < 0:
        raise ParseError("negative element count", lineno)

    vertices = np.empty((n_vert, 3))
    for v in range(n_vert):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_vert} vertices, found {v}", lineno + 1) from None
        parts = line.split()
        try:
            vertices[v] = [float(p) for p in parts[:3]]
        except ValueError:
            raise ParseError("malformed vertex", lineno) from None
        if len(parts) < 3:
            raise ParseError("vertex needs three coordinates", lineno)

    triangles = []
    for f in range(n_face):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_face} faces, found {f}", lineno + 1) from None
        try:
            parts = [int(p) for p in line.split()]
        except ValueError:
            raise ParseError("malformed face", lineno) from None
        if not parts or len(parts) < parts[0] + 1 or parts[0] < 3:
            raise ParseError("face vertex count does not match its indices", lineno)
        idx = parts[1 : parts[0] + 1]
        if min(idx) < 0 or max(idx) >= n_vert:
            raise ParseError("face index out of range", lineno)
        for j in range(1, len(idx) - 1):
            triangles.append((idx[0], idx[j], idx[j + 1]))
    return Mesh(vertices, np.asarray(triangles, dtype=np.int64).reshape(-1, 3))


def load_off(path):
    with open(path, encoding="ascii", errors="strict") as fh:
        return parse_off(fh.read())


def write_off(mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices.tolist():
            fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_xyz(path):
    """Read an ASCII ``x y z`` per line file; ``#`` starts a comment."""
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in _content_lines(fh.read()):
            parts = line.split()
            if len(parts) != 3:
                raise ParseError("expected three coordinates", lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError("malformed coordinate", lineno) from None
    return PointCloud(np.asarray(rows, dtype=np.float64).reshape(-1, 3))


def save_xyz(cloud, path, comment=None):
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "w", encoding="ascii") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        # tolist() yields Python floats, whose repr round-trips exactly
        for p in np.asarray(points, dtype=np.float64).tolist():
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")


# ----------------------------------------------------------------------------
# sampling and normalisation
# ----------------------------------------------------------------------------


def triangle_areas(mesh):
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface(mesh, n, seed=0, rng=None):
    """Draw ``n`` points area-weighted over the triangles of ``mesh``."""
    if len(mesh.triangles) == 0:
        raise DegenerateMeshError("mesh has no triangles")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(seed))
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, j]] for j in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts)


def normalize(cloud):
    """Centre on the centroid and scale into the unit sphere."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return PointCloud(pts, cloud.correspondence)


# ----------------------------------------------------------------------------
# nearest neighbours
# ----------------------------------------------------------------------------


def knn(query, reference, k, chunk=256):
    """Indices of the ``k`` nearest reference rows for every query row.

    Exhaustive scan on squared Euclidean distance. Rows are sorted ascending by
    distance with ties going to the lower index.
    """
    query = np.asarray(query.points if isinstance(query, PointCloud) else query, dtype=np.float64)
    reference = np.asarray(
        reference.points if isinstance(reference, PointCloud) else reference, dtype=np.float64
    )
    r = len(reference)
    if k < 1 or k > r:
        raise ContractError(f"k={k} must lie in [1, {r}]")
    if query.shape[1:] != reference.shape[1:]:
        raise ContractError(f"dimension mismatch {query.shape} vs {reference.shape}")
    out = np.empty((len(query), k), dtype=np.int64)
    rows = np.arange(min(chunk, len(query)))[:, None]
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        diff = q[:, None, :] - reference[None, :, :]
        d2 = np.einsum("qrc,qrc->qr", diff, diff)
        if k < r:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = d2[rows[: len(q)], part].max(axis=1)
            # keep every index tied with the k-th distance so ties resolve by index
            cand_mask = d2 <= kth[:, None]
        else:
            cand_mask = np.ones_like(d2, dtype=bool)
        for i in range(len(q)):
            cand = np.flatnonzero(cand_mask[i])
            order = np.lexsort((cand, d2[i, cand]))
            out[start + i] = cand[order[:k]]
    return out


# ----------------------------------------------------------------------------
# rigid motion
# ----------------------------------------------------------------------------


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(cloud, angle):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out = pts @ rotation_z(angle).T
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.correspondence)
    return out


# ----------------------------------------------------------------------------
# thin-plate spline with the 3D polyharmonic kernel phi(r) = r
# ----------------------------------------------------------------------------


@dataclass
class TpsWarp:
    controls: np.ndarray  # m x 3
    affine: np.ndarray  # 3 x 4, acting on [x; 1]
    weights: np.ndarray  # m x 3

    def __call__(self, points):
        return tps_evaluate(self, points)


def _pairwise_dist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijc,ijc->ij", diff, diff))


def tps_fit(controls, displacements, min_separation=1e-9):
    """Fit a TPS warp moving each control site by its displacement.

    The displacement field is solved on control coordinates centred at their
    mean; when fewer than four non-coplanar sites leave the linear part
    underdetermined, the minimum-norm solution keeps it at zero.
    """
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, 3)
    displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    m = len(controls)
    if m < 1 or displacements.shape != controls.shape:
        raise FitError(f"need matching m x 3 controls/displacements, got {controls.shape}, {displacements.shape}")
    dist = _pairwise_dist(controls, controls)
    if m > 1 and dist[np.triu_indices(m, 1)].min() <= min_separation:
        raise FitError("control sites must be pairwise distinct")

    centre = controls.mean(axis=0)
    poly = np.hstack([np.ones((m, 1)), controls - centre])
    system = np.zeros((m + 4, m + 4))
    system[:m, :m] = dist
    system[:m, m:] = poly
    system[m:, :m] = poly.T
    rhs = np.zeros((m + 4, 3))
    rhs[:m] = displacements
    sol, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    residual = np.abs(system @ sol - rhs).max()
    if not np.isfinite(sol).all() or residual > 1e-8 * max(1.0, np.abs(rhs).max()):
        raise FitError(f"TPS system is singular (rank {rank} of {m + 4})")

    weights = sol[:m]
    shift, lin = sol[m], sol[m + 1 :]  # displacement = shift + (x - centre) @ lin
    affine = np.zeros((3, 4))
    affine[:, :3] = np.eye(3) + lin.T
    affine[:, 3] = shift - lin.T @ centre
    return TpsWarp(controls.copy(), affine, weights)


def tps_evaluate(warp, points):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ warp.affine[:, :3].T + warp.affine[:, 3] + _pairwise_dist(pts, warp.controls) @ warp.weights


def tps_apply(warp, cloud):
    return PointCloud(tps_evaluate(warp, cloud.points), cloud.correspondence)
