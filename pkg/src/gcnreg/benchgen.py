"""Seeded synthesis of deformed benchmark pairs with ground truth."""

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ContractError, ParseError
from .geometry import PointCloud, knn, rotate_z, tps_apply, tps_fit
from .rng import derive_seed, substream

MAX_TRAIN_ROTATION = math.pi / 4
MAX_TRAIN_DEFORMATION = 0.9
DEFORM_SCALE = 0.5
# control-site draws per pair; the best-conditioned one is kept
SITE_DRAWS = 8


def control_sites(points, count, rng, draws=SITE_DRAWS):
    """Indices of ``count`` control sites, the best spread of ``draws`` uniform draws.

    Five nearly coplanar sites make the interpolating spline's linear part
    blow up away from the sites (warps many times the control amplitude), so
    the draw whose centred sites have the largest smallest singular value wins.
    """
    best, best_sv = None, -1.0
    for _ in range(draws):
        idx = rng.choice(len(points), size=count, replace=False)
        sv = np.linalg.svd(points[idx] - points[idx].mean(axis=0), compute_uv=False)[-1]
        if sv > best_sv:
            best, best_sv = idx, sv
    return best


@dataclass(frozen=True)
class ChallengeSpec:
    deform_level: float = 0.0
    rotation_level: float = 0.0
    noise_level: float = 0.0
    outlier_ratio: float = 0.0
    incompleteness_ratio: float = 0.0
    n_controls: int = 5
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.deform_level <= 0.9:
            raise ContractError(f"deform_level {self.deform_level} outside [0, 0.9]")
        if not 0.0 <= self.rotation_level <= 0.8:
            raise ContractError(f"rotation_level {self.rotation_level} outside [0, 0.8]")
        if self.noise_level < 0:
            raise ContractError("noise_level must be >= 0")
        if self.outlier_ratio < 0:
            raise ContractError("outlier_ratio must be >= 0")
        if not 0.0 <= self.incompleteness_ratio < 1.0:
            raise ContractError(f"incompleteness_ratio {self.incompleteness_ratio} outside [0, 1)")
        if self.n_controls < 1:
            raise ContractError("n_controls must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must be an unsigned 64-bit integer")


@dataclass
class SamplePair:
    source: PointCloud
    target: PointCloud
    gt_map: np.ndarray  # per surviving source point: index of its target point
    angle: float = 0.0

    @property
    def gt_targets(self):
        return self.target.points[self.gt_map]


def _count(ratio, n):
    # guard against 0.1 * 1000 = 100.00000000000001 style overshoot
    return int(math.ceil(ratio * n - 1e-9)) if ratio > 0 else 0


def make_pair(cloud, spec):
    """Deform, rotate, perturb and crop a copy of ``cloud`` according to ``spec``.

    A stage whose level is zero is skipped entirely, so it consumes no random
    numbers and leaves the other stages bit-identical.
    """
    spec.validate()
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n < 32:
        raise ContractError(f"need at least 32 points, got {n}")
    target = pts.copy()

    if spec.deform_level > 0:
        rng = substream(spec.seed, "deform")
        sites = control_sites(pts, min(spec.n_controls, n), rng)
        amp = spec.deform_level * DEFORM_SCALE
        disp = rng.uniform(-amp, amp, size=(len(sites), 3))
        target = tps_apply(tps_fit(pts[sites], disp), PointCloud(target)).points

    angle = 0.0
    if spec.rotation_level > 0:
        angle = float(substream(spec.seed, "rotation").uniform(0.0, spec.rotation_level))
        target = rotate_z(target, angle)

    if spec.noise_level > 0:
        rng = substream(spec.seed, "noise")
        target = target + rng.uniform(-spec.noise_level, spec.noise_level, size=target.shape)

    n_out = _count(spec.outlier_ratio, n)
    if n_out:
        rng = substream(spec.seed, "outliers")
        lo, hi = target.min(axis=0), target.max(axis=0)
        target = np.vstack([target, lo + (hi - lo) * rng.random((n_out, 3))])

    keep = np.arange(n)
    n_del = _count(spec.incompleteness_ratio, n)
    if n_del:
        rng = substream(spec.seed, "patch")
        centre = int(rng.integers(n))
        removed = knn(pts[centre : centre + 1], pts, n_del)[0]
        keep = np.setdiff1d(keep, removed)

    source = PointCloud(pts[keep].copy(), correspondence=keep.copy())
    return SamplePair(source, PointCloud(target), keep.copy(), angle)


def training_augment(cloud, seed, max_deform=MAX_TRAIN_DEFORMATION, max_rotation=MAX_TRAIN_ROTATION):
    """Training pair: rotation up to 45 degrees, deformation level drawn at random."""
    level = float(substream(seed, "augment").uniform(0.0, max_deform))
    spec = ChallengeSpec(
        deform_level=level,
        rotation_level=max_rotation,
        seed=derive_seed(seed, "augment-pair"),
    )
    return make_pair(cloud, spec)


def split_dataset(paths, train_fraction=0.8, seed=0):
    paths = list(paths)
    if not paths:
        raise ContractError("cannot split an empty dataset")
    if not 0.0 < train_fraction <= 1.0:
        raise ContractError("train_fraction must lie in (0, 1]")
    order = substream(seed, "split").permutation(len(paths))
    n_train = int(round(train_fraction * len(paths)))
    shuffled = [paths[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


# ----------------------------------------------------------------------------
# manifest files
# ----------------------------------------------------------------------------

SPEC_FIELDS = [f.name for f in fields(ChallengeSpec)]
MANIFEST_HEADER = "model," + ",".join(SPEC_FIELDS)


def format_manifest(entries):
    """``entries`` is a sequence of (model path, ChallengeSpec)."""
    lines = [MANIFEST_HEADER]
    for model, spec in entries:
        if "," in str(model):
            raise ContractError(f"model path may not contain commas: {model}")
        values = asdict(spec)
        lines.append(",".join([str(model)] + [repr(values[k]) for k in SPEC_FIELDS]))
    return "\n".join(lines) + "\n"


def parse_manifest(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ParseError("missing or wrong manifest header", 1)
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(SPEC_FIELDS) + 1:
            raise ParseError("wrong number of fields", lineno)
        kwargs = {}
        try:
            for name, raw in zip(SPEC_FIELDS, parts[1:]):
                kwargs[name] = int(raw) if name in ("n_controls", "seed") else float(raw)
        except ValueError:
            raise ParseError("malformed value", lineno) from None
        entries.append((parts[0], replace(ChallengeSpec(), **kwargs)))
    return entries
