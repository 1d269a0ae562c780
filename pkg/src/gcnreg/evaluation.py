"""Robustness sweeps, registration timing and CSV/SVG reports."""

import csv
import io
from dataclasses import dataclass, field, replace
from xml.sax.saxutils import escape

import numpy as np

from .benchgen import ChallengeSpec, make_pair
from .errors import ContractError, DimensionError, ParseError
from .features import DescriptorConfig
from .matching import LbpConfig, register
from .rng import derive_seed

AXES = {
    "deformation": "deform_level",
    "rotation": "rotation_level",
    "noise": "noise_level",
    "outliers": "outlier_ratio",
    "incompleteness": "incompleteness_ratio",
}

DEFAULT_LEVELS = {
    "deformation": (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    "rotation": (0.2, 0.4, 0.6, 0.8),
    "noise": (0.01, 0.02, 0.03),
    "outliers": (0.05, 0.1, 0.2),
    "incompleteness": (0.05, 0.1, 0.2),
}

CSV_HEADER = ["axis", "level", "before_mean", "after_mean", "after_std", "time_ms_mean", "time_ms_std"]


def mean_euclidean(warped, gt_targets):
    """Average per-point distance between registered points and their targets."""
    a = np.asarray(warped, dtype=np.float64)
    b = np.asarray(gt_targets, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mean_euclidean shape mismatch: {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ContractError("mean_euclidean of empty clouds")
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass(frozen=True)
class SweepSpec:
    axis: str = "deformation"
    levels: tuple = DEFAULT_LEVELS["deformation"]
    trials: int = 5
    fixed: ChallengeSpec = field(default_factory=ChallengeSpec)
    checkpoint: str = ""
    baseline: bool = False
    seed: int = 0
    record_timing: bool = True

    def __post_init__(self):
        if self.axis not in AXES:
            raise ContractError(f"unknown sweep axis {self.axis!r}; expected one of {sorted(AXES)}")
        if not self.levels:
            raise ContractError("sweep needs at least one level")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ContractError("sweep levels must be strictly increasing")
        if self.trials < 1:
            raise ContractError("trials must be >= 1")


@dataclass(frozen=True)
class ReportRow:
    axis: str
    level: float
    before_mean: float
    after_mean: float
    after_std: float
    time_ms_mean: float
    time_ms_std: float


def _load_model(spec, params, desc_cfg, lbp_cfg):
    if params is None:
        from .training import TrainConfig, load_checkpoint

        if not spec.checkpoint:
            raise ContractError("sweep needs parameters or a checkpoint path")
        ckpt = load_checkpoint(spec.checkpoint)
        params = ckpt.params(requires_grad=False)
        if ckpt.config:
            tc = TrainConfig.from_text(ckpt.config)
            desc_cfg = desc_cfg or tc.descriptor
            lbp_cfg = lbp_cfg or tc.lbp
    desc_cfg = desc_cfg or DescriptorConfig()
    lbp_cfg = lbp_cfg or LbpConfig()
    if spec.baseline:
        desc_cfg = replace(desc_cfg, with_alignment=False)
    return params, desc_cfg, lbp_cfg


def sweep_pairs(spec, models, level_index):
    """The seeded (model index, pair) trials for one sweep level."""
    level = spec.levels[level_index]
    for trial in range(spec.trials):
        challenge = replace(
            spec.fixed,
            **{AXES[spec.axis]: level},
            seed=derive_seed(spec.seed, "sweep", spec.axis, level_index, trial),
        )
        m = trial % len(models)
        yield m, make_pair(models[m], challenge)


def run_sweep(spec, models, params=None, desc_cfg=None, lbp_cfg=None, csv_path=None):
    """Register seeded pairs at every level and aggregate distances and timing.

    Deleted source points and appended outliers never enter the metric: only
    surviving correspondences from the pair's ground-truth map are compared.
    """
    if not models:
        raise ContractError("sweep needs at least one model")
    params, desc_cfg, lbp_cfg = _load_model(spec, params, desc_cfg, lbp_cfg)
    rows = []
    for li, level in enumerate(spec.levels):
        before, after, times = [], [], []
        for _, pair in sweep_pairs(spec, models, li):
            gt = pair.gt_targets
            result = register(pair.source, pair.target, params, desc_cfg, lbp_cfg)
            before.append(mean_euclidean(pair.source.points, gt))
            after.append(mean_euclidean(result.warped, gt))
            times.append(result.elapsed_ms if spec.record_timing else 0.0)
        rows.append(
            ReportRow(
                spec.axis,
                float(level),
                float(np.mean(before)),
                float(np.mean(after)),
                float(np.std(after)),
                float(np.mean(times)),
                float(np.std(times)),
            )
        )
    if csv_path is not None:
        write_csv(rows, csv_path)
    return rows


def format_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.axis] + [repr(float(getattr(r, k))) for k in CSV_HEADER[1:]])
    return buf.getvalue()


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(rows))


def parse_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ParseError(f"unexpected CSV header {header}", 1)
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise ParseError("wrong number of columns", lineno)
        try:
            rows.append(ReportRow(rec[0], *(float(x) for x in rec[1:])))
        except ValueError:
            raise ParseError("malformed number", lineno) from None
    return rows


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_csv(fh.read())


# ----------------------------------------------------------------------------
# SVG line chart
# ----------------------------------------------------------------------------

_COLOURS = ["#444444", "#1f77b4", "#d62728", "#2ca02c"]


def emit_svg(rows, path=None, baseline_rows=None, title=None, width=640, height=420):
    """Line chart of the before/after curves (and an optional baseline).

    Returns the SVG text; writes it to ``path`` when given.
    """
    rows = list(rows)
    if not rows:
        raise ContractError("cannot chart an empty report")
    levels = [r.level for r in rows]
    series = [("before registration", [r.before_mean for r in rows]), ("after registration", [r.after_mean for r in rows])]
    if baseline_rows is not None:
        baseline_rows = list(baseline_rows)
        if [r.level for r in baseline_rows] != levels:
            raise ContractError("baseline report uses different levels")
        series.append(("baseline (no alignment)", [r.after_mean for r in baseline_rows]))

    left, right, top, bottom = 70, 180, 40, 60
    pw, ph = width - left - right, height - top - bottom
    x_lo, x_hi = min(levels), max(levels)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    y_hi = max(max(v) for _, v in series)
    y_hi = y_hi * 1.1 if y_hi > 0 else 1.0

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + ph - y / y_hi * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(5):
        yv = y_hi * i / 4
        out.append(f'<text x="{left - 8}" y="{py(yv) + 4:.2f}" font-size="11" text-anchor="end">{yv:.3g}</text>')
    for lv in levels:
        out.append(f'<text x="{px(lv):.2f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{lv:.3g}</text>')
    axis_name = escape(rows[0].axis)
    out.append(f'<text x="{left + pw / 2}" y="{height - 15}" font-size="13" text-anchor="middle">{axis_name} level</text>')
    out.append(
        f'<text x="18" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + ph / 2})">mean Euclidean distance</text>'
    )
    if title:
        out.append(f'<text x="{left + pw / 2}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>')
    for s, (label, values) in enumerate(series):
        colour = _COLOURS[s % len(_COLOURS)]
        pts = " ".join(f"{px(x):.3f},{py(y):.3f}" for x, y in zip(levels, values))
        if len(values) > 1:
            out.append(f'<polyline class="series" data-label="{escape(label)}" points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for x, y in zip(levels, values):
            out.append(f'<circle class="marker" cx="{px(x):.3f}" cy="{py(y):.3f}" r="3" fill="{colour}"/>')
        ly = top + 10 + 18 * s
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def compare_sweep(spec, models, aligned_params, baseline_params, out_prefix, desc_cfg=None, lbp_cfg=None):
    """Run the same sweep with and without the alignment transform.

    Writes ``<prefix>_aligned.csv``, ``<prefix>_baseline.csv`` and
    ``<prefix>.svg``; returns both row lists.
    """
    desc_cfg = desc_cfg or DescriptorConfig()
    aligned = run_sweep(
        replace(spec, baseline=False), models, aligned_params, replace(desc_cfg, with_alignment=True), lbp_cfg,
        csv_path=f"{out_prefix}_aligned.csv",
    )
    base = run_sweep(
        replace(spec, baseline=True), models, baseline_params, desc_cfg, lbp_cfg,
        csv_path=f"{out_prefix}_baseline.csv",
    )
    emit_svg(aligned, f"{out_prefix}.svg", baseline_rows=base, title=f"{spec.axis} sweep: alignment vs baseline")
    return aligned, base


# ----------------------------------------------------------------------------
# timing
# ----------------------------------------------------------------------------


def time_registration(params, pair, repeats=5, desc_cfg=None, lbp_cfg=None):
    """Wall-clock of ``register`` only, after one discarded warm-up run.

    Returns ``(mean_ms, std_ms, samples)``.
    """
    if repeats < 3:
        raise ContractError("timing needs at least 3 repeats")
    desc_cfg = desc_cfg or DescriptorConfig()
    lbp_cfg = lbp_cfg or LbpConfig()
    register(pair.source, pair.target, params, desc_cfg, lbp_cfg)
    samples = [register(pair.source, pair.target, params, desc_cfg, lbp_cfg).elapsed_ms for _ in range(repeats)]
    return float(np.mean(samples)), float(np.std(samples)), samples

