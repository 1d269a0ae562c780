"""Central finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .features import DescriptorConfig, init_params
from .rng import substream


@dataclass
class TensorReport:
    name: str
    checked: int
    skipped: int
    rel_error: float


@dataclass
class GradcheckReport:
    tensors: list = field(default_factory=list)
    direction_rel_error: float = 0.0

    @property
    def max_rel_error(self):
        errs = [t.rel_error for t in self.tensors] + [self.direction_rel_error]
        return max(errs)

    @property
    def checked(self):
        return sum(t.checked for t in self.tensors)

    @property
    def skipped(self):
        return sum(t.skipped for t in self.tensors)


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)`` on flattened vectors.

    The floor stops gradients that are exactly zero by symmetry (a bias shared
    by both clouds cancels in feature distances) from reporting pure
    finite-difference noise as a large relative error.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _evaluate(fn):
    with ad.no_grad(), ad.record_selections() as log:
        value = fn().item()
    return value, log


def _same_selection(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check(fn, tensors, step=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    A perturbation that changes any argmin/argmax selection, leaky-ReLU branch
    or absolute-value sign straddles a kink.  It is retried with a 10x and
    100x smaller step and skipped only if every step crosses.
    """
    tensors = list(tensors)
    out = fn()
    analytic = ad.backward(out, wrt=tensors)
    _, base_sel = _evaluate(fn)
    rng = substream(seed, "gradcheck")
    report = GradcheckReport()

    def central(perturb):
        for h in (step, step / 10, step / 100):
            perturb(+h)
            fp, sp = _evaluate(fn)
            perturb(-2 * h)
            fm, sm = _evaluate(fn)
            perturb(+h)
            if _same_selection(sp, base_sel) and _same_selection(sm, base_sel):
                return (fp - fm) / (2 * h), True
        return 0.0, False

    for idx, t in enumerate(tensors):
        size = t.data.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        flat = t.data.reshape(-1)
        num, ana, skipped = [], [], 0
        for c in coords:
            orig = flat[c]

            def perturb(delta, c=c):
                flat[c] += delta

            d, ok = central(perturb)
            flat[c] = orig
            if not ok:
                skipped += 1
                continue
            num.append(d)
            ana.append(analytic[idx].reshape(-1)[c])
        err = relative_error(ana, num, floor) if num else 0.0
        report.tensors.append(TensorReport(t.name or f"tensor{idx}", len(num), skipped, err))

    # one joint random direction through every tensor at once
    dirs = [rng.standard_normal(t.shape).astype(t.dtype) for t in tensors]
    originals = [t.data.copy() for t in tensors]

    def perturb_all(delta):
        for t, d in zip(tensors, dirs):
            t.data += delta * d

    d, ok = central(perturb_all)
    for t, o in zip(tensors, originals):
        t.data[...] = o
    if ok:
        expected = float(sum((a * dd).sum() for a, dd in zip(analytic, dirs)))
        report.direction_rel_error = relative_error([expected], [d], floor)
    return report


# narrow layers keep the number of leaky-ReLU/max kinks low enough that most
# 1e-4 perturbations stay on one side of every tie
CHECK_DESCRIPTOR = DescriptorConfig(
    k_graph=8, layer_widths=(8, 8, 8), out_dim=8, align_point_widths=(8, 16), align_hidden=8, dtype="float64"
)


def pipeline_instance(n_points=32, k_c=4, k_s=3, seed=0, with_alignment=True, descriptor=CHECK_DESCRIPTOR):
    """Small float64 registration problem for end-to-end gradient checks.

    Returns ``(loss_fn, params)``.  The alignment head is moved off its
    identity initialisation so every parameter carries a gradient.
    """
    from .benchgen import ChallengeSpec, make_pair
    from .geometry import PointCloud, normalize
    from .matching import LbpConfig
    from .training import TrainConfig, pair_loss

    desc = replace(descriptor, dtype="float64", with_alignment=with_alignment)
    cfg = TrainConfig(descriptor=desc, lbp=LbpConfig(k_candidates=k_c, k_source=k_s))
    rng = substream(seed, "gradcheck-cloud")
    pts = rng.standard_normal((n_points, 3)) * np.array([1.0, 0.7, 0.4])
    cloud = normalize(PointCloud(pts))
    pair = make_pair(cloud, ChallengeSpec(deform_level=0.5, rotation_level=0.3, seed=seed))
    params = init_params(desc, seed)
    params["align.out.weight"].data[...] = substream(seed, "gradcheck-align").uniform(
        -0.05, 0.05, params["align.out.weight"].shape
    )

    def loss_fn():
        return pair_loss(pair, params, cfg)[0]

    return loss_fn, params


def run_pipeline_check(seed=0, max_coords=16, step=1e-4):
    loss_fn, params = pipeline_instance(seed=seed)
    return check(loss_fn, list(params.values()), step=step, max_coords=max_coords, seed=seed)
