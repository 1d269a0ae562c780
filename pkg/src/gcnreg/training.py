"""End-to-end descriptor training with Adam, plus checkpoint persistence."""

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import config as cfgtext
from .benchgen import MAX_TRAIN_ROTATION, training_augment
from .errors import ContractError, DimensionError, FormatError, UnsupportedVersionError
from .features import DescriptorConfig, init_params
from .matching import LbpConfig, match
from .rng import derive_seed, substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1
    samples_per_epoch: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_points: int = 1024
    max_deform: float = 0.9
    max_rotation: float = MAX_TRAIN_ROTATION
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    lbp: LbpConfig = field(default_factory=lambda: LbpConfig(k_candidates=16))

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.samples_per_epoch < 0:
            raise ContractError("samples_per_epoch must be >= 0")

    @property
    def steps(self):
        return self.epochs * self.samples_per_epoch

    def sections(self):
        return {"train": self, "descriptor": self.descriptor, "lbp": self.lbp}

    def to_text(self):
        return cfgtext.to_text(self.sections())

    @classmethod
    def from_text(cls, text):
        s = cfgtext.apply(cls().sections(), cfgtext.parse_text(text))
        return replace(s["train"], descriptor=s["descriptor"], lbp=s["lbp"])


# ----------------------------------------------------------------------------
# loss and optimiser
# ----------------------------------------------------------------------------


def loss(warped, gt_targets):
    """Mean absolute error over all coordinates of corresponding points."""
    if warped.shape != tuple(np.shape(gt_targets.data if isinstance(gt_targets, ad.Tensor) else gt_targets)):
        raise DimensionError(f"loss shape mismatch: {warped.shape} vs {np.shape(gt_targets)}")
    if not isinstance(gt_targets, ad.Tensor):
        gt_targets = ad.Tensor(gt_targets, dtype=warped.dtype)
    return ad.mean_abs_error(warped, gt_targets)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        m = OrderedDict((k, np.zeros_like(_array(p))) for k, p in params.items())
        v = OrderedDict((k, np.zeros_like(_array(p))) for k, p in params.items())
        return cls(m, v, 0)


def _array(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def adam_step(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays (or tensors).  Returns new
    parameter arrays and a new state; inputs are not modified.
    """
    b1, b2 = betas
    step = state.step + 1
    new_params, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.items():
        p = _array(p)
        g = _array(grads[name])
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {state.m[name].shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, step)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


def pair_loss(pair, params, cfg):
    """Forward pass on one sample pair; returns (loss tensor, displacement)."""
    u, _ = match(pair.source, pair.target, params, cfg.descriptor, cfg.lbp)
    warped = u + ad.Tensor(pair.source.points, dtype=u.dtype)
    return loss(warped, pair.gt_targets), u


def train(models, cfg=TrainConfig(), params=None, state=None, log_path=None, progress=None):
    """Optimise descriptor parameters, one augmented pair per step.

    ``models`` are normalised point clouds. Returns ``(params, state, losses)``.
    """
    if not models:
        raise ContractError("training needs at least one model")
    if params is None:
        params = init_params(cfg.descriptor, derive_seed(cfg.seed, "init"))
    if state is None:
        state = AdamState.zeros_like(params)
    losses = []
    for step in range(state.step, state.step + cfg.steps):
        pick = int(substream(cfg.seed, "train-pick", step).integers(len(models)))
        pair = training_augment(models[pick], derive_seed(cfg.seed, "train-pair", step), cfg.max_deform, cfg.max_rotation)
        value, _ = pair_loss(pair, params, cfg)
        grads = ad.backward(value, wrt=list(params.values()))
        new, state = adam_step(
            params, dict(zip(params, grads)), state, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps
        )
        for name, arr in new.items():
            params[name].data = arr
        losses.append(value.item())
        if progress is not None:
            progress(step, losses[-1])
        elif step % 50 == 0:
            log.info("step %d loss %.6f", step, losses[-1])
    if log_path is not None:
        write_loss_log(losses, log_path, first_step=state.step - len(losses))
    return params, state, losses


def write_loss_log(losses, path, first_step=0):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(losses):
            fh.write(f"{first_step + i},{float(value)!r}\n")


def read_loss_log(path):
    with open(path, encoding="utf-8") as fh:
        rows = fh.read().splitlines()[1:]
    return [float(r.split(",")[1]) for r in rows if r]


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"RDRG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    tensors: OrderedDict
    step: int = 0
    config: str = ""

    def params(self, requires_grad=True):
        return OrderedDict(
            (k, ad.Tensor(v, requires_grad=requires_grad, name=k))
            for k, v in self.tensors.items()
            if not k.startswith("adam.")
        )

    def adam_state(self):
        names = [k for k in self.tensors if not k.startswith("adam.")]
        if not all(f"adam.m/{k}" in self.tensors for k in names):
            return None
        m = OrderedDict((k, self.tensors[f"adam.m/{k}"]) for k in names)
        v = OrderedDict((k, self.tensors[f"adam.v/{k}"]) for k in names)
        return AdamState(m, v, self.step)

    @classmethod
    def from_training(cls, params, state=None, cfg=None):
        tensors = OrderedDict((k, _array(p).copy()) for k, p in params.items())
        if state is not None:
            for k in params:
                tensors[f"adam.m/{k}"] = state.m[k].copy()
            for k in params:
                tensors[f"adam.v/{k}"] = state.v[k].copy()
        return cls(tensors, 0 if state is None else state.step, "" if cfg is None else cfg.to_text())


def encode_checkpoint(ckpt):
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _DTYPE_CODES[arr.dtype]
        out.append(struct.pack("<B", code) + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    text = ckpt.config.encode("utf-8")
    out.append(struct.pack("<QI", ckpt.step, len(text)) + text)
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data):
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start) from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        code_pos = r.pos
        (code,) = r.unpack("<B", "dtype")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_pos)
        dtype = _DTYPES[code]
        size = int(math.prod(dims)) * dtype.itemsize
        arr = np.frombuffer(r.take(size, f"data of {name}"), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    step, text_len = r.unpack("<QI", "step counter")
    start = r.pos
    try:
        text = r.take(text_len, "config snapshot").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config snapshot is not UTF-8", start) from None
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return Checkpoint(tensors, step, text)


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
