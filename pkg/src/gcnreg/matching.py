"""Candidate displacements, min-sum loopy belief propagation and soft blending."""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .features import DescriptorConfig, describe
from .geometry import PointCloud, knn

# upper bound on E * k_c * k_c entries materialised at once in a message update
_MESSAGE_BLOCK = 1 << 23


@dataclass(frozen=True)
class LbpConfig:
    alpha: float = 50.0
    iterations: int = 3
    temperature: float = 1.0
    k_candidates: int = 128
    k_source: int = 10
    refine: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if not self.temperature > 0:
            raise ContractError("temperature must be > 0")
        if self.k_candidates < 1 or self.k_source < 1:
            raise ContractError("neighbour counts must be >= 1")


@dataclass
class CandidateGraph:
    cand_idx: np.ndarray  # n x k_c target indices
    cand_disp: np.ndarray  # n x k_c x 3
    unary_cost: ad.Tensor  # n x k_c


@dataclass
class SourceGraph:
    n: int
    src: np.ndarray
    dst: np.ndarray
    rev: np.ndarray  # rev[e] is the index of the edge dst[e] -> src[e]

    @classmethod
    def from_edges(cls, n, pairs):
        """Symmetrised, sorted, self-loop-free graph from undirected pairs."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            raise ContractError("edge endpoint out of range")
        both = np.vstack([pairs, pairs[:, ::-1]])
        both = both[both[:, 0] != both[:, 1]]
        keys = np.unique(both[:, 0] * n + both[:, 1])
        src, dst = keys // n, keys % n
        rev = np.searchsorted(keys, dst * n + src)
        return cls(n, src, dst, rev)

    @property
    def n_edges(self):
        return len(self.src)


def source_graph(points, k_source):
    """k-NN graph over source coordinates, both edge directions present."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    n = len(pts)
    if k_source >= n:
        raise ContractError(f"k_source={k_source} needs at least {k_source + 1} source points")
    nbrs = knn(pts, pts, k_source + 1)
    pairs = []
    for i, row in enumerate(nbrs):
        row = row[row != i][:k_source]
        pairs.append(np.column_stack([np.full(len(row), i), row]))
    return SourceGraph.from_edges(n, np.vstack(pairs))


def build_candidates(source, target, f_src, f_tgt, k_c):
    src = source.points if isinstance(source, PointCloud) else np.asarray(source)
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target)
    if k_c > len(tgt):
        raise ContractError(f"k_c={k_c} exceeds target size {len(tgt)}")
    if f_src.shape[0] != len(src) or f_tgt.shape[0] != len(tgt):
        raise ContractError("feature sets must match cloud sizes")
    idx = knn(src, tgt, k_c)
    disp = tgt[idx] - src[:, None, :]
    n, c = f_src.shape
    diff = ad.gather(f_tgt, idx) - ad.reshape(f_src, (n, 1, c))
    cost = ad.sum(ad.square(diff), axis=-1)
    return CandidateGraph(idx, disp, cost)


def pairwise_reg(disp_i, disp_j):
    """r[p, q] = |disp_i[p] - disp_j[q]|^2; works batched over leading axes."""
    diff = np.asarray(disp_i)[..., :, None, :] - np.asarray(disp_j)[..., None, :, :]
    return np.einsum("...pqc,...pqc->...pq", diff, diff)


def _edge_blocks(graph, k):
    block = max(1, _MESSAGE_BLOCK // (k * k))
    return [slice(s, min(s + block, graph.n_edges)) for s in range(0, graph.n_edges, block)]


def _edge_reg(cand_disp, graph, sl, alpha, dtype):
    return (alpha * pairwise_reg(cand_disp[graph.src[sl]], cand_disp[graph.dst[sl]])).astype(dtype)


def _update_messages(h, cand_disp, graph, alpha, blocks, cached_reg):
    e_total, k = h.shape
    parts = []
    for b, sl in enumerate(blocks):
        reg = cached_reg[b] if cached_reg is not None else _edge_reg(cand_disp, graph, sl, alpha, h.dtype)
        hb = h if len(blocks) == 1 else ad.gather(h, np.arange(sl.start, sl.stop))
        cost = ad.reshape(hb, (hb.shape[0], k, 1)) + reg
        msg, _ = ad.min_select(cost, axis=1)
        parts.append(msg)
    msg = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    # per-vector shift keeps values bounded; argmins and softmax weights are unaffected
    low, _ = ad.min_select(msg, axis=1)
    return msg - ad.reshape(low, (e_total, 1))


def lbp_run(cand, graph, cfg=LbpConfig()):
    """Synchronous min-sum message passing; returns n x k_c beliefs."""
    d = cand.unary_cost
    n, k = d.shape
    if graph.n != n:
        raise ContractError(f"graph has {graph.n} nodes, candidates have {n}")
    if cfg.iterations == 0 or graph.n_edges == 0:
        return d
    blocks = _edge_blocks(graph, k)
    # one block fits in memory, so its regularisation tensor is reused across rounds
    cached = [_edge_reg(cand.cand_disp, graph, blocks[0], cfg.alpha, d.dtype)] if len(blocks) == 1 else None
    messages = ad.Tensor(np.zeros((graph.n_edges, k), dtype=d.dtype))
    for _ in range(cfg.iterations):
        incoming = ad.segment_sum(messages, graph.dst, n)
        h = ad.gather(d + incoming, graph.src) - ad.gather(messages, graph.rev)
        messages = _update_messages(h, cand.cand_disp, graph, cfg.alpha, blocks, cached)
    return d + ad.segment_sum(messages, graph.dst, n)


def soft_displacement(beliefs, cand_disp, temperature=1.0):
    """Softmax(-temperature * beliefs) weighted mean of candidate displacements.

    Returns ``(displacement n x 3, weights n x k_c)``.
    """
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    weights = ad.softmax(ad.mul(beliefs, -float(temperature)), axis=-1)
    n, k = weights.shape
    disp = np.asarray(cand_disp, dtype=weights.dtype)
    u = ad.sum(ad.reshape(weights, (n, k, 1)) * disp, axis=1)
    return u, weights


def match(source, target, params, desc_cfg=DescriptorConfig(), lbp_cfg=LbpConfig()):
    """Differentiable forward pass: features, candidates, LBP, blended displacement.

    Returns ``(displacement, weights)`` tensors.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source)
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ContractError("clouds must be non-empty")
    if len(src) <= lbp_cfg.k_source:
        raise ContractError(f"source has {len(src)} points, needs more than k_source={lbp_cfg.k_source}")
    if len(tgt) < lbp_cfg.k_candidates:
        raise ContractError(f"target has {len(tgt)} points, fewer than k_candidates={lbp_cfg.k_candidates}")
    f_src = describe(src, params, desc_cfg)
    f_tgt = describe(tgt, params, desc_cfg)
    cand = build_candidates(src, tgt, f_src, f_tgt, lbp_cfg.k_candidates)
    beliefs = lbp_run(cand, source_graph(src, lbp_cfg.k_source), lbp_cfg)
    return soft_displacement(beliefs, cand.cand_disp, lbp_cfg.temperature)


@dataclass
class RegistrationResult:
    warped: np.ndarray
    displacement: np.ndarray
    weights: np.ndarray
    elapsed_ms: float


def register(source, target, params, desc_cfg=DescriptorConfig(), lbp_cfg=LbpConfig()):
    """Warp ``source`` onto ``target``; no tape is recorded."""
    src = np.asarray(source.points if isinstance(source, PointCloud) else source, dtype=np.float64)
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target)
    start = time.perf_counter()
    with ad.no_grad():
        u, w = match(src, tgt, params, desc_cfg, lbp_cfg)
        total = u.data.astype(np.float64)
        if lbp_cfg.refine:
            u, w = match(src + total, tgt, params, desc_cfg, lbp_cfg)
            total = total + u.data
    elapsed = (time.perf_counter() - start) * 1e3
    return RegistrationResult(src + total, total, w.data, elapsed)
