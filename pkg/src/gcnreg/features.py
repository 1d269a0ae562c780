"""Per-point descriptor network: coordinate alignment, EdgeConv stack, projection."""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import PointCloud, knn
from .rng import substream


@dataclass(frozen=True)
class DescriptorConfig:
    k_graph: int = 20
    layer_widths: tuple = (64, 64, 64)
    out_dim: int = 64
    with_alignment: bool = True
    align_point_widths: tuple = (64, 128)
    align_hidden: int = 64
    slope: float = 0.2
    eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.k_graph < 1:
            raise ContractError("k_graph must be >= 1")
        if len(self.layer_widths) != 3 or min(self.layer_widths) < 1:
            raise ContractError("need three positive EdgeConv widths")
        if self.out_dim < 1:
            raise ContractError("out_dim must be >= 1")


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config, seed=0):
    """Fresh parameters; the alignment head starts out predicting the identity."""
    dtype = np.dtype(config.dtype)
    rng = substream(seed, "descriptor-init")
    p = OrderedDict()

    def linear(name, fan_in, fan_out, bias=True):
        p[f"{name}.weight"] = _uniform(rng, fan_in, (fan_in, fan_out), dtype)
        if bias:
            p[f"{name}.bias"] = _uniform(rng, fan_in, (fan_out,), dtype)

    def norm(name, width):
        p[f"{name}.gain"] = np.ones(width, dtype=dtype)
        p[f"{name}.bias"] = np.zeros(width, dtype=dtype)

    width = 3
    for i, w in enumerate(config.align_point_widths):
        linear(f"align.point{i}", width, w, bias=False)
        norm(f"align.norm{i}", w)
        width = w
    linear("align.fc", width, config.align_hidden)
    p["align.out.weight"] = np.zeros((config.align_hidden, 9), dtype=dtype)
    p["align.out.bias"] = np.eye(3, dtype=dtype).reshape(9)

    width = 3
    for layer, w in enumerate(config.layer_widths):
        linear(f"edge{layer}.lin0", 2 * width, w, bias=False)
        norm(f"edge{layer}.norm0", w)
        linear(f"edge{layer}.lin1", w, w, bias=False)
        norm(f"edge{layer}.norm1", w)
        width = w
    linear("proj", sum(config.layer_widths), config.out_dim)
    return OrderedDict((k, ad.Tensor(v, dtype=dtype, requires_grad=True, name=k)) for k, v in p.items())


def _points(cloud, dtype):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return ad.Tensor(pts, dtype=dtype)


def align(cloud, params, config=DescriptorConfig()):
    """Predict a 3x3 transform from the cloud and apply it to the coordinates.

    Returns ``(transform, transformed)`` as tensors.
    """
    x = cloud if isinstance(cloud, ad.Tensor) else _points(cloud, params["align.out.bias"].dtype)
    if x.shape[0] < config.k_graph:
        raise ContractError(f"cloud has {x.shape[0]} points, fewer than k_graph={config.k_graph}")
    h = x
    for i in range(len(config.align_point_widths)):
        h = ad.matmul(h, params[f"align.point{i}.weight"])
        h = ad.instance_norm(h, params[f"align.norm{i}.gain"], params[f"align.norm{i}.bias"], config.eps)
        h = ad.leaky_relu(h, config.slope)
    pooled, _ = ad.max_select(h, axis=0)
    g = ad.reshape(pooled, (1, -1))
    g = ad.leaky_relu(ad.matmul(g, params["align.fc.weight"]) + params["align.fc.bias"], config.slope)
    t = ad.matmul(g, params["align.out.weight"]) + params["align.out.bias"]
    transform = ad.reshape(t, (3, 3))
    return transform, ad.matmul(x, transform)


def edgeconv(h, graph, params, layer, config=DescriptorConfig()):
    """One EdgeConv layer: MLP on ``[h_i, h_j - h_i]`` then max over neighbours."""
    graph = np.asarray(graph)
    n = h.shape[0]
    if graph.ndim != 2 or graph.shape[0] != n:
        raise ContractError(f"graph must be {n} x k, got {graph.shape}")
    if graph.size and (graph.min() < 0 or graph.max() >= n):
        raise ContractError("graph index out of range")
    k = graph.shape[1]
    centre = ad.gather(h, np.repeat(np.arange(n)[:, None], k, axis=1))
    nbr = ad.gather(h, graph)
    e = ad.reshape(ad.concat([centre, nbr - centre], axis=-1), (n * k, -1))
    for j in range(2):
        e = ad.matmul(e, params[f"edge{layer}.lin{j}.weight"])
        e = ad.instance_norm(e, params[f"edge{layer}.norm{j}.gain"], params[f"edge{layer}.norm{j}.bias"], config.eps)
        e = ad.leaky_relu(e, config.slope)
    out, _ = ad.max_select(ad.reshape(e, (n, k, -1)), axis=1)
    return out


def describe(cloud, params, config=DescriptorConfig()):
    """n x out_dim features; the neighbour graph is built once on aligned coordinates."""
    x = _points(cloud, params["proj.weight"].dtype)
    if x.shape[0] < config.k_graph:
        raise ContractError(f"cloud has {x.shape[0]} points, fewer than k_graph={config.k_graph}")
    if config.with_alignment:
        _, x = align(x, params, config)
    graph = knn(x.data, x.data, config.k_graph)
    h = x
    layers = []
    for layer in range(len(config.layer_widths)):
        h = edgeconv(h, graph, params, layer, config)
        layers.append(h)
    return ad.matmul(ad.concat(layers, axis=-1), params["proj.weight"]) + params["proj.bias"]
