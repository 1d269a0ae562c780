"""Model collections: OFF files on disk, or the bundled synthetic primitives."""

import os

from .errors import ContractError
from .geometry import load_off, normalize, sample_surface, write_off
from .primitives import synthetic_models
from .rng import derive_seed


def off_paths(model_dir):
    """Sorted ``.off`` files below ``model_dir`` (recursive)."""
    out = []
    for root, _, files in os.walk(model_dir):
        out.extend(os.path.join(root, f) for f in files if f.lower().endswith(".off"))
    return sorted(out)


def sample_model(path_or_mesh, n_points=1024, seed=0, name=None):
    """Area-weighted surface sample, normalised to the unit sphere."""
    mesh = load_off(path_or_mesh) if isinstance(path_or_mesh, (str, os.PathLike)) else path_or_mesh
    name = name if name is not None else os.path.basename(str(path_or_mesh))
    return normalize(sample_surface(mesh, n_points, seed=derive_seed(seed, "sample", name)))


def materialize_synthetic(out_dir, count=20, seed=0):
    """Write ``count`` synthetic meshes as OFF files and return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, mesh in synthetic_models(count, seed):
        path = os.path.join(out_dir, f"{name}.off")
        write_off(mesh, path)
        paths.append(path)
    return paths


def model_clouds(model_dir=None, count=20, n_points=1024, seed=0):
    """``[(name, cloud)]`` for up to ``count`` models.

    Uses the OFF files under ``model_dir`` when it holds any, otherwise the
    synthetic primitive families.
    """
    if count < 1:
        raise ContractError("need at least one model")
    paths = off_paths(model_dir) if model_dir else []
    if model_dir and not os.path.isdir(model_dir):
        raise ContractError(f"model directory {model_dir!r} does not exist")
    if paths:
        return [(os.path.basename(p), sample_model(p, n_points, seed)) for p in paths[:count]]
    return [(name, sample_model(mesh, n_points, seed, name)) for name, mesh in synthetic_models(count, seed)]
