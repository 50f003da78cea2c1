# app/core/encodings.py
"""
Positional encodings for encoder tokens and decoder queries.

temporal_encode: Fourier features of normalized time.
laplacian_pe / heat_pe: per-joint spatial features from the skeleton graph.
"""
import threading
from collections import OrderedDict
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from app.core.exceptions import ConfigError, GraphError
from app.schemas.config import GraphPEConfig, TemporalPEConfig
from app.schemas.motion import Skeleton

EIG_TIE_TOL = 1e-9
GRAPH_CACHE_SIZE = 64

_graph_cache: "OrderedDict[Tuple[str, str], np.ndarray]" = OrderedDict()
_graph_cache_lock = threading.Lock()


def temporal_frequencies(pe: TemporalPEConfig) -> np.ndarray:
    """Geometrically spaced frequencies f_1 < ... < f_K in cycles per window."""
    if pe.k == 1:
        return np.array([pe.f_min])
    return np.geomspace(pe.f_min, pe.f_max, pe.k)


def temporal_encode(t, pe: TemporalPEConfig) -> np.ndarray:
    """[sin 2pi f_1 t, cos 2pi f_1 t, ..., sin 2pi f_K t, cos 2pi f_K t] for each t."""
    t = np.asarray(t, dtype=np.float64)
    angles = 2.0 * np.pi * t[..., None] * temporal_frequencies(pe)
    out = np.empty(t.shape + (2 * pe.k,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def normalized_laplacian(skeleton: Skeleton) -> np.ndarray:
    """L = I - D^-1/2 A D^-1/2; raises GraphError unless the joint graph is connected."""
    adj = skeleton.adjacency.astype(np.float64)
    n_components, _ = connected_components(adj, directed=False)
    if n_components != 1 or skeleton.num_joints < 2:
        raise GraphError(f"skeleton graph must be connected with at least 2 joints "
                         f"({skeleton.num_joints} joints, {n_components} components)")
    inv_sqrt = 1.0 / np.sqrt(adj.sum(axis=1))
    return np.eye(len(adj)) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude entry is positive (first one on ties)."""
    pivot = int(np.argmax(np.abs(vec)))
    return -vec if vec[pivot] < 0 else vec


def laplacian_eigen(skeleton: Skeleton) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigenpairs of the normalized Laplacian, ascending, sign-fixed.

    Ties are ordered by the lexicographic order of the sign-fixed
    eigenvectors so symmetric skeletons come out reproducibly.
    """
    lap = normalized_laplacian(skeleton)
    values, vectors = linalg.eigh(lap)
    pairs = []
    for i in range(len(values)):
        vec = _fix_sign(vectors[:, i])
        key = (round(values[i] / EIG_TIE_TOL), tuple(np.round(vec, 12)))
        pairs.append((key, values[i], vec))
    pairs.sort(key=lambda item: item[0])
    values = np.array([p[1] for p in pairs])
    vectors = np.stack([p[2] for p in pairs], axis=1)
    return values, vectors


def laplacian_pe(skeleton: Skeleton, n: int) -> np.ndarray:
    """J x n eigenvectors of the n smallest nonzero eigenvalues (the first, constant one excluded)."""
    if n < 1 or n > skeleton.num_joints - 1:
        raise GraphError(f"laplacian PE needs 1 <= dim <= J-1, got dim={n} for J={skeleton.num_joints}")
    _, vectors = laplacian_eigen(skeleton)
    return vectors[:, 1:n + 1].copy()


def heat_kernel(skeleton: Skeleton, t: float) -> np.ndarray:
    """e^{-tL} via the eigendecomposition of L."""
    values, vectors = laplacian_eigen(skeleton)
    return (vectors * np.exp(-t * values)) @ vectors.T


def heat_pe(skeleton: Skeleton, times: Sequence[float], q: int, seed: int = 0,
            probes: Optional[np.ndarray] = None) -> np.ndarray:
    """
    J x (len(times) * q) matrix with columns e^{-t_i L} r_q, ordered time-major.

    Probes are unit Gaussians drawn from seed unless given as a (J, q) array.
    """
    times = [float(t) for t in times]
    if not times or any(t <= 0.0 for t in times):
        raise ConfigError("heat PE diffusion times must be non-empty and > 0")
    if q < 1:
        raise ConfigError("heat PE needs at least one probe")
    if probes is None:
        probes = np.random.default_rng(seed).standard_normal((skeleton.num_joints, q))
    probes = np.asarray(probes, dtype=np.float64)
    if probes.shape != (skeleton.num_joints, q):
        raise ConfigError(f"probes must be ({skeleton.num_joints}, {q}), got {probes.shape}")
    return np.concatenate([heat_kernel(skeleton, t) @ probes for t in times], axis=1)


def graph_pe(skeleton: Skeleton, config: GraphPEConfig) -> np.ndarray:
    """Spatial features for every joint; the last GRAPH_CACHE_SIZE (skeleton, config) pairs are cached."""
    key = (skeleton.fingerprint(), config.model_dump_json())
    with _graph_cache_lock:
        cached = _graph_cache.get(key)
        if cached is not None:
            _graph_cache.move_to_end(key)
            return cached
    if config.mode == "laplacian":
        cached = laplacian_pe(skeleton, config.dim)
    else:
        cached = heat_pe(skeleton, config.heat_times, config.probes, config.seed)
    cached.setflags(write=False)
    with _graph_cache_lock:
        _graph_cache[key] = cached
        _graph_cache.move_to_end(key)
        while len(_graph_cache) > GRAPH_CACHE_SIZE:
            _graph_cache.popitem(last=False)
    return cached
