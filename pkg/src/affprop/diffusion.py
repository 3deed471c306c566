"""Iterative propagation of features and predictions through an affinity matrix.

One step replaces every position's state with the affinity-weighted average
of all source states: h <- M h. Because rows of M are convex weights, a
step never increases the value range (max does not grow, min does not
shrink) and constant states are exact fixed points. After the configured
number of steps the result is blended with the original state:

    out = blend * h_final + (1 - blend) * h_initial

Zero steps or zero blend return the original state object untouched, so
disabling propagation is bit-identical to never calling it.

The subsampled variant reads sources from a 2x2-pooled copy of the state,
shrinking the matrix to n x n/4; queries stay at full grid resolution.
"""

from dataclasses import dataclass

import numpy as np

from .affinity import AffinityMatrix, compute_affinity, flatten_map, unflatten_map
from .autodiff import Tensor, add, avg_pool2, matmul, max_pool2, scale
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class DiffusionConfig:
    iterations: int = 4
    blend: float = 0.05
    subsampled: bool = False
    pool: str = "avg"

    def __post_init__(self):
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ConfigError(
                f"iterations must be a non-negative integer, got {self.iterations}")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError(
                f"blend must lie in [0, 1], got {self.blend}")
        if self.pool not in ("avg", "max"):
            raise ConfigError(f"pool must be 'avg' or 'max', got {self.pool!r}")


def diffuse_step(mat: AffinityMatrix, state: Tensor) -> Tensor:
    """One propagation step: weighted average of source states per row."""
    if state.data.ndim != 2:
        raise DimensionError(f"state must be (n, c), got {state.data.shape}")
    if mat.n_src != state.data.shape[0]:
        raise DimensionError(
            f"matrix reads {mat.n_src} sources but state has {state.data.shape[0]} rows")
    return matmul(mat.values, state)


def _pool_state(state: Tensor, grid: tuple, pool: str) -> Tensor:
    """(h*w, c) state -> (h*w/4, c) by 2x2 pooling over the grid."""
    as_map = unflatten_map(state, grid)
    pooled = avg_pool2(as_map) if pool == "avg" else max_pool2(as_map)
    return flatten_map(pooled)


def diffuse(mat: AffinityMatrix, state: Tensor, cfg: DiffusionConfig) -> Tensor:
    """Iterate propagation and blend with the initial state.

    With a subsampled matrix (n_src == n // 4) every step pools the
    current full-resolution state down to the source grid first.
    """
    if state.data.ndim != 2:
        raise DimensionError(f"state must be (n, c), got {state.data.shape}")
    if state.data.shape[0] != mat.n:
        raise DimensionError(
            f"state has {state.data.shape[0]} rows for {mat.n} query positions")
    if mat.n_src not in (mat.n, mat.n // 4):
        raise ContractError(
            f"matrix must read full or 2x2-pooled sources, got {mat.n_src} of {mat.n}")
    if cfg.iterations == 0 or cfg.blend == 0.0:
        return state
    h = state
    for _ in range(cfg.iterations):
        src = h if mat.n_src == mat.n else _pool_state(h, mat.grid, cfg.pool)
        h = diffuse_step(mat, src)
    if cfg.blend == 1.0:
        return h
    return add(scale(h, cfg.blend), scale(state, 1.0 - cfg.blend))


def laplacian(mat: AffinityMatrix) -> Tensor:
    """I - M, the operator applied (negatively) by one propagation step."""
    if mat.n != mat.n_src:
        raise DimensionError(
            f"laplacian needs a square matrix, got {mat.n} x {mat.n_src}")
    eye = Tensor(np.eye(mat.n))
    return add(eye, scale(mat.values, -1.0))


def spectral_radius_bound(mat: AffinityMatrix, iters: int = 50) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude.

    Row-stochastic matrices fix the all-ones vector, so the estimate is
    exactly 1 for them; the caller checks it stays at or below 1 + 1e-6.
    """
    if mat.n != mat.n_src:
        raise DimensionError(
            f"spectral bound needs a square matrix, got {mat.n} x {mat.n_src}")
    m = mat.values.data
    v = np.ones(mat.n)
    est = 1.0
    for _ in range(iters):
        mv = m @ v
        norm = float(np.linalg.norm(mv))
        if norm == 0.0:
            return 0.0
        est = norm / float(np.linalg.norm(v))
        v = mv / norm
    return est


def subsample_diffuse(feature_map: Tensor, state: Tensor, similarity,
                      cfg: DiffusionConfig) -> Tensor:
    """Propagate with sources restricted to a 2x2-pooled copy of the grid.

    Builds the n x n/4 matrix from `feature_map` (c, h, w): queries are the
    full positions, sources their pooled counterparts; then runs `diffuse`.
    """
    c, h, w = feature_map.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"grid {h}x{w} is not 2x2 poolable")
    full = flatten_map(feature_map)
    pooled_map = avg_pool2(feature_map) if cfg.pool == "avg" else max_pool2(feature_map)
    pooled = flatten_map(pooled_map)
    mat = compute_affinity(full, similarity, grid=(h, w), sources=pooled)
    return diffuse(mat, state, cfg)
