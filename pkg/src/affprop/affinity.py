"""Non-local affinity matrices over feature grids and their cross-task blending.

An affinity matrix holds, for every position of a coarse feature grid, a
row-stochastic distribution over source positions. Rows are produced by a
softmax over pairwise similarity scores, so each row sums to one by
construction. Two similarity kernels are supported:

* dot product between per-position feature vectors, after L2-normalizing
  each position's features;
* negative L1 distance between feature vectors (the row-normalized
  exponential of -distance is exactly a softmax over -distance).

The raw exponentiated scores, before row normalization, form a symmetric
matrix for both kernels; they are kept around (as plain numpy, detached
from the tape) so symmetry can be checked even though the normalized rows
are not symmetric.

A learned convex combination then mixes the per-task matrices into one
matrix per target task. The mixing weights live on a simplex via softmax
over a small logit vector, initialized to favor the target's own matrix.
"""

from dataclasses import dataclass
from enum import Enum
import math
import os
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    conv2d,
    div,
    matmul,
    mul,
    pairwise_l1,
    reduce_sum,
    reshape,
    row_softmax,
    scale,
    sqrt,
    take_flat,
    transpose2d,
)
from .errors import ConfigError, ContractError, DimensionError
from .imgio import to_uint8, write_pgm
from .tasks import TaskKind


class SimilarityFn(Enum):
    DOT = "dot"
    L1 = "l1"


@dataclass
class AffinityMatrix:
    """Row-stochastic attention from grid positions to source positions.

    values: Tensor of shape (n, n_src). For full-resolution matrices
    n == n_src == grid height * grid width; the subsampled variant keeps
    one source per pooled 2x2 block, so n_src == n // 4.
    grid: (height, width) of the query positions.
    scale: downsampling denominator of the grid relative to the input
    image (16, 8 or 4); informational, used in dump filenames.
    pre_norm: exponentiated similarity scores before row normalization,
    detached; None for combined matrices, whose rows mix separately
    normalized distributions.
    """

    values: Tensor
    grid: tuple
    task: Optional[TaskKind] = None
    similarity: Optional[SimilarityFn] = None
    scale: Optional[int] = None
    pre_norm: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.values.data.shape[0]

    @property
    def n_src(self) -> int:
        return self.values.data.shape[1]


def _l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    sq = reduce_sum(mul(x, x), axis=1, keepdims=True)
    return div(x, sqrt(add(sq, eps)))


def compute_affinity(features: Tensor, similarity: SimilarityFn,
                     grid: tuple, task: Optional[TaskKind] = None,
                     scale_denom: Optional[int] = None,
                     sources: Optional[Tensor] = None) -> AffinityMatrix:
    """Build the affinity matrix of an (n, c) feature matrix.

    `grid` is the (height, width) of the positions flattened into the rows.
    Passing `sources` scores every query row against rows of a different
    matrix (used when sources are pooled); otherwise sources are the
    queries themselves.
    """
    if features.data.ndim != 2:
        raise DimensionError(
            f"affinity features must be (n, c), got {features.data.shape}")
    h, w = grid
    if h * w != features.data.shape[0]:
        raise DimensionError(
            f"grid {grid} does not match {features.data.shape[0]} positions")
    if similarity is SimilarityFn.DOT:
        q = _l2_normalize_rows(features)
        k = q if sources is None else _l2_normalize_rows(sources)
        scores = matmul(q, transpose2d(k))
    else:
        scores = scale(pairwise_l1(features, sources), -1.0)
    values = row_softmax(scores)
    pre = np.exp(scores.data - scores.data.max())
    return AffinityMatrix(values=values, grid=(h, w), task=task,
                          similarity=similarity, scale=scale_denom, pre_norm=pre)


def shrink_features(feature_map: Tensor, proj: Tensor) -> Tensor:
    """Halve the channel count of a (c, h, w) map with a 1x1 projection."""
    if feature_map.data.ndim != 3:
        raise DimensionError(
            f"shrink_features expects (c, h, w), got {feature_map.data.shape}")
    c = feature_map.data.shape[0]
    if c % 2 != 0:
        raise ConfigError(f"channel count must be even to halve it, got {c}")
    if proj.data.shape != (c // 2, c, 1, 1):
        raise DimensionError(
            f"projection kernel should be {(c // 2, c, 1, 1)}, got {proj.data.shape}")
    return conv2d(feature_map, proj, stride=1, pad=0)


def flatten_map(feature_map: Tensor) -> Tensor:
    """(c, h, w) -> (h*w, c) with rows in scanline order."""
    c, h, w = feature_map.data.shape
    return transpose2d(reshape(feature_map, (c, h * w)))


def unflatten_map(rows: Tensor, grid: tuple) -> Tensor:
    """(h*w, c) -> (c, h, w), inverse of flatten_map."""
    h, w = grid
    return reshape(transpose2d(rows), (rows.data.shape[1], h, w))


class CrossTaskEnsemble:
    """Per-target simplex weights over the per-task affinity matrices.

    Each target task owns a logit vector of length len(tasks); softmax of
    the logits gives its mixing weights. Initialization biases each target
    toward its own matrix with weight 3/(3 + k - 1) for k tasks, e.g.
    0.6 / 0.2 / 0.2 for three.
    """

    def __init__(self, tasks: Sequence[TaskKind], self_bias: float = math.log(3.0)):
        if len(tasks) < 2:
            raise ConfigError("cross-task mixing needs at least two tasks")
        self.tasks = tuple(tasks)
        self.params = {}
        for target in self.tasks:
            logits = np.zeros(len(self.tasks))
            logits[self.tasks.index(target)] = self_bias
            self.params[target] = Parameter(
                f"affinity_mix.{target.value}", logits, group="fresh")

    def parameters(self):
        return [self.params[t] for t in self.tasks]

    def weights(self, target: TaskKind) -> Tensor:
        """Softmax of the target's logits, shape (len(tasks),)."""
        logits = self.params[target].tensor
        k = logits.data.shape[0]
        return reshape(row_softmax(reshape(logits, (1, k))), (k,))

    def weight_values(self, target: TaskKind) -> np.ndarray:
        return self.weights(target).data.copy()


def combine_affinities(mats: Sequence[AffinityMatrix],
                       ensemble: CrossTaskEnsemble,
                       target: TaskKind) -> AffinityMatrix:
    """Convex combination of per-task matrices for one target task.

    The inputs must all share shape and grid, and their order must match
    the ensemble's task order. Rows of the result sum to one because the
    weights lie on the simplex and every input row sums to one.
    """
    if len(mats) != len(ensemble.tasks):
        raise ContractError(
            f"{len(mats)} matrices for {len(ensemble.tasks)} ensemble tasks")
    shapes = {m.values.data.shape for m in mats}
    if len(shapes) != 1:
        raise DimensionError(f"mixed affinity shapes: {sorted(shapes)}")
    grids = {m.grid for m in mats}
    if len(grids) != 1:
        raise DimensionError(f"mixed affinity grids: {sorted(grids)}")
    w = ensemble.weights(target)
    out = None
    for i, m in enumerate(mats):
        term = mul(take_flat(w, np.array([i])), m.values)
        out = term if out is None else add(out, term)
    return AffinityMatrix(values=out, grid=mats[0].grid, task=target,
                          similarity=mats[0].similarity, scale=mats[0].scale,
                          pre_norm=None)


def two_task_combine(mat_a: AffinityMatrix, mat_b: AffinityMatrix,
                     ensemble: CrossTaskEnsemble,
                     target: TaskKind) -> AffinityMatrix:
    """Pairwise variant of combine_affinities for two-task models."""
    return combine_affinities([mat_a, mat_b], ensemble, target)


def dump_affinity(mat: AffinityMatrix, row: int, out_dir) -> str:
    """Write one attention row as a grayscale image over the source grid.

    The row is reshaped to the grid and scaled so its maximum maps to 255.
    Returns the file path, named affinity_<task>_<scale>_<row>.pgm.
    """
    if not 0 <= row < mat.n:
        raise ContractError(f"row {row} out of range for {mat.n} positions")
    h, w = mat.grid
    if mat.n_src == mat.n:
        img = mat.values.data[row].reshape(h, w)
    elif mat.n_src * 4 == mat.n:
        img = mat.values.data[row].reshape(h // 2, w // 2)
    else:
        raise DimensionError(
            f"cannot map {mat.n_src} sources onto grid {mat.grid}")
    task_name = mat.task.value if mat.task is not None else "shared"
    denom = mat.scale if mat.scale is not None else h
    path = os.path.join(out_dir, f"affinity_{task_name}_{denom}_{row}.pgm")
    hi = float(img.max())
    write_pgm(path, to_uint8(img, lo=0.0, hi=hi if hi > 0 else 1.0))
    return path
