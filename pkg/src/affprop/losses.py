"""Supervised losses, the sampled pair-consistency loss, and their weighting.

Per task the supervised term is:

* depth: reverse Huber on the residual. The cutoff is 0.2 times the
  largest absolute residual of the batch and is itself differentiated
  (through the max), so the loss surface has no hidden constants.
* normals: mean L1 gap between the unit-normalized prediction and the
  target vector, per pixel.
* segmentation: softmax cross-entropy over class logits.

The pair term samples position pairs and penalizes disagreement between
predicted and target pairwise relations: absolute depth gaps, L1 normal
gaps, or total-variation distance between class distributions against a
0/1 same-label indicator. Each task's pair loss averages over its pairs.

The total objective sums task weight * (supervised + pair weight * pair)
over active tasks.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    absolute,
    add,
    div,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    row_softmax,
    scale,
    softmax_cross_entropy,
    sqrt,
    sub,
    take_flat,
    take_rows,
    transpose2d,
)
from .errors import ContractError, UndefinedResultError
from .tasks import TaskKind


@dataclass
class LossWeights:
    """Per-task weight and pair-term weight inside it."""

    task: Dict[TaskKind, float]
    pair: Dict[TaskKind, float]

    @classmethod
    def uniform(cls, tasks: Sequence[TaskKind], task_weight: Optional[float],
                pair_weight: float) -> "LossWeights":
        """Same weights for every active task; None spreads 1/len(tasks)."""
        tw = 1.0 / len(tasks) if task_weight is None else task_weight
        return cls(task={t: tw for t in tasks}, pair={t: pair_weight for t in tasks})


@dataclass
class PairSample:
    """Unordered position pairs drawn without replacement from a grid."""

    first: np.ndarray
    second: np.ndarray
    n_positions: int

    @property
    def count(self) -> int:
        return len(self.first)


def sample_pairs(n_positions: int, count: int, rng: np.random.Generator) -> PairSample:
    """Uniform sample of `count` distinct unordered index pairs.

    Pairs are enumerated lexicographically (i < j); a draw without
    replacement over that enumeration is decoded back to indices, so no
    pair repeats and no pair is (i, i).
    """
    if n_positions < 2:
        raise ContractError(f"need at least 2 positions, got {n_positions}")
    total = n_positions * (n_positions - 1) // 2
    if not 0 < count <= total:
        raise ContractError(
            f"cannot draw {count} distinct pairs from {total} available")
    flat = rng.choice(total, size=count, replace=False)
    flat.sort()
    # row_start[i] = index of pair (i, i+1); searchsorted recovers i
    i_range = np.arange(n_positions - 1)
    row_start = np.concatenate(([0], np.cumsum(n_positions - 1 - i_range)))
    first = np.searchsorted(row_start, flat, side="right") - 1
    second = flat - row_start[first] + first + 1
    return PairSample(first=first, second=second, n_positions=n_positions)


def pair_rng(run_seed: int, step: int, task: TaskKind) -> np.random.Generator:
    """Deterministic per-step, per-task generator for pair sampling."""
    task_index = list(TaskKind).index(task)
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[run_seed, step, task_index]))


def berhu_loss(pred: Tensor, target: np.ndarray,
               mask: Optional[np.ndarray] = None) -> Tensor:
    """Reverse Huber: L1 below the cutoff, scaled quadratic above.

    The cutoff c is 0.2 * max residual magnitude over the valid pixels;
    above it the penalty is (r^2 + c^2) / (2c), which meets |r| at the
    knee so the loss is continuous. All-residuals-zero returns zero.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ContractError(
            f"prediction {pred.data.shape} vs target {target.shape}")
    resid = sub(pred, target)
    flat = reshape(resid, (resid.data.size,))
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask).reshape(-1))
        if idx.size == 0:
            raise UndefinedResultError("berhu: no valid pixels in mask")
        flat = take_flat(flat, idx)
    mag = absolute(flat)
    if float(mag.data.max()) == 0.0:
        return reduce_mean(mag)
    cutoff = scale(reduce_max(mag), 0.2)
    in_l1 = (mag.data <= cutoff.data).astype(np.float64)
    quad = div(add(mul(flat, flat), mul(cutoff, cutoff)), scale(cutoff, 2.0))
    branched = add(mul(mag, in_l1), mul(quad, 1.0 - in_l1))
    return reduce_mean(branched)


def unit_normalize(pred: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize a (3, h, w) vector map to unit length per pixel."""
    sq = reduce_sum(mul(pred, pred), axis=0, keepdims=True)
    return div(pred, sqrt(add(sq, eps)))


def normal_l1_loss(pred: Tensor, target: np.ndarray,
                   mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean per-pixel L1 gap between unit-normalized prediction and target."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape or pred.data.shape[0] != 3:
        raise ContractError(
            f"normal maps must be (3, h, w), got {pred.data.shape} vs {target.shape}")
    gap = reduce_sum(absolute(sub(unit_normalize(pred), target)), axis=0)
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask).reshape(-1))
        if idx.size == 0:
            raise UndefinedResultError("normal loss: no valid pixels in mask")
        return reduce_mean(take_flat(reshape(gap, (gap.data.size,)), idx))
    return reduce_mean(gap)


def seg_loss(logits: Tensor, labels: np.ndarray,
             ignore_label: Optional[int] = None) -> Tensor:
    """Cross-entropy over a (k, h, w) logit map and integer label map."""
    k = logits.data.shape[0]
    n = int(np.prod(logits.data.shape[1:]))
    flat_logits = reshape(logits, (k, n))
    flat_labels = np.asarray(labels).reshape(-1)
    return softmax_cross_entropy(flat_logits, flat_labels, ignore_label=ignore_label)


def _flat_scalar(pred: Tensor) -> Tensor:
    return reshape(pred, (pred.data.size,))


def _rows(pred_map: Tensor) -> Tensor:
    """(c, h, w) -> (h*w, c)."""
    c = pred_map.data.shape[0]
    return transpose2d(reshape(pred_map, (c, pred_map.data.size // c)))


def pairwise_loss(task: TaskKind, pred: Tensor, target: np.ndarray,
                  pairs: PairSample) -> Tensor:
    """Penalty for predicted pairwise relations straying from the target's.

    depth: | |z_i - z_j| - |z*_i - z*_j| | per pair.
    normals: | ||n_i - n_j||_1 - ||n*_i - n*_j||_1 | (prediction unit-
    normalized first).
    segmentation: 0.5 * ||p_i - p_j||_1 between predicted class
    distributions, compared against 0 for same-label pairs and 1 for
    different-label pairs.
    Averaged over the sampled pairs.
    """
    i, j = pairs.first, pairs.second
    if task is TaskKind.DEPTH:
        flat = _flat_scalar(pred)
        if pairs.n_positions != flat.data.size:
            raise ContractError(
                f"pairs drawn over {pairs.n_positions} positions, "
                f"prediction has {flat.data.size}")
        gap = absolute(sub(take_flat(flat, i), take_flat(flat, j)))
        tflat = np.asarray(target, dtype=np.float64).reshape(-1)
        tgap = np.abs(tflat[i] - tflat[j])
    elif task is TaskKind.NORMAL:
        rows = _rows(unit_normalize(pred))
        if pairs.n_positions != rows.data.shape[0]:
            raise ContractError(
                f"pairs drawn over {pairs.n_positions} positions, "
                f"prediction has {rows.data.shape[0]}")
        gap = reduce_sum(absolute(sub(take_rows(rows, i), take_rows(rows, j))), axis=1)
        trows = np.asarray(target, dtype=np.float64).reshape(3, -1).T
        tgap = np.abs(trows[i] - trows[j]).sum(axis=1)
    elif task is TaskKind.SEG:
        probs = row_softmax(_rows(pred))
        if pairs.n_positions != probs.data.shape[0]:
            raise ContractError(
                f"pairs drawn over {pairs.n_positions} positions, "
                f"prediction has {probs.data.shape[0]}")
        gap = scale(
            reduce_sum(absolute(sub(take_rows(probs, i), take_rows(probs, j))), axis=1),
            0.5)
        tflat = np.asarray(target).reshape(-1)
        tgap = (tflat[i] != tflat[j]).astype(np.float64)
    else:
        raise ContractError(f"unknown task {task}")
    return reduce_mean(absolute(sub(gap, tgap)))


def total_loss(per_task: Dict[TaskKind, Tensor],
               per_task_pair: Dict[TaskKind, Optional[Tensor]],
               weights: LossWeights) -> Tensor:
    """weighted sum over tasks of supervised + pair-weight * pair terms."""
    if not per_task:
        raise ContractError("total_loss needs at least one task")
    out = None
    for task, sup in per_task.items():
        term = sup
        pair = per_task_pair.get(task)
        if pair is not None:
            term = add(term, scale(pair, weights.pair[task]))
        term = scale(term, weights.task[task])
        out = term if out is None else add(out, term)
    return out
