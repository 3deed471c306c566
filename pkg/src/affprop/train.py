"""Training loop, optimizer, target downsampling, and dataset evaluation.

Supervision happens at half the input resolution: depth targets are 2x2
area means, normal targets are 2x2 means renormalized to unit length,
label targets take the top-left pixel of each 2x2 block. The same
downsampled targets feed both the supervised and the pair losses.

Every batch builds one tape over the averaged per-sample losses. A
non-finite loss aborts with the name of the first non-finite node on the
tape. All randomness (epoch shuffling, pair sampling) is derived from
the run seed with fixed stream labels, so identical seeds give
bit-identical loss traces.
"""

import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, backward, reshape, scale
from .config import RunConfig
from .errors import ContractError
from .losses import (
    LossWeights,
    berhu_loss,
    normal_l1_loss,
    pair_rng,
    pairwise_loss,
    sample_pairs,
    seg_loss,
    total_loss,
)
from .metrics import (
    confusion_matrix,
    depth_metrics,
    normal_metrics,
    seg_metrics_from_confusion,
)
from .network import MultiTaskNet
from .scenes import SceneSample
from .tasks import TaskKind


class MomentumSGD:
    """Gradient descent with momentum and per-group learning rates.

    Gradients are rescaled to a global norm of at most clip_norm before
    entering the velocity; early steps of an unnormalized conv stack can
    otherwise be orders of magnitude above the steady-state scale.
    """

    def __init__(self, params, lr_by_group: Dict[str, float],
                 momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = list(params)
        self.lr_by_group = dict(lr_by_group)
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def scale_lr(self, factor: float) -> None:
        for group in self.lr_by_group:
            self.lr_by_group[group] *= factor

    def step(self) -> None:
        shrink = 1.0
        if self.clip_norm > 0:
            sq = 0.0
            for p in self.params:
                if p.tensor.grad is not None:
                    sq += float((p.tensor.grad * p.tensor.grad).sum())
            norm = math.sqrt(sq)
            if norm > self.clip_norm:
                shrink = self.clip_norm / norm
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v += shrink * g
            p.tensor.data = p.tensor.data - self.lr_by_group[p.group] * v


def make_optimizer(model: MultiTaskNet, cfg: RunConfig) -> MomentumSGD:
    return MomentumSGD(model.parameters(),
                       {"fresh": cfg.lr_fresh, "pretrained": cfg.lr_pretrained},
                       momentum=cfg.momentum, clip_norm=cfg.clip_norm)


def downsample_targets(sample: SceneSample) -> Dict[TaskKind, np.ndarray]:
    """Half-resolution targets for every task."""
    h, w = sample.depth.shape
    depth = sample.depth.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    nrm = sample.normal.reshape(3, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    norm = np.sqrt((nrm * nrm).sum(axis=0))
    nrm = nrm / np.maximum(norm, 1e-12)
    labels = sample.labels[::2, ::2]
    return {TaskKind.DEPTH: depth, TaskKind.NORMAL: nrm, TaskKind.SEG: labels}


def _supervised(task: TaskKind, pred: Tensor, target: np.ndarray) -> Tensor:
    if task is TaskKind.DEPTH:
        return berhu_loss(reshape(pred, target.shape), target)
    if task is TaskKind.NORMAL:
        return normal_l1_loss(pred, target)
    return seg_loss(pred, target)


def batch_loss(model: MultiTaskNet, batch: Sequence[SceneSample],
               cfg: RunConfig, weights: LossWeights,
               pair_rngs: Optional[Dict[TaskKind, np.random.Generator]]) -> Tensor:
    """Mean over the batch of the per-sample weighted multi-task loss."""
    if not batch:
        raise ContractError("empty batch")
    total = None
    for sample in batch:
        result = model.forward(sample.image)
        targets = downsample_targets(sample)
        sup: Dict[TaskKind, Tensor] = {}
        pair: Dict[TaskKind, Tensor] = {}
        for task in model.tasks:
            pred = result.predictions[task]
            sup[task] = _supervised(task, pred, targets[task])
            if pair_rngs is not None:
                n_pos = pred.data.size // pred.data.shape[0]
                pairs = sample_pairs(n_pos, min(cfg.pairs, n_pos * (n_pos - 1) // 2),
                                     pair_rngs[task])
                pair[task] = pairwise_loss(task, pred, targets[task], pairs)
        per_sample = total_loss(sup, pair, weights)
        total = per_sample if total is None else add(total, per_sample)
    return scale(total, 1.0 / len(batch))


def train_step(model: MultiTaskNet, batch: Sequence[SceneSample],
               cfg: RunConfig, optimizer: MomentumSGD,
               weights: LossWeights) -> float:
    tape = Tape()
    model.watch(tape)
    pair_rngs = None
    if cfg.pairwise_enabled:
        pair_rngs = {t: pair_rng(cfg.seed, model.step, t) for t in model.tasks}
    loss = batch_loss(model, batch, cfg, weights, pair_rngs)
    if not np.isfinite(loss.data):
        culprit = tape.first_nonfinite() or "<unknown>"
        raise ContractError(
            f"non-finite loss at step {model.step}; first non-finite "
            f"node: {culprit}")
    backward(loss)
    optimizer.step()
    model.zero_grads()
    tape.release()
    model.step += 1
    return float(loss.data)


def fit(model: MultiTaskNet, train_samples: Sequence[SceneSample],
        cfg: RunConfig, log=None) -> List[float]:
    """Epochs of shuffled mini-batches; returns the per-step loss trace.

    Learning rates are multiplied by cfg.lr_decay when entering the
    epochs at 60% and 85% of the schedule (skipped entirely when the
    factor is 1 or the run is too short for the milestones to land past
    epoch zero).
    """
    optimizer = make_optimizer(model, cfg)
    weights = cfg.loss_weights()
    losses: List[float] = []
    n = len(train_samples)
    if n == 0:
        raise ContractError("no training samples")
    # 3/5 and 17/20 in integer math so the milestones are exact
    decay_at = {max(1, cfg.epochs * 3 // 5), max(1, cfg.epochs * 17 // 20)}
    for epoch in range(cfg.epochs):
        if epoch in decay_at and cfg.lr_decay != 1.0:
            optimizer.scale_lr(cfg.lr_decay)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xB41C, epoch])).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            losses.append(train_step(model, batch, cfg, optimizer, weights))
        if log is not None:
            recent = losses[-max(1, n // cfg.batch_size):]
            log(f"epoch {epoch + 1}/{cfg.epochs} "
                f"mean loss {sum(recent) / len(recent):.6f}")
    return losses


def predict(model: MultiTaskNet, sample: SceneSample) -> Dict[TaskKind, np.ndarray]:
    """Tape-free forward returning plain arrays."""
    result = model.forward(sample.image)
    return {task: result.predictions[task].data for task in model.tasks}


def evaluate(model: MultiTaskNet, samples: Sequence[SceneSample],
             cfg: RunConfig) -> Dict[str, Dict[str, float]]:
    """Dataset metrics: depth/normal averaged per image, one pooled
    segmentation confusion matrix."""
    if not samples:
        raise ContractError("no samples to evaluate")
    depth_acc: Dict[str, List[float]] = {}
    normal_acc: Dict[str, List[float]] = {}
    conf = None
    for sample in samples:
        preds = predict(model, sample)
        targets = downsample_targets(sample)
        if TaskKind.DEPTH in preds:
            dm = depth_metrics(preds[TaskKind.DEPTH].reshape(-1),
                               targets[TaskKind.DEPTH].reshape(-1))
            for k, v in dm.items():
                depth_acc.setdefault(k, []).append(v)
        if TaskKind.NORMAL in preds:
            nm = normal_metrics(preds[TaskKind.NORMAL], targets[TaskKind.NORMAL])
            for k, v in nm.items():
                normal_acc.setdefault(k, []).append(v)
        if TaskKind.SEG in preds:
            pred_labels = np.argmax(preds[TaskKind.SEG], axis=0)
            c = confusion_matrix(pred_labels, targets[TaskKind.SEG], cfg.classes)
            conf = c if conf is None else conf + c
    out: Dict[str, Dict[str, float]] = {}
    if depth_acc:
        out["depth"] = {k: math.fsum(v) / len(v) for k, v in depth_acc.items()}
    if normal_acc:
        out["normal"] = {k: math.fsum(v) / len(v) for k, v in normal_acc.items()}
    if conf is not None:
        out["seg"] = seg_metrics_from_confusion(conf)
    return out
