"""Cross-task pair-matching statistics.

For pairs of pixel positions we ask: when two positions look similar (or
dissimilar) under one task's ground truth, how often do they look similar
(dissimilar) under another task's?  High off-diagonal ratios are the
empirical premise behind propagating affinity across tasks.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ConfigError
from .losses import sample_pairs
from .tasks import TaskKind

STATS_STREAM = 0x57A7

_TASK_ORDER = (TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG)


@dataclass(frozen=True)
class PairMatchConfig:
    """Thresholds and sampling policy for pair matching.

    depth_rel: relative depth gap below which a pair counts as similar.
    normal_similar / normal_dissimilar: component RMS bounds for normals;
    pairs falling between the two belong to neither regime.
    pairs_per_image: sample budget per image; 0 means enumerate all pairs.
    """

    depth_rel: float = 0.2
    normal_similar: float = 0.26
    normal_dissimilar: float = 0.4
    pairs_per_image: int = 20000
    seed: int = 0

    def __post_init__(self):
        for label, v in (("depth_rel", self.depth_rel),
                         ("normal_similar", self.normal_similar),
                         ("normal_dissimilar", self.normal_dissimilar)):
            if not 0.0 < v < 1.0:
                raise ConfigError("%s must lie in (0, 1), got %r" % (label, v))
        if self.normal_dissimilar < self.normal_similar:
            raise ConfigError(
                "normal_dissimilar (%r) must be >= normal_similar (%r)"
                % (self.normal_dissimilar, self.normal_similar))
        if self.pairs_per_image < 0:
            raise ConfigError("pairs_per_image must be >= 0")

    @classmethod
    def from_run_config(cls, cfg) -> "PairMatchConfig":
        return cls(depth_rel=cfg.depth_rel_threshold,
                   normal_similar=cfg.normal_rmse_similar,
                   normal_dissimilar=cfg.normal_rmse_dissimilar,
                   pairs_per_image=cfg.stats_pairs,
                   seed=cfg.seed)


@dataclass(frozen=True)
class MatchTable:
    """Joint match counts and the directional ratios derived from them.

    similar_joint[a, b] counts pairs similar under both task a and task b;
    the diagonal holds the per-task base counts.  Ratios divide row a by
    that diagonal, so ratio[a, a] is 1 whenever task a matched anything
    and NaN (undefined, deliberately distinct from 0) otherwise.
    """

    tasks: tuple
    similar_joint: np.ndarray
    dissimilar_joint: np.ndarray
    pair_count: int

    def _ratio(self, joint: np.ndarray) -> np.ndarray:
        base = np.diagonal(joint).astype(np.float64)
        out = np.full(joint.shape, np.nan)
        ok = base > 0
        out[ok, :] = joint[ok, :] / base[ok, None]
        return out

    @property
    def similar_ratio(self) -> np.ndarray:
        return self._ratio(self.similar_joint)

    @property
    def dissimilar_ratio(self) -> np.ndarray:
        return self._ratio(self.dissimilar_joint)


@dataclass(frozen=True)
class MapTriple:
    """Ground-truth-shaped maps for one image."""

    depth: np.ndarray
    normal: np.ndarray
    labels: np.ndarray


def maps_from_prediction(predictions: dict) -> MapTriple:
    """Convert raw per-task network outputs into comparable maps."""
    depth = predictions[TaskKind.DEPTH][0]
    n = predictions[TaskKind.NORMAL]
    norm = np.sqrt((n * n).sum(axis=0, keepdims=True))
    normal = n / np.maximum(norm, 1e-12)
    labels = predictions[TaskKind.SEG].argmax(axis=0).astype(np.uint16)
    return MapTriple(depth=depth, normal=normal, labels=labels)


def _pair_flags(sample, cfg: PairMatchConfig, idx_i: np.ndarray,
                idx_j: np.ndarray):
    """Similar/dissimilar indicators, shape (3, P), task order depth/normal/seg."""
    z = np.asarray(sample.depth, dtype=np.float64).ravel()
    zi, zj = z[idx_i], z[idx_j]
    rel = np.abs(zi - zj) / ((zi + zj) / 2.0)

    nm = np.asarray(sample.normal, dtype=np.float64).reshape(3, -1)
    d = nm[:, idx_i] - nm[:, idx_j]
    rms = np.sqrt((d * d).sum(axis=0) / 3.0)

    lab = np.asarray(sample.labels).ravel()
    eq = lab[idx_i] == lab[idx_j]

    sim = np.stack([rel < cfg.depth_rel, rms < cfg.normal_similar, eq])
    dis = np.stack([rel >= cfg.depth_rel, rms > cfg.normal_dissimilar, ~eq])
    return sim, dis


def _all_pairs(n: int):
    return np.triu_indices(n, k=1)


def pair_match_stats(samples: Iterable, cfg: PairMatchConfig,
                     exhaustive: bool = False) -> MatchTable:
    """Pool pair-match counts over images and return the ratio table.

    Each sample must expose depth (H, W), normal (3, H, W) and labels
    (H, W).  Sampled mode draws cfg.pairs_per_image unordered position
    pairs per image without replacement; exhaustive mode enumerates every
    pair.  The same positions are used across all three tasks.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, STATS_STREAM]))
    sim_joint = np.zeros((3, 3), dtype=np.int64)
    dis_joint = np.zeros((3, 3), dtype=np.int64)
    total = 0
    for sample in samples:
        n = int(np.asarray(sample.depth).size)
        max_pairs = n * (n - 1) // 2
        if exhaustive or cfg.pairs_per_image == 0 \
                or cfg.pairs_per_image >= max_pairs:
            idx_i, idx_j = _all_pairs(n)
        else:
            pick = sample_pairs(n, cfg.pairs_per_image, rng)
            idx_i, idx_j = pick.first, pick.second
        sim, dis = _pair_flags(sample, cfg, idx_i, idx_j)
        # bool @ bool.T pools the pairwise conjunction counts in one shot
        simf = sim.astype(np.float64)
        disf = dis.astype(np.float64)
        sim_joint += np.rint(simf @ simf.T).astype(np.int64)
        dis_joint += np.rint(disf @ disf.T).astype(np.int64)
        total += idx_i.size
    return MatchTable(tasks=_TASK_ORDER, similar_joint=sim_joint,
                      dissimilar_joint=dis_joint, pair_count=total)


def ratios_csv(table: MatchTable) -> str:
    """Render both regimes as CSV, one row per ordered task pair."""
    lines = ["regime,reference,other,ratio,matched,base"]
    for regime, joint, ratio in (
            ("similar", table.similar_joint, table.similar_ratio),
            ("dissimilar", table.dissimilar_joint, table.dissimilar_ratio)):
        for a, ta in enumerate(table.tasks):
            for b, tb in enumerate(table.tasks):
                r = ratio[a, b]
                text = "undefined" if np.isnan(r) else "%.6g" % r
                lines.append("%s,%s,%s,%s,%d,%d" % (
                    regime, ta.value, tb.value, text, joint[a, b], joint[a, a]))
    return "\n".join(lines) + "\n"
