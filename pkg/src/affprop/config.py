"""Flat `key = value` run configuration: parsing, validation, canonical dump.

The file format is one assignment per line; `#` starts a comment and blank
lines are skipped. Every key has a documented default except `seed`, which
must be provided. Unknown keys and malformed or out-of-range values raise
ConfigError naming the offending line.

`emit` renders a config back to canonical text (fixed key order, repr
values); parse(emit(cfg)) round-trips exactly, and the sha256 digest of
the canonical text identifies a configuration in artifacts and
checkpoints.
"""

from dataclasses import dataclass, field, fields, replace
import hashlib
from typing import List, Optional, Tuple

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .losses import LossWeights
from .tasks import ALL_TASKS, TaskKind


@dataclass
class RunConfig:
    seed: int = None
    # scene generation
    height: int = 64
    width: int = 64
    classes: int = 8
    samples: int = 200
    planes_min: int = 3
    planes_max: int = 8
    noise_sigma: float = 0.02
    focal_scale: float = 2.0
    train_frac: float = 0.8
    # model
    tasks: Tuple[str, ...] = ("depth", "normal", "seg")
    encoder_width: int = 8
    scale: int = 8
    similarity: str = "dot"
    # propagation
    iterations: int = 4
    beta: float = 0.05
    subsampled: bool = False
    pool: str = "avg"
    diffusion_enabled: bool = True
    recon_enabled: bool = True
    # objective
    task_weight: Optional[float] = None
    pair_weight: float = 0.2
    pairs: int = 300
    pairwise_enabled: bool = True
    # optimization
    epochs: int = 6
    batch_size: int = 4
    lr_fresh: float = 0.01
    lr_pretrained: float = 0.0001
    lr_decay: float = 1.0
    momentum: float = 0.9
    clip_norm: float = 10.0
    # pair-statistics thresholds
    depth_rel_threshold: float = 0.2
    normal_rmse_similar: float = 0.26
    normal_rmse_dissimilar: float = 0.4
    stats_pairs: int = 20000

    def active_tasks(self) -> List[TaskKind]:
        return [TaskKind(t) for t in self.tasks]

    def resolved_task_weight(self) -> float:
        """Explicit weight, or 1 / number of active tasks when unset."""
        if self.task_weight is not None:
            return self.task_weight
        return 1.0 / len(self.tasks)

    def loss_weights(self) -> LossWeights:
        return LossWeights.uniform(
            self.active_tasks(), self.resolved_task_weight(), self.pair_weight)

    def diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(iterations=self.iterations, blend=self.beta,
                               subsampled=self.subsampled, pool=self.pool)

    def grid_side(self) -> Tuple[int, int]:
        return (self.height // self.scale, self.width // self.scale)


_BOOL_KEYS = {"subsampled", "diffusion_enabled", "recon_enabled", "pairwise_enabled"}
_INT_KEYS = {"seed", "height", "width", "classes", "samples", "planes_min",
             "planes_max", "encoder_width", "scale", "iterations", "pairs",
             "epochs", "batch_size", "stats_pairs"}
_FLOAT_KEYS = {"noise_sigma", "focal_scale", "train_frac", "beta", "task_weight",
               "pair_weight", "lr_fresh", "lr_pretrained", "lr_decay",
               "momentum", "clip_norm", "depth_rel_threshold", "normal_rmse_similar",
               "normal_rmse_dissimilar"}
_STR_KEYS = {"similarity", "pool"}
_KEY_ORDER = [f.name for f in fields(RunConfig)]


def _parse_value(key: str, raw: str, line_no: int):
    def bad(expected):
        raise ConfigError(f"line {line_no}: {key} expects {expected}, got {raw!r}")

    if key in _BOOL_KEYS:
        if raw == "true":
            return True
        if raw == "false":
            return False
        bad("true or false")
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            bad("an integer")
    if key == "task_weight":
        if raw == "auto":
            return None
        try:
            return float(raw)
        except ValueError:
            bad("a number or auto")
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            bad("a number")
    if key == "tasks":
        names = tuple(tok.strip() for tok in raw.split(",") if tok.strip())
        for tok in names:
            if tok not in ("depth", "normal", "seg"):
                raise ConfigError(
                    f"line {line_no}: unknown task {tok!r} "
                    "(choose from depth, normal, seg)")
        return names
    if key in _STR_KEYS:
        return raw
    raise ConfigError(f"line {line_no}: unknown key {key!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    seen = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {line_no}: expected 'key = value', "
                              f"got {stripped!r}")
        key, _, raw = (s.strip() for s in stripped.partition("="))
        if key not in _KEY_ORDER:
            raise ConfigError(f"{source} line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source} line {line_no}: {key} already set on "
                              f"line {seen[key]}")
        seen[key] = line_no
        try:
            values[key] = _parse_value(key, raw, line_no)
        except ConfigError as err:
            raise ConfigError(f"{source} {err}") from None
    if "seed" not in values:
        raise ConfigError(f"{source}: seed is required and has no default")
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def validate_config(cfg: RunConfig) -> None:
    def fail(msg):
        raise ConfigError(msg)

    if cfg.seed is None or cfg.seed < 0:
        fail(f"seed must be a non-negative integer, got {cfg.seed}")
    if not 0.0 <= cfg.beta <= 1.0:
        fail(f"beta must lie in [0, 1], got {cfg.beta}")
    if cfg.iterations < 0:
        fail(f"iterations must be non-negative, got {cfg.iterations}")
    if cfg.scale not in (16, 8, 4):
        fail(f"scale must be one of 16, 8, 4, got {cfg.scale}")
    if cfg.similarity not in ("dot", "l1"):
        fail(f"similarity must be dot or l1, got {cfg.similarity!r}")
    if cfg.pool not in ("avg", "max"):
        fail(f"pool must be avg or max, got {cfg.pool!r}")
    if not cfg.tasks:
        fail("tasks must name at least one of depth, normal, seg")
    if len(set(cfg.tasks)) != len(cfg.tasks):
        fail(f"tasks listed twice: {cfg.tasks}")
    if cfg.height % 16 or cfg.width % 16:
        fail(f"height and width must be multiples of 16, got {cfg.height}x{cfg.width}")
    if cfg.height < 16 or cfg.width < 16:
        fail(f"image too small: {cfg.height}x{cfg.width}")
    if cfg.subsampled and (cfg.height // cfg.scale) % 2:
        fail(f"subsampled propagation needs an even grid, got "
             f"{cfg.height // cfg.scale} rows at scale 1/{cfg.scale}")
    if not 2 <= cfg.planes_min <= cfg.planes_max <= 8:
        fail(f"plane count range must satisfy 2 <= min <= max <= 8, got "
             f"{cfg.planes_min}..{cfg.planes_max}")
    if cfg.classes < cfg.planes_max:
        fail(f"need at least {cfg.planes_max} classes for {cfg.planes_max} planes, "
             f"got {cfg.classes}")
    if cfg.classes > 16:
        fail(f"classes capped at 16, got {cfg.classes}")
    if not 0.0 < cfg.train_frac < 1.0:
        fail(f"train_frac must lie in (0, 1), got {cfg.train_frac}")
    if cfg.task_weight is not None and cfg.task_weight <= 0:
        fail(f"task_weight must be positive (or auto), got {cfg.task_weight}")
    if cfg.pair_weight < 0:
        fail(f"pair_weight must be non-negative, got {cfg.pair_weight}")
    if cfg.pairs < 1:
        fail(f"pairs must be positive, got {cfg.pairs}")
    if cfg.samples < 2:
        fail(f"samples must be at least 2, got {cfg.samples}")
    if cfg.epochs < 0:
        fail(f"epochs must be non-negative, got {cfg.epochs}")
    if cfg.batch_size < 1:
        fail(f"batch_size must be positive, got {cfg.batch_size}")
    if cfg.lr_fresh <= 0 or cfg.lr_pretrained <= 0:
        fail(f"learning rates must be positive, got {cfg.lr_fresh} "
             f"and {cfg.lr_pretrained}")
    if not 0.0 < cfg.lr_decay <= 1.0:
        fail(f"lr_decay must lie in (0, 1], got {cfg.lr_decay}")
    if not 0.0 <= cfg.momentum < 1.0:
        fail(f"momentum must lie in [0, 1), got {cfg.momentum}")
    if cfg.clip_norm < 0:
        fail(f"clip_norm must be non-negative (0 disables), got {cfg.clip_norm}")
    if cfg.noise_sigma < 0:
        fail(f"noise_sigma must be non-negative, got {cfg.noise_sigma}")
    if cfg.focal_scale <= 0:
        fail(f"focal_scale must be positive, got {cfg.focal_scale}")
    if not 0 < cfg.depth_rel_threshold < 1:
        fail(f"depth_rel_threshold must lie in (0, 1), got {cfg.depth_rel_threshold}")
    if not 0 < cfg.normal_rmse_similar <= cfg.normal_rmse_dissimilar:
        fail("normal similarity thresholds must satisfy "
             f"0 < similar <= dissimilar, got {cfg.normal_rmse_similar} "
             f"and {cfg.normal_rmse_dissimilar}")
    if cfg.stats_pairs < 1:
        fail(f"stats_pairs must be positive, got {cfg.stats_pairs}")


def _render(key: str, value) -> str:
    if key == "tasks":
        return ",".join(value)
    if key == "task_weight" and value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def emit_config(cfg: RunConfig) -> str:
    lines = [f"{key} = {_render(key, getattr(cfg, key))}" for key in _KEY_ORDER]
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    out = replace(cfg, **kwargs)
    validate_config(out)
    return out
