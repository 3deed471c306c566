"""The multi-task network: shared encoder, task branches, propagation, upsampling.

Layout for encoder width C and affinity scale 1/s:

* encoder: four stride-2 3x3 convs producing features at 1/4 (C channels),
  1/8 (2C) and 1/16 (4C);
* per task: encoder features are resized to the affinity grid and
  concatenated (7C), fused by a 1x1 conv to 2C, passed through two
  residual blocks, and a 1x1 head emits the initial prediction;
* propagation: a 1x1 projection halves the branch features to C, an
  affinity matrix per task is built from them, matrices are blended
  across tasks per target, and both the branch features and the initial
  prediction are propagated through the blend;
* reconstruction: a 1x1 stem fuses propagated features with the
  propagated prediction back to 2C, then log2(s) - 1 upsampling stages
  double the resolution (each concatenating a shared up-projection with a
  task-specific one; the shared block is one parameter set reused by all
  tasks), and a final residual block plus 1x1 head emits the prediction
  at half the input resolution.

All parameters train in the "fresh" learning-rate group; the slower
"pretrained" group exists for models that load a backbone, and the
optimizer honours it whenever a parameter carries that label.
"""

from dataclasses import dataclass
import math
from typing import Dict, List, Optional
import zlib

import numpy as np

from .affinity import (
    AffinityMatrix,
    CrossTaskEnsemble,
    SimilarityFn,
    combine_affinities,
    compute_affinity,
    flatten_map,
    shrink_features,
    unflatten_map,
)
from .autodiff import (
    Parameter,
    Tape,
    Tensor,
    add,
    avg_pool2,
    bilinear_up2,
    concat,
    conv2d,
    max_pool2,
    relu,
)
from .config import RunConfig
from .diffusion import diffuse
from .errors import ConfigError, ContractError
from .tasks import TaskKind


class Conv:
    """3x3 or 1x1 convolution with bias, optionally followed by relu."""

    def __init__(self, net: "MultiTaskNet", name: str, cin: int, cout: int,
                 k: int, stride: int = 1, group: str = "fresh",
                 relu_after: bool = False, bias: bool = True,
                 zero_init: bool = False):
        self.stride = stride
        self.pad = k // 2
        self.relu_after = relu_after
        # prediction heads start at zero so the first updates are driven by
        # the loss scale rather than by the random depth of the trunk
        w0 = (np.zeros((cout, cin, k, k)) if zero_init
              else net.he_init(f"{name}.w", (cout, cin, k, k), cin * k * k))
        self.w = net.register(Parameter(f"{name}.w", w0, group))
        self.b = net.register(Parameter(
            f"{name}.b", np.zeros((cout, 1, 1)), group)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w.tensor, stride=self.stride, pad=self.pad)
        if self.b is not None:
            y = add(y, self.b.tensor)
        return relu(y) if self.relu_after else y


class ResidualBlock:
    """x + conv(relu(conv(x))), both 3x3 at constant width."""

    def __init__(self, net: "MultiTaskNet", name: str, channels: int,
                 group: str = "fresh"):
        self.c1 = Conv(net, f"{name}.c1", channels, channels, 3, relu_after=True,
                       group=group)
        self.c2 = Conv(net, f"{name}.c2", channels, channels, 3, group=group)

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.c2(self.c1(x)))


class UpProjection:
    """Bilinear x2, then conv-relu-conv plus a single-conv shortcut, relu'd.

    Halves the channel count while doubling the resolution.
    """

    def __init__(self, net: "MultiTaskNet", name: str, cin: int, cout: int):
        self.a1 = Conv(net, f"{name}.a1", cin, cout, 3, relu_after=True)
        self.a2 = Conv(net, f"{name}.a2", cout, cout, 3)
        self.skip = Conv(net, f"{name}.skip", cin, cout, 3)

    def __call__(self, x: Tensor) -> Tensor:
        up = bilinear_up2(x)
        return relu(add(self.a2(self.a1(up)), self.skip(up)))


@dataclass
class ForwardResult:
    predictions: Dict[TaskKind, Tensor]
    initial: Dict[TaskKind, Tensor]
    own_affinity: Dict[TaskKind, AffinityMatrix]
    combined_affinity: Dict[TaskKind, AffinityMatrix]


class MultiTaskNet:
    """All parameters plus the forward pass. See the module docstring."""

    def __init__(self, cfg: RunConfig):
        if cfg.height % 16 or cfg.width % 16:
            raise ConfigError(
                f"input {cfg.height}x{cfg.width} not divisible by 16")
        self.cfg = cfg
        self.tasks = cfg.active_tasks()
        self.similarity = SimilarityFn(cfg.similarity)
        self.stages = int(math.log2(cfg.scale)) - 1
        self.grid = (cfg.height // cfg.scale, cfg.width // cfg.scale)
        self.step = 0
        # reserved model-level rng; persisted in checkpoints. Parameter
        # initialization deliberately does not draw from it: each weight is
        # seeded by its own name so the values are independent of
        # registration order (configs that drop whole blocks must leave the
        # remaining weights untouched).
        self.init_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0x11717]))
        self.params: Dict[str, Parameter] = {}
        self._order: List[str] = []

        # each stage is conv+relu followed by a 2x2 mean pool; an odd-kernel
        # strided conv cannot halve an even grid under the integral-output
        # rule, so the pool carries the downsampling
        c = cfg.encoder_width
        self.enc_stem = Conv(self, "encoder.stem", 3, c, 3, relu_after=True)
        self.enc4 = Conv(self, "encoder.s4", c, c, 3, relu_after=True)
        self.enc8 = Conv(self, "encoder.s8", c, 2 * c, 3, relu_after=True)
        self.enc16 = Conv(self, "encoder.s16", 2 * c, 4 * c, 3, relu_after=True)

        self.fuse: Dict[TaskKind, Conv] = {}
        self.res: Dict[TaskKind, List[ResidualBlock]] = {}
        self.head: Dict[TaskKind, Conv] = {}
        self.shrink: Dict[TaskKind, Parameter] = {}
        self.recon_stem: Dict[TaskKind, Conv] = {}
        self.shared_up: List[UpProjection] = []
        self.task_up: Dict[TaskKind, List[UpProjection]] = {}
        self.recon_final: Dict[TaskKind, ResidualBlock] = {}
        self.recon_head: Dict[TaskKind, Conv] = {}

        for task in self.tasks:
            out_ch = task.out_channels(cfg.classes)
            t = task.value
            self.fuse[task] = Conv(self, f"branch.{t}.fuse", 7 * c, 2 * c, 1,
                                   relu_after=True)
            self.res[task] = [ResidualBlock(self, f"branch.{t}.res1", 2 * c),
                              ResidualBlock(self, f"branch.{t}.res2", 2 * c)]
            self.head[task] = Conv(self, f"branch.{t}.head", 2 * c, out_ch, 1,
                                   zero_init=True)

        if cfg.diffusion_enabled:
            for task in self.tasks:
                name = f"affinity.{task.value}.shrink"
                self.shrink[task] = self.register(Parameter(
                    name, self.he_init(name, (c, 2 * c, 1, 1), 2 * c), "fresh"))
            self.ensemble = (CrossTaskEnsemble(self.tasks)
                             if len(self.tasks) > 1 else None)
            if self.ensemble is not None:
                for p in self.ensemble.parameters():
                    self.register(p)
        else:
            self.ensemble = None

        if cfg.recon_enabled:
            for s in range(self.stages):
                self.shared_up.append(
                    UpProjection(self, f"recon.shared.up{s}", 2 * c, c))
            for task in self.tasks:
                out_ch = task.out_channels(cfg.classes)
                t = task.value
                self.recon_stem[task] = Conv(
                    self, f"recon.{t}.stem", 2 * c + out_ch, 2 * c, 1,
                    relu_after=True)
                self.task_up[task] = [
                    UpProjection(self, f"recon.{t}.up{s}", 2 * c, c)
                    for s in range(self.stages)]
                self.recon_final[task] = ResidualBlock(
                    self, f"recon.{t}.final", 2 * c)
                self.recon_head[task] = Conv(
                    self, f"recon.{t}.head", 2 * c, out_ch, 1, zero_init=True)

    # -- parameter registry ------------------------------------------------

    def he_init(self, name: str, shape, fan_in: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(
            [self.cfg.seed, 0x4E17, zlib.crc32(name.encode("utf-8"))]))
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    def register(self, param: Parameter) -> Parameter:
        if param.name in self.params:
            raise ContractError(f"parameter {param.name} registered twice")
        self.params[param.name] = param
        self._order.append(param.name)
        return param

    def parameters(self) -> List[Parameter]:
        return [self.params[name] for name in self._order]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def watch(self, tape: Tape) -> None:
        for p in self.parameters():
            tape.watch(p.tensor)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    # -- forward -----------------------------------------------------------

    def encoder_forward(self, image) -> Dict[int, Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim != 3 or x.data.shape[0] != 3:
            raise ContractError(f"image must be (3, h, w), got {x.data.shape}")
        f4 = avg_pool2(self.enc4(avg_pool2(self.enc_stem(x))))
        f8 = avg_pool2(self.enc8(f4))
        f16 = avg_pool2(self.enc16(f8))
        return {4: f4, 8: f8, 16: f16}

    def _resize(self, x: Tensor, from_scale: int, to_scale: int) -> Tensor:
        while from_scale < to_scale:
            x = avg_pool2(x)
            from_scale *= 2
        while from_scale > to_scale:
            x = bilinear_up2(x)
            from_scale //= 2
        return x

    def task_branch_forward(self, feats: Dict[int, Tensor], task: TaskKind):
        scale = self.cfg.scale
        stacked = concat([self._resize(feats[s], s, scale) for s in (4, 8, 16)],
                         axis=0)
        b = self.fuse[task](stacked)
        for block in self.res[task]:
            b = block(b)
        return b, self.head[task](b)

    def _task_affinity(self, task: TaskKind, branch: Tensor) -> AffinityMatrix:
        shrunk = shrink_features(branch, self.shrink[task].tensor)
        queries = flatten_map(shrunk)
        sources = None
        if self.cfg.subsampled:
            pooled = (avg_pool2(shrunk) if self.cfg.pool == "avg"
                      else max_pool2(shrunk))
            sources = flatten_map(pooled)
        return compute_affinity(queries, self.similarity, grid=self.grid,
                                task=task, scale_denom=self.cfg.scale,
                                sources=sources)

    def _reconstruct(self, task: TaskKind, feat: Tensor, pred: Tensor) -> Tensor:
        x = self.recon_stem[task](concat([feat, pred], axis=0))
        for s in range(self.stages):
            x = concat([self.shared_up[s](x), self.task_up[task][s](x)], axis=0)
        x = self.recon_final[task](x)
        return self.recon_head[task](x)

    def forward(self, image) -> ForwardResult:
        cfg = self.cfg
        feats = self.encoder_forward(image)
        branch: Dict[TaskKind, Tensor] = {}
        initial: Dict[TaskKind, Tensor] = {}
        for task in self.tasks:
            branch[task], initial[task] = self.task_branch_forward(feats, task)

        own: Dict[TaskKind, AffinityMatrix] = {}
        combined: Dict[TaskKind, AffinityMatrix] = {}
        feat_out: Dict[TaskKind, Tensor] = {}
        pred_out: Dict[TaskKind, Tensor] = {}
        if cfg.diffusion_enabled:
            for task in self.tasks:
                own[task] = self._task_affinity(task, branch[task])
            mats = [own[t] for t in self.tasks]
            dcfg = cfg.diffusion()
            for task in self.tasks:
                blend = (combine_affinities(mats, self.ensemble, task)
                         if self.ensemble is not None else own[task])
                combined[task] = blend
                feat_rows = diffuse(blend, flatten_map(branch[task]), dcfg)
                pred_rows = diffuse(blend, flatten_map(initial[task]), dcfg)
                feat_out[task] = unflatten_map(feat_rows, self.grid)
                pred_out[task] = unflatten_map(pred_rows, self.grid)
        else:
            for task in self.tasks:
                feat_out[task] = branch[task]
                pred_out[task] = initial[task]

        final: Dict[TaskKind, Tensor] = {}
        for task in self.tasks:
            if cfg.recon_enabled:
                final[task] = self._reconstruct(task, feat_out[task],
                                                pred_out[task])
            else:
                up = pred_out[task]
                for _ in range(self.stages):
                    up = bilinear_up2(up)
                final[task] = up
        return ForwardResult(predictions=final, initial=initial,
                             own_affinity=own, combined_affinity=combined)
