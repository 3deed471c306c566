"""Experiment orchestration: ablation plans, runs, and report export.

A plan names a family of config variants (joint vs single task, diffusion
iteration sweep, affinity scale sweep, similarity function sweep, module
ablation) and a list of seeds. Every variant x seed pair trains a fresh
model on a shared procedurally generated dataset and evaluates on the
held-out split. A run that throws is recorded with its error message and
the remaining runs still execute.

metrics.csv intentionally carries no timing values, so identical config
and seed reproduce it byte for byte; wall-clock numbers live in
timings.csv next to it.
"""

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, config_digest, with_overrides
from .errors import ConfigError
from .network import MultiTaskNet
from .scenes import Dataset, SceneSpec, generate_dataset, split
from .train import evaluate, fit, train_step, make_optimizer

PLAN_KINDS = ("joint-vs-single", "iteration-sweep", "scale-sweep",
              "similarity-sweep", "module-ablation")

ITERATION_STEPS = (0, 1, 2, 4, 8)


@dataclass(frozen=True)
class ExperimentPlan:
    """A named sweep plus the seeds it repeats over."""

    kind: str
    base: RunConfig
    seeds: Tuple[int, ...]

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ConfigError(
                f"unknown plan kind {self.kind!r}; expected one of "
                + ", ".join(PLAN_KINDS))
        if len(self.seeds) < 3:
            raise ConfigError(
                f"directional comparisons need at least 3 seeds, got "
                f"{len(self.seeds)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in plan: {self.seeds}")

    def variants(self) -> List[Tuple[str, RunConfig]]:
        b = self.base
        if self.kind == "joint-vs-single":
            return [("depth_only", with_overrides(b, tasks=("depth",))),
                    ("joint", b)]
        if self.kind == "iteration-sweep":
            return [(f"iter{t}", with_overrides(b, iterations=t))
                    for t in ITERATION_STEPS]
        if self.kind == "scale-sweep":
            return [(f"scale{s}", with_overrides(b, scale=s))
                    for s in (16, 8, 4)]
        if self.kind == "similarity-sweep":
            return [(name, with_overrides(b, similarity=sim))
                    for name, sim in (("dot_product", "dot"),
                                      ("l1_distance", "l1"))]
        # module-ablation: switch features on one at a time
        return [
            ("baseline", with_overrides(b, diffusion_enabled=False,
                                        recon_enabled=False,
                                        pairwise_enabled=False)),
            ("diffusion", with_overrides(b, recon_enabled=False,
                                         pairwise_enabled=False)),
            ("diffusion_recon", with_overrides(b, pairwise_enabled=False)),
            ("full", b),
        ]


@dataclass
class RunResult:
    """Outcome of one variant x seed training, successful or not."""

    run_id: str
    variant: str
    seed: int
    digest: str
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    train_seconds: float = 0.0
    step_seconds: float = 0.0
    steps: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    runs: List[RunResult]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.runs)

    def by_variant(self) -> Dict[str, List[RunResult]]:
        out: Dict[str, List[RunResult]] = {}
        for r in self.runs:
            out.setdefault(r.variant, []).append(r)
        return out

    def mean_metric(self, variant: str, task: str, metric: str) -> float:
        vals = [r.metrics[task][metric] for r in self.by_variant()[variant]
                if r.ok and task in r.metrics]
        return float(np.mean(vals)) if vals else math.nan


def _run_one(variant: str, cfg: RunConfig, seed: int,
             dataset: Dataset, log) -> RunResult:
    run_cfg = with_overrides(cfg, seed=seed)
    result = RunResult(run_id=f"{variant}-s{seed:02d}", variant=variant,
                       seed=seed, digest=config_digest(run_cfg))
    try:
        train, val = split(dataset, run_cfg.train_frac, seed)
        model = MultiTaskNet(run_cfg)
        t0 = time.perf_counter()
        trace = fit(model, train, run_cfg)
        result.train_seconds = time.perf_counter() - t0
        result.steps = len(trace)
        if trace:
            result.step_seconds = result.train_seconds / len(trace)
        result.metrics = evaluate(model, val, run_cfg)
        if log:
            depth = result.metrics.get("depth", {}).get("rmse", math.nan)
            log(f"{result.run_id}: depth rmse {depth:.4f} "
                f"({result.train_seconds:.0f}s)")
    except Exception as err:  # preserve partial results, report at the end
        result.error = f"{type(err).__name__}: {err}"
        if log:
            log(f"{result.run_id}: FAILED {result.error}")
    return result


def run_experiment(plan: ExperimentPlan, dataset: Optional[Dataset] = None,
                   log: Optional[Callable[[str], None]] = None
                   ) -> ExperimentResult:
    """Execute every variant x seed run of the plan.

    The dataset is shared by all runs (scene content depends only on the
    base config); each run re-splits it with its own seed. Pass a
    pre-generated dataset to share it across plans.
    """
    if dataset is None:
        dataset = generate_dataset(SceneSpec.from_config(plan.base),
                                   plan.base.samples)
    runs = [
        _run_one(variant, cfg, seed, dataset, log)
        for variant, cfg in plan.variants()
        for seed in plan.seeds
    ]
    return ExperimentResult(plan=plan, runs=runs)


def measure_step_times(cfg: RunConfig, dataset: Dataset,
                       iterations: Sequence[int] = ITERATION_STEPS,
                       repeats: int = 3) -> Dict[int, float]:
    """Best-of-N wall time of one training step per iteration count.

    Uses a single fixed sample and takes the minimum over repeats after a
    warmup step, which strips scheduler noise; the remaining signal is the
    marginal cost of each extra diffusion pass.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be positive, got {repeats}")
    sample = dataset.samples[0]
    out: Dict[int, float] = {}
    for t in iterations:
        run_cfg = with_overrides(cfg, iterations=t)
        model = MultiTaskNet(run_cfg)
        optimizer = make_optimizer(model, run_cfg)
        weights = run_cfg.loss_weights()
        best = math.inf
        for rep in range(repeats + 1):
            t0 = time.perf_counter()
            train_step(model, [sample], run_cfg, optimizer, weights)
            elapsed = time.perf_counter() - t0
            if rep > 0:  # first pass warms caches
                best = min(best, elapsed)
        out[t] = best
    return out


# -- report export ---------------------------------------------------------

_SUMMARY_TITLES = {
    "joint-vs-single": "Joint vs single-task training",
    "iteration-sweep": "Diffusion iteration sweep",
    "scale-sweep": "Affinity grid scale sweep",
    "similarity-sweep": "Similarity function sweep",
    "module-ablation": "Module ablation ladder",
}

_SUMMARY_COLUMNS = (("depth", "rmse"), ("depth", "rel"), ("normal", "mean"),
                    ("seg", "iou"))


def prepare_out_dir(path: str, force: bool) -> None:
    """Create the output directory; refuse to reuse a non-empty one."""
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(
            f"output directory {path!r} is not empty; pass --force to "
            f"overwrite")
    os.makedirs(path, exist_ok=True)


def metrics_csv(results: Sequence[ExperimentResult]) -> str:
    lines = ["run_id,seed,config_digest,task,metric,value"]
    rows = []
    for result in results:
        for r in result.runs:
            if not r.ok:
                continue
            for task in sorted(r.metrics):
                for metric in sorted(r.metrics[task]):
                    rows.append((r.run_id, r.seed, r.digest, task, metric,
                                 r.metrics[task][metric]))
    rows.sort(key=lambda row: (row[0], row[3], row[4]))
    for run_id, seed, digest, task, metric, value in rows:
        lines.append("%s,%d,%s,%s,%s,%.6g" % (run_id, seed, digest, task,
                                              metric, value))
    return "\n".join(lines) + "\n"


def timings_csv(results: Sequence[ExperimentResult],
                probe: Optional[Dict[int, float]] = None) -> str:
    lines = ["run_id,seconds,steps,step_seconds"]
    rows = [(r.run_id, r.train_seconds, r.steps, r.step_seconds)
            for result in results for r in result.runs if r.ok]
    rows.sort(key=lambda row: row[0])
    for run_id, seconds, steps, step_seconds in rows:
        lines.append("%s,%.3f,%d,%.6f" % (run_id, seconds, steps, step_seconds))
    if probe:
        for t in sorted(probe):
            lines.append("probe-iter%d,%.6f,1,%.6f" % (t, probe[t], probe[t]))
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "n/a" if math.isnan(x) else "%.4f" % x


def summary_markdown(results: Sequence[ExperimentResult],
                     probe: Optional[Dict[int, float]] = None) -> str:
    out = ["# Experiment summary", ""]
    for result in results:
        plan = result.plan
        out.append(f"## {_SUMMARY_TITLES[plan.kind]}")
        out.append("")
        out.append(f"Seeds: {', '.join(str(s) for s in plan.seeds)}. "
                   f"Values are means over seeds on the held-out split.")
        out.append("")
        header = ["variant"] + [f"{t} {m}" for t, m in _SUMMARY_COLUMNS]
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for variant, _ in plan.variants():
            cells = [variant]
            for task, metric in _SUMMARY_COLUMNS:
                cells.append(_fmt(result.mean_metric(variant, task, metric)))
            out.append("| " + " | ".join(cells) + " |")
        failed = [r for r in result.runs if not r.ok]
        for r in failed:
            out.append("")
            out.append(f"* `{r.run_id}` failed: {r.error}")
        out.append("")
        verdict = _verdict(result)
        if verdict:
            out.extend(verdict)
            out.append("")
    if probe:
        out.append("## Per-step wall time vs diffusion iterations")
        out.append("")
        out.append("| iterations | seconds/step |")
        out.append("|---|---|")
        for t in sorted(probe):
            out.append("| %d | %.4f |" % (t, probe[t]))
        increasing = all(probe[a] < probe[b] for a, b in
                         zip(sorted(probe), sorted(probe)[1:]))
        out.append("")
        out.append("Step time increases with iteration count: "
                   + ("yes" if increasing else "no"))
        out.append("")
    return "\n".join(out)


def _verdict(result: ExperimentResult) -> List[str]:
    """Directional statements mirroring the claims each plan probes."""
    plan = result.plan
    lines: List[str] = []

    def wins(a: str, b: str) -> Tuple[int, int]:
        """Seeds where variant a beats variant b on depth rmse."""
        by = result.by_variant()
        count = total = 0
        for ra, rb in zip(by.get(a, []), by.get(b, [])):
            if ra.ok and rb.ok and "depth" in ra.metrics and "depth" in rb.metrics:
                total += 1
                if ra.metrics["depth"]["rmse"] < rb.metrics["depth"]["rmse"]:
                    count += 1
        return count, total

    if plan.kind == "joint-vs-single":
        w, n = wins("joint", "depth_only")
        lines.append(f"Joint training beats depth-only on depth rmse in "
                     f"{w}/{n} seeds.")
    elif plan.kind == "iteration-sweep":
        w, n = wins("iter4", "iter0")
        lines.append(f"Four diffusion iterations beat zero on depth rmse in "
                     f"{w}/{n} seeds.")
    elif plan.kind == "module-ablation":
        order = ["baseline", "diffusion", "diffusion_recon", "full"]
        means = [result.mean_metric(v, "depth", "rmse") for v in order]
        steps = []
        for (va, ma), (vb, mb) in zip(zip(order, means), zip(order[1:], means[1:])):
            arrow = "<=" if (not math.isnan(ma) and not math.isnan(mb)
                             and mb <= ma) else ">"
            steps.append(f"{va} {_fmt(ma)} {arrow} {vb} {_fmt(mb)}")
        lines.append("Mean depth rmse ladder: " + "; ".join(steps) + ".")
    return lines


def export_report(results: Sequence[ExperimentResult], out_dir: str,
                  force: bool = False,
                  probe: Optional[Dict[int, float]] = None) -> List[str]:
    """Write metrics.csv, timings.csv and summary.md into out_dir."""
    prepare_out_dir(out_dir, force)
    paths = []
    for name, text in (("metrics.csv", metrics_csv(results)),
                       ("timings.csv", timings_csv(results, probe)),
                       ("summary.md", summary_markdown(results, probe))):
        p = os.path.join(out_dir, name)
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths.append(p)
    return paths
