"""Command-line entry point.

Subcommands:
  gen-data       generate a scene dataset and preview images
  train          train a model and write a checkpoint
  eval           evaluate a checkpoint on the held-out split
  stats          cross-task pair-matching ratio tables from ground truth
  ablate         run one or more experiment plans and export reports
  dump-affinity  export learned affinity rows as grayscale images

Exit codes: 0 on success, 2 for configuration or usage errors, 1 for
runtime failures.
"""

import argparse
import os
import sys
from typing import Optional

from .affinity import dump_affinity
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (RunConfig, config_digest, emit_config, parse_config,
                     with_overrides)
from .errors import ConfigError
from .experiments import (ExperimentPlan, PLAN_KINDS, export_report,
                          measure_step_times, prepare_out_dir, run_experiment)
from .network import MultiTaskNet
from .scenes import (Dataset, SceneSpec, export_previews, generate_dataset,
                     read_dataset, split, write_dataset)
from .stats import PairMatchConfig, pair_match_stats, ratios_csv
from .train import evaluate, fit

_PREVIEW_COUNT = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affprop",
        description="Cross-task affinity propagation on procedural scenes")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        if data:
            p.add_argument("--data", default=None,
                           help="dataset file (default: regenerate from config)")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint file to load")

    common(sub.add_parser("gen-data", help="generate scenes"))
    common(sub.add_parser("train", help="train a model"), data=True)
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, data=True, checkpoint=True)
    common(sub.add_parser("stats", help="pair-matching statistics"), data=True)
    sub.choices["stats"].add_argument(
        "--exhaustive", action="store_true",
        help="enumerate all pixel pairs instead of sampling")
    p_abl = sub.add_parser("ablate", help="run experiment plans")
    common(p_abl)
    p_abl.add_argument("--plan", action="append", default=None,
                       choices=PLAN_KINDS + ("all",),
                       help="plan kind, repeatable (default: module-ablation)")
    p_abl.add_argument("--runs", type=int, default=5,
                       help="seeds per variant, starting at the config seed")
    p_dump = sub.add_parser("dump-affinity", help="export affinity rows")
    common(p_dump, data=True, checkpoint=True)
    p_dump.add_argument("--sample", type=int, default=0,
                        help="dataset sample index to run the forward pass on")
    p_dump.add_argument("--rows", default=None,
                        help="comma-separated affinity row indices "
                             "(default: the grid centre)")
    return parser


def _load_config(args) -> RunConfig:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {args.config!r}: {err}")
    cfg = parse_config(text, source=args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def _load_or_generate(cfg: RunConfig, data_path: Optional[str]) -> Dataset:
    if data_path is not None:
        return read_dataset(data_path)
    return generate_dataset(SceneSpec.from_config(cfg), cfg.samples)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    prepare_out_dir(args.out, args.force)
    dataset = generate_dataset(SceneSpec.from_config(cfg), cfg.samples)
    data_path = os.path.join(args.out, "dataset.papd")
    write_dataset(data_path, dataset)
    _write(os.path.join(args.out, "config.cfg"), emit_config(cfg))
    preview_dir = os.path.join(args.out, "previews")
    os.makedirs(preview_dir, exist_ok=True)
    for sample in dataset.samples[:_PREVIEW_COUNT]:
        export_previews(sample, preview_dir)
    print(f"wrote {len(dataset.samples)} samples to {data_path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    prepare_out_dir(args.out, args.force)
    dataset = _load_or_generate(cfg, args.data)
    train_samples, _ = split(dataset, cfg.train_frac, cfg.seed)
    model = MultiTaskNet(cfg)
    trace = fit(model, train_samples, cfg, log=print)
    ckpt_path = os.path.join(args.out, "checkpoint.papc")
    save_checkpoint(model, ckpt_path, config_digest(cfg))
    _write(os.path.join(args.out, "config.cfg"), emit_config(cfg))
    _write(os.path.join(args.out, "loss_trace.csv"),
           "step,loss\n" + "".join("%d,%.6g\n" % (i, v)
                                   for i, v in enumerate(trace)))
    print(f"trained {len(trace)} steps; checkpoint at {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    prepare_out_dir(args.out, args.force)
    dataset = _load_or_generate(cfg, args.data)
    _, val_samples = split(dataset, cfg.train_frac, cfg.seed)
    model = MultiTaskNet(cfg)
    stored = load_checkpoint(model, args.checkpoint)
    expect = config_digest(cfg)
    if stored and stored != expect:
        raise ConfigError(
            f"checkpoint was trained with config digest {stored}, but the "
            f"given config has digest {expect}")
    metrics = evaluate(model, val_samples, cfg)
    run_id = f"eval-s{cfg.seed:02d}"
    lines = ["run_id,seed,config_digest,task,metric,value"]
    for task in sorted(metrics):
        for name in sorted(metrics[task]):
            lines.append("%s,%d,%s,%s,%s,%.6g" % (
                run_id, cfg.seed, expect, task, name, metrics[task][name]))
    _write(os.path.join(args.out, "metrics.csv"), "\n".join(lines) + "\n")
    for task in sorted(metrics):
        pairs = ("%s %.6g" % (k, v) for k, v in sorted(metrics[task].items()))
        print(f"{task}: " + "  ".join(pairs))
    return 0


def _cmd_stats(args) -> int:
    cfg = _load_config(args)
    prepare_out_dir(args.out, args.force)
    dataset = _load_or_generate(cfg, args.data)
    table = pair_match_stats(dataset.samples,
                             PairMatchConfig.from_run_config(cfg),
                             exhaustive=args.exhaustive)
    _write(os.path.join(args.out, "ratios.csv"), ratios_csv(table))
    names = [t.value for t in table.tasks]
    print("similar-pair match ratios (reference task in rows):")
    for a, row in enumerate(table.similar_ratio):
        cells = "  ".join("%9.4f" % v for v in row)
        print(f"  {names[a]:>6} {cells}")
    print(f"pairs considered: {table.pair_count}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.runs < 3:
        raise ConfigError(f"--runs must be at least 3, got {args.runs}")
    kinds = args.plan or ["module-ablation"]
    if "all" in kinds:
        kinds = list(PLAN_KINDS)
    prepare_out_dir(args.out, args.force)
    seeds = tuple(cfg.seed + i for i in range(args.runs))
    dataset = generate_dataset(SceneSpec.from_config(cfg), cfg.samples)
    results = []
    for kind in kinds:
        plan = ExperimentPlan(kind=kind, base=cfg, seeds=seeds)
        results.append(run_experiment(plan, dataset, log=print))
    probe = None
    if "iteration-sweep" in kinds:
        probe = measure_step_times(cfg, dataset)
    paths = export_report(results, args.out, force=True, probe=probe)
    print("wrote " + ", ".join(paths))
    return 0 if all(r.ok for r in results) else 1


def _cmd_dump_affinity(args) -> int:
    cfg = _load_config(args)
    prepare_out_dir(args.out, args.force)
    dataset = _load_or_generate(cfg, args.data)
    if not 0 <= args.sample < len(dataset.samples):
        raise ConfigError(f"--sample {args.sample} out of range for "
                          f"{len(dataset.samples)} samples")
    model = MultiTaskNet(cfg)
    if args.checkpoint is not None:
        load_checkpoint(model, args.checkpoint)
    result = model.forward(dataset.samples[args.sample].image)
    gh, gw = cfg.grid_side()
    if args.rows is None:
        rows = [(gh // 2) * gw + gw // 2]
    else:
        try:
            rows = [int(tok) for tok in args.rows.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"--rows expects comma-separated integers, "
                              f"got {args.rows!r}")
    paths = []
    for sub, mats in (("own", result.own_affinity),
                      ("combined", result.combined_affinity)):
        if not mats:
            continue
        sub_dir = os.path.join(args.out, sub)
        os.makedirs(sub_dir, exist_ok=True)
        for task, mat in mats.items():
            for row in rows:
                paths.append(dump_affinity(mat, row, sub_dir))
    print("wrote %d affinity images to %s" % (len(paths), args.out))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
    "ablate": _cmd_ablate,
    "dump-affinity": _cmd_dump_affinity,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse prints usage itself; normalize unknown-flag exits to 2
        return 0 if exc.code == 0 else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"{parser.prog}: config error: {err}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as err:
        print(f"{parser.prog}: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
