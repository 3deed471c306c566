"""Config file format and CLI behaviour.

CLI tests call cli_main in-process with argv lists; a module-scoped
workspace generates one tiny dataset and one trained checkpoint that the
eval / stats / dump-affinity tests share.
"""

import os
from types import SimpleNamespace

import pytest

from affprop.cli import cli_main
from affprop.config import (RunConfig, config_digest, emit_config,
                            load_config, parse_config, with_overrides)
from affprop.errors import ConfigError

TINY_CFG = """\
# tiny end-to-end run
seed = 0
height = 32
width = 32
classes = 4
samples = 4
planes_min = 2
planes_max = 4
encoder_width = 4
scale = 8
pairs = 40
epochs = 1
batch_size = 2
stats_pairs = 500
"""


# -- config format ---------------------------------------------------------

def test_parse_defaults_and_comments():
    cfg = parse_config("seed = 7  # inline comment\n\n# full-line comment\n")
    assert cfg.seed == 7
    assert cfg.height == 64 and cfg.width == 64
    assert cfg.tasks == ("depth", "normal", "seg")
    assert cfg.task_weight is None
    assert cfg.beta == 0.05


def test_round_trip_exact():
    cfg = parse_config(
        "seed=3\nheight = 32\n  width =48\ntasks = depth , seg\n"
        "similarity = l1\ntask_weight = 0.5\nlr_pretrained = 1e-4\n")
    assert cfg.tasks == ("depth", "seg")
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert emit_config(again) == emit_config(cfg)
    assert config_digest(again) == config_digest(cfg)


def test_digest_senses_every_field_it_should():
    base = parse_config("seed = 0\n")
    assert config_digest(with_overrides(base, seed=1)) != config_digest(base)
    assert config_digest(with_overrides(base, beta=0.06)) != config_digest(base)
    assert len(config_digest(base)) == 16


def test_task_weight_auto_round_trip():
    cfg = parse_config("seed = 0\ntask_weight = auto\n")
    assert cfg.task_weight is None
    assert "task_weight = auto" in emit_config(cfg)
    assert cfg.resolved_task_weight() == pytest.approx(1.0 / 3.0)
    explicit = parse_config("seed = 0\ntask_weight = 0.25\n")
    assert explicit.resolved_task_weight() == 0.25


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed is required"):
        parse_config("height = 32\nwidth = 32\n")


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match="line 2: unknown key 'colour'"):
        parse_config("seed = 0\ncolour = blue\n")


def test_duplicate_key_names_both_lines():
    with pytest.raises(ConfigError, match="line 3: seed already set on line 1"):
        parse_config("seed = 0\nheight = 32\nseed = 1\n")


def test_malformed_line():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("seed = 0\njust some words\n")


def test_type_errors_cite_line():
    with pytest.raises(ConfigError, match="line 2: epochs expects an integer"):
        parse_config("seed = 0\nepochs = soon\n")
    with pytest.raises(ConfigError, match="subsampled expects true or false"):
        parse_config("seed = 0\nsubsampled = yes\n")
    with pytest.raises(ConfigError, match="unknown task 'flow'"):
        parse_config("seed = 0\ntasks = depth,flow\n")


@pytest.mark.parametrize("line,needle", [
    ("beta = 1.5", r"beta must lie in \[0, 1\]"),
    ("scale = 5", "scale must be one of 16, 8, 4"),
    ("similarity = cosine", "similarity must be dot or l1"),
    ("pool = sum", "pool must be avg or max"),
    ("momentum = 1.0", r"momentum must lie in \[0, 1\)"),
    ("train_frac = 1.0", r"train_frac must lie in \(0, 1\)"),
    ("height = 40", "multiples of 16"),
    ("classes = 3\nplanes_max = 5", "need at least 5 classes"),
    ("planes_min = 1", "2 <= min <= max <= 8"),
    ("samples = 1", "samples must be at least 2"),
    ("tasks = depth,depth", "tasks listed twice"),
])
def test_validation_rules(line, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(f"seed = 0\n{line}\n")


def test_subsampled_needs_even_grid():
    # 48 / 16 = 3 grid rows
    with pytest.raises(ConfigError, match="even grid"):
        parse_config("seed = 0\nheight = 48\nwidth = 48\nscale = 16\n"
                     "subsampled = true\n")


def test_with_overrides_validates():
    cfg = parse_config("seed = 0\n")
    with pytest.raises(ConfigError, match="scale must be one of"):
        with_overrides(cfg, scale=5)


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CFG)
    cfg = load_config(path)
    assert cfg == parse_config(TINY_CFG)
    with pytest.raises(ConfigError, match=r"run\.cfg line 2"):
        path.write_text("seed = 0\nbogus = 1\n")
        load_config(path)


# -- CLI workspace ---------------------------------------------------------

@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CFG)
    data_dir = root / "data"
    assert cli_main(["gen-data", "--config", str(cfg),
                     "--out", str(data_dir)]) == 0
    train_dir = root / "train"
    assert cli_main(["train", "--config", str(cfg), "--out", str(train_dir),
                     "--data", str(data_dir / "dataset.papd")]) == 0
    return SimpleNamespace(root=root, cfg=str(cfg),
                           data=str(data_dir / "dataset.papd"),
                           data_dir=data_dir, train_dir=train_dir,
                           ckpt=str(train_dir / "checkpoint.papc"))


# -- usage errors ----------------------------------------------------------

def test_no_subcommand(capsys):
    assert cli_main([]) == 2
    assert "subcommand is required" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert cli_main(["frobnicate"]) == 2


def test_help_exits_zero(capsys):
    assert cli_main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_missing_required_flag(capsys):
    assert cli_main(["gen-data"]) == 2


def test_unreadable_config(tmp_path, capsys):
    rc = cli_main(["gen-data", "--config", str(tmp_path / "nope.cfg"),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "cannot read config" in capsys.readouterr().err


def test_invalid_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 0\nbeta = 1.5\n")
    rc = cli_main(["gen-data", "--config", str(bad),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_refuses_nonempty_out_dir(ws, tmp_path, capsys):
    out = tmp_path / "occupied"
    out.mkdir()
    (out / "leftover.txt").write_text("x")
    rc = cli_main(["gen-data", "--config", ws.cfg, "--out", str(out)])
    assert rc == 2
    assert "--force" in capsys.readouterr().err
    assert cli_main(["gen-data", "--config", ws.cfg, "--out", str(out),
                     "--force"]) == 0
    assert (out / "dataset.papd").exists()


def test_runtime_failure_exits_one(ws, tmp_path, capsys):
    missing = str(tmp_path / "no_such.papc")
    rc = cli_main(["eval", "--config", ws.cfg, "--out", str(tmp_path / "o"),
                   "--data", ws.data, "--checkpoint", missing])
    assert rc == 1


# -- gen-data --------------------------------------------------------------

def test_gen_data_artifacts(ws):
    assert os.path.exists(ws.data)
    stored = load_config(ws.data_dir / "config.cfg")
    assert stored == parse_config(TINY_CFG)
    previews = sorted(os.listdir(ws.data_dir / "previews"))
    # 4 samples x (image, depth, normal, labels)
    assert len(previews) == 16


def test_gen_data_deterministic_and_seed_sensitive(ws, tmp_path):
    a, b, c = (tmp_path / n for n in ("a", "b", "c"))
    for out in (a, b):
        assert cli_main(["gen-data", "--config", ws.cfg,
                         "--out", str(out)]) == 0
    assert cli_main(["gen-data", "--config", ws.cfg, "--out", str(c),
                     "--seed", "1"]) == 0
    bytes_a = (a / "dataset.papd").read_bytes()
    assert bytes_a == (b / "dataset.papd").read_bytes()
    assert bytes_a != (c / "dataset.papd").read_bytes()
    assert "seed = 1" in (c / "config.cfg").read_text()


# -- train / eval ----------------------------------------------------------

def test_train_artifacts(ws):
    assert os.path.exists(ws.ckpt)
    trace = (ws.train_dir / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss"
    # 3 train samples, batch 2 -> 2 steps in the single epoch
    assert len(trace) == 3
    assert trace[1].startswith("0,")


def test_eval_artifacts_and_byte_identity(ws, tmp_path, capsys):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = cli_main(["eval", "--config", ws.cfg, "--out", str(out),
                       "--data", ws.data, "--checkpoint", ws.ckpt])
        assert rc == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert lines[0] == "run_id,seed,config_digest,task,metric,value"
    # 6 depth + 6 normal + 3 seg metrics
    assert len(lines) == 16
    assert sum(1 for l in lines[1:] if l.split(",")[3] == "depth") == 6
    assert "depth:" in capsys.readouterr().out


def test_eval_needs_checkpoint(ws, tmp_path, capsys):
    rc = cli_main(["eval", "--config", ws.cfg, "--out", str(tmp_path / "o"),
                   "--data", ws.data])
    assert rc == 2
    assert "needs --checkpoint" in capsys.readouterr().err


def test_eval_rejects_digest_mismatch(ws, tmp_path, capsys):
    rc = cli_main(["eval", "--config", ws.cfg, "--out", str(tmp_path / "o"),
                   "--data", ws.data, "--checkpoint", ws.ckpt,
                   "--seed", "7"])
    assert rc == 2
    assert "digest" in capsys.readouterr().err


def test_corrupt_dataset_exits_one(ws, tmp_path, capsys):
    bad = tmp_path / "bad.papd"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    rc = cli_main(["train", "--config", ws.cfg, "--out", str(tmp_path / "o"),
                   "--data", str(bad)])
    assert rc == 1


# -- stats -----------------------------------------------------------------

def test_stats_artifacts(ws, tmp_path, capsys):
    out = tmp_path / "stats"
    rc = cli_main(["stats", "--config", ws.cfg, "--out", str(out),
                   "--data", ws.data])
    assert rc == 0
    lines = (out / "ratios.csv").read_text().splitlines()
    assert lines[0] == "regime,reference,other,ratio,matched,base"
    assert len(lines) == 19  # header + 2 regimes x 3x3 task pairs
    assert "pairs considered" in capsys.readouterr().out


# -- dump-affinity ---------------------------------------------------------

def test_dump_affinity_artifacts(ws, tmp_path):
    out = tmp_path / "aff"
    rc = cli_main(["dump-affinity", "--config", ws.cfg, "--out", str(out),
                   "--data", ws.data, "--checkpoint", ws.ckpt])
    assert rc == 0
    for sub in ("own", "combined"):
        files = sorted(os.listdir(out / sub))
        assert len(files) == 3
        # grid is 4x4, so the default centre row is index 10
        assert all(f.startswith("affinity_") and f.endswith("_10.pgm")
                   for f in files)
        first = (out / sub / files[0]).read_bytes()
        assert first.startswith(b"P5\n4 4\n255\n")


def test_dump_affinity_bad_rows(ws, tmp_path, capsys):
    rc = cli_main(["dump-affinity", "--config", ws.cfg,
                   "--out", str(tmp_path / "o"), "--data", ws.data,
                   "--rows", "1,x"])
    assert rc == 2
    assert "comma-separated integers" in capsys.readouterr().err


def test_dump_affinity_sample_out_of_range(ws, tmp_path, capsys):
    rc = cli_main(["dump-affinity", "--config", ws.cfg,
                   "--out", str(tmp_path / "o"), "--data", ws.data,
                   "--sample", "99"])
    assert rc == 2
    assert "out of range" in capsys.readouterr().err


# -- ablate ----------------------------------------------------------------

def test_ablate_needs_three_runs(ws, tmp_path, capsys):
    rc = cli_main(["ablate", "--config", ws.cfg, "--out", str(tmp_path / "o"),
                   "--runs", "2"])
    assert rc == 2
    assert "at least 3" in capsys.readouterr().err


def test_ablate_similarity_sweep(ws, tmp_path, capsys):
    out = tmp_path / "abl"
    rc = cli_main(["ablate", "--config", ws.cfg, "--out", str(out),
                   "--plan", "similarity-sweep", "--runs", "3"])
    assert rc == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "run_id,seed,config_digest,task,metric,value"
    # 2 variants x 3 seeds x 15 metric rows
    assert len(metrics) == 1 + 2 * 3 * 15
    timings = (out / "timings.csv").read_text().splitlines()
    assert timings[0] == "run_id,seconds,steps,step_seconds"
    assert len(timings) == 7
    summary = (out / "summary.md").read_text()
    assert "## Similarity function sweep" in summary
    assert "| dot_product |" in summary and "| l1_distance |" in summary
