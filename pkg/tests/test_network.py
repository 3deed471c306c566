"""Network structure, forward shape laws, training behavior, checkpoints."""

import numpy as np
import pytest

from affprop.autodiff import Tape, Tensor, backward, mul, reduce_sum
from affprop.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from affprop.config import RunConfig, validate_config, with_overrides
from affprop.errors import CheckpointError, ConfigError, ContractError
from affprop.losses import pair_rng
from affprop.network import MultiTaskNet, ResidualBlock, UpProjection
from affprop.scenes import SceneSpec, generate_scene
from affprop.tasks import TaskKind
from affprop.train import (
    batch_loss,
    downsample_targets,
    evaluate,
    fit,
    make_optimizer,
    predict,
    train_step,
)


def tiny_cfg(**kw):
    base = dict(seed=0, height=32, width=32, classes=4, samples=4,
                planes_min=2, planes_max=4, encoder_width=4, scale=8,
                pairs=40, epochs=1, batch_size=2)
    base.update(kw)
    cfg = RunConfig(**base)
    validate_config(cfg)
    return cfg


def scene_for(cfg, sid=0):
    return generate_scene(SceneSpec.from_config(cfg), sid)


# ---------------------------------------------------------------- shape laws

def test_encoder_shape_law():
    cfg = tiny_cfg(height=64, width=64, classes=8, planes_max=8, encoder_width=16)
    net = MultiTaskNet(cfg)
    feats = net.encoder_forward(np.zeros((3, 64, 64)))
    assert feats[4].data.shape == (16, 16, 16)
    assert feats[8].data.shape == (32, 8, 8)
    assert feats[16].data.shape == (64, 4, 4)


def test_branch_and_forward_shape_law():
    cfg = tiny_cfg(height=64, width=64, classes=8, planes_max=8, encoder_width=8)
    net = MultiTaskNet(cfg)
    image = scene_for(cfg).image
    feats = net.encoder_forward(image)
    _, initial = net.task_branch_forward(feats, TaskKind.DEPTH)
    assert initial.data.shape == (1, 8, 8)

    result = net.forward(image)
    for task in net.tasks:
        assert result.combined_affinity[task].values.data.shape == (64, 64)
        assert result.combined_affinity[task].grid == (8, 8)
    assert result.predictions[TaskKind.DEPTH].data.shape == (1, 32, 32)
    assert result.predictions[TaskKind.NORMAL].data.shape == (3, 32, 32)
    assert result.predictions[TaskKind.SEG].data.shape == (8, 32, 32)


def test_upsampling_stage_count_follows_scale():
    for scale, stages in ((16, 3), (8, 2), (4, 1)):
        net = MultiTaskNet(tiny_cfg(scale=scale))
        assert net.stages == stages


def test_indivisible_input_rejected():
    with pytest.raises(ConfigError):
        MultiTaskNet(RunConfig(seed=0, height=40, width=64))


def test_zero_init_heads_give_zero_initial_predictions():
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    result = net.forward(scene_for(cfg).image)
    for task in net.tasks:
        assert np.all(result.initial[task].data == 0.0)
        assert np.all(result.predictions[task].data == 0.0)


def test_task_branches_share_no_parameters():
    net = MultiTaskNet(tiny_cfg())
    by_task = {t: {n for n in net.params if n.startswith(f"branch.{t.value}.")}
               for t in net.tasks}
    names = list(by_task.values())
    assert all(names[i].isdisjoint(names[j])
               for i in range(3) for j in range(i + 1, 3))
    assert all(len(s) > 0 for s in names)


def test_shared_up_projection_registered_once():
    net = MultiTaskNet(tiny_cfg())
    shared = [n for n in net.params if n.startswith("recon.shared.")]
    assert shared
    # the blocks used in every task's reconstruction are the same objects
    assert net.shared_up[0].a1.w is net.params["recon.shared.up0.a1.w"]
    per_task = [n for n in net.params if n.startswith("recon.") and ".up" in n
                and not n.startswith("recon.shared.")]
    assert len(per_task) == 3 * len(shared)


def test_duplicate_registration_rejected():
    net = MultiTaskNet(tiny_cfg())
    p = net.parameters()[0]
    with pytest.raises(ContractError):
        net.register(p)


# ------------------------------------------------------------ block behavior

def test_residual_block_zero_weights_is_identity():
    net = MultiTaskNet(tiny_cfg())
    block = ResidualBlock(net, "probe.res", 3)
    for conv in (block.c1, block.c2):
        conv.w.tensor.data[:] = 0.0
        conv.b.tensor.data[:] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 5)))
    assert np.array_equal(block(x).data, x.data)


def test_up_projection_shape_and_zero_main_path():
    net = MultiTaskNet(tiny_cfg(encoder_width=16, height=64, width=64,
                                classes=8, planes_max=8))
    up = UpProjection(net, "probe.up", 32, 16)
    x = Tensor(np.random.default_rng(1).normal(size=(32, 8, 8)))
    y = up(x)
    assert y.data.shape == (16, 16, 16)

    up.a2.w.tensor.data[:] = 0.0
    up.a2.b.tensor.data[:] = 0.0
    y2 = up(x).data
    from affprop.autodiff import bilinear_up2, relu, add
    expect = relu(add(up.skip(bilinear_up2(x)),
                      Tensor(np.zeros_like(y2)))).data
    assert np.allclose(y2, expect, atol=1e-12)


def test_up_projection_gradients():
    net = MultiTaskNet(tiny_cfg())
    up = UpProjection(net, "probe.fd", 2, 1)
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 3, 3))
    probe = rng.uniform(0.5, 1.5, size=(1, 6, 6))
    params = [up.a1.w, up.a1.b, up.a2.w, up.a2.b, up.skip.w, up.skip.b]

    def loss_value():
        return float(reduce_sum(mul(up(Tensor(x0)), Tensor(probe))).data)

    tape = Tape()
    for p in params:
        tape.watch(p.tensor)
    out = reduce_sum(mul(up(Tensor(x0)), Tensor(probe)))
    backward(out)
    eps = 1e-6
    for p in params:
        grad = p.tensor.grad.copy()
        flat = p.tensor.data.reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 4)):
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = loss_value()
            flat[idx] = keep - eps
            lo = loss_value()
            flat[idx] = keep
            num = (hi - lo) / (2 * eps)
            ana = grad.reshape(-1)[idx]
            denom = max(abs(ana), abs(num), 1e-8)
            assert abs(ana - num) / denom < 1e-5, p.name
        p.tensor.grad = None
    tape.release()


# ------------------------------------------------- degenerate configurations

def test_degenerate_configs_identical_outputs():
    base = tiny_cfg()
    image = scene_for(base).image
    outs = []
    for cfg in (with_overrides(base, iterations=0),
                with_overrides(base, beta=0.0),
                with_overrides(base, diffusion_enabled=False)):
        net = MultiTaskNet(cfg)
        outs.append(net.forward(image))
    for task in (TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG):
        a = outs[0].predictions[task].data
        for other in outs[1:]:
            assert np.array_equal(a, other.predictions[task].data)


def test_single_task_skips_combination():
    cfg = tiny_cfg(tasks=("depth",))
    net = MultiTaskNet(cfg)
    assert net.ensemble is None
    result = net.forward(scene_for(cfg).image)
    assert set(result.predictions) == {TaskKind.DEPTH}
    assert result.combined_affinity[TaskKind.DEPTH] is result.own_affinity[TaskKind.DEPTH]
    assert result.predictions[TaskKind.DEPTH].data.shape == (1, 16, 16)


def test_parameter_init_independent_of_registration_order():
    """Dropping whole blocks must not reshuffle surviving weights."""
    full = MultiTaskNet(tiny_cfg())
    bare = MultiTaskNet(tiny_cfg(diffusion_enabled=False, recon_enabled=False))
    for name, p in bare.params.items():
        assert np.array_equal(p.data, full.params[name].data), name


def test_forward_deterministic():
    cfg = tiny_cfg()
    image = scene_for(cfg).image
    a = MultiTaskNet(cfg).forward(image)
    b = MultiTaskNet(cfg).forward(image)
    for task in a.predictions:
        assert np.array_equal(a.predictions[task].data, b.predictions[task].data)


# ---------------------------------------------------------------- golden size

def test_parameter_count_golden():
    """Frozen value, cross-checked by architecture arithmetic.

    Default config (C=8, scale 1/8 -> 2 stages, K=8, three tasks):
      encoder        6616   (3x3 convs 3-8-8-16-32 with biases)
      branches      30780   (fuse 1x1, two residual blocks, zero heads)
      affinity        393   (three 8x16 shrink projections + 3x3 mix logits)
      reconstruction 38364  (stems, 2 shared + 6 task up blocks, finals, heads)
    """
    net = MultiTaskNet(RunConfig(seed=0))
    assert net.parameter_count() == 76153


def test_parameter_count_is_config_function():
    a = MultiTaskNet(RunConfig(seed=0)).parameter_count()
    b = MultiTaskNet(RunConfig(seed=123)).parameter_count()
    assert a == b
    c = MultiTaskNet(with_overrides(RunConfig(seed=0), encoder_width=16)).parameter_count()
    assert c != a


# ---------------------------------------------------------------- training

def test_gradient_reaches_first_conv():
    # the prediction heads start at zero, so the trunk only sees gradient
    # once an update has moved them; warm up one step first
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    sample = scene_for(cfg)
    opt = make_optimizer(net, cfg)
    train_step(net, [sample], cfg, opt, cfg.loss_weights())
    tape = Tape()
    net.watch(tape)
    rngs = {t: pair_rng(cfg.seed, 0, t) for t in net.tasks}
    loss = batch_loss(net, [sample], cfg, cfg.loss_weights(), rngs)
    backward(loss)
    g = net.params["encoder.stem.w"].tensor.grad
    assert g is not None and float(np.abs(g).sum()) > 0.0
    net.zero_grads()
    tape.release()


def test_end_to_end_gradient_spot_check():
    """Central differences on 20 random parameters of the full pipeline."""
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    sample = scene_for(cfg)
    weights = cfg.loss_weights()
    # a couple of warmup steps move the zero heads into general position
    opt = make_optimizer(net, cfg)
    for _ in range(2):
        train_step(net, [sample], cfg, opt, weights)

    def loss_value():
        rngs = {t: pair_rng(cfg.seed, 0, t) for t in net.tasks}
        return float(batch_loss(net, [sample], cfg, weights, rngs).data)

    tape = Tape()
    net.watch(tape)
    rngs = {t: pair_rng(cfg.seed, 0, t) for t in net.tasks}
    loss = batch_loss(net, [sample], cfg, weights, rngs)
    backward(loss)

    rng = np.random.default_rng(7)
    params = net.parameters()
    eps = 1e-5
    checked = 0
    while checked < 20:
        p = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(p.data.size))
        ana = 0.0 if p.tensor.grad is None else float(p.tensor.grad.reshape(-1)[idx])
        flat = p.tensor.data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + eps
        hi = loss_value()
        flat[idx] = keep - eps
        lo = loss_value()
        flat[idx] = keep
        num = (hi - lo) / (2 * eps)
        # the difference quotient resolves ~1e-11 at this loss scale, so
        # gradients at roundoff level would fail a tighter floor spuriously
        denom = max(abs(ana), abs(num), 1e-6)
        assert abs(ana - num) / denom < 1e-4, f"{p.name}[{idx}]"
        checked += 1
    net.zero_grads()
    tape.release()


def test_overfit_single_sample():
    cfg = tiny_cfg(epochs=0)
    net = MultiTaskNet(cfg)
    sample = scene_for(cfg)
    opt = make_optimizer(net, cfg)
    weights = cfg.loss_weights()
    losses = [train_step(net, [sample], cfg, opt, weights) for _ in range(50)]
    assert all(np.isfinite(losses))
    assert losses[-1] < 0.5 * losses[0]


def test_fit_deterministic_loss_trace():
    cfg = tiny_cfg(epochs=2)
    samples = [scene_for(cfg, sid) for sid in range(4)]
    t1 = fit(MultiTaskNet(cfg), samples, cfg)
    t2 = fit(MultiTaskNet(cfg), samples, cfg)
    assert t1 == t2
    assert len(t1) == 2 * 2  # two epochs of two batches


def test_lr_decay_changes_only_the_late_trace():
    # epochs=5 puts the milestones at epochs 3 and 4; the first three
    # epochs must be bitwise identical across decay factors
    samples = [scene_for(tiny_cfg(), sid) for sid in range(4)]
    flat = fit(MultiTaskNet(tiny_cfg(epochs=5, lr_decay=1.0)), samples,
               tiny_cfg(epochs=5, lr_decay=1.0))
    decayed = fit(MultiTaskNet(tiny_cfg(epochs=5, lr_decay=1e-6)), samples,
                  tiny_cfg(epochs=5, lr_decay=1e-6))
    assert flat[:6] == decayed[:6]
    assert flat[6:] != decayed[6:]


def test_lr_decay_skipped_when_too_short():
    # a one-epoch run never reaches the clamped milestone at epoch 1,
    # so the factor has no influence on the trace
    samples = [scene_for(tiny_cfg(), sid) for sid in range(4)]
    a = fit(MultiTaskNet(tiny_cfg(lr_decay=1e-6)), samples, tiny_cfg(lr_decay=1e-6))
    b = fit(MultiTaskNet(tiny_cfg(lr_decay=1.0)), samples, tiny_cfg(lr_decay=1.0))
    assert a == b


def test_nonfinite_loss_aborts_with_culprit():
    # poison the last linear layer: divergence surfaces in the prediction
    # heads (no relu after them to mask an inf) and must abort the step
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    net.params["recon.depth.head.b"].tensor.data[:] = np.inf
    opt = make_optimizer(net, cfg)
    with pytest.raises(ContractError, match="non-finite"):
        with np.errstate(invalid="ignore", over="ignore"):
            train_step(net, [scene_for(cfg)], cfg, opt, cfg.loss_weights())


def test_evaluate_reports_all_tasks():
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    report = evaluate(net, [scene_for(cfg, sid) for sid in range(2)], cfg)
    assert set(report) == {"depth", "normal", "seg"}
    assert "rmse" in report["depth"] and "iou" in report["seg"]
    with pytest.raises(ContractError):
        evaluate(net, [], cfg)


def test_downsample_targets_laws():
    cfg = tiny_cfg()
    s = scene_for(cfg)
    t = downsample_targets(s)
    assert t[TaskKind.DEPTH].shape == (16, 16)
    assert t[TaskKind.NORMAL].shape == (3, 16, 16)
    assert t[TaskKind.SEG].shape == (16, 16)
    norms = np.sqrt((t[TaskKind.NORMAL] ** 2).sum(axis=0))
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    assert t[TaskKind.DEPTH][0, 0] == pytest.approx(s.depth[:2, :2].mean(), abs=1e-12)
    assert t[TaskKind.SEG][3, 5] == s.labels[6, 10]


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    sample = scene_for(cfg)
    opt = make_optimizer(net, cfg)
    train_step(net, [sample], cfg, opt, cfg.loss_weights())
    before = predict(net, sample)

    path = tmp_path / "model.papc"
    save_checkpoint(net, path, digest="feedbeef")
    restored = MultiTaskNet(tiny_cfg(seed=99, height=32, width=32))
    # seed 99 init differs; load must overwrite every parameter
    digest = load_checkpoint(restored, path)
    assert digest == "feedbeef"
    assert restored.step == net.step == 1
    for name, p in net.params.items():
        assert np.array_equal(p.data, restored.params[name].data), name
    after = predict(restored, sample)
    for task in before:
        assert np.array_equal(before[task], after[task])
    assert restored.init_rng.bit_generator.state == net.init_rng.bit_generator.state


def test_checkpoint_truncation_leaves_model_untouched(tmp_path):
    cfg = tiny_cfg()
    net = MultiTaskNet(cfg)
    path = tmp_path / "model.papc"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])

    victim = MultiTaskNet(tiny_cfg(seed=5, height=32, width=32))
    snapshot = {n: p.data.copy() for n, p in victim.params.items()}
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(victim, path)
    for name, p in victim.params.items():
        assert np.array_equal(p.data, snapshot[name]), name


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.papc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_single_task_checkpoint_rejected_by_three_task_model(tmp_path):
    single = MultiTaskNet(tiny_cfg(tasks=("depth",)))
    path = tmp_path / "single.papc"
    save_checkpoint(single, path)
    full = MultiTaskNet(tiny_cfg())
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(full, path)
