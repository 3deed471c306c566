"""Affinity construction invariants: stochasticity, symmetry, equivariance."""

import math

import numpy as np
import pytest

from affprop.affinity import (
    AffinityMatrix,
    CrossTaskEnsemble,
    SimilarityFn,
    combine_affinities,
    compute_affinity,
    dump_affinity,
    flatten_map,
    shrink_features,
    two_task_combine,
    unflatten_map,
)
from affprop.autodiff import Tensor, grad_check, mul, reduce_sum
from affprop.errors import ConfigError, ContractError, DimensionError
from affprop.tasks import TaskKind


def feats(n, c, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, c)) * scale)


@pytest.mark.parametrize("sim", [SimilarityFn.DOT, SimilarityFn.L1])
def test_rows_sum_to_one(sim):
    for seed in range(5):
        m = compute_affinity(feats(9, 4, seed), sim, (3, 3))
        sums = m.values.data.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        assert (m.values.data >= 0.0).all()


@pytest.mark.parametrize("sim", [SimilarityFn.DOT, SimilarityFn.L1])
def test_pre_normalization_scores_symmetric(sim):
    m = compute_affinity(feats(12, 5, 3), sim, (3, 4))
    assert m.pre_norm is not None
    np.testing.assert_allclose(m.pre_norm, m.pre_norm.T, atol=1e-9)


def test_single_position_gives_one():
    m = compute_affinity(feats(1, 6, 0), SimilarityFn.DOT, (1, 1))
    np.testing.assert_array_equal(m.values.data, [[1.0]])


def test_identical_rows_give_uniform_attention():
    x = Tensor(np.tile(np.array([0.3, -1.2, 0.7]), (6, 1)))
    for sim in SimilarityFn:
        m = compute_affinity(x, sim, (2, 3))
        np.testing.assert_allclose(m.values.data, 1.0 / 6.0, atol=1e-12)


def test_two_position_hand_value():
    # orthogonal unit rows: diagonal score 1, off-diagonal 0
    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    m = compute_affinity(x, SimilarityFn.DOT, (1, 2))
    e = math.e
    np.testing.assert_allclose(m.values.data,
                               [[e / (e + 1), 1 / (e + 1)],
                                [1 / (e + 1), e / (e + 1)]], atol=1e-12)


def test_dot_similarity_scale_invariant_per_row():
    x = feats(8, 3, 11)
    scaled = Tensor(x.data * np.array([3.0, 0.5, 7.0, 1.0, 2.0, 9.0, 0.1, 4.0])[:, None])
    a = compute_affinity(x, SimilarityFn.DOT, (2, 4)).values.data
    b = compute_affinity(scaled, SimilarityFn.DOT, (2, 4)).values.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_permutation_equivariance():
    rng = np.random.default_rng(17)
    for sim in SimilarityFn:
        for trial in range(5):
            x = feats(8, 4, 100 + trial)
            perm = rng.permutation(8)
            m = compute_affinity(x, sim, (2, 4)).values.data
            mp = compute_affinity(Tensor(x.data[perm]), sim, (2, 4)).values.data
            np.testing.assert_allclose(mp, m[perm][:, perm], atol=1e-12)


def test_grid_mismatch_rejected():
    with pytest.raises(DimensionError):
        compute_affinity(feats(8, 4, 0), SimilarityFn.DOT, (3, 3))
    with pytest.raises(DimensionError):
        compute_affinity(Tensor(np.zeros((2, 3, 4))), SimilarityFn.DOT, (2, 3))


def test_flatten_unflatten_round_trip():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    rows = flatten_map(x)
    assert rows.data.shape == (12, 2)
    back = unflatten_map(rows, (3, 4))
    np.testing.assert_array_equal(back.data, x.data)


def test_shrink_features_shapes():
    x = Tensor(np.ones((4, 3, 3)))
    proj = Tensor(np.ones((2, 4, 1, 1)))
    assert shrink_features(x, proj).data.shape == (2, 3, 3)
    with pytest.raises(DimensionError):
        shrink_features(x, Tensor(np.ones((2, 3, 1, 1))))
    with pytest.raises(ConfigError):
        shrink_features(Tensor(np.ones((3, 2, 2))), proj)


# -- cross-task mixing -----------------------------------------------------


def test_ensemble_initial_weights_favour_self():
    ens = CrossTaskEnsemble([TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG])
    for task in ens.tasks:
        w = ens.weight_values(task)
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)
        expect = np.full(3, 0.2)
        expect[ens.tasks.index(task)] = 0.6
        np.testing.assert_allclose(w, expect, atol=1e-9)


def test_ensemble_requires_two_tasks():
    with pytest.raises(ConfigError):
        CrossTaskEnsemble([TaskKind.DEPTH])


def test_combined_matrix_still_row_stochastic():
    tasks = [TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG]
    ens = CrossTaskEnsemble(tasks)
    mats = [compute_affinity(feats(6, 4, 30 + i), SimilarityFn.DOT, (2, 3),
                             task=t) for i, t in enumerate(tasks)]
    for target in tasks:
        combined = combine_affinities(mats, ens, target)
        np.testing.assert_allclose(combined.values.data.sum(axis=1), 1.0,
                                   atol=1e-9)
        assert combined.task is target
        # lies inside the convex hull of the inputs
        stack = np.stack([m.values.data for m in mats])
        assert (combined.values.data <= stack.max(axis=0) + 1e-12).all()
        assert (combined.values.data >= stack.min(axis=0) - 1e-12).all()


def test_two_task_combine_matches_general_path():
    tasks = [TaskKind.DEPTH, TaskKind.NORMAL]
    ens = CrossTaskEnsemble(tasks)
    a = compute_affinity(feats(4, 3, 40), SimilarityFn.DOT, (2, 2), task=tasks[0])
    b = compute_affinity(feats(4, 3, 41), SimilarityFn.DOT, (2, 2), task=tasks[1])
    lhs = two_task_combine(a, b, ens, TaskKind.DEPTH).values.data
    rhs = combine_affinities([a, b], ens, TaskKind.DEPTH).values.data
    np.testing.assert_array_equal(lhs, rhs)


def test_combine_shape_checks():
    tasks = [TaskKind.DEPTH, TaskKind.NORMAL]
    ens = CrossTaskEnsemble(tasks)
    a = compute_affinity(feats(4, 3, 50), SimilarityFn.DOT, (2, 2))
    b = compute_affinity(feats(9, 3, 51), SimilarityFn.DOT, (3, 3))
    with pytest.raises(DimensionError):
        combine_affinities([a, b], ens, TaskKind.DEPTH)
    with pytest.raises(ContractError):
        combine_affinities([a], ens, TaskKind.DEPTH)


# -- gradients through the whole chain ------------------------------------


def test_fd_through_shrink_affinity_combine():
    rng = np.random.default_rng(60)
    fmap = Tensor(rng.standard_normal((4, 2, 3)))
    proj_a = Tensor(rng.standard_normal((2, 4, 1, 1)) * 0.7)
    proj_b = Tensor(rng.standard_normal((2, 4, 1, 1)) * 0.7)
    w = Tensor(rng.standard_normal((6, 6)))
    tasks = [TaskKind.DEPTH, TaskKind.NORMAL]
    ens = CrossTaskEnsemble(tasks)

    def head(f, pa, pb):
        rows_a = flatten_map(shrink_features(f, pa))
        rows_b = flatten_map(shrink_features(f, pb))
        ma = compute_affinity(rows_a, SimilarityFn.DOT, (2, 3), task=tasks[0])
        mb = compute_affinity(rows_b, SimilarityFn.L1, (2, 3), task=tasks[1])
        combined = combine_affinities([ma, mb], ens, TaskKind.DEPTH)
        return reduce_sum(mul(combined.values, w))

    assert grad_check(head, [fmap, proj_a, proj_b]) < 1e-5


def test_fd_through_mixing_logits():
    rng = np.random.default_rng(61)
    tasks = [TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG]
    mats = [compute_affinity(feats(4, 3, 70 + i), SimilarityFn.DOT, (2, 2),
                             task=t) for i, t in enumerate(tasks)]
    w = Tensor(rng.standard_normal((4, 4)))

    def head(logits):
        ens = CrossTaskEnsemble(tasks)
        ens.params[TaskKind.DEPTH].tensor.data = logits.data
        ens.params[TaskKind.DEPTH].tensor.tape = logits.tape
        ens.params[TaskKind.DEPTH].tensor.node_id = logits.node_id
        combined = combine_affinities(mats, ens, TaskKind.DEPTH)
        return reduce_sum(mul(combined.values, w))

    assert grad_check(head, Tensor(np.array([1.1, 0.0, -0.4]))) < 1e-5


def test_dump_affinity_writes_pgm(tmp_path):
    m = compute_affinity(feats(16, 4, 80), SimilarityFn.DOT, (4, 4),
                         task=TaskKind.DEPTH, scale_denom=8)
    path = dump_affinity(m, 5, tmp_path)
    assert path.endswith("affinity_depth_8_5.pgm")
    head = open(path, "rb").read(2)
    assert head == b"P5"
    with pytest.raises(ContractError):
        dump_affinity(m, 16, tmp_path)
