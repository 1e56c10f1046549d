"""Driving-noise simulation and the scenario tree."""

import math

import numpy as np
import pytest

import jumpbsde as jb
from jumpbsde.errors import ResourceLimitError


# ---------------------------------------------------------------------------
# grids and marks
# ---------------------------------------------------------------------------

def test_make_time_grid_single_step():
    grid = jb.make_time_grid(1.0, 1)
    assert np.array_equal(grid.nodes, [0.0, 1.0])


def test_make_time_grid_quarters():
    grid = jb.make_time_grid(2.0, 4)
    assert np.array_equal(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert grid.nodes[-1] == 2.0


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 4), (-1.0, 4), (np.inf, 4)])
def test_make_time_grid_rejects(T, N):
    with pytest.raises(ValueError):
        jb.make_time_grid(T, N)


def test_mark_space_rejects_degenerate():
    with pytest.raises(ValueError):
        jb.make_mark_space([], [])
    with pytest.raises(ValueError):
        jb.make_mark_space([[0.0]], [1.0])        # zero vector not a mark
    with pytest.raises(ValueError):
        jb.make_mark_space([[1.0]], [0.0])        # lambda must be > 0
    with pytest.raises(ValueError):
        jb.make_mark_space([[1.0], [2.0]], [1.0])  # length mismatch


def test_mark_space_totals(two_marks):
    assert two_marks.m == 2
    assert two_marks.total_intensity == 4.0
    # sectional norm: (sum |v|^p lambda)^1/p
    assert np.isclose(two_marks.section_norm([1.0, 1.0], 2.0), 2.0)


# ---------------------------------------------------------------------------
# Brownian simulation
# ---------------------------------------------------------------------------

def test_brownian_deterministic(unit_grid):
    a = jb.simulate_brownian(unit_grid, 1, 100, seed=42)
    b = jb.simulate_brownian(unit_grid, 1, 100, seed=42)
    assert np.array_equal(a.brownian_increments, b.brownian_increments)


def test_brownian_prefix_property(unit_grid):
    small = jb.simulate_brownian(unit_grid, 2, 50, seed=5)
    large = jb.simulate_brownian(unit_grid, 2, 500, seed=5)
    assert np.array_equal(small.brownian_increments,
                          large.brownian_increments[:50])


def test_brownian_path_range_concatenation(unit_grid):
    whole = jb.simulate_brownian(unit_grid, 1, 80, seed=3)
    lo = jb.simulate_brownian(unit_grid, 1, 30, seed=3, path_start=0)
    hi = jb.simulate_brownian(unit_grid, 1, 50, seed=3, path_start=30)
    assert np.array_equal(
        whole.brownian_increments,
        np.concatenate([lo.brownian_increments, hi.brownian_increments]))


def test_brownian_moments():
    # N=1: increment ~ Normal(0, dt); CLT band on the mean, 5% on the variance
    grid = jb.make_time_grid(1.0, 1)
    batch = jb.simulate_brownian(grid, 1, 100_000, seed=7)
    inc = batch.brownian_increments[:, 0, 0]
    dt = grid.dt
    assert abs(inc.mean()) < 4 * math.sqrt(dt / inc.size)
    assert abs(inc.var() - dt) < 0.05 * dt


def test_brownian_rejects_bad_args(unit_grid):
    with pytest.raises(ValueError):
        jb.simulate_brownian(unit_grid, 0, 10, seed=1)
    with pytest.raises(ValueError):
        jb.simulate_brownian(unit_grid, 1, 0, seed=1)
    with pytest.raises(ValueError):
        jb.simulate_brownian(unit_grid, 1, 10, seed=1.5)


# ---------------------------------------------------------------------------
# Poisson measure simulation
# ---------------------------------------------------------------------------

def test_poisson_rejects_empty_marks(unit_grid):
    with pytest.raises(ValueError):
        jb.simulate_poisson_measure(unit_grid, None, 10, seed=1)
    with pytest.raises(ValueError):
        jb.make_mark_space([], [])


def test_poisson_mean_count(unit_grid, single_mark):
    # rate 2 on (0,1]: mean count within 4*sqrt(2/n)
    batch = jb.simulate_poisson_measure(unit_grid, single_mark, 100_000, seed=7)
    counts, _ = batch.jump_counts()
    assert abs(counts.mean() - 2.0) < 4 * math.sqrt(2.0 / counts.size)
    assert abs(counts.var() - 2.0) < 0.05 * 2.0


def test_poisson_mark_fractions(unit_grid, two_marks):
    # lambda = (1, 3): mark-2 fraction within 2% of 0.75
    batch = jb.simulate_poisson_measure(unit_grid, two_marks, 100_000, seed=11)
    frac = (batch.jump_mark_idx == 1).mean()
    assert abs(frac - 0.75) < 0.02 * 0.75


def test_poisson_times_sorted_in_range(unit_grid, single_mark):
    batch = jb.simulate_poisson_measure(unit_grid, single_mark, 1000, seed=3)
    for k in range(0, 1000, 97):
        events = batch.jump_events(k)
        times = [t for t, _ in events]
        assert times == sorted(times)
        assert all(0.0 < t <= 1.0 for t in times)


def test_poisson_deterministic(unit_grid, single_mark):
    a = jb.simulate_poisson_measure(unit_grid, single_mark, 500, seed=9)
    b = jb.simulate_poisson_measure(unit_grid, single_mark, 500, seed=9)
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.jump_mark_idx, b.jump_mark_idx)
    # per-path events are independent of the batch size
    big = jb.simulate_poisson_measure(unit_grid, single_mark, 2000, seed=9)
    for k in (0, 17, 499):
        assert a.jump_events(k) == big.jump_events(k)


def test_batch_json_round_trip(unit_grid, single_mark):
    batch = jb.simulate_paths(unit_grid, single_mark, 2, 20, seed=13)
    back = jb.PathBatch.from_json_dict(batch.to_json_dict())
    assert np.array_equal(batch.brownian_increments, back.brownian_increments)
    assert np.array_equal(batch.jump_times, back.jump_times)
    assert np.array_equal(batch.jump_mark_idx, back.jump_mark_idx)
    assert np.array_equal(batch.jump_offsets, back.jump_offsets)


def test_state_paths_counts(unit_grid, single_mark):
    batch = jb.simulate_paths(unit_grid, single_mark, 1, 200, seed=21)
    bvals, counts = batch.state_paths()
    total, per_mark = batch.jump_counts()
    assert np.array_equal(counts[:, -1, 0], per_mark[:, 0].astype(float))
    assert np.allclose(bvals[:, -1, 0],
                       batch.brownian_increments[:, :, 0].sum(axis=1))


# ---------------------------------------------------------------------------
# scenario tree
# ---------------------------------------------------------------------------

def test_tree_single_step_leaf_probabilities():
    grid = jb.make_time_grid(1.0, 1)
    marks = jb.make_mark_space([[1.0]], [1.0])
    tree = jb.build_scenario_tree(grid, marks, 1)
    probs = sorted(tree.node_probabilities(1))
    e = math.exp(-1.0)
    expected = sorted([0.5 * e, 0.5 * e, 0.5 * (1 - e), 0.5 * (1 - e)])
    assert np.allclose(probs, expected, atol=1e-15)
    assert abs(sum(probs) - 1.0) < 1e-12


def test_tree_two_steps_sixteen_leaves():
    grid = jb.make_time_grid(1.0, 2)
    marks = jb.make_mark_space([[1.0]], [1.0])
    tree = jb.build_scenario_tree(grid, marks, 1)
    leaf_probs = tree.node_probabilities(2)
    assert leaf_probs.size == 16
    assert abs(leaf_probs.sum() - 1.0) < 1e-12


def test_tree_depth_probabilities_sum_to_one():
    grid = jb.make_time_grid(1.0, 6)
    marks = jb.make_mark_space([[1.0], [2.0]], [1.0, 0.5])
    tree = jb.build_scenario_tree(grid, marks, 1)
    for k in range(7):
        assert abs(tree.state_probs(k).sum() - 1.0) < 1e-12
        assert abs(tree.node_probabilities(k).sum() - 1.0) < 1e-12


def test_tree_node_cap():
    grid = jb.make_time_grid(1.0, 3)
    marks = jb.make_mark_space([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
    with pytest.raises(ResourceLimitError, match="100"):
        jb.build_scenario_tree(grid, marks, 2, node_cap=100)  # (4*3)^3 = 1728


def test_tree_implicit_mode_blocks_enumeration():
    grid = jb.make_time_grid(1.0, 40)
    marks = jb.make_mark_space([[1.0]], [1.0])
    tree = jb.build_scenario_tree(grid, marks, 1, node_cap=None)
    assert not tree.explicit
    with pytest.raises(ResourceLimitError):
        tree.enumerate_paths()


def test_tree_history_decoding():
    grid = jb.make_time_grid(1.0, 2)
    marks = jb.make_mark_space([[1.0]], [1.0])
    tree = jb.build_scenario_tree(grid, marks, 1)
    hist = tree.node_history(2, 0)
    assert hist["depth"] == 2
    assert len(hist["brownian_signs"]) == 2
    assert len(hist["jump_history"]) == 2


def test_tree_one_jump_bias_first_order():
    # linear problem: E[count] under the tree vs Lambda*T; halving dt must
    # cut the bias by ~2 (the at-most-one-jump lumping is O(dt^2) per step)
    marks = jb.make_mark_space([[1.0]], [2.0])
    errs = []
    for N in (8, 16):
        grid = jb.make_time_grid(1.0, N)
        tree = jb.build_scenario_tree(grid, marks, 1, node_cap=None)
        counts = tree.levels[N].jump_counts[:, 0].astype(float)
        mean_count = float(np.einsum("n,n->", tree.state_probs(N), counts))
        errs.append(abs(mean_count - 2.0))
    assert 1.7 <= errs[0] / errs[1] <= 2.3


def test_tree_json_dict(single_mark):
    grid = jb.make_time_grid(1.0, 2)
    tree = jb.build_scenario_tree(grid, single_mark, 1)
    doc = tree.to_json_dict()
    assert doc["branching"] == 4
    assert len(doc["levels"]) == 3
    assert abs(sum(doc["branch_probs"]) - 1.0) < 1e-12


def test_tree_expectation_helper(single_mark):
    grid = jb.make_time_grid(1.0, 4)
    tree = jb.build_scenario_tree(grid, single_mark, 1)
    # E[B_k] = 0 and E[B_k^2] = t_k, exactly on the lattice
    for k in (1, 2, 4):
        b = tree.brownian_values(k)[:, 0]
        assert abs(tree.expectation(k, b)) < 1e-14
        assert abs(tree.expectation(k, b * b) - grid.nodes[k]) < 1e-13


def test_merge_batches_rejects_mismatch(unit_grid, single_mark):
    bm = jb.simulate_brownian(unit_grid, 1, 10, seed=1)
    other_grid = jb.make_time_grid(1.0, 5)
    jp = jb.simulate_poisson_measure(other_grid, single_mark, 10, seed=1)
    with pytest.raises(ValueError):
        jb.merge_batches(bm, jp)
    jp2 = jb.simulate_poisson_measure(unit_grid, single_mark, 20, seed=1)
    with pytest.raises(ValueError):
        jb.merge_batches(bm, jp2)
