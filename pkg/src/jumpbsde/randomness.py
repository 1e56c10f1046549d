"""Driving noise: Brownian/Poisson path batches and the exact scenario tree.

Path simulation is counter-based (see rng): the increment of path k at step j
is a pure function of (seed, k, j), so batches are reproducible independent of
batch size, chunking, or thread count. The scenario tree discretizes the same
two noises exactly: per step, 2^d Brownian sign branches of probability
(1/2)^d each (increment +-sqrt(dt) per dimension) times (1+m) jump branches
with p_none = exp(-Lambda dt) and p_i = (lambda_i/Lambda)(1 - exp(-Lambda dt)).
Lumping multi-jump mass into the single-jump branch gives an O(dt^2)-per-step
bias, matching the first-order scheme it serves as an oracle for.

All containers are immutable after construction and safe to share across
threads.
"""

import math
from dataclasses import dataclass, replace, field

import numpy as np

from . import rng
from .errors import ResourceLimitError

__all__ = [
    "TimeGrid",
    "MarkSpace",
    "PathBatch",
    "ScenarioTree",
    "make_time_grid",
    "make_mark_space",
    "simulate_brownian",
    "simulate_poisson_measure",
    "simulate_paths",
    "merge_batches",
    "build_scenario_tree",
]

DEFAULT_NODE_CAP = 10_000_000


# ---------------------------------------------------------------------------
# grids and marks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    horizon: float
    steps: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self):
        return self.horizon / self.steps

    def step_of(self, times):
        """Index j of the step (t_j, t_{j+1}] containing each time."""
        j = np.searchsorted(self.nodes, times, side="left") - 1
        return np.clip(j, 0, self.steps - 1)

    def to_json_dict(self):
        return {"horizon": self.horizon, "steps": self.steps}


def make_time_grid(T, N):
    if not (np.isfinite(T) and T > 0):
        raise ValueError(f"horizon T must be a positive real, got {T!r}")
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError(f"steps N must be a positive integer, got {N!r}")
    nodes = np.linspace(0.0, float(T), int(N) + 1)
    if not (np.all(np.diff(nodes) > 0) and nodes[-1] == T):
        raise ValueError(f"degenerate grid for T={T}, N={N}")
    nodes.setflags(write=False)
    return TimeGrid(float(T), int(N), nodes)


@dataclass(frozen=True)
class MarkSpace:
    """Finite set of jump marks e_1..e_m with per-mark intensities."""

    marks: np.ndarray        # (m, mark_dim), no zero vector
    intensities: np.ndarray  # (m,), all > 0

    @property
    def m(self):
        return self.marks.shape[0]

    @property
    def total_intensity(self):
        return float(np.sum(self.intensities))

    @property
    def mark_norms(self):
        return np.sqrt(np.sum(self.marks ** 2, axis=1))

    def section_norm(self, v, p):
        """Sectional norm (sum_i |v_i|^p lambda_i)^(1/p) along the last axis."""
        v = np.asarray(v, dtype=float)
        return np.einsum("...m,m->...", np.abs(v) ** p, self.intensities) ** (1.0 / p)

    def to_json_dict(self):
        return {
            "marks": self.marks.tolist(),
            "intensities": self.intensities.tolist(),
        }


def make_mark_space(marks, intensities):
    marks = np.atleast_2d(np.asarray(marks, dtype=float))
    if marks.ndim != 2 or marks.shape[0] == 0:
        raise ValueError("mark list must be non-empty")
    intensities = np.asarray(intensities, dtype=float).reshape(-1)
    if intensities.shape[0] != marks.shape[0]:
        raise ValueError(
            f"{marks.shape[0]} marks but {intensities.shape[0]} intensities"
        )
    if not np.all(np.isfinite(marks)):
        raise ValueError("marks must be finite")
    if np.any(np.sqrt(np.sum(marks ** 2, axis=1)) == 0.0):
        raise ValueError("the zero vector is not an admissible mark")
    if not np.all(np.isfinite(intensities)) or np.any(intensities <= 0):
        raise ValueError("intensities must be positive reals")
    marks.setflags(write=False)
    intensities.setflags(write=False)
    return MarkSpace(marks, intensities)


# ---------------------------------------------------------------------------
# path batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathBatch:
    """Sampled Brownian increments and marked jump events.

    The jump part is stored CSR-style: events of path k are
    (jump_times[o_k:o_{k+1}], jump_mark_idx[o_k:o_{k+1}]) with
    o = jump_offsets, sorted by time within each path. jump_steps caches the
    step index of each event (a jump at tau in (t_j, t_{j+1}] belongs to
    step j, the left-endpoint/predictable convention).
    """

    grid: TimeGrid
    d: int
    n_paths: int
    seed: int
    path_start: int = 0
    brownian_increments: np.ndarray | None = None      # (n, N, d)
    marks: MarkSpace | None = None
    jump_times: np.ndarray | None = None               # (total_jumps,)
    jump_mark_idx: np.ndarray | None = None            # (total_jumps,)
    jump_offsets: np.ndarray | None = None             # (n+1,)
    jump_steps: np.ndarray | None = None               # (total_jumps,)

    @property
    def has_brownian(self):
        return self.brownian_increments is not None

    @property
    def has_jumps(self):
        return self.jump_times is not None

    def jump_events(self, k):
        """Events of path k as a list of (time, mark index), sorted by time."""
        if not self.has_jumps:
            raise ValueError("batch carries no jump part")
        a, b = self.jump_offsets[k], self.jump_offsets[k + 1]
        return list(zip(self.jump_times[a:b].tolist(),
                        self.jump_mark_idx[a:b].tolist()))

    def jump_counts(self):
        """Total jumps per path, and per (path, mark)."""
        if not self.has_jumps:
            raise ValueError("batch carries no jump part")
        per_path = np.diff(self.jump_offsets)
        path_of = np.repeat(np.arange(self.n_paths), per_path)
        per_mark = np.zeros((self.n_paths, self.marks.m), dtype=np.int64)
        np.add.at(per_mark, (path_of, self.jump_mark_idx), 1)
        return per_path, per_mark

    def state_paths(self):
        """Cumulative state at every grid node.

        Returns (brownian_values, counts): Brownian value (n, N+1, d) and
        per-mark jump counts (n, N+1, m). A jump in step j is counted from
        node j+1 on.
        """
        n, N = self.n_paths, self.grid.steps
        if self.has_brownian:
            bvals = np.zeros((n, N + 1, self.d))
            np.cumsum(self.brownian_increments, axis=1, out=bvals[:, 1:, :])
        else:
            bvals = np.zeros((n, N + 1, self.d))
        m = self.marks.m if self.marks is not None else 0
        counts = np.zeros((n, N + 1, m))
        if self.has_jumps and self.jump_times.size:
            per_path = np.diff(self.jump_offsets)
            path_of = np.repeat(np.arange(n), per_path)
            np.add.at(counts, (path_of, self.jump_steps + 1, self.jump_mark_idx), 1.0)
            np.cumsum(counts, axis=1, out=counts)
        return bvals, counts

    def to_json_dict(self):
        out = {
            "grid": self.grid.to_json_dict(),
            "d": self.d,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "path_start": self.path_start,
        }
        if self.has_brownian:
            out["brownian_increments"] = self.brownian_increments.tolist()
        if self.has_jumps:
            out["marks"] = self.marks.to_json_dict()
            out["jump_events"] = [
                [[t, int(i)] for t, i in self.jump_events(k)]
                for k in range(self.n_paths)
            ]
        return out

    @classmethod
    def from_json_dict(cls, data):
        grid = make_time_grid(data["grid"]["horizon"], data["grid"]["steps"])
        batch = cls(grid=grid, d=int(data["d"]), n_paths=int(data["n_paths"]),
                    seed=int(data["seed"]), path_start=int(data.get("path_start", 0)))
        if "brownian_increments" in data:
            inc = np.asarray(data["brownian_increments"], dtype=float)
            inc.setflags(write=False)
            batch = replace(batch, brownian_increments=inc)
        if "jump_events" in data:
            marks = make_mark_space(data["marks"]["marks"],
                                    data["marks"]["intensities"])
            times, idx, offsets = [], [], [0]
            for events in data["jump_events"]:
                for t, i in events:
                    times.append(t)
                    idx.append(i)
                offsets.append(len(times))
            batch = replace(
                batch, marks=marks,
                **_freeze_jumps(grid, np.asarray(times, dtype=float),
                                np.asarray(idx, dtype=np.int64),
                                np.asarray(offsets, dtype=np.int64)),
            )
        return batch


def _freeze_jumps(grid, times, mark_idx, offsets):
    steps = grid.step_of(times).astype(np.int64) if times.size else times.astype(np.int64)
    for a in (times, mark_idx, offsets, steps):
        a.setflags(write=False)
    return {"jump_times": times, "jump_mark_idx": mark_idx,
            "jump_offsets": offsets, "jump_steps": steps}


def _check_sim_args(grid, n_paths, seed):
    if not isinstance(grid, TimeGrid):
        raise ValueError("grid must be a TimeGrid")
    if not (isinstance(n_paths, (int, np.integer)) and n_paths >= 1):
        raise ValueError(f"n_paths must be a positive integer, got {n_paths!r}")
    if not isinstance(seed, (int, np.integer)):
        raise ValueError(f"seed must be an integer, got {seed!r}")


def simulate_brownian(grid, d, n_paths, seed, path_start=0):
    """Brownian part: increments Normal(0, dt I_d) per (path, step).

    The increment at (path k, step j) depends only on (seed, k, j, dim), so
    generating [0, n) in one call or as disjoint path ranges (via path_start)
    yields bit-identical values.
    """
    _check_sim_args(grid, n_paths, seed)
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"dimension d must be a positive integer, got {d!r}")
    N = grid.steps
    paths = (np.arange(path_start, path_start + n_paths, dtype=np.uint64)
             .reshape(-1, 1, 1))
    slots = (np.arange(N, dtype=np.uint64).reshape(1, -1, 1) * np.uint64(d)
             + np.arange(d, dtype=np.uint64).reshape(1, 1, -1))
    inc = math.sqrt(grid.dt) * rng.normal(seed, rng.STREAM_BROWNIAN, paths, slots)
    inc.setflags(write=False)
    return PathBatch(grid=grid, d=int(d), n_paths=int(n_paths), seed=int(seed),
                     path_start=int(path_start), brownian_increments=inc)


def simulate_poisson_measure(grid, marks, n_paths, seed, path_start=0):
    """Jump part: per path a Poisson process of rate Lambda on (0, T], each
    event carrying mark e_i with probability lambda_i / Lambda.

    Gap g of path k is keyed by (seed, k, g); its mark by (seed, k, g) on a
    separate stream. Reproducible independent of n_paths.
    """
    _check_sim_args(grid, n_paths, seed)
    if not isinstance(marks, MarkSpace):
        raise ValueError("marks must be a MarkSpace (non-empty mark list)")
    lam_total = marks.total_intensity
    T = grid.horizon
    paths = np.arange(path_start, path_start + n_paths, dtype=np.uint64)

    times_per_round = []
    acc = np.zeros(n_paths)
    g = 0
    while True:
        u = rng.uniform(seed, rng.STREAM_JUMP_GAP, paths, np.uint64(g))
        acc = acc + (-np.log(u) / lam_total)
        alive = acc <= T
        if not alive.any():
            break
        times_per_round.append((np.where(alive)[0], acc[alive], g))
        g += 1
        if g > 64 + int(8 * lam_total * T):  # astronomically unlikely
            raise RuntimeError("jump count bound exceeded; check intensities")

    counts = np.zeros(n_paths, dtype=np.int64)
    for idx, _, _ in times_per_round:
        counts[idx] += 1
    offsets = np.zeros(n_paths + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    times = np.empty(offsets[-1])
    mark_idx = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    cum_prob = np.cumsum(marks.intensities) / lam_total
    for idx, t_vals, g_idx in times_per_round:
        u2 = rng.uniform(seed, rng.STREAM_JUMP_MARK, paths[idx], np.uint64(g_idx))
        pos = cursor[idx]
        times[pos] = t_vals
        mark_idx[pos] = np.searchsorted(cum_prob, u2, side="left")
        cursor[idx] += 1

    return PathBatch(grid=grid, d=0, n_paths=int(n_paths), seed=int(seed),
                     path_start=int(path_start), marks=marks,
                     **_freeze_jumps(grid, times, mark_idx, offsets))


def merge_batches(brownian_part, jump_part):
    """Combine a Brownian-part and a jump-part batch over the same grid."""
    if brownian_part.grid.to_json_dict() != jump_part.grid.to_json_dict():
        raise ValueError("batches were simulated on different grids")
    if (brownian_part.n_paths, brownian_part.path_start) != (
            jump_part.n_paths, jump_part.path_start):
        raise ValueError("batches cover different path ranges")
    return replace(brownian_part, marks=jump_part.marks,
                   jump_times=jump_part.jump_times,
                   jump_mark_idx=jump_part.jump_mark_idx,
                   jump_offsets=jump_part.jump_offsets,
                   jump_steps=jump_part.jump_steps)


def simulate_paths(grid, marks, d, n_paths, seed, path_start=0):
    """Both noises in one batch (independent streams under the same seed)."""
    return merge_batches(
        simulate_brownian(grid, d, n_paths, seed, path_start),
        simulate_poisson_measure(grid, marks, n_paths, seed, path_start),
    )


# ---------------------------------------------------------------------------
# scenario tree
# ---------------------------------------------------------------------------

def _force_unit_sum(probs):
    """Nudge so that float(np.einsum('nb,b->n', ones, probs)) == 1 exactly.

    The solver's conditional expectations reduce branch values with this very
    einsum kernel; forcing the weight sum to 1 under the same reduction makes
    constants (times a power of two) reproduce bitwise through the recursion.
    """
    probs = probs.copy()
    ones = np.ones((1, probs.size))
    for _ in range(10):
        s = float(np.einsum("nb,b->n", ones, probs)[0])
        if s == 1.0:
            return probs
        probs[np.argmax(probs)] += 1.0 - s
    raise AssertionError("branch probabilities failed to normalize exactly")


@dataclass(frozen=True)
class _Level:
    """Distinct reachable states at one depth of the lattice."""

    codes: np.ndarray        # (n_k,), sorted state codes
    up_counts: np.ndarray    # (n_k, d)
    jump_counts: np.ndarray  # (n_k, m)
    probs: np.ndarray        # (n_k,)


class ScenarioTree:
    """Exact product tree: binomial Brownian x at-most-one-jump branching.

    A node at depth k is a length-k sequence of branch indices (Brownian sign
    vector + jump outcome per step); there are branching^k of them. Because
    problem data depend on the state (Brownian value, per-mark jump counts)
    only, conditional expectations collapse exactly onto the recombined state
    lattice, which is what backward induction uses; full node enumeration
    (histories, leaf probabilities) is available when branching^N is at most
    the node cap. Immutable after construction.
    """

    def __init__(self, grid, marks, d, node_cap, sign_vectors, branch_jump,
                 branch_probs, levels, children):
        self.grid = grid
        self.marks = marks
        self.d = d
        self.node_cap = node_cap
        self.sign_vectors = sign_vectors      # (b, d) of +-1
        self.branch_jump = branch_jump        # (b,) -1 = no jump, else mark index
        self.branch_probs = branch_probs      # (b,), exact unit sum
        self.levels = levels                  # list of _Level, length N+1
        self.children = children              # per depth: (n_k, b) indices

    @property
    def branching(self):
        return self.branch_probs.size

    @property
    def n_leaves(self):
        return self.branching ** self.grid.steps  # Python int, exact

    @property
    def explicit(self):
        """Whether full-tree node enumeration is within the cap."""
        return self.node_cap is not None and self.n_leaves <= self.node_cap

    def n_states(self, depth):
        return self.levels[depth].codes.size

    def brownian_values(self, depth):
        """Brownian state per lattice node at a depth: (2u - k) sqrt(dt)."""
        lev = self.levels[depth]
        return (2.0 * lev.up_counts - depth) * math.sqrt(self.grid.dt)

    def state_probs(self, depth):
        return self.levels[depth].probs

    def expectation(self, depth, values):
        """Exact expectation of per-state values at a depth."""
        return float(np.einsum("nb,b->n", np.asarray(values)[None, :],
                               self.levels[depth].probs)[0])

    # -- full-tree (history) view: explicit trees only ----------------------

    def _require_explicit(self, what):
        if not self.explicit:
            raise ResourceLimitError(
                f"{what} requires explicit node enumeration: "
                f"{self.n_leaves} leaves exceed the node cap "
                f"({self.node_cap if self.node_cap is not None else 'disabled'})"
            )

    def enumerate_paths(self):
        """All branch-index histories: (ids, state_idx, probs).

        state_idx has shape (n_hist, N+1) indexing each depth's level arrays;
        probs are the exact per-history probabilities.
        """
        self._require_explicit("path enumeration")
        N, b = self.grid.steps, self.branching
        n_hist = self.n_leaves
        ids = np.arange(n_hist, dtype=np.int64)
        state_idx = np.zeros((n_hist, N + 1), dtype=np.int64)
        probs = np.ones(n_hist)
        for k in range(N):
            digit = (ids // (b ** (N - 1 - k))) % b
            state_idx[:, k + 1] = self.children[k][state_idx[:, k], digit]
            probs *= self.branch_probs[digit]
        return ids, state_idx, probs

    def node_probabilities(self, depth):
        """Full-tree node probabilities at a depth (explicit trees only)."""
        self._require_explicit("node probabilities")
        b = self.branching
        ids = np.arange(b ** depth, dtype=np.int64)
        probs = np.ones(ids.size)
        for k in range(depth):
            probs *= self.branch_probs[(ids // (b ** (depth - 1 - k))) % b]
        return probs

    def node_history(self, depth, node_id):
        """(depth, Brownian sign history, jump history) of one full-tree node."""
        self._require_explicit("node history")
        b = self.branching
        digits = [(node_id // (b ** (depth - 1 - k))) % b for k in range(depth)]
        signs = [self.sign_vectors[i].tolist() for i in digits]
        jumps = [int(self.branch_jump[i]) for i in digits]
        return {"depth": depth, "brownian_signs": signs, "jump_history": jumps}

    def to_json_dict(self):
        out = {
            "grid": self.grid.to_json_dict(),
            "marks": self.marks.to_json_dict(),
            "d": self.d,
            "branching": self.branching,
            "branch_signs": self.sign_vectors.tolist(),
            "branch_jump": self.branch_jump.tolist(),
            "branch_probs": self.branch_probs.tolist(),
            "levels": [
                {
                    "up_counts": lev.up_counts.tolist(),
                    "jump_counts": lev.jump_counts.tolist(),
                    "probability": lev.probs.tolist(),
                }
                for lev in self.levels
            ],
        }
        return out


def build_scenario_tree(grid, marks, d, node_cap=DEFAULT_NODE_CAP):
    """Construct the scenario tree for (grid, marks, d).

    node_cap bounds the full (non-recombined) leaf count branching^N; pass
    node_cap=None to disable the cap, which also disables the explicit
    node-enumeration APIs and leaves only the exact lattice recursion.
    """
    if not isinstance(marks, MarkSpace):
        raise ValueError("marks must be a MarkSpace")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"dimension d must be a positive integer, got {d!r}")
    d = int(d)
    N, m = grid.steps, marks.m
    b = (2 ** d) * (1 + m)
    if node_cap is not None and b ** N > node_cap:
        raise ResourceLimitError(
            f"scenario tree would have {b ** N} leaf nodes "
            f"({b}^{N}), exceeding the node cap {node_cap}"
        )
    if (N + 1) ** (d + m) > 2 ** 62:
        raise ResourceLimitError(
            f"state coding overflows: (N+1)^(d+m) = {(N + 1) ** (d + m)}"
        )

    # branch tables: sign-major, jump outcome minor; order is part of the
    # determinism contract (reductions always run in this order)
    x = marks.total_intensity * grid.dt
    p_none = math.exp(-x)
    jump_probs = np.concatenate((
        [p_none], (marks.intensities / marks.total_intensity) * (1.0 - p_none)))
    half_d = 0.5 ** d
    sign_vectors = np.empty((b, d))
    branch_jump = np.empty(b, dtype=np.int64)
    branch_probs = np.empty(b)
    row = 0
    for s in range(2 ** d):
        signs = np.array([1.0 if (s >> i) & 1 == 0 else -1.0 for i in range(d)])
        for j in range(1 + m):
            sign_vectors[row] = signs
            branch_jump[row] = j - 1
            branch_probs[row] = half_d * jump_probs[j]
            row += 1
    branch_probs = _force_unit_sum(branch_probs)

    # recombined lattice: state = (up-counts per dim, jump counts per mark),
    # coded in base N+1; child code = parent code + constant branch offset
    base = N + 1
    place = base ** np.arange(d + m, dtype=object)
    place = place.astype(np.int64)
    up_inc = ((sign_vectors + 1.0) / 2.0).astype(np.int64)        # (b, d)
    jump_inc = np.zeros((b, m), dtype=np.int64)
    has_jump = branch_jump >= 0
    jump_inc[has_jump, branch_jump[has_jump]] = 1
    offsets = up_inc @ place[:d] + jump_inc @ place[d:]           # (b,)

    levels = [_Level(np.zeros(1, dtype=np.int64),
                     np.zeros((1, d), dtype=np.int64),
                     np.zeros((1, m), dtype=np.int64),
                     np.ones(1))]
    children = []
    for k in range(N):
        lev = levels[k]
        child_codes = lev.codes[:, None] + offsets[None, :]       # (n_k, b)
        next_codes, inverse = np.unique(child_codes, return_inverse=True)
        child_idx = inverse.reshape(child_codes.shape).astype(np.int64)
        next_probs = np.bincount(
            child_idx.ravel(),
            weights=(lev.probs[:, None] * branch_probs[None, :]).ravel(),
            minlength=next_codes.size)
        # decode states
        rem = next_codes.copy()
        digits = np.empty((next_codes.size, d + m), dtype=np.int64)
        for i in range(d + m):
            digits[:, i] = rem % base
            rem //= base
        lev_next = _Level(next_codes, digits[:, :d], digits[:, d:], next_probs)
        for arr in (lev_next.codes, lev_next.up_counts, lev_next.jump_counts,
                    lev_next.probs, child_idx):
            arr.setflags(write=False)
        levels.append(lev_next)
        children.append(child_idx)

    for arr in (sign_vectors, branch_jump, branch_probs):
        arr.setflags(write=False)
    return ScenarioTree(grid, marks, d, node_cap, sign_vectors, branch_jump,
                        branch_probs, levels, children)
