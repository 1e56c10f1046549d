"""Problem data, truncation clamp, and empirical assumption checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import jumpbsde as jb
from jumpbsde.generators import GeneratorSpec, q_n

finite = st.floats(allow_nan=False, allow_infinity=False,
                   min_value=-1e12, max_value=1e12)
levels = st.floats(min_value=1e-6, max_value=1e9)


def test_q_n_examples():
    assert q_n(0.5, 1) == 0.5
    assert q_n(-7.0, 3) == -3.0
    assert q_n(3.0, 3) == 3.0
    with pytest.raises(ValueError):
        q_n(1.0, 0)


@settings(max_examples=200, deadline=None)
@given(finite, finite, levels)
def test_q_n_is_1_lipschitz_odd_idempotent(x, y, n):
    assert abs(q_n(x, n) - q_n(y, n)) <= abs(x - y) * (1 + 1e-15)
    assert q_n(-x, n) == -q_n(x, n)
    assert q_n(q_n(x, n), n) == q_n(x, n)
    assert abs(q_n(x, n)) <= min(abs(x), n) + 1e-15


@settings(max_examples=100, deadline=None)
@given(finite, levels, levels)
def test_q_n_monotone_in_level(x, n1, n2):
    lo, hi = sorted((n1, n2))
    assert abs(q_n(x, lo)) <= abs(q_n(x, hi)) + 1e-15


def _basic_problem(marks=None, gen=None, term=None, T=1.0, N=4):
    marks = marks or jb.make_mark_space([[1.0]], [1.0])
    gen = gen or jb.make_generator("affine", {"a": 1.0}, marks=marks, d=1)
    term = term or jb.make_terminal("constant", {"value": 1.0}, marks=marks, d=1)
    return jb.make_problem(T, N, 1, marks, gen, term)


def test_truncate_terminal_clamps():
    marks = jb.make_mark_space([[1.0]], [1.0])
    vals = np.array([-5.0, 1.0, 9.0])
    term = jb.TerminalSpec(fn=lambda ctx: vals[:ctx.n], p=2.0)
    prob = _basic_problem(marks=marks, term=term)
    truncated = jb.truncate_problem(prob, 4)
    ctx = prob.context(1.0, np.zeros((3, 1)), np.zeros((3, 1)))
    assert np.array_equal(truncated.terminal(ctx), [-4.0, 1.0, 4.0])


def test_truncate_zero_section_and_lipschitz():
    # f(t,0) = 6 constant, n = 2: f_n(t,0) = 2; increments untouched
    marks = jb.make_mark_space([[1.0]], [1.0])
    gen = jb.make_generator("affine", {"a": 1.0, "const": 6.0}, marks=marks, d=1)
    prob = _basic_problem(marks=marks, gen=gen)
    truncated = jb.truncate_problem(prob, 2)
    ctx = prob.context(0.5, np.zeros((1, 1)), np.zeros((1, 1)))
    z0 = np.zeros((1, 1))
    v0 = np.zeros((1, 1))
    assert truncated.generator(ctx, np.zeros(1), z0, v0)[0] == 2.0
    # increments of f_n equal increments of f exactly
    for y1, y2 in ((0.0, 1.0), (-3.0, 7.0), (100.0, 101.5)):
        df = (gen(ctx, np.array([y2]), z0, v0)
              - gen(ctx, np.array([y1]), z0, v0))[0]
        dfn = (truncated.generator(ctx, np.array([y2]), z0, v0)
               - truncated.generator(ctx, np.array([y1]), z0, v0))[0]
        assert df == dfn


def test_truncate_inactive_when_bounded():
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)
    truncated = jb.truncate_problem(prob, 100.0)
    ctx = prob.context(1.0, np.random.default_rng(0).normal(size=(50, 1)),
                       np.zeros((50, 1)))
    assert np.array_equal(truncated.terminal(ctx), prob.terminal(ctx))
    y = np.linspace(-5, 5, 50)
    assert np.array_equal(
        truncated.generator(ctx, y, np.zeros((50, 1)), np.zeros((50, 1))),
        prob.generator(ctx, y, np.zeros((50, 1)), np.zeros((50, 1))))


def test_tail_mean_decreasing_in_level():
    # ladder-Cauchy input: E[|xi| 1{|xi|>n}] non-increasing, to 0
    rng = np.random.default_rng(5)
    xi = np.exp(rng.normal(size=100_000))
    tails = [np.mean(np.abs(xi) * (np.abs(xi) > n)) for n in (1, 2, 4, 8, 16, 1e6)]
    assert all(b <= a for a, b in zip(tails, tails[1:]))
    assert tails[-1] == 0.0


# ---------------------------------------------------------------------------
# empirical checks
# ---------------------------------------------------------------------------

def test_check_lipschitz_linear_pass_and_fail():
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)
    f2 = GeneratorSpec(f=lambda ctx, y, z, v: 2.0 * y, lipschitz_kappa=2.0)
    rep = jb.check_lipschitz(f2, prob, n_pairs=128, seed=0)
    assert rep["passed"] and np.isclose(rep["kappa_hat"], 2.0)
    f_bad = GeneratorSpec(f=lambda ctx, y, z, v: 2.0 * y, lipschitz_kappa=1.0)
    rep2 = jb.check_lipschitz(f_bad, prob, n_pairs=128, seed=0)
    assert not rep2["passed"]
    assert rep2["worst_pair"] is not None


def test_check_lipschitz_smooth_form():
    # f = sin(y) + 0.5 z1 + 0.3 ||v||, kappa = 1: dense-grid difference
    # quotient stays below 1 (oracle), and the sampled check agrees
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)
    spec = jb.make_generator("lipschitz-smooth",
                             {"ay": 1.0, "bz": [0.5], "cv": 0.3},
                             marks=marks, d=1, kappa=1.0)
    ys = np.linspace(-6, 6, 41)
    zs = np.linspace(-6, 6, 13)
    worst = 0.0
    ctx = prob.context(0.0, np.zeros((1, 1)), np.zeros((1, 1)))
    for y1 in ys:
        for y2 in ys:
            for z1 in zs:
                for z2 in zs:
                    dist = abs(y1 - y2) + abs(z1 - z2)
                    if dist == 0:
                        continue
                    df = (spec(ctx, np.array([y1]), np.array([[z1]]),
                               np.zeros((1, 1)))
                          - spec(ctx, np.array([y2]), np.array([[z2]]),
                                 np.zeros((1, 1))))[0]
                    worst = max(worst, abs(df) / dist)
    assert worst <= 1.0 + 1e-12
    rep = jb.check_lipschitz(spec, prob, n_pairs=256, seed=1)
    assert rep["passed"]


def test_check_growth_zv_independent_passes():
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)
    spec = GeneratorSpec(f=lambda ctx, y, z, v: np.sin(y), lipschitz_kappa=1.0,
                         growth_alpha=0.5, growth_gamma=1.0, g=0.0,
                         depends_on_zv=False)
    rep = jb.check_growth(spec, prob, n_points=128, seed=0)
    assert rep["passed"] and rep["max_ratio"] == 0.0


def test_check_growth_sublinear_passes():
    # f = y + sqrt(1 + |z|) - 1, gamma = 1, alpha = 0.5, g = 1:
    # scalar inequality sqrt(1+u) - 1 <= (1 + u)^(1/2) checked on a grid first
    u = np.linspace(0, 1e6, 100_001)
    assert np.all(np.sqrt(1 + u) - 1 <= (1 + u) ** 0.5)
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)

    def f(ctx, y, z, v):
        return y + np.sqrt(1 + np.sqrt(np.einsum("...d,...d->...", z, z))) - 1

    spec = GeneratorSpec(f=f, lipschitz_kappa=1.0, growth_alpha=0.5,
                         growth_gamma=1.0, g=1.0)
    rep = jb.check_growth(spec, prob, n_points=256, seed=0)
    assert rep["passed"]


def test_check_growth_quadratic_fails():
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)

    def f(ctx, y, z, v):
        return y + np.einsum("...d,...d->...", z, z)

    spec = GeneratorSpec(f=f, lipschitz_kappa=1.0, growth_alpha=0.9,
                         growth_gamma=5.0, g=1.0)
    rep = jb.check_growth(spec, prob, n_points=256, seed=0)
    assert not rep["passed"]


def test_check_growth_without_constants_is_na():
    marks = jb.make_mark_space([[1.0]], [1.0])
    prob = _basic_problem(marks=marks)
    rep = jb.check_growth(prob.generator, prob)
    assert rep["passed"] is None


# ---------------------------------------------------------------------------
# integrability estimates
# ---------------------------------------------------------------------------

def test_check_integrability_constant_exact_on_tree():
    marks = jb.make_mark_space([[1.0]], [1.0])
    gen = jb.make_generator("affine", {}, marks=marks, d=1)
    term = jb.make_terminal("constant", {"value": 3.0}, marks=marks, d=1)
    prob = jb.make_problem(1.0, 4, 1, marks, gen, term)
    rep = jb.check_integrability(prob, method="tree")
    # exact up to product rounding: no sampling error, zero reported SE
    assert abs(rep["xi_abs_mean"] - 3.0) <= 8 * np.finfo(float).eps * 3.0
    assert rep["f0_integral_mean"] == 0.0
    assert rep["xi_abs_se"] == 0.0


def test_check_integrability_squared_brownian():
    # xi = B_1^2 (E=1), f(.,0) = 1 (integral 1): both within 3 SE
    marks = jb.make_mark_space([[1.0]], [1.0])
    gen = jb.make_generator("affine", {"const": 1.0}, marks=marks, d=1)
    term = jb.make_terminal("brownian-functional", {"kind": "square"},
                            marks=marks, d=1)
    prob = jb.make_problem(1.0, 10, 1, marks, gen, term)
    rep = jb.check_integrability(prob, n_paths=50_000, seed=3)
    assert abs(rep["xi_abs_mean"] - 1.0) <= 3 * rep["xi_abs_se"]
    assert abs(rep["f0_integral_mean"] - 1.0) <= max(3 * rep["f0_integral_se"],
                                                     1e-12)


def test_check_integrability_lognormal():
    marks = jb.make_mark_space([[1.0]], [1.0])
    gen = jb.make_generator("affine", {}, marks=marks, d=1)
    term = jb.make_terminal("brownian-functional", {"kind": "exp"},
                            marks=marks, d=1)
    prob = jb.make_problem(1.0, 10, 1, marks, gen, term)
    rep = jb.check_integrability(prob, n_paths=50_000, seed=4)
    assert abs(rep["xi_abs_mean"] - math.exp(0.5)) <= 3 * rep["xi_abs_se"]


# ---------------------------------------------------------------------------
# declarative forms
# ---------------------------------------------------------------------------

def test_unknown_forms_rejected():
    marks = jb.make_mark_space([[1.0]], [1.0])
    with pytest.raises(ValueError, match="unknown generator form"):
        jb.make_generator("mystery", {}, marks=marks, d=1)
    with pytest.raises(ValueError, match="unknown terminal form"):
        jb.make_terminal("mystery", {}, marks=marks, d=1)


def test_terminal_forms_evaluate():
    marks = jb.make_mark_space([[1.0]], [2.0])
    gen = jb.make_generator("affine", {}, marks=marks, d=1)
    prob = _basic_problem(marks=marks, gen=gen)
    ctx = prob.context(1.0, np.array([[0.3], [-0.2]]),
                       np.array([[2.0], [0.0]]))
    t_const = jb.make_terminal("constant", {"value": 5.0}, marks=marks, d=1)
    assert np.array_equal(t_const(ctx), [5.0, 5.0])
    t_lin = jb.make_terminal("brownian-functional", {"kind": "linear"},
                             marks=marks, d=1)
    assert np.allclose(t_lin(ctx), [0.3, -0.2])
    t_cnt = jb.make_terminal("jump-count", {"compensated": True},
                             marks=marks, d=1)
    assert np.allclose(t_cnt(ctx), [2.0 - 2.0, 0.0 - 2.0])
    t_mix = jb.make_terminal(
        "state-linear",
        {"brownian_weights": [1.0], "jump_weights": [0.5], "compensated": True},
        marks=marks, d=1)
    assert np.allclose(t_mix(ctx), [0.3 + 1.0 - 1.0, -0.2 + 0.0 - 1.0])


def test_problem_fingerprint_stable():
    p1 = _basic_problem()
    p2 = _basic_problem()
    assert p1.fingerprint() == p2.fingerprint()
    p3 = _basic_problem(T=2.0, N=8)
    assert p1.fingerprint() != p3.fingerprint()
