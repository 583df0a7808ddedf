from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lcdg import autodiff as ad
from lcdg.autodiff import Tensor
from lcdg.oracle import LinearGaussianWorld, OracleBackend
from lcdg.sampler import (
    GuidanceConfig,
    GuidanceError,
    cfg_score,
    compute_alpha,
    condition_score,
    ddim_step_guided,
    ddim_timesteps,
    ddpm_step_guided,
    domain_defaults,
    guidance_plan,
    sample,
    timestep_plan,
)


class LinearBackend:
    """Gaussian-world noise prediction with a linear condition map C(z) = A z."""

    dtype = np.float64

    def __init__(self, world: LinearGaussianWorld, A: np.ndarray):
        self.world = world
        self.A = A
        self.sample_shape = (world.dim,)
        self.cond_channels = None

    def eps(self, z, t, c):
        return self.world.eps_star(z, t)

    def eps_and_condition(self, z, t, c):
        leaf = Tensor(z, requires_grad=True)
        return self.world.eps_star(z, t), ad.matmul(leaf, Tensor(self.A.T)), leaf

    def condition(self, z, t, c):
        return z @ self.A.T


@pytest.fixture
def tiny_adapter(tiny_adapter, tiny_model):
    # one train-mode pass so batch-norm has running statistics for eval
    rng = np.random.default_rng(0)
    tiny_adapter.train()
    with ad.no_grad():
        tiny_adapter(Tensor(rng.standard_normal((4, tiny_adapter.config.in_channels, 16, 16)).astype(np.float32)), 5)
    tiny_adapter.eval()
    return tiny_adapter


@pytest.fixture
def world(sched):
    return LinearGaussianWorld(np.array([0.3, -0.2, 0.8, 0.1, -0.5]), 0.3, sched)


@pytest.fixture
def short_world(short_sched):
    return LinearGaussianWorld(np.array([0.3, -0.2, 0.8]), 0.3, short_sched)


# -- condition score --------------------------------------------------------


def test_linear_adapter_score_matches_closed_form(world, rng):
    A = rng.standard_normal((3, world.dim))
    backend = LinearBackend(world, A)
    z = rng.standard_normal((4, world.dim))
    c_ext = rng.standard_normal((4, 3))
    g, _, dist = condition_score(backend, None, z, 500, None, c_ext, delta=np.ones_like(z))
    expect = -(2.0 / 3) * (z @ A.T - c_ext) @ A
    np.testing.assert_allclose(g, expect, atol=1e-6)
    np.testing.assert_allclose(dist, ((z @ A.T - c_ext) ** 2).mean(1), atol=1e-12)


def test_exact_condition_gives_zero_score(world, rng):
    backend = OracleBackend(world)
    z = rng.standard_normal((2, world.dim))
    g, alpha, dist = condition_score(backend, None, z, 100, None, z.copy(), delta=np.ones_like(z))
    assert np.all(g == 0) and np.all(dist == 0) and np.all(alpha == 0)


@pytest.mark.parametrize("t", [5, 100, 400, 700, 999])
def test_alpha_tracks_update_magnitude(world, sched, rng, t):
    backend = OracleBackend(world)
    z = rng.standard_normal((8, world.dim))
    delta = rng.standard_normal(z.shape) * math.sqrt(float(sched.betas[t]))
    g, alpha, _ = condition_score(backend, None, z, t, None, rng.standard_normal(z.shape), delta=delta)
    ratio = np.linalg.norm(alpha[:, None] * g, axis=1) / np.linalg.norm(delta, axis=1)
    assert np.all((ratio > 0.1) & (ratio < 10.0))


def test_compute_alpha_modes():
    delta = np.array([[3.0, 4.0]])
    grad = np.array([[0.0, 0.5]])
    assert compute_alpha(delta, grad, "verbatim")[0][0] == pytest.approx(100.0)
    assert compute_alpha(delta, grad, "norm_ratio")[0][0] == pytest.approx(10.0)
    assert compute_alpha(delta, grad, "matched", gain=4.0)[0][0] == pytest.approx(2.5)
    assert compute_alpha(None, grad, "unit")[0][0] == 1.0
    with pytest.raises(GuidanceError):
        compute_alpha(None, grad, "matched")


def test_vanishing_or_bad_gradient_is_skipped():
    grad = np.array([[0.0, 0.0], [np.nan, 1.0], [1.0, 0.0]])
    alpha, skipped = compute_alpha(np.ones((3, 2)), grad, "matched")
    assert skipped.tolist() == [True, True, False]
    assert alpha[0] == 0 and alpha[1] == 0 and alpha[2] > 0


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
@pytest.mark.parametrize("beta", [0.5, 2.0])
def test_matched_shift_is_beta_times_update(world, sched, rng, sampler, beta):
    backend = OracleBackend(world)
    z = rng.standard_normal((3, world.dim))
    c_ext = rng.standard_normal(z.shape)
    cfg = GuidanceConfig(beta=beta, omega=1.0, sampler=sampler, clip_x0=False)
    t, t_prev = 600, 580
    if sampler == "ddpm":
        step = lambda g: ddpm_step_guided(backend, backend, z, t, None, c_ext, cfg, sched,  # noqa: E731
                                          np.random.default_rng(0), guided=g)[0]
        t_prev = t - 1
    else:
        step = lambda g: ddim_step_guided(backend, backend, z, t, t_prev, None, c_ext, cfg, sched,  # noqa: E731
                                          guided=g)[0]
    plain, guided = step(False), step(True)
    if sampler == "ddpm":
        ab, var = float(sched.alpha_bars[t]), float(sched.posterior_vars[t])
        k = float(sched.betas[t]) / math.sqrt(1 - ab)
        mu = (z - k * world.eps_star(z, t)) / math.sqrt(float(sched.alphas[t]))
        delta = mu - z
    else:
        delta = plain - z
    shift = np.linalg.norm(guided - plain, axis=1)
    np.testing.assert_allclose(shift, beta * np.linalg.norm(delta, axis=1), rtol=1e-9)


# -- steps ------------------------------------------------------------------


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
def test_beta_zero_is_bitwise_unguided(tiny_model, tiny_adapter, short_sched, sampler):
    cfg = GuidanceConfig(beta=0.0, t_trunc=1, omega=2.0, sampler=sampler, ddim_steps=10, seed=7)
    target = np.zeros((1, 1, 16, 16), dtype=np.float32)
    labels = np.array([0, 1])
    guided, trace = sample(tiny_model, tiny_adapter, labels, target, cfg, short_sched, count=2)
    plain, plain_trace = sample(tiny_model, None, labels, None, cfg, short_sched, count=2)
    assert trace.guided_count == len(trace.records)
    assert plain_trace.guided_count == 0
    assert np.array_equal(guided, plain)


def test_ddim_deterministic(tiny_model, tiny_adapter, short_sched):
    cfg = GuidanceConfig(beta=2.0, t_trunc=20, ddim_steps=8, seed=3)
    target = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
    a, _ = sample(tiny_model, tiny_adapter, np.array([1]), target, cfg, short_sched, count=2)
    b, _ = sample(tiny_model, tiny_adapter, np.array([1]), target, cfg, short_sched, count=2)
    assert a.tobytes() == b.tobytes()


def test_ddpm_below_truncation_is_unguided(world, sched, rng):
    backend = OracleBackend(world)
    z = rng.standard_normal((2, world.dim))
    cfg = GuidanceConfig(beta=5.0, t_trunc=300, sampler="ddpm", omega=1.0)
    a, rec = ddpm_step_guided(backend, backend, z, 200, None, np.ones_like(z), cfg, sched, np.random.default_rng(1))
    b, _ = ddpm_step_guided(backend, None, z, 200, None, None, cfg, sched, np.random.default_rng(1))
    assert not rec.guided
    assert np.array_equal(a, b)


def test_ddim_bad_step_order(world, sched):
    backend = OracleBackend(world)
    with pytest.raises(GuidanceError):
        ddim_step_guided(backend, None, np.zeros((1, world.dim)), 10, 10, None, None, GuidanceConfig(), sched)


def test_unit_weight_beta_sweep_monotone(short_world, short_sched):
    backend = OracleBackend(short_world)
    c_ext = np.array([1.5, 1.5, -1.5])
    dists = []
    for beta in (0.0, 0.5, 1.0, 2.0):
        cfg = GuidanceConfig(beta=beta, t_trunc=1, omega=1.0, sampler="ddpm", alpha_mode="unit", seed=0)
        z, _ = sample(backend, backend, None, c_ext, cfg, short_sched, count=2000)
        dists.append(float(((z - c_ext) ** 2).mean()))
    assert all(b < a for a, b in zip(dists, dists[1:]))


# -- classifier-free guidance ----------------------------------------------


def test_cfg_endpoints(tiny_model, rng):
    z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    c = np.array([0, 2])
    with ad.no_grad():
        cond = tiny_model(Tensor(z), 17, c).data
        unc = tiny_model(Tensor(z), 17, None).data
    assert np.array_equal(cfg_score(tiny_model, z, 17, c, 1.0), cond)
    np.testing.assert_allclose(cfg_score(tiny_model, z, 17, c, 0.0), unc, atol=1e-7)
    np.testing.assert_allclose(cfg_score(tiny_model, z, 17, c, 6.0), 6 * cond - 5 * unc, atol=1e-5)


# -- plans ------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(T=st.integers(2, 1000), data=st.data())
def test_ddim_timesteps_shape(T, data):
    steps = data.draw(st.integers(1, T))
    ts = ddim_timesteps(T, steps)
    assert ts[0] == T - 1
    assert ts[-1] == 0 or steps == 1
    assert np.all(np.diff(ts) < 0)
    assert len(ts) == steps


def test_guided_set_is_truncated_interval():
    plan = [(t, t - 1) for t in range(99, -1, -1)]
    flags = guidance_plan(plan, 40, ssc=False)
    assert {t for (t, _), f in zip(plan, flags) if f} == {t for t in range(100) if t + 1 >= 40}


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 200), frac=st.floats(0.0, 1.0))
def test_ssc_halves_guided_count(steps, frac):
    cfg = GuidanceConfig(sampler="ddim", ddim_steps=steps)
    plan = timestep_plan(cfg, 1000)
    t_trunc = max(1, int(frac * 1000))
    full = sum(guidance_plan(plan, t_trunc, ssc=False))
    half = sum(guidance_plan(plan, t_trunc, ssc=True))
    assert half == math.ceil(full / 2)


def test_ssc_trace_count(tiny_model, tiny_adapter, short_sched):
    target = np.zeros((1, 1, 16, 16), dtype=np.float32)
    base = GuidanceConfig(beta=1.0, t_trunc=10, ddim_steps=12, omega=1.0)
    _, full = sample(tiny_model, tiny_adapter, None, target, base, short_sched)
    _, half = sample(tiny_model, tiny_adapter, None, target, replace(base, ssc=True), short_sched)
    assert half.guided_count == math.ceil(full.guided_count / 2)
    assert set(half.guided_steps) <= set(full.guided_steps)


def test_t_trunc_at_T_matches_unguided(short_world, short_sched):
    backend = OracleBackend(short_world)
    c_ext = np.full(3, 2.0)
    cfg = GuidanceConfig(beta=2.0, t_trunc=short_sched.T, sampler="ddpm", omega=1.0, seed=1)
    z, trace = sample(backend, backend, None, c_ext, cfg, short_sched, count=4000)
    plain, _ = sample(backend, None, None, None, replace(cfg, seed=2), short_sched, count=4000)
    assert trace.guided_count <= 1
    for j in range(3):
        assert stats.ttest_ind(z[:, j], plain[:, j]).pvalue > 0.01


@pytest.mark.parametrize("kind,expect", [("edge", (2.0, 500)), ("stroke", (2.5, 650)),
                                         ("palette", (2.5, 750)), ("mask", (2.0, 600))])
def test_domain_defaults(kind, expect):
    assert domain_defaults(kind, 1000) == expect
    assert domain_defaults(kind, 100)[1] == expect[1] // 10


# -- validation -------------------------------------------------------------


@pytest.mark.parametrize("change", [dict(beta=-1.0), dict(t_trunc=0), dict(t_trunc=1001), dict(sampler="euler"),
                                    dict(ddim_steps=0), dict(ddim_steps=1001), dict(ddim_eta=-0.1), dict(alpha_mode="magic"),
                                    dict(dump_stride=0)])
def test_config_validation(change):
    with pytest.raises(GuidanceError):
        replace(GuidanceConfig(), **change).validate(1000)


def test_sample_input_errors(tiny_model, tiny_adapter, short_sched):
    cfg = GuidanceConfig(t_trunc=10, ddim_steps=4)
    with pytest.raises(GuidanceError):
        sample(tiny_model, tiny_adapter, None, None, cfg, short_sched)
    with pytest.raises(GuidanceError):
        sample(tiny_model, None, None, np.zeros((1, 1, 16, 16)), cfg, short_sched)
    with pytest.raises(GuidanceError, match="channels"):
        sample(tiny_model, tiny_adapter, None, np.zeros((1, 3, 16, 16)), cfg, short_sched)
    with pytest.raises(GuidanceError, match="batch"):
        sample(tiny_model, tiny_adapter, None, np.zeros((3, 1, 16, 16)), cfg, short_sched, count=2)


def test_dump_snapshots(tiny_model, tiny_adapter, short_sched):
    cfg = GuidanceConfig(t_trunc=10, ddim_steps=10, dump_intermediates=True, dump_stride=3)
    _, trace = sample(tiny_model, tiny_adapter, None, np.zeros((1, 1, 16, 16)), cfg, short_sched)
    assert len(trace.snapshots) == 4 + 1
    assert trace.snapshots[-1].t == -1 and trace.snapshots[-1].cond is None
    assert trace.snapshots[0].cond.shape == (1, 1, 16, 16)
