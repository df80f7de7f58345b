import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from rinv.diffusion import Codec, make_schedule, sample_unconditional, train_denoiser
from rinv.errors import ConfigError, NumericalError
from rinv.grid import SceneMask, SceneSpec, generate_scene, make_grid, mask_to_points
from rinv.radar import AntennaArray, Heatmap, build_imaging_matrix, forward_measure, to_magnitude
from rinv.solvers import (
    CfarConfig,
    PosteriorConfig,
    RegConfig,
    calibrate_gamma_scale,
    cfar_detect,
    fitted_scale,
    posterior_sample,
    run_sweep,
    run_variance_study,
    solve_regularized,
    solve_regularized_arrays,
)

from .oracles import EpsStub

SHAPE = (16, 24)


@pytest.fixture(scope="module")
def prior():
    g = make_grid(*SHAPE)
    scenes = [
        generate_scene(SceneSpec(seed=s, n_walls=1, n_point_targets=2, wall_length_range_m=(10, 30)), g)
        for s in range(16)
    ]
    sched = make_schedule(20, 1e-3, 0.3)
    codec = Codec("identity", g.shape)
    res = train_denoiser(scenes, codec, sched, epochs=3, batch=8, lr=1e-3, seed=0,
                         arch={"kind": "mlp", "hidden": 64})
    B = build_imaging_matrix(g, AntennaArray(12)) / 12
    return g, scenes, sched, codec, res.denoiser, B


def _measure(scene, seed=0):
    B = build_imaging_matrix(scene.grid, AntennaArray(12))
    return to_magnitude(forward_measure(scene, B, 0.01, seed=seed))


# posterior ------------------------------------------------------------------


@pytest.mark.parametrize("cfg", [PosteriorConfig(K=0), PosteriorConfig(zeta=0.0, K=3)])
def test_measurement_ignored_when_step_vanishes(prior, cfg):
    g, scenes, sched, codec, den, B = prior
    cfg = replace(cfg, seed=4, T_steps=10)
    a, _ = posterior_sample(_measure(scenes[0]), B, den, codec, sched, cfg, trace=False)
    b, _ = posterior_sample(_measure(scenes[5]), B, den, codec, sched, cfg, trace=False)
    ref = sample_unconditional(den, sched, codec, g, seed=4, mode="ddim", n_steps=10)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.values, ref.values)


def test_measurement_changes_output(prior):
    g, scenes, sched, codec, den, B = prior
    cfg = PosteriorConfig(zeta=1e-2, K=2, T_steps=10, seed=4)
    a, _ = posterior_sample(_measure(scenes[0]), B, den, codec, sched, cfg, trace=False)
    b, _ = posterior_sample(_measure(scenes[5]), B, den, codec, sched, cfg, trace=False)
    assert not np.array_equal(a.values, b.values)


def test_posterior_deterministic_bounded_and_traced(prior):
    g, scenes, sched, codec, den, B = prior
    Y = _measure(scenes[1])
    gt = mask_to_points(scenes[1])
    cfg = PosteriorConfig(zeta=1e-3, K=2, T_steps=8, seed=1)
    a, rec = posterior_sample(Y, B, den, codec, sched, cfg, gt=gt)
    b, _ = posterior_sample(Y, B, den, codec, sched, cfg, gt=gt)
    assert np.array_equal(a.values, b.values)
    assert a.values.min() >= 0 and a.values.max() <= 1
    assert [r.step for r in rec] == list(range(1, 9))
    assert rec[-1].t == 1
    assert all(math.isfinite(r.fidelity) for r in rec)


def test_passthrough_and_ancestral_modes_run(prior):
    g, scenes, sched, codec, den, B = prior
    Y = _measure(scenes[2])
    m1, _ = posterior_sample(Y, B, den, codec, sched, PosteriorConfig(K=1, T_steps=5, grad_mode="passthrough"))
    m2, _ = posterior_sample(Y, B, den, codec, sched, PosteriorConfig(K=1, mode="ancestral"))
    for m in (m1, m2):
        assert m.values.min() >= 0 and m.values.max() <= 1


def test_ancestral_needs_every_step(prior):
    g, scenes, sched, codec, den, B = prior
    with pytest.raises(ConfigError):
        posterior_sample(_measure(scenes[0]), B, den, codec, sched, PosteriorConfig(mode="ancestral", T_steps=5))


def test_custom_lambda_equal_to_beta_matches_default_ancestral(prior):
    g, scenes, sched, codec, den, B = prior
    Y = _measure(scenes[0])
    # constant lambda only matches the default when every beta equals it
    flat = make_schedule(20, 0.05, 0.05)
    base = PosteriorConfig(K=1, mode="ancestral", seed=2)
    a, _ = posterior_sample(Y, B, den, codec, flat, base, trace=False)
    b, _ = posterior_sample(Y, B, den, codec, flat, replace(base, lambda_diff=0.05), trace=False)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_early_stop_runs_fraction_of_steps(prior):
    g, scenes, sched, codec, den, B = prior
    _, rec = posterior_sample(_measure(scenes[0]), B, den, codec, sched,
                              PosteriorConfig(K=1, T_steps=10, early_stop_frac=0.4))
    assert len(rec) == 4


def test_inner_fidelity_mostly_non_increasing(prior):
    g, scenes, sched, codec, den, B = prior
    cfg = PosteriorConfig(zeta=1e-4, K=5, T_steps=20, grad_mode="exact")
    _, rec = posterior_sample(_measure(scenes[3]), B, den, codec, sched, cfg, record_inner=True)
    ok = [all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(r.inner_fidelity, r.inner_fidelity[1:])) for r in rec]
    assert sum(ok) >= 0.9 * len(ok)


def test_untrained_denoiser_rejected(prior):
    from rinv.diffusion import Denoiser

    g, scenes, sched, codec, den, B = prior
    fresh = Denoiser({"kind": "mlp", "latent_shape": list(SHAPE), "hidden": 8})
    with pytest.raises(ValueError, match="trained"):
        posterior_sample(_measure(scenes[0]), B, fresh, codec, sched)


def test_complex_heatmap_and_grid_mismatch_rejected(prior):
    g, scenes, sched, codec, den, B = prior
    cplx = forward_measure(scenes[0], build_imaging_matrix(g, AntennaArray(12)))
    with pytest.raises(ValueError):
        posterior_sample(cplx, B, den, codec, sched)
    small = make_grid(8, 24)
    with pytest.raises(ValueError):
        posterior_sample(Heatmap(small, np.zeros((8, 24)), "magnitude"), B, den, codec, sched)


def test_non_finite_state_reports_step(prior):
    g, scenes, sched, codec, den, B = prior
    bad = EpsStub(torch.full(SHAPE, float("nan"), dtype=torch.float64))
    with pytest.raises(NumericalError, match="step 1"):
        posterior_sample(_measure(scenes[0]), B, bad, codec, sched, PosteriorConfig(K=0, T_steps=3))


def test_posterior_config_validation():
    with pytest.raises(ConfigError) as err:
        PosteriorConfig(zeta=-1, gamma=0, K=-1, mode="euler", early_stop_frac=0).validate()
    assert len(err.value.problems) == 5
    with pytest.raises(ConfigError):
        PosteriorConfig(gamma_scale=0.0).validate()


def test_gamma_scale_multiplies_gamma(prior):
    g, scenes, sched, codec, den, B = prior
    Y = _measure(scenes[0])
    a, tra = posterior_sample(Y, B, den, codec, sched, PosteriorConfig(gamma=2.0, K=2, T_steps=4, zeta=0.1))
    b, trb = posterior_sample(Y, B, den, codec, sched,
                              PosteriorConfig(gamma=0.5, gamma_scale=4.0, K=2, T_steps=4, zeta=0.1))
    assert np.array_equal(a.values, b.values)
    assert [r.fidelity for r in tra] == [r.fidelity for r in trb]


# scale calibration -------------------------------------------------------------


def test_fitted_scale_recovers_known_factor():
    g = make_grid(*SHAPE)
    B = build_imaging_matrix(g, AntennaArray(12)) / 12
    x = generate_scene(SceneSpec(seed=3), g).values
    m = np.sqrt(np.abs(B @ x) ** 2 + 1e-12)
    # y = m / c  =>  <y, m> / <y, y> = c
    assert fitted_scale(x, m / 2.5, B) == pytest.approx(2.5, rel=1e-12)


def test_fitted_scale_rejects_zero_heatmap():
    with pytest.raises(ValueError):
        fitted_scale(np.ones((2, 3)), np.zeros((2, 3)), np.eye(2))


def test_calibration_is_median_of_per_scene_scales():
    g = make_grid(*SHAPE)
    B = build_imaging_matrix(g, AntennaArray(12)) / 12
    scenes = [generate_scene(SceneSpec(seed=s), g) for s in range(3)]
    factors = [1.5, 4.0, 2.0]

    def measure(i, s):
        m = np.sqrt(np.abs(B @ s.values) ** 2 + 1e-12)
        return Heatmap(g, m / factors[i], "magnitude")

    assert calibrate_gamma_scale(scenes, measure, B) == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(ValueError):
        calibrate_gamma_scale([], measure, B)


# regularized ----------------------------------------------------------------

_B1 = np.array([[2.0 + 0j]])
_Y1 = np.array([[1.0 + 0j]])


@pytest.mark.parametrize("mode", ["complex", "magnitude"])
def test_scalar_least_squares(mode):
    y = _Y1 if mode == "complex" else np.abs(_Y1)
    cfg = RegConfig(norm="L2", reg_weight=0.0, step_size=0.05, iters=500, init="zeros" if mode == "complex" else "constant")
    x, _ = solve_regularized_arrays(y, _B1, cfg, mode)
    assert x[0, 0] == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("lam, expected", [(8.0, 0.0), (2.0, 0.25), (1.0, 0.375), (12.0, 0.0)])
def test_scalar_l1_proximal_fixed_point(lam, expected):
    # objective (1 - 2x)^2 + lam*x on x >= 0; fixed point of the prox step gives 8x = 4 - lam
    x, _ = solve_regularized_arrays(_Y1, _B1, RegConfig(norm="L1", reg_weight=lam, step_size=0.05,
                                                       iters=500, init="constant", init_value=0.9), "complex")
    assert x[0, 0] == pytest.approx(max(0.0, (4 - lam) / 8), abs=1e-9)
    assert x[0, 0] == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_huge_penalty_gives_zero(norm):
    g = make_grid(*SHAPE)
    Y = _measure(generate_scene(SceneSpec(seed=0), g))
    B = build_imaging_matrix(g, AntennaArray(12)) / 12
    m = solve_regularized(Y, B, RegConfig(norm=norm, reg_weight=1e6, iters=20, init="random"))
    assert not m.values.any()


def test_l2_converges_on_strictly_convex_instance():
    rng = np.random.default_rng(0)
    n, cols = 6, 5
    B = np.eye(n) + 0.2 * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    lam = 0.1
    x_star = rng.uniform(0.3, 0.7, (n, cols))
    # choose y so x_star is the stationary point: Re(B^H (B x* - y)) + lam x* = 0
    y = B @ x_star + np.linalg.solve(B.conj().T, lam * x_star)
    L = 2 * (np.linalg.norm(B, 2) ** 2 + lam)
    x, norms = solve_regularized_arrays(y, B, RegConfig(norm="L2", reg_weight=lam, step_size=1 / L,
                                                        iters=3000, init="constant", init_value=0.5), "complex")
    assert norms[-1] < 1e-4 * norms[0]
    np.testing.assert_allclose(x, x_star, atol=1e-6)


def test_regularized_is_deterministic_and_bounded():
    g = make_grid(*SHAPE)
    Y = _measure(generate_scene(SceneSpec(seed=1), g))
    B = build_imaging_matrix(g, AntennaArray(12)) / 12
    for norm in ("L1", "L2"):
        cfg = RegConfig(norm=norm, iters=200, init="random", seed=3)
        a, b = solve_regularized(Y, B, cfg), solve_regularized(Y, B, cfg)
        assert np.array_equal(a.values, b.values)
        assert a.values.min() >= 0 and a.values.max() <= 1


def test_reg_config_validation():
    with pytest.raises(ConfigError):
        RegConfig(norm="L3").validate()


# cfar -----------------------------------------------------------------------


def _hm(values):
    return Heatmap(make_grid(*values.shape), values, "magnitude")


def test_cfar_zero_and_constant_heatmaps():
    assert not cfar_detect(_hm(np.zeros((64, 96)))).values.any()
    assert not cfar_detect(_hm(np.full((64, 96), 0.3)), CfarConfig(threshold_factor=1.5)).values.any()


def test_cfar_single_peak():
    v = np.full(SHAPE, 0.1)
    v[8, 12] = 1.0
    cfg = CfarConfig(guard_cells=(1, 1), train_cells=(4, 4), threshold_factor=3.0)
    det = cfar_detect(_hm(v), cfg).values
    # peak's ring is all floor: 1.0 > 3 * 0.1; a neighbour's ring holds the peak once
    # among 72 cells, mean ~0.1125, and 0.1 < 0.34
    expected = np.zeros(SHAPE)
    expected[8, 12] = 1
    assert np.array_equal(det, expected)


def test_cfar_translation_equivariant():
    rng = np.random.default_rng(5)
    v = rng.uniform(0.05, 0.1, (32, 48))
    v[16, 20] = 1.0
    cfg = CfarConfig()
    a = cfar_detect(_hm(v), cfg).values
    b = cfar_detect(_hm(np.roll(v, 1, axis=1)), cfg).values
    interior = (slice(10, 22), slice(10, 36))
    assert a[16, 20] == 1
    assert np.array_equal(np.roll(a, 1, axis=1)[interior], b[interior])


def test_cfar_window_too_large():
    with pytest.raises(ConfigError):
        cfar_detect(_hm(np.zeros((8, 8))))


def test_cfar_config_validation():
    with pytest.raises(ConfigError):
        CfarConfig(guard_cells=(4, 2), train_cells=(4, 8), threshold_factor=1.0).validate()


# studies --------------------------------------------------------------------


def test_variance_rows_and_deterministic_l2(prior):
    g, scenes, sched, codec, den, B = prior
    gt = mask_to_points(scenes[0])
    rep = run_variance_study(
        _measure(scenes[0]), B, den, codec, sched, PosteriorConfig(K=1, T_steps=4), 5, gt,
        reg_cfgs=[RegConfig(norm="L2", iters=50), RegConfig(norm="L1", iters=50, init="random")],
    )
    summary = rep.summary()
    assert {k: v["n"] for k, v in summary.items()} == {"posterior": 5, "l2": 5, "l1": 5}
    assert len({r["final_cd"] for r in rep.rows if r["method"] == "l2"}) == 1
    assert summary["l2"]["std"] == 0.0
    assert len(rep.step_stats("posterior")) == 4


def test_variance_needs_two_seeds(prior):
    g, scenes, sched, codec, den, B = prior
    with pytest.raises(ValueError):
        run_variance_study(_measure(scenes[0]), B, den, codec, sched, PosteriorConfig(), 1, None)


def test_sweep_row_count_and_argmin(prior):
    g, scenes, sched, codec, den, B = prior
    Ys = [_measure(scenes[i]) for i in range(2)]
    gts = [mask_to_points(scenes[i]) for i in range(2)]
    seen = []
    rep = run_sweep(Ys, B, den, codec, sched, [0.0, 1e-4, 1e-3, 1e-2], [1, 2, 3], [0.5, 1.0], gts,
                    base=PosteriorConfig(T_steps=3), progress=seen.append)
    assert len(rep.rows) == 24 and len(seen) == 24
    assert rep.best["mean_cd"] == min(r["mean_cd"] for r in rep.rows)
