"""Scene recovery from a range-azimuth heatmap.

* :func:`posterior_sample` - reverse diffusion interleaved with gradient
  steps on the measurement fidelity, evaluated at the Tweedie estimate.
* :func:`solve_regularized` - projected gradient / proximal descent with an
  L1 or L2 penalty.
* :func:`cfar_detect` - 2D cell-averaging CFAR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.ndimage import correlate

from .diffusion import Codec, Denoiser, NoiseSchedule, decode_to_mask, reverse_mean, tweedie_z0
from .errors import ConfigError, MetricUndefinedError, NumericalError
from .grid import PointSet, SceneMask, mask_to_points
from .metrics import compute_metrics
from .radar import Heatmap, _fidelity_grad

POINT_THRESHOLD = 0.01


@dataclass(frozen=True)
class PosteriorConfig:
    zeta: float = 1.0
    gamma: float = 1.0
    K: int = 20
    # None couples the diffusion coefficient to the schedule (lambda = beta_t),
    # which makes the prior update land exactly on the reverse-step mean
    lambda_diff: float | None = None
    T_steps: int | None = None
    mode: str = "ddim"
    grad_mode: str = "exact"
    early_stop_frac: float = 1.0
    eps_mag: float = 1e-6
    seed: int = 0
    # "alpha_bar" multiplies zeta by alpha_bar_t so the step taken on the clean
    # estimate has the same size at every t; "none" keeps zeta fixed
    zeta_scaling: str = "alpha_bar"
    # Y is max-normalized, so its absolute scale is unknown; gamma is taken
    # relative to this reference (see calibrate_gamma_scale)
    gamma_scale: float = 1.0

    def validate(self) -> "PosteriorConfig":
        problems = []
        if self.zeta < 0:
            problems.append(f"zeta must be >= 0, got {self.zeta}")
        if not self.gamma > 0:
            problems.append(f"gamma must be > 0, got {self.gamma}")
        if self.K < 0:
            problems.append(f"K must be >= 0, got {self.K}")
        if self.lambda_diff is not None and self.lambda_diff < 0:
            problems.append(f"lambda_diff must be >= 0, got {self.lambda_diff}")
        if self.T_steps is not None and self.T_steps < 1:
            problems.append(f"T_steps must be >= 1, got {self.T_steps}")
        if self.mode not in ("ancestral", "ddim"):
            problems.append(f"mode must be 'ancestral' or 'ddim', got {self.mode!r}")
        if self.grad_mode not in ("exact", "passthrough"):
            problems.append(f"grad_mode must be 'exact' or 'passthrough', got {self.grad_mode!r}")
        if self.zeta_scaling not in ("none", "alpha_bar"):
            problems.append(f"zeta_scaling must be 'none' or 'alpha_bar', got {self.zeta_scaling!r}")
        if not self.gamma_scale > 0:
            problems.append(f"gamma_scale must be > 0, got {self.gamma_scale}")
        if not 0 < self.early_stop_frac <= 1:
            problems.append(f"early_stop_frac must be in (0, 1], got {self.early_stop_frac}")
        if problems:
            raise ConfigError(problems)
        return self


@dataclass(frozen=True)
class RegConfig:
    norm: str = "L2"
    reg_weight: float = 0.1
    step_size: float = 1e-3
    iters: int = 2000
    # zero is a stationary point of the smoothed-modulus fidelity, so the
    # default start is a small uniform value
    init: str = "constant"
    init_value: float = 1e-3
    seed: int = 0
    eps_mag: float = 1e-6

    def validate(self) -> "RegConfig":
        problems = []
        if self.norm not in ("L1", "L2"):
            problems.append(f"norm must be 'L1' or 'L2', got {self.norm!r}")
        if self.reg_weight < 0:
            problems.append(f"reg_weight must be >= 0, got {self.reg_weight}")
        if not self.step_size > 0:
            problems.append(f"step_size must be > 0, got {self.step_size}")
        if self.iters < 0:
            problems.append(f"iters must be >= 0, got {self.iters}")
        if self.init not in ("zeros", "constant", "random"):
            problems.append(f"init must be 'zeros', 'constant' or 'random', got {self.init!r}")
        if problems:
            raise ConfigError(problems)
        return self


@dataclass(frozen=True)
class CfarConfig:
    guard_cells: tuple[int, int] = (2, 2)
    train_cells: tuple[int, int] = (8, 8)
    threshold_factor: float = 3.0

    def validate(self) -> "CfarConfig":
        problems = []
        for g, t, axis in zip(self.guard_cells, self.train_cells, ("az", "rng")):
            if g < 0 or not g < t:
                problems.append(f"{axis}: need 0 <= guard ({g}) < train ({t})")
        if not self.threshold_factor > 1:
            problems.append(f"threshold_factor must be > 1, got {self.threshold_factor}")
        if problems:
            raise ConfigError(problems)
        return self


# ---------------------------------------------------------------------------
# posterior sampling


@dataclass
class StepRecord:
    step: int
    t: int
    fidelity: float
    cd: float = float("nan")
    inner_fidelity: list[float] = field(default_factory=list)


def _cd_or_nan(mask: SceneMask, gt: PointSet | None) -> float:
    if gt is None:
        return float("nan")
    try:
        return compute_metrics(mask_to_points(mask, POINT_THRESHOLD), gt).cd
    except MetricUndefinedError:
        return float("nan")


def posterior_sample(
    Y: Heatmap,
    B: np.ndarray,
    denoiser: Callable,
    codec: Codec,
    sched: NoiseSchedule,
    cfg: PosteriorConfig = PosteriorConfig(),
    gt: PointSet | None = None,
    trace: bool = True,
    record_inner: bool = False,
) -> tuple[SceneMask, list[StepRecord]]:
    """Measurement-guided reverse diffusion.

    Each outer step first takes the prior update from ``z_t`` to
    ``z_hat_{t-1}``, then ``K`` times: Tweedie estimate of the clean latent,
    decode to a mask in ``[0, 1]`` scale, and a descent step of size
    ``zeta`` on ``||gamma Y - |A(x)|||^2`` with respect to ``z_hat``, where
    the effective gamma is ``cfg.gamma * cfg.gamma_scale``.

    The gradient passes through the decoder's adjoint and, for
    ``grad_mode="exact"``, through the network (vector-Jacobian product);
    ``"passthrough"`` treats the Tweedie map as ``1/sqrt(alpha_bar_t)``.

    With ``trace=True`` each step records the fidelity and (when ``gt`` is
    given) the Chamfer distance of the current clean decode, at the cost of
    one extra network call per step.
    """
    cfg.validate()
    if isinstance(denoiser, Denoiser) and not denoiser.trained:
        raise ValueError("posterior_sample needs a trained denoiser")
    if Y.mode != "magnitude":
        raise ValueError("posterior_sample expects a magnitude heatmap")
    if B.shape != (Y.grid.n_az, Y.grid.n_az):
        raise ValueError(f"imaging matrix {B.shape} does not match heatmap grid {Y.grid.shape}")
    if codec.grid_shape != Y.grid.shape:
        raise ValueError(f"codec grid {codec.grid_shape} does not match heatmap {Y.grid.shape}")
    grid = Y.grid
    y = Y.values
    gam = cfg.gamma * cfg.gamma_scale
    steps = sched.timesteps(cfg.T_steps)
    if cfg.mode == "ancestral" and len(steps) != sched.T:
        raise ConfigError(["ancestral sampling requires T_steps = T"])
    n_run = math.ceil(cfg.early_stop_frac * len(steps))

    g = torch.Generator().manual_seed(int(cfg.seed))
    z = torch.randn(codec.latent_shape, generator=g, dtype=torch.float64)
    records: list[StepRecord] = []
    measure = cfg.K > 0 and cfg.zeta > 0

    def decode_x(zbar):
        return 0.5 * (codec.decode(zbar.detach().numpy()) + 1.0)

    for n, t in enumerate(steps[:n_run]):
        t_prev = steps[n + 1] if n + 1 < len(steps) else 0
        with torch.no_grad():
            mean = reverse_mean(z, t, denoiser, sched, cfg.mode, t_prev)
            if cfg.lambda_diff is None:
                z_hat = mean
            else:
                # Sigma = beta_t I
                z_hat = z + (cfg.lambda_diff / float(sched.beta[t - 1])) * (mean - z)
            if cfg.mode == "ancestral" and t > 1:
                z_hat = z_hat + float(sched.sigma[t - 1]) * torch.randn(
                    z.shape, generator=g, dtype=torch.float64
                )

        inner = []
        if measure:
            sq_ab = math.sqrt(sched.abar(t))
            step = cfg.zeta * (sched.abar(t) if cfg.zeta_scaling == "alpha_bar" else 1.0)
            for _ in range(cfg.K):
                if cfg.grad_mode == "exact":
                    zk = z_hat.detach().requires_grad_(True)
                    with torch.enable_grad():
                        zbar = tweedie_z0(zk, t, denoiser, sched)
                else:
                    with torch.no_grad():
                        zbar = tweedie_z0(z_hat, t, denoiser, sched)
                x0 = decode_x(zbar)
                gx = _fidelity_grad(x0, y, gam, B, "magnitude", cfg.eps_mag)
                if record_inner:
                    inner.append(_magnitude_fidelity(x0, y, gam, B, cfg.eps_mag))
                g_lat = torch.from_numpy(0.5 * codec.decode_adjoint(gx))
                if cfg.grad_mode == "exact":
                    (g_z,) = torch.autograd.grad(zbar, zk, grad_outputs=g_lat)
                else:
                    g_z = g_lat / sq_ab
                z_hat = z_hat.detach() - step * g_z
        z = z_hat.detach()
        if not torch.isfinite(z).all():
            raise NumericalError(f"non-finite sampler state at step {n + 1} (t={t})")

        if trace or n + 1 == n_run:
            with torch.no_grad():
                zbar = z if t_prev == 0 else tweedie_z0(z, t_prev, denoiser, sched)
            current = decode_to_mask(zbar, codec, grid)
            if trace:
                fid = _magnitude_fidelity(current.values, y, gam, B, cfg.eps_mag)
                records.append(StepRecord(n + 1, t, fid, _cd_or_nan(current, gt), inner))
    return current, records


def fitted_scale(x: np.ndarray, y: np.ndarray, B: np.ndarray, eps_mag: float = 1e-6) -> float:
    """Least-squares ``argmin_g ||g y - |A x|||^2`` for the smoothed modulus."""
    yy = float(np.sum(y * y))
    if yy == 0.0:
        raise ValueError("cannot fit a scale to an all-zero heatmap")
    m = np.sqrt(np.abs(B @ x) ** 2 + eps_mag**2)
    return float(np.sum(y * m)) / yy


def calibrate_gamma_scale(scenes: Sequence[SceneMask], measure: Callable, B: np.ndarray) -> float:
    """Median over a corpus of the scale that best maps ``Y`` onto ``|B x|``.

    ``measure(i, scene)`` returns the magnitude heatmap of scene ``i``.  A
    per-instance fit is not usable inside the sampler (an empty estimate fits
    with scale 0), so the scale is fixed once from training data.
    """
    if not len(scenes):
        raise ValueError("calibration needs at least one scene")
    return float(np.median([fitted_scale(s.values, measure(i, s).values, B) for i, s in enumerate(scenes)]))


def _magnitude_fidelity(x, y, gamma, B, eps_mag):
    m = np.sqrt(np.abs(B @ x) ** 2 + eps_mag**2)
    return float(np.sum((gamma * y - m) ** 2))


# ---------------------------------------------------------------------------
# regularized baselines


def _reg_objective_grad(x, y, B, mode, cfg: RegConfig):
    return _fidelity_grad(x, y, 1.0, B, mode, cfg.eps_mag)


def solve_regularized_arrays(y: np.ndarray, B: np.ndarray, cfg: RegConfig, mode: str = "magnitude"):
    """Projected descent on ``||y - A(x)||^2 + reg_weight * R(x)`` over ``x in [0, 1]``.

    L1 uses a proximal soft-threshold step, L2 a plain gradient step; both
    clip to ``[0, 1]`` afterwards.  Returns ``(x, grad_norms)`` where
    ``grad_norms[i]`` is the norm of the smooth objective's gradient at
    iterate ``i``.
    """
    cfg.validate()
    n_az = B.shape[1]
    shape = (n_az,) + y.shape[1:]
    if cfg.init == "random":
        x = np.random.default_rng(cfg.seed).uniform(0.0, 1.0, shape)
    elif cfg.init == "constant":
        x = np.full(shape, float(cfg.init_value))
    else:
        x = np.zeros(shape)
    s, lam = cfg.step_size, cfg.reg_weight
    norms = []
    for it in range(cfg.iters + 1):
        grad = _reg_objective_grad(x, y, B, mode, cfg)
        if cfg.norm == "L2":
            grad = grad + 2.0 * lam * x
        norms.append(float(np.linalg.norm(grad)))
        if it == cfg.iters:
            break
        v = x - s * grad
        if cfg.norm == "L1":
            v = np.sign(v) * np.maximum(np.abs(v) - s * lam, 0.0)
        x = np.clip(v, 0.0, 1.0)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"regularized solver diverged at iteration {it + 1}")
    return x, norms


def solve_regularized(Y: Heatmap, B: np.ndarray, cfg: RegConfig = RegConfig(), grid=None) -> SceneMask:
    grid = Y.grid if grid is None else grid
    if B.shape != (grid.n_az, grid.n_az):
        raise ValueError(f"imaging matrix {B.shape} does not match grid {grid.shape}")
    x, _ = solve_regularized_arrays(Y.values, B, cfg, Y.mode)
    return SceneMask(grid, x)


# ---------------------------------------------------------------------------
# CFAR


def cfar_detect(Y: Heatmap, cfg: CfarConfig = CfarConfig()) -> SceneMask:
    """Cell-averaging CFAR; the noise estimate averages the training ring
    that falls inside the grid."""
    cfg.validate()
    if Y.mode != "magnitude":
        raise ValueError("cfar_detect expects a magnitude heatmap")
    v = Y.values
    (ga, gr), (ta, tr) = cfg.guard_cells, cfg.train_cells
    if 2 * ta + 1 > v.shape[0] or 2 * tr + 1 > v.shape[1]:
        raise ConfigError(
            [f"CFAR window {(2 * ta + 1, 2 * tr + 1)} larger than heatmap {v.shape}"]
        )
    ring = np.ones((2 * ta + 1, 2 * tr + 1))
    ring[ta - ga : ta + ga + 1, tr - gr : tr + gr + 1] = 0.0
    total = correlate(v, ring, mode="constant", cval=0.0)
    count = correlate(np.ones_like(v), ring, mode="constant", cval=0.0)
    noise = total / count
    return SceneMask(Y.grid, (v > cfg.threshold_factor * noise).astype(float))


# ---------------------------------------------------------------------------
# studies


def _final_cd(mask: SceneMask, gt: PointSet) -> float:
    return _cd_or_nan(mask, gt)


@dataclass
class VarianceReport:
    rows: list[dict]              # method, seed, final_cd
    traces: dict                  # (method, seed) -> list of (step, fidelity, cd)

    def summary(self) -> dict:
        out = {}
        for method in dict.fromkeys(r["method"] for r in self.rows):
            v = np.array([r["final_cd"] for r in self.rows if r["method"] == method])
            # shift by the first value so identical runs give an exact zero
            out[method] = {"mean": float(np.mean(v)), "std": float(np.std(v - v[0])), "n": len(v)}
        return out

    def step_stats(self, method: str) -> list[dict]:
        runs = [np.array([[s[1], s[2]] for s in tr]) for (m, _), tr in self.traces.items() if m == method]
        if not runs:
            return []
        arr = np.stack(runs)
        return [
            {"step": i + 1, "fid_mean": float(np.mean(arr[:, i, 0])), "fid_std": float(np.std(arr[:, i, 0])),
             "cd_mean": float(np.nanmean(arr[:, i, 1])), "cd_std": float(np.nanstd(arr[:, i, 1]))}
            for i in range(arr.shape[1])
        ]


def run_variance_study(
    Y: Heatmap,
    B: np.ndarray,
    denoiser: Callable,
    codec: Codec,
    sched: NoiseSchedule,
    cfg: PosteriorConfig,
    n_seeds: int,
    gt: PointSet,
    reg_cfgs: Sequence[RegConfig] = (),
) -> VarianceReport:
    """Repeat each method with seeds ``0..n_seeds-1`` on one measurement."""
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    rows, traces = [], {}
    for seed in range(n_seeds):
        mask, rec = posterior_sample(Y, B, denoiser, codec, sched, replace(cfg, seed=seed), gt=gt)
        rows.append({"method": "posterior", "seed": seed, "final_cd": _final_cd(mask, gt)})
        traces[("posterior", seed)] = [(r.step, r.fidelity, r.cd) for r in rec]
    for rc in reg_cfgs:
        name = rc.norm.lower()
        for seed in range(n_seeds):
            mask = solve_regularized(Y, B, replace(rc, seed=seed))
            rows.append({"method": name, "seed": seed, "final_cd": _final_cd(mask, gt)})
    return VarianceReport(rows, traces)


@dataclass
class SweepReport:
    rows: list[dict]              # zeta, K, gamma, mean_cd

    @property
    def best(self) -> dict:
        finite = [r for r in self.rows if np.isfinite(r["mean_cd"])]
        return min(finite, key=lambda r: r["mean_cd"])


def run_sweep(
    Y_set: Sequence[Heatmap],
    B: np.ndarray,
    denoiser: Callable,
    codec: Codec,
    sched: NoiseSchedule,
    zeta_grid: Sequence[float],
    K_grid: Sequence[int],
    gamma_grid: Sequence[float],
    gt_set: Sequence[PointSet],
    base: PosteriorConfig = PosteriorConfig(),
    progress: Callable[[dict], None] | None = None,
) -> SweepReport:
    """Mean final CD over the scene set for every ``(zeta, K, gamma)`` combination."""
    if not (len(zeta_grid) and len(K_grid) and len(gamma_grid)):
        raise ValueError("sweep grids must be nonempty")
    if len(Y_set) != len(gt_set):
        raise ValueError("Y_set and gt_set differ in length")
    rows = []
    for zeta in zeta_grid:
        for K in K_grid:
            for gamma in gamma_grid:
                cfg = replace(base, zeta=float(zeta), K=int(K), gamma=float(gamma))
                cds = []
                for Y, gt in zip(Y_set, gt_set):
                    mask, _ = posterior_sample(Y, B, denoiser, codec, sched, cfg, trace=False)
                    cds.append(_final_cd(mask, gt))
                row = {"zeta": float(zeta), "K": int(K), "gamma": float(gamma),
                       "mean_cd": float(np.mean(cds))}
                rows.append(row)
                if progress is not None:
                    progress(row)
    return SweepReport(rows)
