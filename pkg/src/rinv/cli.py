"""``rinv`` command line.

Exit codes: 0 success, 2 configuration or invalid input, 3 I/O or file
format, 4 numerical failure (including an undefined metric).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, MetricUndefinedError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "RINV_THREADS"


def _scene_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _scene_files(scenes_dir) -> list[Path]:
    d = Path(scenes_dir)
    if not d.is_dir():
        raise OSError(f"scene directory {d} does not exist")
    files = sorted(d.glob("scene_*.grid")) or sorted(d.glob("*.grid"))
    return files


def _check_grid(cfg: RunConfig, grid, what: str) -> None:
    want = cfg.grid()
    if grid != want:
        raise ConfigError([f"{what} grid {grid.header()!r} does not match configured grid {want.header()!r}"])


def _load_prior(cfg: RunConfig, checkpoint, grid):
    from .diffusion import Codec, load_checkpoint_bytes, schedule_from_arch
    from .io import read_bytes

    den = load_checkpoint_bytes(read_bytes(checkpoint))
    sched = schedule_from_arch(den.arch) or cfg.schedule()
    codec = Codec(den.arch.get("codec", cfg["schedule"]["codec"]), grid.shape)
    if list(codec.latent_shape) != list(den.arch.get("latent_shape", codec.latent_shape)):
        raise ConfigError([f"checkpoint latent {den.arch['latent_shape']} does not fit grid {grid.shape}"])
    return den, sched, codec


def _posterior_cfg(cfg: RunConfig, args, den):
    from dataclasses import replace

    # gamma in the config is relative to the scale calibrated at training time
    return replace(cfg.posterior(_seed(args)), gamma_scale=float(den.arch.get("gamma_scale", 1.0)))


def _measure(cfg: RunConfig, scene, noise_seed: int):
    from .radar import build_imaging_matrix, forward_measure, to_magnitude

    B = build_imaging_matrix(scene.grid, cfg.array())
    return to_magnitude(forward_measure(scene, B, cfg["noise"]["sigma"], seed=noise_seed))


def _solver_matrix(cfg: RunConfig, grid):
    from .radar import fidelity_matrix

    return fidelity_matrix(grid, cfg.array(), cfg["array"]["unit_gain"])


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    from .grid import generate_scene, mask_to_points, random_scene_spec
    from .io import write_grid, write_points, write_table

    if args.n < 0:
        raise ConfigError(["--n must be >= 0"])
    grid = cfg.grid()
    out = Path(args.out)
    base = _seed(args)
    rows = []
    for i in range(args.n):
        seed = _scene_seed(base, i)
        spec = random_scene_spec(seed, cfg["grid"]["clutter_density"])
        mask = generate_scene(spec, grid)
        name = f"scene_{i:04d}.grid"
        write_grid(out / name, mask)
        if args.gt_points:
            write_points(out / f"scene_{i:04d}.csv", mask_to_points(mask, 0.5))
        rows.append({"index": i, "seed": seed, "file": name, "n_walls": spec.n_walls,
                     "n_point_targets": spec.n_point_targets, "occupied": int(mask.values.sum())})
    write_table(out / "manifest.csv", ["index", "seed", "file", "n_walls", "n_point_targets", "occupied"], rows)
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    from .io import read_mask, write_complex, write_grid
    from .radar import AntennaArray, build_imaging_matrix, forward_measure, to_magnitude

    scene = read_mask(args.scene)
    _check_grid(cfg, scene.grid, str(args.scene))
    array = cfg.array()
    if args.array is not None:
        array = AntennaArray.preset(args.array)
    if args.n_antennas is not None:
        array = AntennaArray(args.n_antennas, array.spacing_over_lambda)
    sigma = cfg["noise"]["sigma"] if args.noise_sigma is None else args.noise_sigma
    B = build_imaging_matrix(scene.grid, array)
    hm = forward_measure(scene, B, sigma, seed=_seed(args, cfg["noise"]["seed"]))
    if args.complex_out:
        write_complex(args.complex_out, hm)
    mag = to_magnitude(hm)
    write_grid(args.out, mag)
    print(f"N={array.n_antennas} sigma={sigma:g} max={float(mag.values.max()):g} -> {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .diffusion import Codec, save_checkpoint_bytes, train_denoiser
    from .io import atomic_write_bytes, read_mask, write_table
    from .solvers import calibrate_gamma_scale

    files = _scene_files(args.scenes)
    if args.limit is not None:
        files = files[: args.limit]
    if not files:
        raise ConfigError([f"training corpus {args.scenes} is empty"])
    scenes = [read_mask(f) for f in files]
    grid = scenes[0].grid
    for f, s in zip(files, scenes):
        if s.grid != grid:
            raise ConfigError([f"{f} has grid {s.grid.header()!r}, expected {grid.header()!r}"])
    sc = cfg["schedule"]
    epochs = sc["epochs"] if args.epochs is None else args.epochs
    codec = Codec(sc["codec"], grid.shape)
    t0 = time.perf_counter()

    def log(epoch, loss):
        print(f"epoch {epoch}/{epochs} loss {loss:.6g} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr)

    res = train_denoiser(scenes, codec, cfg.schedule(), epochs=epochs, batch=sc["batch"], lr=sc["lr"],
                         seed=_seed(args), arch=dict(sc["denoiser"]), log=log)
    noise_seed = cfg["noise"]["seed"]
    scale = calibrate_gamma_scale(scenes, lambda i, s: _measure(cfg, s, noise_seed + i), _solver_matrix(cfg, grid))
    res.denoiser.arch["gamma_scale"] = scale
    atomic_write_bytes(args.out, save_checkpoint_bytes(res.denoiser))
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    write_table(loss_csv, ["epoch", "mean_loss"],
                [{"epoch": i + 1, "mean_loss": v} for i, v in enumerate(res.loss_trace)])
    if cfg["io"]["figures"]:
        from .plotting import plot_loss

        plot_loss(res.loss_trace, loss_csv.with_suffix(".png"))
    trace = res.loss_trace
    print(f"trained on {len(scenes)} scenes, {epochs} epochs: loss {trace[0]:.6g} -> {trace[-1]:.6g} "
          f"in {time.perf_counter() - t0:.1f}s; gamma scale {scale:.4g}")
    return EXIT_OK


def cmd_enhance(args, cfg: RunConfig) -> int:
    from .grid import mask_to_points
    from .io import read_heatmap, read_points, write_grid, write_points
    from .metrics import compute_metrics
    from .solvers import cfar_detect, posterior_sample, solve_regularized

    if args.method == "posterior" and not args.checkpoint:
        raise ConfigError(["--method posterior needs --checkpoint"])
    if args.method != "posterior" and args.checkpoint:
        raise ConfigError([f"--checkpoint is only used by --method posterior, not {args.method}"])
    Y = read_heatmap(args.heatmap)
    if Y.mode != "magnitude":
        raise ConfigError(["enhance expects a magnitude heatmap (RINVGRID)"])
    grid = Y.grid
    t0 = time.perf_counter()
    if args.method == "posterior":
        den, sched, codec = _load_prior(cfg, args.checkpoint, grid)
        mask, _ = posterior_sample(Y, _solver_matrix(cfg, grid), den, codec, sched,
                                   _posterior_cfg(cfg, args, den), trace=False)
    elif args.method in ("l1", "l2"):
        mask = solve_regularized(Y, _solver_matrix(cfg, grid), cfg.regularized(args.method.upper(), _seed(args)))
    else:
        mask = cfar_detect(Y, cfg.cfar())
    elapsed = time.perf_counter() - t0
    points = mask_to_points(mask, cfg["io"]["point_threshold"])
    write_grid(args.out_mask, mask)
    write_points(args.out_points, points)
    msg = f"method={args.method} points={len(points)} elapsed_s={elapsed:.3f}"
    if args.gt:
        msg += f" cd={compute_metrics(points, read_points(args.gt)).cd:.6g}"
    print(msg)
    return EXIT_OK


_METRIC_HEADER = ["frame", "cd", "ucd", "mhd", "umhd", "n_pred", "n_gt"]


def cmd_eval(args, cfg: RunConfig) -> int:
    from .io import append_table_rows, read_points
    from .metrics import compute_metrics

    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise ConfigError(["pred and gt must both be files or both be directories"])
    if pred.is_dir():
        names = sorted({p.name for p in pred.glob("*.csv")} & {p.name for p in gt.glob("*.csv")})
        if not names:
            raise OSError(f"no matching CSV files in {pred} and {gt}")
        pairs = [(Path(n).stem, pred / n, gt / n) for n in names]
    else:
        pairs = [(args.frame or pred.stem, pred, gt)]
    rows = []
    for frame, p, g in pairs:
        r = compute_metrics(read_points(p), read_points(g))
        rows.append({"frame": frame, "cd": r.cd, "ucd": r.ucd, "mhd": r.mhd, "umhd": r.umhd,
                     "n_pred": r.n_pred, "n_gt": r.n_gt})
        print(f"{frame}: cd={r.cd:.6g} ucd={r.ucd:.6g} mhd={r.mhd:.6g} umhd={r.umhd:.6g}")
    append_table_rows(args.out, _METRIC_HEADER, rows)
    return EXIT_OK


def _study_inputs(cfg, files, base_noise_seed):
    from .grid import mask_to_points
    from .io import read_mask

    Ys, gts = [], []
    for i, f in enumerate(files):
        scene = read_mask(f)
        _check_grid(cfg, scene.grid, str(f))
        Ys.append(_measure(cfg, scene, base_noise_seed + i))
        gts.append(mask_to_points(scene, 0.5))
    return Ys, gts


def cmd_sweep(args, cfg: RunConfig) -> int:
    from .io import write_table
    from .solvers import run_sweep

    files = _scene_files(args.scenes)[: args.n_scenes]
    if not files:
        raise ConfigError([f"no scenes in {args.scenes}"])
    grid = cfg.grid()
    Ys, gts = _study_inputs(cfg, files, cfg["noise"]["seed"])
    den, sched, codec = _load_prior(cfg, args.checkpoint, grid)
    io = cfg["io"]

    def progress(row):
        print(f"zeta={row['zeta']:g} K={row['K']} gamma={row['gamma']:g} mean_cd={row['mean_cd']:.6g}",
              file=sys.stderr)

    rep = run_sweep(Ys, _solver_matrix(cfg, grid), den, codec, sched, io["sweep_zeta"], io["sweep_K"],
                    io["sweep_gamma"], gts, base=_posterior_cfg(cfg, args, den), progress=progress)
    best = rep.best
    rows = [dict(r, best=int(r is best)) for r in rep.rows]
    write_table(args.out, ["zeta", "K", "gamma", "mean_cd", "best"], rows)
    if io["figures"]:
        from .plotting import plot_sweep

        plot_sweep(rep.rows, _figure_path(args.out))
    print(f"best: zeta={best['zeta']:g} K={best['K']} gamma={best['gamma']:g} mean_cd={best['mean_cd']:.6g}")
    return EXIT_OK


def cmd_variance(args, cfg: RunConfig) -> int:
    from dataclasses import replace

    from .io import write_table
    from .solvers import run_variance_study

    grid = cfg.grid()
    Ys, gts = _study_inputs(cfg, [Path(args.scene)], cfg["noise"]["seed"])
    den, sched, codec = _load_prior(cfg, args.checkpoint, grid)
    methods = cfg["io"]["variance_methods"]
    # the regularized solvers start from a random point so that seeds matter
    reg = [replace(cfg.regularized(m.upper()), init="random") for m in methods if m in ("l1", "l2")]
    rep = run_variance_study(Ys[0], _solver_matrix(cfg, grid), den, codec, sched,
                             _posterior_cfg(cfg, args, den), args.n_seeds, gts[0], reg_cfgs=reg)
    rows = [r for r in rep.rows if r["method"] in methods]
    write_table(args.out, ["method", "seed", "final_cd"], rows)
    trace_dir = Path(args.out).with_suffix("")
    trace_dir = trace_dir.parent / f"{trace_dir.name}_traces"
    for (method, seed), tr in rep.traces.items():
        write_table(trace_dir / f"{method}_seed{seed}.csv", ["step", "fidelity", "cd"],
                    [{"step": s, "fidelity": f, "cd": c} for s, f, c in tr])
    if cfg["io"]["figures"]:
        from .plotting import plot_variance

        plot_variance(rep, _figure_path(args.out))
    for method, st in rep.summary().items():
        if method in methods:
            print(f"{method}: mean_cd={st['mean']:.6g} std_cd={st['std']:.6g} n={st['n']}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    from .io import atomic_write_bytes, grid_from_bytes, read_bytes, read_heatmap, render_pgm_bytes

    data = read_bytes(args.grid)
    if data.startswith(b"RINVCPLX"):
        values = np.abs(read_heatmap(args.grid).values)
    else:
        _, values = grid_from_bytes(data)
    atomic_write_bytes(args.out, render_pgm_bytes(values, args.mode))
    if args.png:
        from .plotting import plot_grid_png

        plot_grid_png(values, args.png, log=args.mode == "log")
    print(f"rendered {values.shape[1]}x{values.shape[0]} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d, help="seed for every random draw of the command")
    p.add_argument("--threads", type=int, default=d, help=f"torch threads (fallback: ${THREADS_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rinv", description="Radar point-cloud enhancement with a diffusion prior.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = verb("gen-scenes", cmd_gen_scenes, "generate synthetic scene masks")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gt-points", action="store_true", help="also write scene_NNNN.csv ground-truth points")

    p = verb("simulate", cmd_simulate, "render a scene into a normalized magnitude heatmap")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--array", choices=["1t4r", "3t4r", "cascade", "ideal12t16r"])
    p.add_argument("--n-antennas", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--complex-out", help="also write the complex measurement (RINVCPLX)")

    p = verb("train", cmd_train, "train the diffusion prior on a scene directory")
    p.add_argument("scenes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, help="use only the first N scenes")

    p = verb("enhance", cmd_enhance, "recover a scene from a heatmap")
    p.add_argument("heatmap")
    p.add_argument("--method", choices=["posterior", "l1", "l2", "cfar"], default="posterior")
    p.add_argument("--checkpoint")
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-points", required=True)
    p.add_argument("--gt", help="ground-truth points CSV; prints the Chamfer distance")

    p = verb("eval", cmd_eval, "append point-set metrics to a CSV")
    p.add_argument("pred", help="points CSV or directory of them")
    p.add_argument("gt", help="points CSV or directory with matching names")
    p.add_argument("--out", required=True)
    p.add_argument("--frame")

    p = verb("sweep", cmd_sweep, "grid search over zeta, K and gamma")
    p.add_argument("scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=20)

    p = verb("variance", cmd_variance, "repeat enhancement over seeds on one scene")
    p.add_argument("scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", required=True)

    p = verb("render", cmd_render, "write a grid as an 8-bit PGM")
    p.add_argument("grid")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["gray", "log"], default="gray")
    p.add_argument("--png", help="also write a matplotlib PNG")
    return parser


def _set_threads(args) -> None:
    n = args.threads
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError([f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}"])
    if n is None:
        return
    if n < 1:
        raise ConfigError([f"thread count must be >= 1, got {n}"])
    import torch

    torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, MetricUndefinedError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
