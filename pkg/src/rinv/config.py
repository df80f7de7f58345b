"""JSON run configuration.

Top-level sections are fixed: ``grid``, ``array``, ``noise``, ``schedule``,
``posterior``, ``regularized``, ``cfar``, ``io``.  Unknown keys anywhere are
rejected and every violation is reported together in one
:class:`~rinv.errors.ConfigError`.  An empty document is a valid,
fully-defaulted configuration.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "grid": {
        "n_az": 64,
        "n_rng": 96,
        "az_min_deg": -90.0,
        "az_max_deg": 90.0,
        "rng_max_m": 103.0,
        # synthetic scene corpus
        "clutter_density": 0.002,
    },
    "array": {
        "preset": "3t4r",
        "n_antennas": None,
        "spacing_over_lambda": 0.5,
        # divide the imaging matrix by N inside the solvers' fidelity term
        "unit_gain": True,
    },
    "noise": {
        "sigma": 0.01,
        "seed": 0,
    },
    "schedule": {
        "T": 200,
        "beta_min": 5e-4,
        "beta_max": 0.1,
        "codec": "identity",
        "denoiser": {"kind": "unet", "widths": [16, 32, 64], "t_dim": 64, "hidden": 1024, "param": "logit"},
        "epochs": 30,
        "batch": 32,
        "lr": 1e-3,
    },
    "posterior": {
        "zeta": 1.0,
        "gamma": 1.0,
        "K": 20,
        "lambda_diff": None,
        "T_steps": 50,
        "mode": "ddim",
        "grad_mode": "exact",
        "early_stop_frac": 1.0,
        "eps_mag": 1e-6,
        "zeta_scaling": "alpha_bar",
    },
    "regularized": {
        "reg_weight": 0.1,
        "step_size": 1e-3,
        "iters": 2000,
        "init": "constant",
        "init_value": 1e-3,
        "eps_mag": 1e-6,
    },
    "cfar": {
        "guard_cells": [2, 2],
        "train_cells": [8, 8],
        "threshold_factor": 3.0,
    },
    "io": {
        "point_threshold": 0.01,
        "figures": True,
        "sweep_zeta": [0.0, 1e-4, 1e-3, 1e-2],
        "sweep_K": [5, 10, 20],
        "sweep_gamma": [1.0],
        "variance_methods": ["posterior", "l1", "l2"],
    },
}

# (type check, description) per leaf; None means "nullable"
_NUM = (int, float)
_TYPES = {
    "grid": {"n_az": int, "n_rng": int, "az_min_deg": _NUM, "az_max_deg": _NUM,
             "rng_max_m": _NUM, "clutter_density": _NUM},
    "array": {"preset": (str, type(None)), "n_antennas": (int, type(None)),
              "spacing_over_lambda": _NUM, "unit_gain": bool},
    "noise": {"sigma": _NUM, "seed": int},
    "schedule": {"T": int, "beta_min": _NUM, "beta_max": _NUM, "codec": str, "denoiser": dict,
                 "epochs": int, "batch": int, "lr": _NUM},
    "posterior": {"zeta": _NUM, "gamma": _NUM, "K": int, "lambda_diff": (int, float, type(None)),
                  "T_steps": (int, type(None)), "mode": str, "grad_mode": str,
                  "early_stop_frac": _NUM, "eps_mag": _NUM, "zeta_scaling": str},
    "regularized": {"reg_weight": _NUM, "step_size": _NUM, "iters": int, "init": str,
                    "init_value": _NUM, "eps_mag": _NUM},
    "cfar": {"guard_cells": list, "train_cells": list, "threshold_factor": _NUM},
    "io": {"point_threshold": _NUM, "figures": bool, "sweep_zeta": list, "sweep_K": list,
           "sweep_gamma": list, "variance_methods": list},
}
_DENOISER_KEYS = {"kind", "widths", "t_dim", "hidden", "param"}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, key):
        return self.sections[key]

    # typed views -----------------------------------------------------------
    def grid(self):
        from .grid import make_grid

        g = self["grid"]
        return make_grid(g["n_az"], g["n_rng"], g["az_min_deg"], g["az_max_deg"], g["rng_max_m"])

    def array(self):
        from .radar import AntennaArray

        a = self["array"]
        if a["n_antennas"] is not None:
            return AntennaArray(a["n_antennas"], a["spacing_over_lambda"])
        base = AntennaArray.preset(a["preset"])
        return AntennaArray(base.n_antennas, a["spacing_over_lambda"])

    def schedule(self):
        from .diffusion import make_schedule

        s = self["schedule"]
        return make_schedule(s["T"], s["beta_min"], s["beta_max"])

    def posterior(self, seed: int = 0):
        from .solvers import PosteriorConfig

        return PosteriorConfig(seed=seed, **self["posterior"]).validate()

    def regularized(self, norm: str, seed: int = 0):
        from .solvers import RegConfig

        return RegConfig(norm=norm, seed=seed, **self["regularized"]).validate()

    def cfar(self):
        from .solvers import CfarConfig

        c = self["cfar"]
        return CfarConfig(tuple(c["guard_cells"]), tuple(c["train_cells"]), c["threshold_factor"]).validate()


def _check_types(doc: dict, problems: list) -> set:
    """Record type problems; return the (section, key) paths that failed."""
    bad = set()
    for section, value in doc.items():
        if section not in DEFAULTS:
            problems.append(f"unknown top-level key {section!r}")
            continue
        if not isinstance(value, dict):
            problems.append(f"{section}: expected an object, got {type(value).__name__}")
            continue
        for key, v in value.items():
            if key not in _TYPES[section]:
                problems.append(f"{section}.{key}: unknown key")
                continue
            want = _TYPES[section][key]
            if isinstance(v, bool) and want is not bool and bool not in (want if isinstance(want, tuple) else (want,)):
                problems.append(f"{section}.{key}: expected {_type_name(want)}, got boolean")
                bad.add((section, key))
            elif not isinstance(v, want):
                problems.append(f"{section}.{key}: expected {_type_name(want)}, got {type(v).__name__}")
                bad.add((section, key))
        den = value.get("denoiser") if section == "schedule" else None
        if isinstance(den, dict):
            for key in den:
                if key not in _DENOISER_KEYS:
                    problems.append(f"schedule.denoiser.{key}: unknown key")
                    bad.add(("schedule", "denoiser"))
    return bad


def _type_name(want) -> str:
    if isinstance(want, tuple):
        return " or ".join(sorted({"null" if w is type(None) else w.__name__ for w in want}))
    return want.__name__


def _check_values(s: dict, problems: list) -> None:
    g = s["grid"]
    if g["n_az"] < 2:
        problems.append("grid.n_az must be >= 2")
    if g["n_rng"] < 2:
        problems.append("grid.n_rng must be >= 2")
    if not g["az_min_deg"] < g["az_max_deg"]:
        problems.append("grid.az_min_deg must be below grid.az_max_deg")
    if not g["rng_max_m"] > 0:
        problems.append("grid.rng_max_m must be positive")
    if not 0 <= g["clutter_density"] < 1:
        problems.append("grid.clutter_density must be in [0, 1)")
    a = s["array"]
    from .radar import ARRAY_PRESETS

    if a["n_antennas"] is None and a["preset"] not in ARRAY_PRESETS:
        problems.append(f"array.preset must be one of {sorted(ARRAY_PRESETS)}")
    if a["n_antennas"] is not None and a["n_antennas"] < 1:
        problems.append("array.n_antennas must be >= 1")
    if not 0 < a["spacing_over_lambda"] <= 0.5:
        problems.append("array.spacing_over_lambda must be in (0, 0.5]")
    if s["noise"]["sigma"] < 0:
        problems.append("noise.sigma must be >= 0")
    sc = s["schedule"]
    if sc["T"] < 1:
        problems.append("schedule.T must be >= 1")
    if not 0 < sc["beta_min"] <= sc["beta_max"] < 1:
        problems.append("schedule needs 0 < beta_min <= beta_max < 1")
    if sc["codec"] not in ("identity", "pool2"):
        problems.append("schedule.codec must be 'identity' or 'pool2'")
    if sc["epochs"] < 1 or sc["batch"] < 1 or not sc["lr"] > 0:
        problems.append("schedule.epochs, schedule.batch and schedule.lr must be positive")
    if sc["denoiser"].get("kind", "unet") not in ("unet", "mlp"):
        problems.append("schedule.denoiser.kind must be 'unet' or 'mlp'")
    if sc["denoiser"].get("param", "eps") not in ("eps", "v", "logit"):
        problems.append("schedule.denoiser.param must be 'eps', 'v' or 'logit'")
    p = s["posterior"]
    if p["zeta"] < 0:
        problems.append("posterior.zeta must be >= 0")
    if not p["gamma"] > 0:
        problems.append("posterior.gamma must be > 0")
    if p["K"] < 0:
        problems.append("posterior.K must be >= 0")
    if p["mode"] not in ("ancestral", "ddim"):
        problems.append("posterior.mode must be 'ancestral' or 'ddim'")
    if p["grad_mode"] not in ("exact", "passthrough"):
        problems.append("posterior.grad_mode must be 'exact' or 'passthrough'")
    if not 0 < p["early_stop_frac"] <= 1:
        problems.append("posterior.early_stop_frac must be in (0, 1]")
    if p["T_steps"] is not None and p["T_steps"] < 1:
        problems.append("posterior.T_steps must be >= 1")
    if p["zeta_scaling"] not in ("none", "alpha_bar"):
        problems.append("posterior.zeta_scaling must be 'none' or 'alpha_bar'")
    r = s["regularized"]
    if r["reg_weight"] < 0 or not r["step_size"] > 0 or r["iters"] < 0:
        problems.append("regularized: need reg_weight >= 0, step_size > 0, iters >= 0")
    if r["init"] not in ("zeros", "constant", "random"):
        problems.append("regularized.init must be 'zeros', 'constant' or 'random'")
    c = s["cfar"]
    for key in ("guard_cells", "train_cells"):
        if len(c[key]) != 2 or not all(isinstance(v, int) and v >= 0 for v in c[key]):
            problems.append(f"cfar.{key} must be two nonnegative integers")
    if len(c["guard_cells"]) == 2 and len(c["train_cells"]) == 2:
        if any(gv >= tv for gv, tv in zip(c["guard_cells"], c["train_cells"])):
            problems.append("cfar.guard_cells must be smaller than cfar.train_cells")
    if not c["threshold_factor"] > 1:
        problems.append("cfar.threshold_factor must be > 1")
    io = s["io"]
    if io["point_threshold"] < 0:
        problems.append("io.point_threshold must be >= 0")
    for key in ("sweep_zeta", "sweep_K", "sweep_gamma"):
        if not io[key]:
            problems.append(f"io.{key} must be nonempty")
    bad = set(io["variance_methods"]) - {"posterior", "l1", "l2"}
    if bad:
        problems.append(f"io.variance_methods has unknown entries {sorted(bad)}")


def parse_config(doc) -> RunConfig:
    """Validate a decoded JSON document and merge it over the defaults."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError([f"config must be a JSON object, got {type(doc).__name__}"])
    bad = _check_types(doc, problems)
    # range checks still run on the well-typed part so every violation surfaces at once
    merged = copy.deepcopy(DEFAULTS)
    for section, value in doc.items():
        if section not in DEFAULTS or not isinstance(value, dict):
            continue
        value = {k: v for k, v in value.items() if k in _TYPES[section] and (section, k) not in bad}
        if section == "schedule" and "denoiser" in value:
            merged["schedule"]["denoiser"].update(value.pop("denoiser"))
        merged[section].update(value)
    _check_values(merged, problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(merged)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return parse_config(doc)
