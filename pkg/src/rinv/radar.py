"""Uniform-linear-array imaging operator and its adjoint/gradients.

The scene is a polar occupancy mask ``x[i_az, j_rng]``.  Range gating is
ideal, so each range column is imaged independently by the same
``n_az x n_az`` matrix ``B = G^H S``: the steering responses of the scene
cells (``S``) followed by a matched-filter bank steered at each output
azimuth bin (``G``).  Both use the grid's own azimuth bins, so ``G = S``.

Angles: the grid's azimuth ``phi`` is forward-referenced; the array phase
uses the angle from the array axis, ``theta = 90 deg - phi``, so
``cos(theta) = sin(phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import PolarGrid, SceneMask

ARRAY_PRESETS = {
    "1t4r": 4,
    "3t4r": 12,
    "cascade": 86,
    "ideal12t16r": 192,
}


@dataclass(frozen=True)
class AntennaArray:
    n_antennas: int
    spacing_over_lambda: float = 0.5

    def __post_init__(self):
        problems = []
        if self.n_antennas < 1:
            problems.append(f"n_antennas must be >= 1, got {self.n_antennas}")
        if not 0 < self.spacing_over_lambda <= 0.5:
            problems.append(
                f"spacing_over_lambda must be in (0, 0.5], got {self.spacing_over_lambda}"
            )
        if problems:
            raise ConfigError(problems)

    @classmethod
    def preset(cls, name: str) -> "AntennaArray":
        try:
            return cls(ARRAY_PRESETS[name])
        except KeyError:
            raise ConfigError(
                [f"unknown array preset {name!r}; choose from {sorted(ARRAY_PRESETS)}"]
            ) from None


def steering_vector(theta_deg: float, array: AntennaArray) -> np.ndarray:
    """Per-antenna phase response to a plane wave at ``theta_deg`` from the array axis."""
    k = np.arange(array.n_antennas)
    phase = 2 * np.pi * array.spacing_over_lambda * np.cos(np.deg2rad(theta_deg))
    return np.exp(-1j * phase * k)


def paper_theta_deg(grid: PolarGrid) -> np.ndarray:
    """Array-axis angle of each azimuth bin center."""
    return 90.0 - grid.az_centers_deg()


def steering_tensor(grid: PolarGrid, array: AntennaArray) -> np.ndarray:
    """``S[k, i]`` for every antenna ``k`` and azimuth bin ``i``, shape ``(N, n_az)``."""
    cos_theta = np.cos(np.deg2rad(paper_theta_deg(grid)))
    k = np.arange(array.n_antennas)[:, None]
    return np.exp(-1j * 2 * np.pi * array.spacing_over_lambda * k * cos_theta[None, :])


def build_imaging_matrix(grid: PolarGrid, array: AntennaArray) -> np.ndarray:
    """Matched-filter angle imaging matrix, ``B[a, i] = sum_k conj(G[k, a]) S[k, i]``."""
    S = steering_tensor(grid, array)
    B = S.conj().T @ S
    # matched filter at match: exactly N, free of rounding
    np.fill_diagonal(B, array.n_antennas)
    return B


def fidelity_matrix(grid: PolarGrid, array: AntennaArray, unit_gain: bool = True) -> np.ndarray:
    """Imaging matrix used inside the solvers' data term.

    With ``unit_gain`` the matrix is divided by ``N`` so a lone unit target
    images to a peak of 1, the same scale as a max-normalized heatmap.
    """
    B = build_imaging_matrix(grid, array)
    return B / array.n_antennas if unit_gain else B


@dataclass
class Heatmap:
    grid: PolarGrid
    values: np.ndarray
    mode: str = "complex"

    def __post_init__(self):
        if self.mode not in ("complex", "magnitude"):
            raise ValueError(f"unknown heatmap mode {self.mode!r}")
        dtype = complex if self.mode == "complex" else float
        self.values = np.asarray(self.values, dtype=dtype)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"heatmap shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if self.mode == "magnitude" and np.any(self.values < 0):
            raise ValueError("magnitude heatmap has negative entries")


def _check_grid(grid: PolarGrid, B: np.ndarray) -> None:
    if B.shape != (grid.n_az, grid.n_az):
        raise ValueError(
            f"imaging matrix shape {B.shape} does not match grid with n_az={grid.n_az}"
        )


def apply_operator(x: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A(x)``: image every range column, ``B @ x``."""
    return B @ x


def forward_measure(
    mask: SceneMask, B: np.ndarray, noise_sigma: float = 0.0, seed: int = 0
) -> Heatmap:
    """Complex heatmap ``A(x) + H`` with circular Gaussian ``H`` of total std ``noise_sigma``."""
    _check_grid(mask.grid, B)
    y = apply_operator(mask.values, B)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        h = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + h * (noise_sigma / np.sqrt(2.0))
    return Heatmap(mask.grid, y, "complex")


def to_magnitude(hm: Heatmap, normalize: bool = True) -> Heatmap:
    if hm.mode != "complex":
        raise ValueError("to_magnitude expects a complex heatmap")
    mag = np.abs(hm.values)
    peak = mag.max(initial=0.0)
    if normalize and peak > 0:
        mag = mag / peak
    return Heatmap(hm.grid, mag, "magnitude")


def adjoint_apply(hm: Heatmap, B: np.ndarray) -> np.ndarray:
    """``A^H(y)`` per range column."""
    _check_grid(hm.grid, B)
    return B.conj().T @ hm.values


def fidelity(
    x: np.ndarray, Y: Heatmap, gamma: float, B: np.ndarray, eps_mag: float = 1e-6
) -> float:
    """``||gamma Y - A(x)||^2``; in magnitude mode ``A(x)`` is the smoothed modulus."""
    Bx = B @ x
    if Y.mode == "complex":
        r = gamma * Y.values - Bx
        return float(np.vdot(r, r).real)
    m = np.sqrt(np.abs(Bx) ** 2 + eps_mag**2)
    return float(np.sum((gamma * Y.values - m) ** 2))


def fidelity_gradient(
    mask: SceneMask,
    Y: Heatmap,
    gamma: float,
    B: np.ndarray,
    mode: str | None = None,
    eps_mag: float = 1e-6,
) -> np.ndarray:
    """Gradient of ``fidelity`` with respect to the real mask values.

    ``mode`` defaults to the heatmap's own mode; passing a different one is
    an error.
    """
    if mask.grid != Y.grid:
        raise ValueError("mask and heatmap grids differ")
    _check_grid(mask.grid, B)
    mode = Y.mode if mode is None else mode
    if mode != Y.mode:
        raise ValueError(f"gradient mode {mode!r} does not match heatmap mode {Y.mode!r}")
    return _fidelity_grad(mask.values, Y.values, gamma, B, mode, eps_mag)


def _fidelity_grad(x, y, gamma, B, mode, eps_mag):
    Bx = B @ x
    BH = B.conj().T
    if mode == "complex":
        return 2.0 * np.real(BH @ (Bx - gamma * y))
    if eps_mag <= 0:
        raise ValueError("eps_mag must be positive in magnitude mode")
    m = np.sqrt(np.abs(Bx) ** 2 + eps_mag**2)
    return -2.0 * np.real(BH @ ((gamma * y - m) * Bx / m))


def mainlobe_width_deg(response: np.ndarray, grid: PolarGrid, peak: int | None = None) -> float:
    """Half-power width of the lobe around ``peak`` of a magnitude azimuth cut.

    Edges are located by linear interpolation between bin centers.
    """
    p = np.abs(np.asarray(response, dtype=complex))
    power = p**2
    i0 = int(np.argmax(power)) if peak is None else int(peak)
    half = 0.5 * power[i0]
    az = grid.az_centers_deg()

    def edge(step):
        i = i0
        while 0 <= i + step < len(power) and power[i + step] > half:
            i += step
        j = i + step
        if not 0 <= j < len(power):
            return az[i]
        frac = (power[i] - half) / (power[i] - power[j])
        return az[i] + frac * (az[j] - az[i])

    return float(abs(edge(1) - edge(-1)))


def local_maxima(profile: np.ndarray, rel_floor: float = 0.0) -> np.ndarray:
    """Indices of strict interior local maxima above ``rel_floor * max``."""
    p = np.asarray(profile, dtype=float)
    inner = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:]) & (p[1:-1] >= rel_floor * p.max())
    return np.flatnonzero(inner) + 1
