"""Gaussian diffusion prior over scene latents.

Step indices run ``t = 1..T``; ``alpha_bar(0) = 1`` by convention.  The
algebra helpers (``forward_diffuse``, ``tweedie_z0``, ``reverse_step``)
only use arithmetic on their inputs, so they accept numpy arrays or torch
tensors and any callable ``denoiser(z, t) -> eps`` (handy for stubs).
Trained networks are wrapped in :class:`Denoiser`, which takes and returns
float64 tensors while running the network in float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalError
from .grid import PolarGrid, SceneMask

# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def sigma(self) -> np.ndarray:
        """Ancestral sampling std per step (DDIM uses zero)."""
        return np.sqrt(self.beta)

    def a(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def timesteps(self, n_steps: int | None = None) -> list[int]:
        """Descending visiting order ``T .. 1`` with ``n_steps`` entries."""
        if n_steps is None or n_steps >= self.T:
            return list(range(self.T, 0, -1))
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        ts = np.round(np.linspace(self.T, 1, n_steps)).astype(int)
        return [int(t) for t in dict.fromkeys(ts)]


def make_schedule(
    T: int = 200, beta_min: float = 5e-4, beta_max: float = 0.1, kind: str = "linear"
) -> NoiseSchedule:
    problems = []
    if T < 1:
        problems.append(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        problems.append(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind != "linear":
        problems.append(f"unsupported schedule kind {kind!r}")
    if problems:
        raise ConfigError(problems)
    return NoiseSchedule(np.linspace(beta_min, beta_max, T))


def _sqrt(v):
    return math.sqrt(v)


def forward_diffuse(z0, t: int, eta, sched: NoiseSchedule):
    sched.check_step(t, allow_zero=True)
    ab = sched.abar(t)
    return _sqrt(ab) * z0 + _sqrt(1.0 - ab) * eta


def tweedie_z0(z, t: int, denoiser: Callable, sched: NoiseSchedule, eps=None):
    """Clean-latent estimate from ``z`` at noise level ``t``.

    Inverts the forward noising law with the cumulative ``alpha_bar``.
    ``eps`` may be passed when the network output is already at hand.
    """
    sched.check_step(t)
    if eps is None:
        eps = denoiser(z, t)
    ab = sched.abar(t)
    return (z - _sqrt(1.0 - ab) * eps) / _sqrt(ab)


def reverse_mean(z, t: int, denoiser: Callable, sched: NoiseSchedule, mode: str = "ancestral",
                 t_prev: int | None = None, eps=None, clip: float | None = None):
    """Deterministic part of one reverse step ``z_t -> z_{t_prev}``.

    With ``clip`` the clean estimate is clamped to ``[-clip, clip]`` and the
    noise estimate recomputed from it before stepping.
    """
    sched.check_step(t)
    t_prev = t - 1 if t_prev is None else t_prev
    if eps is None:
        eps = denoiser(z, t)
    if clip is not None:
        ab = sched.abar(t)
        z0 = tweedie_z0(z, t, denoiser, sched, eps=eps)
        z0 = z0.clamp(-clip, clip) if isinstance(z0, torch.Tensor) else np.clip(z0, -clip, clip)
        eps = (z - _sqrt(ab) * z0) / _sqrt(1.0 - ab)
    if mode == "ancestral":
        if t_prev != t - 1:
            raise ValueError("ancestral mode steps one level at a time")
        a, ab = sched.a(t), sched.abar(t)
        return (z - (1.0 - a) / _sqrt(1.0 - ab) * eps) / _sqrt(a)
    if mode == "ddim":
        if not 0 <= t_prev < t:
            raise ValueError(f"t_prev={t_prev} must lie in [0, {t})")
        z0 = tweedie_z0(z, t, denoiser, sched, eps=eps)
        ab_prev = sched.abar(t_prev)
        return _sqrt(ab_prev) * z0 + _sqrt(1.0 - ab_prev) * eps
    raise ValueError(f"unknown sampler mode {mode!r}")


def reverse_step(z, t: int, denoiser: Callable, sched: NoiseSchedule, mode: str = "ancestral",
                 noise=None, t_prev: int | None = None):
    """One reverse step; ancestral mode adds ``sigma_t * noise`` except at ``t = 1``."""
    out = reverse_mean(z, t, denoiser, sched, mode, t_prev)
    if mode == "ancestral" and t > 1 and noise is not None:
        out = out + float(sched.sigma[t - 1]) * noise
    return out


# ---------------------------------------------------------------------------
# codec


def _pool_matrix(n_fine: int) -> np.ndarray:
    P = np.zeros((n_fine // 2, n_fine))
    for i in range(n_fine // 2):
        P[i, 2 * i : 2 * i + 2] = 0.5
    return P


class Codec:
    """Fixed linear encoder/decoder pair.

    ``identity``: latent equals the mask.  ``pool2``: encoder is a 2x2 block
    average, decoder replicates each latent cell over its 2x2 block, so
    ``E(D(z)) = z`` and ``D(E(.))`` is a projection.  Both maps act on the
    last two axes as ``L @ v @ R.T`` and have exact adjoints.
    """

    VARIANTS = ("identity", "pool2")

    def __init__(self, variant: str, grid_shape: tuple[int, int]):
        if variant not in self.VARIANTS:
            raise ConfigError([f"unknown codec {variant!r}; choose from {self.VARIANTS}"])
        self.variant = variant
        self.grid_shape = tuple(grid_shape)
        if variant == "pool2":
            n_az, n_rng = grid_shape
            if n_az % 2 or n_rng % 2:
                raise ConfigError([f"pool2 codec needs even grid dims, got {grid_shape}"])
            self._Ea, self._Er = _pool_matrix(n_az), _pool_matrix(n_rng)
            self._Da, self._Dr = 2.0 * self._Ea.T, 2.0 * self._Er.T

    @property
    def latent_shape(self) -> tuple[int, int]:
        if self.variant == "identity":
            return self.grid_shape
        return (self.grid_shape[0] // 2, self.grid_shape[1] // 2)

    @staticmethod
    def _apply(L, R, v):
        return L @ v @ R.T

    def encode(self, x):
        return x if self.variant == "identity" else self._apply(self._Ea, self._Er, x)

    def decode(self, z):
        return z if self.variant == "identity" else self._apply(self._Da, self._Dr, z)

    def encode_adjoint(self, g):
        return g if self.variant == "identity" else self._apply(self._Ea.T, self._Er.T, g)

    def decode_adjoint(self, g):
        return g if self.variant == "identity" else self._apply(self._Da.T, self._Dr.T, g)


# ---------------------------------------------------------------------------
# networks


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, e):
        h = F.silu(self.conv1(x))
        h = h + self.temb(e)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class UNet(nn.Module):
    """Time-conditioned conv encoder-decoder with one level per entry of ``widths``."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128), t_dim: int = 64):
        super().__init__()
        self.widths = tuple(widths)
        self.t_dim = t_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.inp = nn.Conv2d(1, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        c = widths[0]
        for w in widths:
            self.down.append(_ResBlock(c, w, t_dim))
            c = w
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(_ResBlock(c + w, w, t_dim))
            c = w
        self.out = nn.Conv2d(c, 1, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x, t):
        e = self.t_mlp(timestep_embedding(t, self.t_dim))
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.down):
            if i:
                h = F.avg_pool2d(h, 2)
            h = block(h, e)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), e)
        return self.out(F.silu(h))


class MLPDenoiser(nn.Module):
    """Two hidden layers over the flattened latent concatenated with the time embedding."""

    def __init__(self, latent_shape, hidden: int = 1024, t_dim: int = 64):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.t_dim = t_dim
        n = int(np.prod(latent_shape))
        self.net = nn.Sequential(
            nn.Linear(n + t_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, n),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    multiple = 1

    def forward(self, x, t):
        b = x.shape[0]
        h = torch.cat([x.reshape(b, -1), timestep_embedding(t, self.t_dim)], dim=1)
        return self.net(h).reshape(x.shape)


def build_network(arch: dict) -> nn.Module:
    kind = arch.get("kind", "unet")
    if kind == "unet":
        return UNet(arch.get("widths", (32, 64, 128)), arch.get("t_dim", 64))
    if kind == "mlp":
        return MLPDenoiser(arch["latent_shape"], arch.get("hidden", 1024), arch.get("t_dim", 64))
    raise ConfigError([f"unknown denoiser kind {kind!r}"])


class Denoiser:
    """A noise-prediction network ``eps(z, t)`` plus the metadata to rebuild it.

    Calls accept ``(H, W)`` or ``(B, H, W)`` tensors/arrays and an int or
    per-item step tensor; the output matches the input's shape and dtype.

    ``arch["param"]`` selects what the raw network head means.  ``"eps"``:
    the head is the noise estimate.  ``"v"``: the head estimates
    ``v = sqrt(ab) eps - sqrt(1 - ab) z0`` and the returned noise estimate is
    ``sqrt(1 - ab) z + sqrt(ab) v``; the squared noise error is then
    ``ab * |v - v_hat|^2``, evenly scaled across t.  ``"logit"``: the head is a
    log-odds correction ``f`` and the clean estimate is
    ``z0_hat = tanh(sqrt(ab) z / (1 - ab) + f)``, which with ``f`` equal to half the
    prior log-odds is the exact posterior mean for independent +/-1 pixels; the
    returned noise estimate is ``(z - sqrt(ab) z0_hat) / sqrt(1 - ab)``.  Both
    ``"v"`` and ``"logit"`` need ``arch["schedule"]``.
    """

    def __init__(self, arch: dict, net: nn.Module | None = None, trained: bool = False):
        self.arch = dict(arch)
        self.param = self.arch.get("param", "eps")
        if self.param not in ("eps", "v", "logit"):
            raise ConfigError([f"unknown denoiser param {self.param!r}"])
        self._abar = None
        if self.param != "eps":
            sched = schedule_from_arch(self.arch)
            if sched is None:
                raise ConfigError([f"a {self.param!r}-parameterised denoiser needs arch['schedule']"])
            self._abar = torch.as_tensor(sched.alpha_bar, dtype=torch.float64)
        self.net = build_network(self.arch) if net is None else net
        self.net.eval()
        self.trained = trained

    def _prepare(self, z, t):
        squeeze = z.dim() == 2
        x = z[None] if squeeze else z
        if isinstance(t, torch.Tensor):
            tt = t.reshape(-1).long()
            if tt.numel() == 1:
                tt = tt.expand(x.shape[0])
        else:
            tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
        return x, tt, squeeze

    def forward32(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Network on a float32 ``(B, H, W)`` batch, padding to the net's size multiple."""
        m = self.net.multiple
        h, w = x.shape[-2:]
        ph, pw = (-h) % m, (-w) % m
        x4 = x[:, None]
        if ph or pw:
            x4 = F.pad(x4, (0, pw, 0, ph), mode="replicate")
        out = self.net(x4, t)[:, 0]
        return out[:, :h, :w]

    def head_to_eps(self, z: torch.Tensor, head: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if self.param == "eps":
            return head
        ab = self._abar.to(z.dtype)[t - 1][:, None, None]
        if self.param == "v":
            return (1.0 - ab).sqrt() * z + ab.sqrt() * head
        z0 = torch.tanh(ab.sqrt() * z / (1.0 - ab) + head)
        return (z - ab.sqrt() * z0) / (1.0 - ab).sqrt()

    def __call__(self, z, t):
        as_numpy = isinstance(z, np.ndarray)
        zt = torch.from_numpy(z) if as_numpy else z
        x, tt, squeeze = self._prepare(zt, t)
        out = self.head_to_eps(x, self.forward32(x.float(), tt).to(zt.dtype), tt)
        out = out[0] if squeeze else out
        return out.detach().numpy() if as_numpy else out

    def parameters(self):
        return self.net.parameters()


# ---------------------------------------------------------------------------
# training


def scenes_to_latents(scenes: Sequence[SceneMask], codec: Codec) -> np.ndarray:
    """Stack masks, rescale ``{0,1} -> {-1,+1}`` and encode."""
    x = np.stack([s.values for s in scenes]).astype(float)
    return codec.encode(2.0 * x - 1.0)


def denoise_loss(denoiser: Callable, z0_batch, sched: NoiseSchedule, seed) -> float:
    """Monte-Carlo noise-prediction loss; ``seed`` is an int or one seed per item."""
    z0 = torch.as_tensor(np.asarray(z0_batch), dtype=torch.float64)
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    if np.ndim(seed) == 0:
        seeds = [(int(seed), i) for i in range(z0.shape[0])]
    else:
        seeds = [(int(s),) for s in seed]
    ts, etas = [], []
    for s in seeds:
        g = torch.Generator().manual_seed(_mix_seed(*s))
        ts.append(int(torch.randint(1, sched.T + 1, (1,), generator=g)))
        etas.append(torch.randn(z0.shape[1:], generator=g, dtype=torch.float64))
    t = torch.tensor(ts)
    eta = torch.stack(etas)
    ab = torch.as_tensor(sched.alpha_bar[t.numpy() - 1], dtype=torch.float64)[:, None, None]
    zt = ab.sqrt() * z0 + (1 - ab).sqrt() * eta
    pred = denoiser(zt, t)
    return float(torch.mean((eta - pred) ** 2).detach())


def _mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class TrainResult:
    denoiser: Denoiser
    loss_trace: list[float]


def train_denoiser(
    scenes: Sequence[SceneMask],
    codec: Codec,
    sched: NoiseSchedule,
    epochs: int = 30,
    batch: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
    arch: dict | None = None,
    log: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit the noise-prediction network with Adam; returns the per-epoch mean losses."""
    if len(scenes) == 0:
        raise ValueError("training corpus is empty")
    arch = dict(arch or {"kind": "unet", "widths": [32, 64, 128], "t_dim": 64})
    arch["latent_shape"] = list(codec.latent_shape)
    arch["schedule"] = {"T": sched.T, "beta": [float(sched.beta[0]), float(sched.beta[-1])]}
    arch["codec"] = codec.variant
    torch.manual_seed(_mix_seed(seed, 0))
    den = Denoiser(arch)
    net = den.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    data = torch.as_tensor(scenes_to_latents(scenes, codec), dtype=torch.float32)
    ab_all = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)
    order_rng = np.random.default_rng(_mix_seed(seed, 1))
    g = torch.Generator().manual_seed(_mix_seed(seed, 2))
    trace = []
    for epoch in range(epochs):
        perm = order_rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(perm), batch):
            idx = torch.as_tensor(perm[start : start + batch])
            z0 = data[idx]
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
            eta = torch.randn(z0.shape, generator=g)
            ab = ab_all[t - 1][:, None, None]
            zt = ab.sqrt() * z0 + (1 - ab).sqrt() * eta
            loss = torch.mean((den.head_to_eps(zt, den.forward32(zt, t), t) - eta) ** 2)
            if not torch.isfinite(loss):
                raise NumericalError(f"training loss became {float(loss)} in epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        trace.append(total / count)
        if log is not None:
            log(epoch + 1, trace[-1])
    net.eval()
    den.trained = True
    return TrainResult(den, trace)


# ---------------------------------------------------------------------------
# sampling


def decode_to_mask(z0, codec: Codec, grid: PolarGrid) -> SceneMask:
    """Decode a latent, map ``[-1, 1] -> [0, 1]`` and clamp."""
    z = z0.detach().numpy() if isinstance(z0, torch.Tensor) else np.asarray(z0)
    x = 0.5 * (codec.decode(z) + 1.0)
    return SceneMask(grid, np.clip(x, 0.0, 1.0))


def sample_unconditional(
    denoiser: Callable,
    sched: NoiseSchedule,
    codec: Codec,
    grid: PolarGrid,
    seed: int = 0,
    mode: str = "ddim",
    n_steps: int | None = None,
    clip: float | None = None,
) -> SceneMask:
    """Draw one scene from the prior by running the reverse chain from pure noise."""
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(codec.latent_shape, generator=g, dtype=torch.float64)
    steps = sched.timesteps(n_steps)
    with torch.no_grad():
        for n, t in enumerate(steps):
            t_prev = steps[n + 1] if n + 1 < len(steps) else 0
            z = reverse_mean(z, t, denoiser, sched, mode, t_prev, clip=clip)
            if mode == "ancestral" and t > 1:
                z = z + float(sched.sigma[t - 1]) * torch.randn(
                    z.shape, generator=g, dtype=torch.float64
                )
    return decode_to_mask(z, codec, grid)


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"RINVDNZ 1\n"


def save_checkpoint_bytes(den: Denoiser) -> bytes:
    parts = [CKPT_MAGIC, (json.dumps(den.arch, sort_keys=True) + "\n").encode("ascii")]
    for name, tensor in den.net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        dims = " ".join(str(d) for d in arr.shape)
        parts.append(f"{name}\n{arr.ndim}\n{dims}\n".encode("ascii"))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def load_checkpoint_bytes(data: bytes) -> Denoiser:
    from .errors import FormatError

    if not data.startswith(CKPT_MAGIC):
        raise FormatError("not a RINVDNZ 1 checkpoint")
    pos = len(CKPT_MAGIC)

    def line():
        nonlocal pos
        end = data.index(b"\n", pos)
        out = data[pos:end].decode("ascii")
        pos = end + 1
        return out

    try:
        arch = json.loads(line())
        state = {}
        while pos < len(data):
            name = line()
            rank = int(line())
            dims_line = line()
            dims = tuple(int(d) for d in dims_line.split()) if rank else ()
            if len(dims) != rank:
                raise FormatError(f"parameter {name}: rank {rank} but dims {dims_line!r}")
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    den = Denoiser(arch, trained=True)
    den.net.load_state_dict(state)
    den.net.eval()
    return den


def schedule_from_arch(arch: dict) -> NoiseSchedule | None:
    s = arch.get("schedule")
    if not s:
        return None
    return make_schedule(s["T"], s["beta"][0], s["beta"][1])
