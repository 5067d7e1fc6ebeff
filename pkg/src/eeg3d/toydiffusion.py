"""Conditional denoising diffusion on tiny images with classifier-free guidance.

Images live in [-1, 1] and are flattened to ``side * side * channels`` vectors.
The denoiser is a dense tanh network over ``[x_t, time features, c - null]``
where ``null`` is a learned unconditional token: the unconditional branch
feeds ``null`` itself (so the conditioning slot reads zero) and a conditional
call feeds ``z_c``. The conditioning weights start at zero, so a model that
never sees a conditional example keeps both branches identical.

The network output is added to a fixed skip term ``sqrt(1 - alpha_bar_t) * x_t``,
the best linear noise estimate for unit-variance data. The dense layers only
learn the residual, which a small tanh network manages far better than the
full near-identity map at high noise levels.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DIF_MAGIC = b"DIF1"
_DIF_HEADER = struct.Struct("<4s8I")
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "null")


class DiffusionError(ValueError):
    pass


class SamplerDiverged(RuntimeError):
    def __init__(self, timestep: int):
        self.timestep = timestep
        super().__init__(f"non-finite sampler state at timestep {timestep}")


class TrainingDiverged(RuntimeError):
    pass


def linear_betas(timesteps: int, start: float = 1e-4, end: float = 0.02) -> np.ndarray:
    """Linear schedule with endpoints rescaled by 1000 / timesteps.

    The rescaling keeps the terminal signal level close to the usual
    1000-step schedule, so alpha_bar at the last step is near zero even for
    short chains.
    """
    scale = 1000.0 / timesteps
    return np.linspace(start * scale, min(end * scale, 0.999), timesteps)


@dataclass
class DiffusionConfig:
    timesteps: int = 50
    betas: tuple[float, ...] | None = None
    guidance_scale: float = 2.0
    drop_prob: float = 0.1
    image_side: int = 8
    channels: int = 3
    cond_dim: int = 16
    hidden: int = 128
    time_features: int = 16
    learning_rate: float = 2e-3
    train_steps: int = 3000
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise DiffusionError("timesteps must be >= 1")
        betas = np.asarray(self.betas if self.betas is not None else linear_betas(self.timesteps), dtype=np.float64)
        if betas.shape != (self.timesteps,):
            raise DiffusionError(f"expected {self.timesteps} betas, got {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1) or np.any(np.diff(betas) < 0):
            raise DiffusionError("betas must lie in (0, 1) and be non-decreasing")
        if self.guidance_scale < 0:
            raise DiffusionError("guidance_scale must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise DiffusionError("drop_prob must be in [0, 1]")
        self.betas = tuple(float(b) for b in betas)

    @property
    def dim(self) -> int:
        return self.image_side * self.image_side * self.channels

    def schedule(self) -> "Schedule":
        return Schedule.from_betas(np.asarray(self.betas))


@dataclass(frozen=True)
class Schedule:
    """Index 0 is the clean state; index t in 1..N uses beta[t-1]."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> "Schedule":
        b = np.concatenate([[0.0], betas])
        a = 1.0 - b
        return cls(b, a, np.cumprod(a))

    @property
    def timesteps(self) -> int:
        return len(self.betas) - 1


@dataclass(frozen=True, eq=False)
class NoisySample:
    x_t: np.ndarray
    t: int


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, config: DiffusionConfig) -> NoisySample:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DiffusionError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    if not 0 <= t <= config.timesteps:
        raise DiffusionError(f"timestep {t} outside [0, {config.timesteps}]")
    if t == 0:
        return NoisySample(x0.copy(), 0)
    ab = config.schedule().alpha_bar[t]
    return NoisySample(math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, t)


def time_features(t: np.ndarray, timesteps: int, n: int) -> np.ndarray:
    """Sinusoidal features of t / timesteps, shape (len(t), n)."""
    s = np.asarray(t, dtype=np.float64)[:, None] / timesteps
    freqs = np.pi * 2.0 ** np.arange(n // 2)
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)], axis=1)


@dataclass(eq=False)
class DenoiserParams:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    image_side: int = 8
    channels: int = 3
    time_features: int = 16
    betas: tuple[float, ...] = ()

    @property
    def cond_dim(self) -> int:
        return self.arrays["null"].shape[0]

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def skip_gain(self, t: np.ndarray) -> np.ndarray:
        ab = Schedule.from_betas(np.asarray(self.betas)).alpha_bar
        return np.sqrt(1.0 - ab[np.asarray(t)])

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: v.copy() for k, v in self.arrays.items()}, self.image_side, self.channels,
                              self.time_features, self.betas)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])


def init_denoiser(config: DiffusionConfig) -> DenoiserParams:
    rng = np.random.default_rng([config.seed, 0xD1])
    p, e, c, h = config.dim, config.time_features, config.cond_dim, config.hidden
    w1 = rng.standard_normal((h, p + e + c)) / math.sqrt(p + e)
    w1[:, p + e:] = 0.0  # conditioning starts inert; see module docstring
    arrays = {
        "w1": w1,
        "b1": np.zeros(h),
        "w2": rng.standard_normal((h, h)) / math.sqrt(h),
        "b2": np.zeros(h),
        "w3": rng.standard_normal((p, h)) / math.sqrt(h),
        "b3": np.zeros(p),
        "null": 0.1 * rng.standard_normal(c),
    }
    return DenoiserParams(arrays, config.image_side, config.channels, config.time_features, config.betas)


def _net_forward(params: DenoiserParams, x: np.ndarray, t: np.ndarray, cond: np.ndarray):
    # cond rows already hold ``c - null`` (zero for the unconditional branch)
    a = params.arrays
    feats = time_features(t, params.timesteps, params.time_features)
    inp = np.concatenate([x, feats, cond], axis=1)
    h1 = np.tanh(inp @ a["w1"].T + a["b1"])
    h2 = np.tanh(h1 @ a["w2"].T + a["b2"])
    out = h2 @ a["w3"].T + a["b3"] + params.skip_gain(t)[:, None] * x
    return out, (inp, h1, h2)


def _cond_inputs(params: DenoiserParams, conds: np.ndarray, use_cond: np.ndarray) -> np.ndarray:
    null = params.arrays["null"]
    return np.where(use_cond[:, None], conds - null, 0.0)


def predict_noise(params: DenoiserParams, x_t: np.ndarray, t, conds: np.ndarray | None) -> np.ndarray:
    """Batched noise prediction; ``conds=None`` selects the unconditional branch."""
    x_t = np.atleast_2d(x_t)
    b = x_t.shape[0]
    if conds is None:
        cin = np.zeros((b, params.cond_dim))
    else:
        conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
        if conds.shape != (b, params.cond_dim):
            raise DiffusionError(f"conditioning shape {conds.shape} does not match ({b}, {params.cond_dim})")
        cin = conds - params.arrays["null"]
    t = np.broadcast_to(np.asarray(t), (b,))
    if np.any(t < 1) or np.any(t > params.timesteps):
        raise DiffusionError(f"timestep outside [1, {params.timesteps}]")
    return _net_forward(params, x_t, t, cin)[0]


def guided_noise_prediction(x_t: np.ndarray, t: int, z_c, w: float, params: DenoiserParams) -> np.ndarray:
    """Classifier-free guided noise estimate ``(1 - w) * eps_u + w * eps_c``.

    Written in this form (equal to ``eps_u + w * (eps_c - eps_u)``) so that
    w = 0 and w = 1 return the unconditional and conditional branch bit for
    bit. ``z_c=None`` returns the unconditional branch.
    """
    x = np.asarray(x_t, dtype=np.float64)
    flat = x.reshape(1, -1) if x.ndim != 2 else x
    if flat.shape[1] != params.arrays["w3"].shape[0]:
        raise DiffusionError(f"x_t has {flat.shape[1]} values, denoiser expects {params.arrays['w3'].shape[0]}")
    eps_u = predict_noise(params, flat, t, None)
    if z_c is None:
        return eps_u.reshape(x.shape)
    c = np.asarray(getattr(z_c, "values", z_c), dtype=np.float64)
    if c.shape[-1:] != (params.cond_dim,):
        raise DiffusionError(f"conditioning has shape {c.shape}, denoiser expects {params.cond_dim} values")
    conds = np.broadcast_to(c, (flat.shape[0], params.cond_dim))
    eps_c = predict_noise(params, flat, t, conds)
    return ((1.0 - w) * eps_u + w * eps_c).reshape(x.shape)


def sample_many(conds: Sequence, config: DiffusionConfig, params: DenoiserParams,
                seeds: Sequence[int], guidance_scale: float | None = None) -> np.ndarray:
    """Ancestral sampling for several (conditioning, seed) pairs at once.

    Each sample draws its noise from its own seeded generator. Returns an
    array of shape (n, side, side, channels) clamped to [-1, 1].
    """
    w = config.guidance_scale if guidance_scale is None else guidance_scale
    sch = config.schedule()
    if params.betas != config.betas:
        raise DiffusionError("denoiser was trained with a different noise schedule")
    n = len(seeds)
    if len(conds) != n:
        raise DiffusionError("need one seed per conditioning vector")
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(config.dim) for r in rngs])
    c = np.stack([np.asarray(getattr(z, "values", z), dtype=np.float64) for z in conds])
    for t in range(sch.timesteps, 0, -1):
        tt = np.full(n, t)
        eps_u = predict_noise(params, x, tt, None)
        eps_c = predict_noise(params, x, tt, c)
        eps = (1.0 - w) * eps_u + w * eps_c
        beta, alpha, ab, ab_prev = sch.betas[t], sch.alphas[t], sch.alpha_bar[t], sch.alpha_bar[t - 1]
        # posterior mean around the clipped clean estimate; at t = 1 the
        # second coefficient vanishes and x is the one-step estimate itself
        x0 = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
        x = (math.sqrt(ab_prev) * beta * x0 + math.sqrt(alpha) * (1.0 - ab_prev) * x) / (1.0 - ab)
        if t > 1:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            z = np.stack([r.standard_normal(config.dim) for r in rngs])
            x = x + math.sqrt(var) * z
        if not np.all(np.isfinite(x)):
            raise SamplerDiverged(t)
    x = np.clip(x, -1.0, 1.0)
    return x.reshape(n, config.image_side, config.image_side, config.channels)


def sample(z_c, config: DiffusionConfig, params: DenoiserParams, rng_seed: int) -> np.ndarray:
    """Draw one guided sample x_hat of shape (side, side, channels) in [-1, 1]."""
    return sample_many([z_c], config, params, [rng_seed])[0]


# -- training ------------------------------------------------------------------

def denoiser_loss_and_grads(params: DenoiserParams, x_t: np.ndarray, t: np.ndarray, conds: np.ndarray,
                            use_cond: np.ndarray, eps: np.ndarray):
    """Mean squared noise-prediction error and its gradients (all arrays)."""
    a = params.arrays
    cin = _cond_inputs(params, conds, use_cond)
    out, (inp, h1, h2) = _net_forward(params, x_t, t, cin)
    b, p = out.shape
    diff = out - eps
    loss = float(np.mean(diff * diff))
    d_out = 2.0 * diff / (b * p)
    g = {}
    g["w3"] = d_out.T @ h2
    g["b3"] = d_out.sum(axis=0)
    d2 = (d_out @ a["w3"]) * (1.0 - h2 * h2)
    g["w2"] = d2.T @ h1
    g["b2"] = d2.sum(axis=0)
    d1 = (d2 @ a["w2"]) * (1.0 - h1 * h1)
    g["w1"] = d1.T @ inp
    g["b1"] = d1.sum(axis=0)
    d_in = d1 @ a["w1"]
    d_cin = d_in[:, inp.shape[1] - params.cond_dim:]
    g["null"] = -(d_cin * use_cond[:, None]).sum(axis=0)
    return loss, g


@dataclass
class DenoiserTraining:
    params: DenoiserParams
    loss_curve: list[float]
    val_initial: float
    val_final: float


def _draw_batch(rng, x0s, conds, idx, config, sch):
    t = rng.integers(1, sch.timesteps + 1, size=len(idx))
    eps = rng.standard_normal((len(idx), config.dim))
    ab = sch.alpha_bar[t][:, None]
    x_t = np.sqrt(ab) * x0s[idx] + np.sqrt(1.0 - ab) * eps
    return x_t, t, conds[idx], eps


def train_denoiser(dataset: Sequence[tuple[np.ndarray, np.ndarray]], config: DiffusionConfig,
                   log_every: int = 100) -> DenoiserTraining:
    """Fit the noise-prediction network with Adam.

    ``dataset`` holds (x0, z_c) pairs: x0 in [-1, 1] with ``config.dim``
    values, z_c of length ``config.cond_dim``. Each sample's conditioning is
    dropped with probability ``drop_prob``. Validation uses a fixed batch of
    conditional draws.
    """
    if not dataset:
        raise DiffusionError("training set is empty")
    x0s = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x, _ in dataset])
    conds = np.stack([np.asarray(getattr(c, "values", c), dtype=np.float64) for _, c in dataset])
    if x0s.shape[1] != config.dim or conds.shape[1] != config.cond_dim:
        raise DiffusionError(f"dataset shapes {x0s.shape}/{conds.shape} do not match the config")
    sch = config.schedule()
    params = init_denoiser(config)

    vrng = np.random.default_rng([config.seed, 0x7A])
    vidx = vrng.integers(0, len(x0s), size=min(256, 4 * len(x0s)))
    val = _draw_batch(vrng, x0s, conds, vidx, config, sch)
    v_use = np.ones(len(vidx), dtype=bool)

    def val_loss():
        return denoiser_loss_and_grads(params, *val[:3], v_use, val[3])[0]

    rng = np.random.default_rng([config.seed, 0x7B])
    m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    curve = [val_loss()]
    initial = curve[0]
    for step in range(1, config.train_steps + 1):
        idx = rng.integers(0, len(x0s), size=config.batch_size)
        x_t, t, c, eps = _draw_batch(rng, x0s, conds, idx, config, sch)
        use = rng.random(len(idx)) >= config.drop_prob
        loss, g = denoiser_loss_and_grads(params, x_t, t, c, use, eps)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite denoiser loss at step {step}")
        lr = config.learning_rate * math.sqrt(1 - b2 ** step) / (1 - b1 ** step)
        for k, arr in params.arrays.items():
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k]
            arr -= lr * m[k] / (np.sqrt(v[k]) + eps_adam)
        if step % log_every == 0 or step == config.train_steps:
            curve.append(val_loss())
            if not math.isfinite(curve[-1]):
                raise TrainingDiverged(f"non-finite validation loss at step {step}")
    return DenoiserTraining(params, curve, initial, curve[-1])


# -- persistence ---------------------------------------------------------------

def save_denoiser(params: DenoiserParams, path: str | os.PathLike) -> None:
    a = params.arrays
    h = a["w2"].shape[0]
    header = _DIF_HEADER.pack(DIF_MAGIC, params.image_side, params.channels, params.time_features,
                              params.cond_dim, h, params.timesteps, 0, 0)
    payload = np.asarray(params.betas, dtype="<f8").tobytes() + params.flat().astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_denoiser(path: str | os.PathLike) -> DenoiserParams:
    buf = Path(path).read_bytes()
    if len(buf) < _DIF_HEADER.size:
        raise DiffusionError("truncated checkpoint header")
    magic, side, ch, e, c, h, nt, *_ = _DIF_HEADER.unpack_from(buf)
    if magic != DIF_MAGIC:
        raise DiffusionError(f"bad checkpoint magic {magic!r}")
    p = side * side * ch
    shapes = {"w1": (h, p + e + c), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (p, h), "b3": (p,), "null": (c,)}
    need = _DIF_HEADER.size + 8 * nt + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) != need:
        raise DiffusionError("checkpoint payload size does not match its header")
    betas = tuple(float(b) for b in np.frombuffer(buf, dtype="<f8", count=nt, offset=_DIF_HEADER.size))
    flat = np.frombuffer(buf, dtype="<f4", offset=_DIF_HEADER.size + 8 * nt).astype(np.float64)
    arrays, off = {}, 0
    for k in PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        arrays[k] = flat[off:off + n].reshape(shapes[k]).copy()
        off += n
    return DenoiserParams(arrays, side, ch, e, betas)
