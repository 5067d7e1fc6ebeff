"""EEG/image encoders, the alignment projection, and contrastive training.

Both encoders are two-layer dense networks (flatten -> tanh hidden -> D) whose
outputs are L2-normalized. The alignment projection maps an EEG embedding to
the conditioning space with ``u = A z + a`` followed by a norm clip
``u / max(1, |u|)``, which is the identity on the unit ball.

Training minimizes symmetric InfoNCE between EEG and image embeddings plus the
same loss between the (normalized) projected conditioning vector and the image
embedding, with plain SGD and analytic gradients.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import EegTrial, StimulusImage
from .pixmap import resize_box

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12
ALN_MAGIC = b"ALN1"
_ALN_HEADER = struct.Struct("<4s8I")

PARAM_NAMES = ("eeg_w1", "eeg_b1", "eeg_w2", "eeg_b2", "img_w1", "img_b1", "img_w2", "img_b2", "proj_w", "proj_b")


class AlignmentError(ValueError):
    pass


class DimensionMismatch(AlignmentError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    normalized: bool = True
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise AlignmentError("embedding must be a finite 1-D vector")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise AlignmentError(f"embedding flagged normalized has norm {np.linalg.norm(v):.9f}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ConditioningVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise AlignmentError("conditioning vector must be a finite 1-D vector")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class AlignConfig:
    embed_dim: int = 16
    cond_dim: int = 16
    eeg_hidden: int = 64
    img_hidden: int = 64
    temperature: float = 0.07
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    image_side: int = 32
    projection_weight: float = 1.0
    train_image_encoder: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise AlignmentError("temperature must be > 0")
        if self.learning_rate < 0:
            raise AlignmentError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise AlignmentError("batch_size must be >= 2")
        if self.projection_weight and self.cond_dim != self.embed_dim:
            raise AlignmentError("the projection loss compares z_c with image embeddings; cond_dim must equal embed_dim")


@dataclass(eq=False)
class AlignParams:
    """All trainable arrays plus the input geometry they were built for."""

    channels: int
    samples: int
    image_side: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def embed_dim(self) -> int:
        return self.arrays["eeg_w2"].shape[0]

    @property
    def cond_dim(self) -> int:
        return self.arrays["proj_w"].shape[0]

    def copy(self) -> "AlignParams":
        return AlignParams(self.channels, self.samples, self.image_side, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    def identical_to(self, other: "AlignParams") -> bool:
        return all(self.arrays[k].tobytes() == other.arrays[k].tobytes() for k in PARAM_NAMES)


def init_params(channels: int, samples: int, config: AlignConfig) -> AlignParams:
    rng = np.random.default_rng([config.seed, 0xA1])
    d_in = channels * samples
    p_in = config.image_side * config.image_side * 3

    def dense(n_out, n_in):
        return rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)

    arrays = {
        "eeg_w1": dense(config.eeg_hidden, d_in),
        "eeg_b1": np.zeros(config.eeg_hidden),
        "eeg_w2": dense(config.embed_dim, config.eeg_hidden),
        "eeg_b2": np.zeros(config.embed_dim),
        "img_w1": dense(config.img_hidden, p_in),
        "img_b1": np.zeros(config.img_hidden),
        "img_w2": dense(config.embed_dim, config.img_hidden),
        "img_b2": np.zeros(config.embed_dim),
        "proj_w": np.eye(config.cond_dim, config.embed_dim),
        "proj_b": np.zeros(config.cond_dim),
    }
    return AlignParams(channels, samples, config.image_side, arrays)


# -- forward pieces ----------------------------------------------------------

def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise L2 normalization with the first-basis-vector fallback."""
    norms = np.linalg.norm(u, axis=1)
    degenerate = norms < ZERO_NORM
    z = np.empty_like(u)
    ok = ~degenerate
    z[ok] = u[ok] / norms[ok, None]
    if degenerate.any():
        z[degenerate] = 0.0
        z[degenerate, 0] = 1.0
    return z, norms, degenerate


def _normalize_backward(dz: np.ndarray, z: np.ndarray, norms: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / np.where(degenerate, 1.0, norms)[:, None]
    du[degenerate] = 0.0
    return du


def eeg_inputs(trials: Sequence[EegTrial], params: AlignParams) -> np.ndarray:
    for t in trials:
        if (t.channels, t.samples) != (params.channels, params.samples):
            raise DimensionMismatch(
                f"trial {t.trial_id} is {t.channels}x{t.samples}, encoder expects {params.channels}x{params.samples}"
            )
    return np.stack([np.asarray(t.data, dtype=np.float64).ravel() for t in trials])


def image_input(image: StimulusImage | np.ndarray, side: int) -> np.ndarray:
    """Flattened, mean-centred [0, 1] pixel vector at the working resolution."""
    px = image.pixels if isinstance(image, StimulusImage) else np.asarray(image)
    if px.shape[:2] != (side, side):
        x = resize_box(px, side, side) / 255.0
    else:
        x = np.asarray(px, dtype=np.float64) / 255.0
    v = x.ravel()
    return v - v.mean()


def image_inputs(images: Sequence[StimulusImage], params: AlignParams) -> np.ndarray:
    return np.stack([image_input(im, params.image_side) for im in images])


def _mlp_forward(x, w1, b1, w2, b2):
    h = np.tanh(x @ w1.T + b1)
    u = h @ w2.T + b2
    return h, u


def _mlp_backward(du, x, h, w1, w2):
    dw2 = du.T @ h
    db2 = du.sum(axis=0)
    da = (du @ w2) * (1.0 - h * h)
    dw1 = da.T @ x
    db1 = da.sum(axis=0)
    return dw1, db1, dw2, db2


def embed_eeg_batch(x: np.ndarray, params: AlignParams):
    p = params.arrays
    h, u = _mlp_forward(x, p["eeg_w1"], p["eeg_b1"], p["eeg_w2"], p["eeg_b2"])
    z, norms, deg = _normalize_rows(u)
    return z, (h, norms, deg)


def embed_image_batch(x: np.ndarray, params: AlignParams):
    p = params.arrays
    h, u = _mlp_forward(x, p["img_w1"], p["img_b1"], p["img_w2"], p["img_b2"])
    z, norms, deg = _normalize_rows(u)
    return z, (h, norms, deg)


def encode_eeg(trial: EegTrial, params: AlignParams) -> Embedding:
    z, (_, _, deg) = embed_eeg_batch(eeg_inputs([trial], params), params)
    if deg[0]:
        log.warning("trial %s: zero pre-norm EEG embedding, substituted first basis vector", trial.trial_id)
    return Embedding(z[0], normalized=True, degenerate=bool(deg[0]))


def encode_image(image: StimulusImage, params: AlignParams) -> Embedding:
    z, (_, _, deg) = embed_image_batch(image_inputs([image], params), params)
    if deg[0]:
        log.warning("image %s: zero pre-norm image embedding, substituted first basis vector", image.image_id)
    return Embedding(z[0], normalized=True, degenerate=bool(deg[0]))


def norm_clip(u: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    return u / np.maximum(1.0, n)


def align_project(z_eeg: Embedding, params: AlignParams) -> ConditioningVector:
    w, b = params.arrays["proj_w"], params.arrays["proj_b"]
    if z_eeg.dim != w.shape[1]:
        raise DimensionMismatch(f"embedding has dimension {z_eeg.dim}, projection expects {w.shape[1]}")
    return ConditioningVector(norm_clip(w @ z_eeg.values + b))


# -- loss ----------------------------------------------------------------------

def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def info_nce(za: np.ndarray, zb: np.ndarray, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE over row-paired unit vectors; returns (loss, dza, dzb)."""
    b = za.shape[0]
    s = za @ zb.T / tau
    lp_rows = _log_softmax_rows(s)
    lp_cols = _log_softmax_rows(s.T)
    idx = np.arange(b)
    loss = -0.5 * (lp_rows[idx, idx].mean() + lp_cols[idx, idx].mean())
    eye = np.eye(b)
    ds = 0.5 * ((np.exp(lp_rows) - eye) / b + ((np.exp(lp_cols) - eye) / b).T)
    dza = ds @ zb / tau
    dzb = ds.T @ za / tau
    return float(loss), dza, dzb


def contrastive_loss(batch_eeg: Sequence[Embedding], batch_img: Sequence[Embedding], tau: float) -> float:
    """Mean of EEG->image and image->EEG softmax cross-entropies at temperature tau."""
    if len(batch_eeg) != len(batch_img):
        raise AlignmentError(f"batch lengths differ: {len(batch_eeg)} vs {len(batch_img)}")
    if len(batch_eeg) < 2:
        raise AlignmentError("contrastive loss needs a batch of at least 2 pairs")
    if tau <= 0:
        raise AlignmentError("temperature must be > 0")
    for e in (*batch_eeg, *batch_img):
        if abs(np.linalg.norm(e.values) - 1.0) > 1e-6:
            raise AlignmentError("contrastive loss requires unit-norm embeddings")
    za = np.stack([e.values for e in batch_eeg])
    zb = np.stack([e.values for e in batch_img])
    return info_nce(za, zb, tau)[0]


def loss_and_grads(
    params: AlignParams, x_eeg: np.ndarray, x_img: np.ndarray, config: AlignConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Total alignment loss on one batch and its gradient for every array."""
    p = params.arrays
    tau = config.temperature
    h_e, u_e = _mlp_forward(x_eeg, p["eeg_w1"], p["eeg_b1"], p["eeg_w2"], p["eeg_b2"])
    z_e, n_e, deg_e = _normalize_rows(u_e)
    h_i, u_i = _mlp_forward(x_img, p["img_w1"], p["img_b1"], p["img_w2"], p["img_b2"])
    z_i, n_i, deg_i = _normalize_rows(u_i)
    if not (np.all(np.isfinite(n_e)) and np.all(np.isfinite(n_i))):
        return math.nan, {}

    loss, dz_e, dz_i = info_nce(z_e, z_i, tau)

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    lam = config.projection_weight
    if lam:
        v = z_e @ p["proj_w"].T + p["proj_b"]
        c, n_c, deg_c = _normalize_rows(v)
        loss_c, dc, dz_i2 = info_nce(c, z_i, tau)
        loss += lam * loss_c
        dv = _normalize_backward(lam * dc, c, n_c, deg_c)
        grads["proj_w"] = dv.T @ z_e
        grads["proj_b"] = dv.sum(axis=0)
        dz_e = dz_e + dv @ p["proj_w"]
        dz_i = dz_i + lam * dz_i2

    du_e = _normalize_backward(dz_e, z_e, n_e, deg_e)
    grads["eeg_w1"], grads["eeg_b1"], grads["eeg_w2"], grads["eeg_b2"] = _mlp_backward(
        du_e, x_eeg, h_e, p["eeg_w1"], p["eeg_w2"]
    )
    du_i = _normalize_backward(dz_i, z_i, n_i, deg_i)
    grads["img_w1"], grads["img_b1"], grads["img_w2"], grads["img_b2"] = _mlp_backward(
        du_i, x_img, h_i, p["img_w1"], p["img_w2"]
    )
    return loss, grads


# -- training ------------------------------------------------------------------

def distinct_image_batches(image_keys: Sequence, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle indices into batches in which no image appears twice.

    Repeating an image inside a batch would turn a true pair into a negative,
    so items that collide are pushed to later batches. Batches smaller than
    two are dropped.
    """
    pending = list(rng.permutation(len(image_keys)))
    batches = []
    while pending:
        batch, used, rest = [], set(), []
        for i in pending:
            key = image_keys[i]
            if len(batch) < batch_size and key not in used:
                batch.append(int(i))
                used.add(key)
            else:
                rest.append(i)
        if len(batch) >= 2:
            batches.append(batch)
        if len(batch) < 2 and rest == pending:
            break
        pending = rest
    return batches


@dataclass
class TrainingResult:
    params: AlignParams
    loss_curve: list[float]
    initial_params: AlignParams


def train_alignment(
    trials: Sequence[EegTrial],
    images: Sequence[StimulusImage],
    config: AlignConfig | None = None,
) -> TrainingResult:
    """Train encoders and projection on paired (trial, image) lists.

    ``loss_curve[e]`` is the mean batch loss over a fixed evaluation batching
    after ``e`` epochs, so index 0 is the untrained loss.
    """
    config = config or AlignConfig()
    if not trials:
        raise AlignmentError("training split is empty")
    if len(trials) != len(images):
        raise AlignmentError("trials and images must be paired")
    c, t = trials[0].channels, trials[0].samples
    params = init_params(c, t, config)
    initial = params.copy()
    x_eeg = eeg_inputs(trials, params)
    x_img = image_inputs(images, params)
    keys = [im.image_id for im in images]

    rng = np.random.default_rng([config.seed, 0xB7])
    eval_batches = distinct_image_batches(keys, config.batch_size, np.random.default_rng([config.seed, 0xE1]))
    if not eval_batches:
        raise AlignmentError("need at least two distinct images to form a contrastive batch")

    def evaluate() -> float:
        losses = [loss_and_grads(params, x_eeg[b], x_img[b], config)[0] for b in eval_batches]
        return float(np.mean(losses))

    curve = [evaluate()]
    trainable = [k for k in PARAM_NAMES if config.train_image_encoder or not k.startswith("img_")]
    for epoch in range(1, config.epochs + 1):
        for batch in distinct_image_batches(keys, config.batch_size, rng):
            loss, grads = loss_and_grads(params, x_eeg[batch], x_img[batch], config)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            for k in trainable:
                params.arrays[k] -= config.learning_rate * grads[k]
                if not np.all(np.isfinite(params.arrays[k])):
                    raise TrainingDiverged(f"parameter {k} became non-finite in epoch {epoch}")
        curve.append(evaluate())
        if not math.isfinite(curve[-1]):
            raise TrainingDiverged(f"non-finite evaluation loss after epoch {epoch}")
        log.debug("epoch %d loss %.5f", epoch, curve[-1])
    return TrainingResult(params, curve, initial)


# -- retrieval -----------------------------------------------------------------

@dataclass
class RetrievalScores:
    two_way: float
    top1: float


def retrieval_accuracy(
    params: AlignParams, trials: Sequence[EegTrial], class_images: dict[int, StimulusImage]
) -> RetrievalScores:
    """Cosine nearest-neighbour retrieval of class images from EEG embeddings.

    ``two_way`` averages, over trials and every wrong class, whether the true
    image is strictly more similar than the wrong one. ``top1`` is the
    fraction of trials whose most similar image is the true one.
    """
    labels = sorted(class_images)
    z_e, _ = embed_eeg_batch(eeg_inputs(trials, params), params)
    z_i, _ = embed_image_batch(image_inputs([class_images[k] for k in labels], params), params)
    sims = z_e @ z_i.T
    pos = {k: j for j, k in enumerate(labels)}
    pair_hits, pairs, top1 = 0, 0, 0
    for row, trial in zip(sims, trials):
        j = pos[trial.class_label]
        others = np.delete(row, j)
        pair_hits += int(np.sum(row[j] > others))
        pairs += others.size
        top1 += int(np.argmax(row) == j)
    return RetrievalScores(pair_hits / max(pairs, 1), top1 / len(trials))


# -- persistence ---------------------------------------------------------------

def save_params(params: AlignParams, path: str | os.PathLike) -> None:
    a = params.arrays
    header = _ALN_HEADER.pack(
        ALN_MAGIC, params.channels, params.samples, params.image_side,
        a["eeg_w1"].shape[0], a["img_w1"].shape[0], params.embed_dim, params.cond_dim, 0,
    )
    Path(path).write_bytes(header + params.flat().astype("<f4").tobytes())


def load_params(path: str | os.PathLike) -> AlignParams:
    buf = Path(path).read_bytes()
    if len(buf) < _ALN_HEADER.size:
        raise AlignmentError("truncated checkpoint header")
    magic, c, t, side, he, hi, d, dc, _ = _ALN_HEADER.unpack_from(buf)
    if magic != ALN_MAGIC:
        raise AlignmentError(f"bad checkpoint magic {magic!r}")
    shapes = {
        "eeg_w1": (he, c * t), "eeg_b1": (he,), "eeg_w2": (d, he), "eeg_b2": (d,),
        "img_w1": (hi, side * side * 3), "img_b1": (hi,), "img_w2": (d, hi), "img_b2": (d,),
        "proj_w": (dc, d), "proj_b": (dc,),
    }
    flat = np.frombuffer(buf, dtype="<f4", offset=_ALN_HEADER.size).astype(np.float64)
    need = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != need:
        raise AlignmentError(f"checkpoint holds {flat.size} values, expected {need}")
    arrays, off = {}, 0
    for k in PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        arrays[k] = flat[off:off + n].reshape(shapes[k]).copy()
        off += n
    return AlignParams(c, t, side, arrays)


def write_loss_curve(curve: Iterable[float], path: str | os.PathLike) -> None:
    lines = [f"{epoch} {loss:.9g}" for epoch, loss in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_curve(path: str | os.PathLike) -> list[float]:
    return [float(line.split()[1]) for line in Path(path).read_text().splitlines() if line.strip()]
