"""Evaluation metrics over rendered views.

Feature and classifier backbones are pluggable: anything with a
``provider_id`` and the relevant method (``embed``, ``layers`` or ``probs``)
taking an (H, W, 3) uint8 array works. Deterministic toy providers ship for
hermetic runs; real backbones plug in as external services or precomputed
feature files.

Scores are computed per view, averaged over an object's six views, then
summarized across objects by mean and population standard deviation.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cache import sha256_hex
from .dataset import class_image_pixels
from .pixmap import encode_ppm, resize_box, to_unit_range
from .renderer import VIEW_LABELS

PROB_TOL = 1e-6
FID_CLAMP = 1e-10
FEATURE_MAGIC = b"FEA1"


class MetricError(ValueError):
    pass


class IncompleteViews(MetricError):
    pass


def _pixels(image) -> np.ndarray:
    px = np.asarray(getattr(image, "pixels", image))
    if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
        raise MetricError(f"expected (H, W, 3) uint8 pixels, got {px.shape} {px.dtype}")
    return px


def check_probs(p, num_classes: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise MetricError(f"probability vector must be 1-D and non-empty, got shape {p.shape}")
    if num_classes is not None and p.size != num_classes:
        raise MetricError(f"probability vector has {p.size} classes, expected {num_classes}")
    if not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > PROB_TOL:
        raise MetricError("probability vector must be finite, non-negative and sum to 1")
    return p


# -- CLIPScore ---------------------------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"embedding dimensions differ: {a.size} vs {b.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MetricError("non-finite embedding")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("zero-norm embedding")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


def clip_score(x, v, embedder) -> float:
    """Cosine similarity of the two images' embeddings."""
    return cosine(embedder.embed(_pixels(x)), embedder.embed(_pixels(v)))


# -- LPIPS-style distance ----------------------------------------------------------

def _unit(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt((f * f).sum(axis=-1, keepdims=True))
    return f / np.where(norm > 0, norm, 1.0)


def lpips_from_layers(fx: Sequence[np.ndarray], fv: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> float:
    """sum_l w_l * mean over positions of |unit(fx_l) - unit(fv_l)|^2; channels on the last axis."""
    if len(fx) == 0 or len(fx) != len(fv):
        raise MetricError(f"need matching non-empty layer lists, got {len(fx)} and {len(fv)}")
    weights = [1.0] * len(fx) if weights is None else list(weights)
    if len(weights) != len(fx):
        raise MetricError(f"{len(weights)} weights for {len(fx)} layers")
    total = 0.0
    for w, a, b in zip(weights, fx, fv):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise MetricError(f"feature shapes differ: {a.shape} vs {b.shape}")
        d = _unit(a) - _unit(b)
        total += w * float((d * d).sum(axis=-1).mean())
    return total


def lpips_distance(x, v, features) -> float:
    return lpips_from_layers(features.layers(_pixels(x)), features.layers(_pixels(v)),
                             getattr(features, "weights", None))


# -- Inception Score ---------------------------------------------------------------

def inception_score_from_probs(probs, splits: int = 10) -> tuple[float, float]:
    """Mean and population std over splits of exp(mean KL(p(y|x) || p(y)))."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"expected an (N, K) probability matrix, got shape {p.shape}")
    if splits < 1 or len(p) < splits:
        raise MetricError(f"need at least {splits} images for {splits} splits, got {len(p)}")
    for row in p:
        check_probs(row)
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(views: Sequence, classifier, splits: int = 10) -> tuple[float, float]:
    if len(views) < splits:
        raise MetricError(f"need at least {splits} images for {splits} splits, got {len(views)}")
    return inception_score_from_probs([classifier.probs(_pixels(v)) for v in views], splits)


# -- FID ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FidResult:
    value: float
    regularized: bool  # 1e-10 * I was added after clamping tiny negative eigenvalues


def _psd_sqrt(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Symmetric square root; eigenvalues in [-tol, 0) are clamped, below -tol is an error."""
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)
    tol = FID_CLAMP * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise MetricError(f"covariance product has eigenvalue {vals.min():.3e} below the clamp tolerance")
    clamped = bool((vals < 0).any())
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T, clamped


def frechet_distance(mu1, sigma1, mu2, sigma2) -> FidResult:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise MetricError("mean/covariance dimensions disagree")

    def trace_sqrt(a, b):
        ra, c1 = _psd_sqrt(a)
        prod, c2 = _psd_sqrt(ra @ b @ ra)
        return float(np.trace(prod)), c1 or c2

    def sym_trace_sqrt(a, b):
        # both orders, so the value and the regularization decision are symmetric
        t1, c1 = trace_sqrt(a, b)
        t2, c2 = trace_sqrt(b, a)
        return (t1 + t2) / 2.0, c1 or c2

    tr, clamped = sym_trace_sqrt(s1, s2)
    if clamped:
        eye = FID_CLAMP * np.eye(len(s1))
        s1, s2 = s1 + eye, s2 + eye
        tr, _ = sym_trace_sqrt(s1, s2)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr)
    return FidResult(max(value, 0.0), clamped)


def _gaussian_fit(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError(f"expected an (N, d) feature matrix, got shape {x.shape}")
    if len(x) < 2:
        raise MetricError(f"FID needs at least 2 samples per set, got {len(x)}")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def fid_result(set_a, set_b) -> FidResult:
    mu1, s1 = _gaussian_fit(set_a)
    mu2, s2 = _gaussian_fit(set_b)
    if mu1.shape != mu2.shape:
        raise MetricError(f"feature dimensions differ: {mu1.size} vs {mu2.size}")
    return frechet_distance(mu1, s1, mu2, s2)


def fid(set_a, set_b) -> float:
    return fid_result(set_a, set_b).value


# -- n-way top-k -------------------------------------------------------------------

@dataclass(frozen=True)
class NwayConfig:
    n: int
    k: int
    num_classes: int
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise MetricError(f"n must be at least 2, got {self.n}")
        if not 1 <= self.k < self.n:
            raise MetricError(f"k must satisfy 1 <= k < n, got k={self.k}, n={self.n}")
        if self.n > self.num_classes:
            raise MetricError(f"{self.n}-way needs at least {self.n} classes, have {self.num_classes}")
        if self.trials < 1:
            raise MetricError(f"trials must be positive, got {self.trials}")


def beats(p: np.ndarray, c: int, target: int) -> bool:
    """Whether class c ranks above target: higher prob, ties to the lower index."""
    return p[c] > p[target] or (p[c] == p[target] and c < target)


def nway_hits(gt_probs, view_probs: Sequence, config: NwayConfig) -> np.ndarray:
    """Boolean (trials, views): is the reference class within the top k of its candidate set.

    One generator per call seeded from ``config.seed``; negatives are drawn per
    (trial, view), trial-major, uniformly without replacement.
    """
    gt = check_probs(gt_probs, config.num_classes)
    views = [check_probs(p, config.num_classes) for p in view_probs]
    if not views:
        raise MetricError("need at least one view")
    target = int(np.argmax(gt))
    others = np.array([c for c in range(config.num_classes) if c != target])
    # per view, which classes outrank the target
    above = np.array([[beats(p, c, target) for c in others] for p in views])
    rng = np.random.default_rng(config.seed)
    hits = np.zeros((config.trials, len(views)), dtype=bool)
    for t in range(config.trials):
        for j in range(len(views)):
            pick = rng.choice(len(others), size=config.n - 1, replace=False)
            hits[t, j] = above[j, pick].sum() < config.k
    return hits


def nway_topk(gt_probs, view_probs: Sequence, config: NwayConfig) -> tuple[float, float]:
    """Mean and population std over trials of the per-trial accuracy averaged over views."""
    per_trial = nway_hits(gt_probs, view_probs, config).mean(axis=1)
    return float(per_trial.mean()), float(per_trial.std())


def nway_per_view(gt_probs, view_probs: Sequence, config: NwayConfig) -> np.ndarray:
    """Accuracy of each view averaged over trials."""
    return nway_hits(gt_probs, view_probs, config).mean(axis=0)


# -- aggregation -------------------------------------------------------------------

@dataclass
class MetricReport:
    per_view: dict[tuple[str, str], dict[str, float]]
    per_object: dict[str, dict[str, float]]
    global_: dict[str, tuple[float, float]]
    settings: dict = field(default_factory=dict)


def aggregate(per_view_scores: Mapping[tuple[str, str], Mapping[str, float]],
              view_labels: Sequence[str] = VIEW_LABELS, settings: Mapping | None = None) -> MetricReport:
    """Average each object's views, then take mean and population std across objects.

    Every object must have exactly ``view_labels`` and the same metric names
    in every view.
    """
    by_object: dict[str, dict[str, Mapping[str, float]]] = {}
    for (obj, label), scores in per_view_scores.items():
        by_object.setdefault(obj, {})[label] = scores
    if not by_object:
        raise MetricError("no per-view scores to aggregate")
    expected = set(view_labels)
    names = None
    for obj, views in by_object.items():
        if set(views) != expected:
            missing = sorted(expected - set(views))
            extra = sorted(set(views) - expected)
            raise IncompleteViews(f"object {obj!r}: missing views {missing}, unexpected views {extra}")
        for label in view_labels:
            keys = sorted(views[label])
            if names is None:
                names = keys
            elif keys != names:
                raise MetricError(f"object {obj!r} view {label!r}: metrics {keys}, expected {names}")
    per_object = {
        obj: {m: math.fsum(views[label][m] for label in view_labels) / len(view_labels) for m in names}
        for obj, views in sorted(by_object.items())
    }
    global_ = {}
    for m in names:
        vals = [per_object[obj][m] for obj in per_object]
        mean = math.fsum(vals) / len(vals)
        global_[m] = (mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals)))
    per_view = {key: dict(v) for key, v in per_view_scores.items()}
    return MetricReport(per_view, per_object, global_, dict(settings or {}))


def view_set_hash(views) -> str:
    return sha256_hex(repr([(v.label, v.azimuth, v.elevation, v.distance, v.fov, v.resolution)
                            for v in views]).encode("utf-8"))


# -- precomputed features ----------------------------------------------------------

def write_feature_file(path: str | os.PathLike, ids_path: str | os.PathLike, ids: Sequence[str], feats) -> None:
    """Header (magic, count, dim) plus a little-endian float32 matrix; ids one per line."""
    x = np.asarray(feats, dtype="<f4")
    if x.ndim != 2 or len(x) != len(ids):
        raise MetricError(f"need one feature row per id, got {x.shape} for {len(ids)} ids")
    if any("\n" in i or not i for i in ids):
        raise MetricError("ids must be non-empty single-line strings")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", *x.shape) + x.tobytes())
    Path(ids_path).write_text("".join(i + "\n" for i in ids), encoding="utf-8")


def read_feature_file(path: str | os.PathLike, ids_path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != FEATURE_MAGIC:
        raise MetricError(f"{path}: not a feature file")
    count, dim = struct.unpack("<II", buf[4:12])
    if len(buf) != 12 + 4 * count * dim:
        raise MetricError(f"{path}: expected {count}x{dim} floats, file size disagrees")
    x = np.frombuffer(buf, dtype="<f4", offset=12).reshape(count, dim).astype(np.float64)
    ids = Path(ids_path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count or len(set(ids)) != count:
        raise MetricError(f"{ids_path}: expected {count} distinct ids, got {len(ids)}")
    return dict(zip(ids, x))


def pixel_key(pixels) -> str:
    return sha256_hex(encode_ppm(_pixels(pixels)))


class PrecomputedEmbedder:
    """Embedding lookup keyed by the SHA-256 of each image's P6 encoding."""

    def __init__(self, table: Mapping[str, np.ndarray], provider_id: str = "precomputed"):
        self.table = dict(table)
        self.provider_id = provider_id

    @classmethod
    def from_files(cls, path, ids_path, provider_id: str = "precomputed"):
        return cls(read_feature_file(path, ids_path), provider_id)

    def embed(self, pixels) -> np.ndarray:
        key = pixel_key(pixels)
        if key not in self.table:
            raise MetricError(f"no precomputed features for image {key[:12]}")
        return self.table[key]


# -- toy providers -----------------------------------------------------------------

class ColorHistogramEmbedder:
    """Per-channel intensity histograms with ``bins`` bins each, as pixel fractions."""

    def __init__(self, bins: int = 3):
        self.bins = bins
        self.provider_id = f"color-hist-{bins}"

    def embed(self, pixels) -> np.ndarray:
        px = _pixels(pixels).reshape(-1, 3)
        idx = np.minimum(px.astype(np.int64) * self.bins // 256, self.bins - 1)
        return np.concatenate([np.bincount(idx[:, ch], minlength=self.bins) for ch in range(3)]) / len(px)


class GradientFeatures:
    """Multiscale features: at each scale, RGB plus horizontal and vertical gradients."""

    def __init__(self, base: int = 32, scales: Sequence[int] = (1, 2, 4), weights: Sequence[float] | None = None):
        self.base = base
        self.scales = tuple(scales)
        self.weights = [1.0] * len(self.scales) if weights is None else list(weights)
        self.provider_id = f"grad-{base}-" + "-".join(map(str, self.scales))

    def layers(self, pixels) -> list[np.ndarray]:
        img = to_unit_range(resize_box(_pixels(pixels), self.base, self.base))
        out = []
        for s in self.scales:
            x = resize_box(img, self.base // s, self.base // s)
            gray = x.mean(axis=2)
            gx = np.diff(gray, axis=1, append=gray[:, -1:])
            gy = np.diff(gray, axis=0, append=gray[-1:, :])
            out.append(np.concatenate([x, gx[..., None], gy[..., None]], axis=2))
        return out


class TemplateClassifier:
    """Softmax over negative squared distances to the procedural class pictures."""

    def __init__(self, num_classes: int = 64, side: int = 8, temperature: float = 4.0):
        self.num_classes = num_classes
        self.side = side
        self.temperature = temperature
        self.templates = np.stack([self._features(class_image_pixels(c, 4 * side)) for c in range(num_classes)])
        self.provider_id = f"template-{num_classes}-{side}"

    def _features(self, pixels) -> np.ndarray:
        return to_unit_range(resize_box(_pixels(pixels), self.side, self.side)).ravel()

    def probs(self, pixels) -> np.ndarray:
        d = ((self.templates - self._features(pixels)) ** 2).sum(axis=1)
        logits = -d / self.temperature
        e = np.exp(logits - logits.max())
        return e / e.sum()
