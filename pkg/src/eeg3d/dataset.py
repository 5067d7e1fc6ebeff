"""EEG/image dataset ingestion, split protocol, and synthetic desk-scale datasets.

Manifests are JSON-lines files. An optional first record ``{"class_names": [...]}``
names the classes; every other line is one entry with the fields
``trial_id, subject_id, class_label, eeg_path, image_path, split``. Relative
paths resolve against the manifest's directory.

EEG trials are stored in a small binary container: a 16-byte header
(``b"EEG1"``, u32 channels, u32 samples, u32 reserved) followed by
channels x samples little-endian float32 values, row-major by channel.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .pixmap import read_ppm, write_ppm

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

EEG_MAGIC = b"EEG1"
_EEG_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    """Base class for dataset problems."""


class ManifestError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DuplicateTrialError(ManifestError):
    pass


class EegFormatError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class EegTrial:
    trial_id: str
    subject_id: int
    class_label: int
    data: np.ndarray
    split: str = "train"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
            raise DatasetError(f"trial {self.trial_id}: data must be a non-empty C x T matrix, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DatasetError(f"trial {self.trial_id}: non-finite values in data")
        if self.split not in SPLITS:
            raise DatasetError(f"trial {self.trial_id}: unknown split {self.split!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EegTrial):
            return NotImplemented
        return (
            (self.trial_id, self.subject_id, self.class_label, self.split)
            == (other.trial_id, other.subject_id, other.class_label, other.split)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class StimulusImage:
    """An 8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    image_id: str
    class_label: int
    pixels: np.ndarray
    provenance: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise DatasetError(f"image {self.image_id}: expected (H, W, 3) pixels, got {px.shape}")
        if px.dtype != np.uint8:
            raise DatasetError(f"image {self.image_id}: expected uint8 pixels, got {px.dtype}")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, StimulusImage):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.class_label == other.class_label
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class ManifestEntry:
    trial_id: str
    subject_id: int
    class_label: int
    eeg_path: str
    image_path: str
    split: str

    def to_record(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "subject_id": self.subject_id,
            "class_label": self.class_label,
            "eeg_path": self.eeg_path,
            "image_path": self.image_path,
            "split": self.split,
        }


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    root: Path | None = field(default=None, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.trial_id: e for e in self.entries}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def class_counts(self, split: str | None = None) -> Counter:
        return Counter(e.class_label for e in self.entries if split is None or e.split == split)


_FIELDS = ("trial_id", "subject_id", "class_label", "eeg_path", "image_path", "split")


def _entry_from_record(rec: dict, lineno: int) -> ManifestEntry:
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise ManifestError(f"missing fields {missing}", lineno)
    if rec["split"] not in SPLITS:
        raise ManifestError(f"unknown split tag {rec['split']!r}", lineno)
    try:
        subject = int(rec["subject_id"])
        label = int(rec["class_label"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"non-integer subject_id/class_label: {exc}", lineno) from None
    if label < 0:
        raise ManifestError(f"negative class_label {label}", lineno)
    return ManifestEntry(
        trial_id=str(rec["trial_id"]),
        subject_id=subject,
        class_label=label,
        eeg_path=str(rec["eeg_path"]),
        image_path=str(rec["image_path"]),
        split=rec["split"],
    )


def load_manifest(path: str | os.PathLike, *, check_paths: bool = True) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Raises ManifestError (with the offending line number) on malformed records,
    unknown split tags, duplicate trial ids, or references to missing files.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    class_names: list[str] | None = None
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"parse error: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ManifestError("record is not an object", lineno)
            if "class_names" in rec and "trial_id" not in rec:
                if class_names is not None or entries:
                    raise ManifestError("class_names header must be the first record", lineno)
                class_names = [str(c) for c in rec["class_names"]]
                continue
            entry = _entry_from_record(rec, lineno)
            if entry.trial_id in seen:
                raise DuplicateTrialError(
                    f"duplicate trial_id {entry.trial_id!r} (first seen on line {seen[entry.trial_id]})", lineno
                )
            seen[entry.trial_id] = lineno
            if check_paths:
                for rel in (entry.eeg_path, entry.image_path):
                    p = Path(rel) if Path(rel).is_absolute() else root / rel
                    if not p.exists():
                        raise ManifestError(f"referenced file does not exist: {rel}", lineno)
            entries.append(entry)
    if not entries:
        raise ManifestError("manifest has no entries")
    max_label = max(e.class_label for e in entries)
    if class_names is None:
        class_names = [f"class_{k}" for k in range(max_label + 1)]
    elif max_label >= len(class_names):
        raise ManifestError(f"class_label {max_label} out of range for {len(class_names)} class names")
    return DatasetManifest(tuple(entries), tuple(class_names), root=root)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = [json.dumps({"class_names": list(manifest.class_names)})]
    lines += [json.dumps(e.to_record()) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- EEG container -----------------------------------------------------------

def pack_eeg(data: np.ndarray) -> bytes:
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise EegFormatError(f"expected a 2-D array, got shape {arr.shape}")
    c, t = arr.shape
    return _EEG_HEADER.pack(EEG_MAGIC, c, t, 0) + np.ascontiguousarray(arr).tobytes()


def unpack_eeg(buf: bytes) -> np.ndarray:
    if len(buf) < _EEG_HEADER.size:
        raise EegFormatError("truncated header")
    magic, c, t, _ = _EEG_HEADER.unpack_from(buf)
    if magic != EEG_MAGIC:
        raise EegFormatError(f"bad magic {magic!r}")
    if c == 0 or t == 0:
        raise EegFormatError(f"empty trial dimensions ({c}, {t})")
    need = c * t * 4
    payload = buf[_EEG_HEADER.size:]
    if len(payload) < need:
        raise EegFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload[:need], dtype="<f4").reshape(c, t).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise EegFormatError("payload contains NaN or Inf")
    return arr


def write_eeg(trial: EegTrial | np.ndarray, path: str | os.PathLike) -> None:
    data = trial.data if isinstance(trial, EegTrial) else trial
    Path(path).write_bytes(pack_eeg(data))


def read_eeg(path: str | os.PathLike, entry: ManifestEntry | None = None) -> EegTrial:
    """Read an EEG container; metadata comes from ``entry`` when given."""
    data = unpack_eeg(Path(path).read_bytes())
    if entry is None:
        return EegTrial(trial_id=Path(path).stem, subject_id=0, class_label=0, data=data)
    return EegTrial(entry.trial_id, entry.subject_id, entry.class_label, data, entry.split)


def load_trial(manifest: DatasetManifest, entry: ManifestEntry) -> EegTrial:
    return read_eeg(manifest.resolve(entry.eeg_path), entry)


def load_image(manifest: DatasetManifest, entry: ManifestEntry) -> StimulusImage:
    px = read_ppm(manifest.resolve(entry.image_path))
    return StimulusImage(Path(entry.image_path).stem, entry.class_label, px)


# -- splitting ---------------------------------------------------------------

def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment with every non-zero ratio getting >= 1."""
    raw = [r * n for r in ratios]
    counts = [math.floor(x + 1e-9) for x in raw]
    rest = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def make_splits(
    manifest: DatasetManifest,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    stratify: str = "class",
) -> DatasetManifest:
    """Reassign split tags, stratified per class (or per subject and class).

    Within each stratum entries are shuffled with a seeded generator and cut
    into train/val/test by largest-remainder apportionment of ``ratios``.
    """
    if len(ratios) != len(SPLITS):
        raise DatasetError(f"expected {len(SPLITS)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    if stratify not in ("class", "subject_class"):
        raise DatasetError(f"unknown stratification {stratify!r}")

    strata: dict[tuple, list[ManifestEntry]] = defaultdict(list)
    for e in manifest.entries:
        key = (e.class_label,) if stratify == "class" else (e.subject_id, e.class_label)
        strata[key].append(e)

    rng = np.random.default_rng(seed)
    assigned: dict[str, str] = {}
    for key in sorted(strata):
        group = sorted(strata[key], key=lambda e: e.trial_id)
        if len(group) < len(SPLITS):
            raise DatasetError(f"stratum {key} has {len(group)} entries; need at least {len(SPLITS)}")
        perm = rng.permutation(len(group))
        counts = _split_counts(len(group), ratios)
        start = 0
        for name, cnt in zip(SPLITS, counts):
            for idx in perm[start:start + cnt]:
                assigned[group[idx].trial_id] = name
            start += cnt

    entries = tuple(replace(e, split=assigned[e.trial_id]) for e in manifest.entries)
    return DatasetManifest(entries, manifest.class_names, root=manifest.root)


# -- synthetic data ----------------------------------------------------------

GLYPHS = ("square", "disc", "triangle", "cross")
_GOLDEN = 0.6180339887498949


def class_color(class_label: int) -> tuple[float, float, float]:
    hue = (class_label * _GOLDEN) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.75, 0.9)


def class_image_pixels(class_label: int, side: int = 32) -> np.ndarray:
    """Procedural stimulus for a class: solid hue background plus a glyph.

    The glyph shape cycles through GLYPHS; its size and offset vary with
    ``class_label // 4`` so that every label gets a distinct picture.
    """
    bg = np.array(class_color(class_label))
    fg = np.array(class_color(class_label + 7)) * 0.35
    variant = (class_label // len(GLYPHS)) % 4
    shape = GLYPHS[class_label % len(GLYPHS)]

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = (xx + 0.5) / side - 0.5 - 0.08 * (variant % 2)
    v = (yy + 0.5) / side - 0.5 - 0.08 * (variant // 2)
    r = 0.22 + 0.04 * variant
    if shape == "square":
        mask = (np.abs(u) <= r) & (np.abs(v) <= r)
    elif shape == "disc":
        mask = u * u + v * v <= r * r
    elif shape == "triangle":
        mask = (v <= r) & (v >= -r) & (np.abs(u) <= (v + r) / 2)
    else:
        w = r / 3
        mask = ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))

    img = np.where(mask[..., None], fg, bg)
    return np.rint(img * 255).astype(np.uint8)


def class_templates(num_classes: int, channels: int, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E])
    return rng.standard_normal((num_classes, channels, samples))


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    trials: dict[str, EegTrial]
    images: dict[int, StimulusImage]
    templates: np.ndarray

    def __iter__(self):
        # allows ``manifest, trials, images = synth_dataset(...)``
        return iter((self.manifest, self.trials, self.images))

    def trials_in(self, split: str) -> list[EegTrial]:
        return [self.trials[e.trial_id] for e in self.manifest.entries if e.split == split]

    def image_for(self, trial: EegTrial) -> StimulusImage:
        return self.images[trial.class_label]

    def write(self, root: str | os.PathLike) -> Path:
        """Materialize the dataset under ``root``; returns the manifest path."""
        root = Path(root)
        (root / "eeg").mkdir(parents=True, exist_ok=True)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for e in self.manifest.entries:
            write_eeg(self.trials[e.trial_id], root / e.eeg_path)
        for label, img in self.images.items():
            write_ppm(root / "images" / f"{img.image_id}.ppm", img.pixels)
        path = root / "manifest.jsonl"
        save_manifest(self.manifest, path)
        return path


def synth_dataset(
    num_classes: int,
    trials_per_class: int,
    channels: int,
    samples: int,
    noise_sigma: float,
    seed: int = 0,
    *,
    image_side: int = 32,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> SyntheticDataset:
    """Template-plus-noise EEG trials paired with one procedural image per class.

    Each class owns a fixed standard-normal C x T template; each trial is that
    template plus i.i.d. Gaussian noise of scale ``noise_sigma``. Subjects cycle
    through 1..6. Splits come from ``make_splits`` when every class has enough
    trials, otherwise everything is tagged train.
    """
    if min(num_classes, trials_per_class, channels, samples, image_side) <= 0:
        raise DatasetError("all counts must be positive")
    if noise_sigma < 0:
        raise DatasetError("noise_sigma must be >= 0")

    templates = class_templates(num_classes, channels, samples, seed)
    rng = np.random.default_rng([seed, 0x5A])
    images = {
        c: StimulusImage(f"class{c:03d}", c, class_image_pixels(c, image_side)) for c in range(num_classes)
    }
    entries: list[ManifestEntry] = []
    trials: dict[str, EegTrial] = {}
    for c in range(num_classes):
        for i in range(trials_per_class):
            tid = f"c{c:03d}_t{i:04d}"
            noise = rng.standard_normal((channels, samples))
            data = (templates[c] + noise_sigma * noise).astype(np.float32)
            subject = 1 + (i % 6)
            entries.append(
                ManifestEntry(tid, subject, c, f"eeg/{tid}.eeg", f"images/{images[c].image_id}.ppm", "train")
            )
            trials[tid] = EegTrial(tid, subject, c, data, "train")

    manifest = DatasetManifest(tuple(entries), tuple(f"class_{c}" for c in range(num_classes)))
    if trials_per_class >= len(SPLITS):
        manifest = make_splits(manifest, ratios, seed)
        split_of = {e.trial_id: e.split for e in manifest.entries}
        trials = {tid: replace(t, split=split_of[tid]) for tid, t in trials.items()}
    return SyntheticDataset(manifest, trials, images, templates)

