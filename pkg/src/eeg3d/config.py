"""Pipeline configuration: one YAML document with a section per stage.

``default_config_text()`` writes every default explicitly. Loading merges a
document over the defaults and rejects unknown keys. Environment variables
may override provider endpoints and nothing else:

    EEG3D_<PROVIDER>_URL   HTTP endpoint
    EEG3D_<PROVIDER>_CMD   subprocess command line (shell-style quoting)

where <PROVIDER> is REASONER, T2I or TO3D.
"""

from __future__ import annotations

import dataclasses
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .align import AlignConfig
from .geometry import GenStageConfig
from .renderer import ViewConfig, canonical_views
from .toydiffusion import DiffusionConfig, linear_betas

MODES = ("full", "direct")
ENV_PREFIX = "EEG3D_"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    manifest: str | None = None  # none: synthesize in memory from the fields below
    num_classes: int = 8
    trials_per_class: int = 10
    channels: int = 8
    samples: int = 32
    noise_sigma: float = 0.1
    image_side: int = 32
    seed: int = 0


@dataclass
class DecoderSection:
    kind: str = "mock"  # mock | toy
    id: str = "mock-decoder"
    output_side: int = 64
    jitter: int = 12  # mock: amplitude of the per-trial pixel perturbation
    align_params: str = "checkpoints/align.bin"
    denoiser: str = "checkpoints/denoiser.bin"


@dataclass
class ProviderSection:
    kind: str  # mock-* | http | subprocess
    id: str
    url: str | None = None
    command: list[str] | None = None
    timeout: float = 120.0
    max_in_flight: int = 4


@dataclass
class EvaluationSection:
    embedder: str = "color-hist"  # color-hist | precomputed
    histogram_bins: int = 3
    feature_file: str | None = None
    feature_ids: str | None = None
    features: str = "gradient"
    feature_base: int = 32
    classifier: str = "template"
    classifier_classes: int = 64
    nway_trials: int = 20
    is_splits: int = 10


@dataclass
class PipelineConfig:
    mode: str = "full"
    seed: int = 0
    cache_dir: str = ".eeg3d-cache"
    output_dir: str = "runs"
    worker_limit: int = 4
    max_retries: int = 3
    dataset: DatasetSection = field(default_factory=DatasetSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    reasoner: ProviderSection = field(default_factory=lambda: ProviderSection("mock-color", "mock-color"))
    t2i: ProviderSection = field(default_factory=lambda: ProviderSection("mock-procedural", "mock-t2i"))
    to3d: ProviderSection = field(default_factory=lambda: ProviderSection("mock-extrude", "mock-extrude"))
    align: AlignConfig = field(default_factory=AlignConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    generation: GenStageConfig = field(default_factory=GenStageConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.worker_limit < 1:
            raise ConfigError(f"worker_limit must be >= 1, got {self.worker_limit}")
        if self.max_retries < 1:
            raise ConfigError(f"max_retries must be >= 1, got {self.max_retries}")
        try:
            canonical_views(self.views)
        except ValueError as exc:
            raise ConfigError(f"views: {exc}") from None
        for name in ("reasoner", "t2i", "to3d"):
            p = getattr(self, name)
            if p.kind == "http" and not p.url:
                raise ConfigError(f"{name}: http provider needs a url")
            if p.kind == "subprocess" and not p.command:
                raise ConfigError(f"{name}: subprocess provider needs a command")


SECTIONS = {
    "dataset": DatasetSection, "decoder": DecoderSection, "reasoner": ProviderSection, "t2i": ProviderSection,
    "to3d": ProviderSection, "align": AlignConfig, "diffusion": DiffusionConfig, "generation": GenStageConfig,
    "views": ViewConfig, "evaluation": EvaluationSection,
}


def to_dict(config: PipelineConfig) -> dict:
    doc = dataclasses.asdict(config)
    # the default schedule is written as null rather than fifty numbers
    d = doc["diffusion"]
    if tuple(d["betas"]) == tuple(float(b) for b in linear_betas(d["timesteps"])):
        d["betas"] = None
    else:
        d["betas"] = list(d["betas"])
    return doc


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False, default_flow_style=False)


def default_config_text() -> str:
    return dump_config(PipelineConfig())


def _build(cls, doc: Mapping[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(doc: Mapping[str, Any] | None) -> PipelineConfig:
    base = to_dict(PipelineConfig())
    doc = dict(doc or {})
    top_names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(doc) - top_names)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for name in top_names:
        if name in SECTIONS:
            section = doc.get(name) or {}
            if not isinstance(section, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping")
            merged = {**base[name], **section}
            if name == "diffusion" and merged.get("betas") is not None:
                merged["betas"] = tuple(merged["betas"])
            kwargs[name] = _build(SECTIONS[name], merged, name)
        else:
            kwargs[name] = doc.get(name, base[name])
    return _build(PipelineConfig, kwargs, "config")


def apply_env(config: PipelineConfig, env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Provider endpoint overrides from the environment; returns a new config."""
    env = os.environ if env is None else env
    updates = {}
    for name in ("reasoner", "t2i", "to3d"):
        p = getattr(config, name)
        url = env.get(f"{ENV_PREFIX}{name.upper()}_URL")
        cmd = env.get(f"{ENV_PREFIX}{name.upper()}_CMD")
        if url and cmd:
            raise ConfigError(f"both {ENV_PREFIX}{name.upper()}_URL and _CMD are set")
        if url:
            updates[name] = dataclasses.replace(p, kind="http", url=url, command=None)
        elif cmd:
            updates[name] = dataclasses.replace(p, kind="subprocess", command=shlex.split(cmd), url=None)
    return dataclasses.replace(config, **updates) if updates else config


def load_config(path: str | os.PathLike | None = None, env: Mapping[str, str] | None = None) -> PipelineConfig:
    doc = None
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    return apply_env(from_dict(doc), env)
