"""End-to-end runner: decode, describe, regenerate, lift, render, evaluate.

Per trial the stages are

    full:    decode -> reason -> t2i -> to3d -> render -> evaluate
    direct:  decode ------------------> to3d -> render -> evaluate

Every stage goes through ``run_stage`` and so through the content-addressed
cache; a warm rerun therefore calls no provider. A failing stage quarantines
its trial and the run carries on.

Artifact tree written by ``write_artifacts``::

    <root>/<mode>/<trial_id>/decoded.ppm
                             description.txt      (full mode)
                             refined.ppm          (full mode)
                             mesh.obj
                             views/<label>.ppm
                             metrics.txt
    <root>/<mode>/report_gt.txt
    <root>/<mode>/report_intermediate.txt
    <root>/report_ablation.txt                    (ablation runs)
"""

from __future__ import annotations

import base64
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .align import AlignParams, align_project, encode_eeg, load_params
from .cache import (StageCache, canonical_json, config_hash, image_digest, pack_image, sha256_hex, trial_digest,
                    unpack_image)
from .config import PipelineConfig
from .dataset import (EegTrial, StimulusImage, SyntheticDataset, load_image, load_manifest, load_trial,
                      synth_dataset)
from .geometry import (GENERATED_LABEL, CubeReconstructor, ExtrusionReconstructor, ProceduralImageGenerator,
                       RemoteImageGenerator, RemoteMeshReconstructor, TriMesh, format_obj, image_to_mesh,
                       normalize_mesh, parse_obj, text_to_image)
from .metrics import (ColorHistogramEmbedder, GradientFeatures, MetricReport, NwayConfig, PrecomputedEmbedder,
                      TemplateClassifier, aggregate, cosine, fid_result, inception_score_from_probs,
                      lpips_from_layers, nway_per_view, view_set_hash)
from .pixmap import decode_ppm, encode_ppm, from_unit_range, resize_nearest, write_ppm
from .providers import JsonEndpoint
from .reasoning import (ColorReasoner, EchoReasoner, HttpReasoner, Reasoner, RetryPolicy, SemanticDescription,
                        StageError, SubprocessReasoner, pack_description, run_stage, unpack_description)
from .renderer import VIEW_LABELS, RenderedView, canonical_views, render_all
from .report import (METRICS, NWAY_COLUMNS, SETTING_OF_MODE, Report, ablation_report, gt_report,
                     intermediate_report, render_report)
from .toydiffusion import DenoiserParams, DiffusionConfig, load_denoiser, sample

log = logging.getLogger(__name__)

RENDERER_VERSION = "raster-1"
PER_VIEW_METRICS = ("clip", "lpips", *NWAY_COLUMNS)
TARGET_NAMES = ("gt", "intermediate")


class PipelineError(RuntimeError):
    """Fatal: bad dataset, unknown trial or provider kind."""


class Fingerprinted:
    """A callable carrying the cache fingerprint ``run_stage`` keys on."""

    def __init__(self, fn: Callable, fingerprint: str, provider_id: str = ""):
        self.fn = fn
        self.fingerprint = fingerprint
        self.provider_id = provider_id

    def __call__(self, arg):
        return self.fn(arg)


def _arrays_digest(arrays: Mapping[str, np.ndarray]) -> str:
    h = [k.encode("utf-8") + np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in sorted(arrays)]
    return sha256_hex(b"".join(h))


def _derived_seed(*parts) -> int:
    return int(sha256_hex(canonical_json(list(parts)))[:16], 16)


# -- decoders --------------------------------------------------------------------

class MockDecoder:
    """Stand-in EEG-to-image decoder: the trial's class picture plus per-trial pixel jitter.

    The jitter is seeded from the trial's EEG bytes, so it is deterministic
    and differs between trials of one class.
    """

    def __init__(self, images: Mapping[int, StimulusImage], side: int = 64, jitter: int = 12,
                 provider_id: str = "mock-decoder"):
        self.images = dict(images)
        self.side = side
        self.jitter = jitter
        self.provider_id = provider_id
        self.calls = 0
        self._lock = threading.Lock()
        self.fingerprint = config_hash({"kind": "mock", "id": provider_id, "side": side, "jitter": jitter,
                                        "images": {str(k): image_digest(v) for k, v in sorted(self.images.items())}})

    def __call__(self, trial: EegTrial) -> StimulusImage:
        with self._lock:
            self.calls += 1
        base = resize_nearest(self.images[trial.class_label].pixels, self.side, self.side).astype(np.int16)
        rng = np.random.default_rng(_derived_seed("decode", trial_digest(trial)))
        noise = rng.integers(-self.jitter, self.jitter + 1, size=base.shape)
        px = np.clip(base + noise, 0, 255).astype(np.uint8)
        return StimulusImage(f"dec-{trial.trial_id}", GENERATED_LABEL, px, {"stage": "decode",
                                                                           "provider_id": self.provider_id})


class ToyDecoder:
    """Aligned EEG embedding -> conditioning vector -> guided toy diffusion sample, upscaled."""

    def __init__(self, align_params: AlignParams, denoiser: DenoiserParams, diffusion: DiffusionConfig,
                 side: int = 64, seed: int = 0, provider_id: str = "toy-decoder"):
        self.align_params = align_params
        self.denoiser = denoiser
        self.diffusion = diffusion
        self.side = side
        self.seed = seed
        self.provider_id = provider_id
        self.calls = 0
        self._lock = threading.Lock()
        self.fingerprint = config_hash({"kind": "toy", "id": provider_id, "side": side, "seed": seed,
                                        "align": _arrays_digest(align_params.arrays),
                                        "denoiser": _arrays_digest(denoiser.arrays), "diffusion": asdict(diffusion)})

    def __call__(self, trial: EegTrial) -> StimulusImage:
        with self._lock:
            self.calls += 1
        z_c = align_project(encode_eeg(trial, self.align_params), self.align_params)
        x = sample(z_c, self.diffusion, self.denoiser, _derived_seed("sample", self.seed, trial_digest(trial)))
        px = resize_nearest(from_unit_range(x), self.side, self.side)
        return StimulusImage(f"dec-{trial.trial_id}", GENERATED_LABEL, px, {"stage": "decode",
                                                                           "provider_id": self.provider_id})


# -- components ------------------------------------------------------------------

@dataclass
class LoadedDataset:
    trials: dict[str, EegTrial]
    targets: dict[str, StimulusImage]  # ground-truth stimulus per trial id
    class_images: dict[int, StimulusImage]
    splits: dict[str, str]


def load_dataset(config: PipelineConfig) -> LoadedDataset:
    d = config.dataset
    if d.manifest is None:
        syn = synth_dataset(d.num_classes, d.trials_per_class, d.channels, d.samples, d.noise_sigma, d.seed,
                            image_side=d.image_side)
        return from_synthetic(syn)
    manifest = load_manifest(d.manifest)
    trials, targets, class_images, splits = {}, {}, {}, {}
    for e in manifest.entries:
        trials[e.trial_id] = load_trial(manifest, e)
        img = load_image(manifest, e)
        targets[e.trial_id] = img
        class_images.setdefault(e.class_label, img)
        splits[e.trial_id] = e.split
    return LoadedDataset(trials, targets, class_images, splits)


def from_synthetic(syn: SyntheticDataset) -> LoadedDataset:
    trials = dict(syn.trials)
    targets = {tid: syn.image_for(t) for tid, t in trials.items()}
    return LoadedDataset(trials, targets, dict(syn.images), {e.trial_id: e.split for e in syn.manifest.entries})


@dataclass
class Components:
    decoder: Callable[[EegTrial], StimulusImage]
    reasoner: object  # provider behind the Reasoner wrapper
    t2i: object
    to3d: object
    embedder: object
    features: object
    classifier: object

    def providers(self) -> dict[str, object]:
        return {"decode": self.decoder, "reason": self.reasoner, "t2i": self.t2i, "to3d": self.to3d}


def _endpoint(section) -> JsonEndpoint:
    if section.kind == "http":
        return JsonEndpoint(url=section.url, timeout=section.timeout)
    return JsonEndpoint(argv=section.command, timeout=section.timeout)


def build_reasoner(section):
    if section.kind == "mock-color":
        return ColorReasoner(section.id)
    if section.kind == "mock-echo":
        return EchoReasoner(section.id)
    if section.kind == "http":
        return HttpReasoner(section.url, section.id, timeout=section.timeout, max_in_flight=section.max_in_flight)
    if section.kind == "subprocess":
        return SubprocessReasoner(section.command, section.id, timeout=section.timeout,
                                  max_in_flight=section.max_in_flight)
    raise PipelineError(f"unknown reasoner kind {section.kind!r}")


def build_t2i(section):
    if section.kind == "mock-procedural":
        return ProceduralImageGenerator(provider_id=section.id)
    if section.kind in ("http", "subprocess"):
        return RemoteImageGenerator(_endpoint(section), section.id, max_in_flight=section.max_in_flight)
    raise PipelineError(f"unknown t2i kind {section.kind!r}")


def build_to3d(section):
    if section.kind == "mock-extrude":
        return ExtrusionReconstructor(provider_id=section.id)
    if section.kind == "mock-cube":
        return CubeReconstructor(provider_id=section.id)
    if section.kind in ("http", "subprocess"):
        return RemoteMeshReconstructor(_endpoint(section), section.id, max_in_flight=section.max_in_flight)
    raise PipelineError(f"unknown to3d kind {section.kind!r}")


def build_decoder(config: PipelineConfig, data: LoadedDataset):
    d = config.decoder
    if d.kind == "mock":
        return MockDecoder(data.class_images, d.output_side, d.jitter, d.id)
    if d.kind == "toy":
        try:
            align_params, denoiser = load_params(d.align_params), load_denoiser(d.denoiser)
        except OSError as exc:
            raise PipelineError(f"toy decoder checkpoints missing ({exc}); run train-align first") from None
        return ToyDecoder(align_params, denoiser, config.diffusion, d.output_side, config.seed, d.id)
    raise PipelineError(f"unknown decoder kind {d.kind!r}")


def build_components(config: PipelineConfig, data: LoadedDataset) -> Components:
    ev = config.evaluation
    if ev.embedder == "color-hist":
        embedder = ColorHistogramEmbedder(ev.histogram_bins)
    elif ev.embedder == "precomputed":
        if not ev.feature_file or not ev.feature_ids:
            raise PipelineError("precomputed embedder needs feature_file and feature_ids")
        embedder = PrecomputedEmbedder.from_files(ev.feature_file, ev.feature_ids)
    else:
        raise PipelineError(f"unknown embedder {ev.embedder!r}")
    if ev.features != "gradient":
        raise PipelineError(f"unknown feature extractor {ev.features!r}")
    if ev.classifier != "template":
        raise PipelineError(f"unknown classifier {ev.classifier!r}")
    return Components(build_decoder(config, data), build_reasoner(config.reasoner), build_t2i(config.t2i),
                      build_to3d(config.to3d), embedder, GradientFeatures(ev.feature_base),
                      TemplateClassifier(ev.classifier_classes))


# -- stage codecs ------------------------------------------------------------------

def pack_mesh(mesh: TriMesh) -> bytes:
    return canonical_json({"obj": format_obj(mesh), "provenance": mesh.provenance})


def unpack_mesh(data: bytes) -> TriMesh:
    doc = json.loads(data)
    return parse_obj(doc["obj"])[0].with_provenance(doc["provenance"])


def pack_views(views: Sequence[RenderedView]) -> bytes:
    return canonical_json([{"label": v.view.label, "ppm": base64.b64encode(v.to_ppm()).decode("ascii")}
                           for v in views])


def unpack_views_with(views_spec, object_id: str) -> Callable[[bytes], list[RenderedView]]:
    by_label = {v.label: v for v in views_spec}

    def unpack(data: bytes) -> list[RenderedView]:
        return [RenderedView(decode_ppm(base64.b64decode(d["ppm"])), by_label[d["label"]], object_id)
                for d in json.loads(data)]
    return unpack


# -- evaluation ------------------------------------------------------------------

def nway_seed(seed: int, trial_id: str, n: int, k: int) -> int:
    """Candidate-draw seed for one trial and column; both targets share it."""
    return _derived_seed("nway", seed, trial_id, n, k)


def evaluate_views(views: Sequence[RenderedView], targets: Mapping[str, StimulusImage], comps: Components,
                   trial_id: str, seed: int, nway_trials: int) -> dict:
    """Per-view scores against each target, plus the raw vectors set-level metrics need.

    Returns ``{"scores": {target: {label: {metric: value}}}, "view_embeddings",
    "view_probs", "target_embeddings": {target: [...]}}``.
    """
    v_emb = [np.asarray(comps.embedder.embed(v.pixels), dtype=np.float64) for v in views]
    v_feat = [comps.features.layers(v.pixels) for v in views]
    v_prob = [comps.classifier.probs(v.pixels) for v in views]
    num_classes = len(v_prob[0])
    scores, t_emb = {}, {}
    for name, target in targets.items():
        e = np.asarray(comps.embedder.embed(target.pixels), dtype=np.float64)
        f = comps.features.layers(target.pixels)
        p = comps.classifier.probs(target.pixels)
        t_emb[name] = e.tolist()
        per_view = {v.view.label: {"clip": cosine(e, ve), "lpips": lpips_from_layers(f, vf)}
                    for v, ve, vf in zip(views, v_emb, v_feat)}
        for col, (n, k) in NWAY_COLUMNS.items():
            cfg = NwayConfig(n, k, num_classes, nway_trials, nway_seed(seed, trial_id, n, k))
            for v, acc in zip(views, nway_per_view(p, v_prob, cfg)):
                per_view[v.view.label][col] = float(acc)
        scores[name] = per_view
    return {"scores": scores, "view_embeddings": [e.tolist() for e in v_emb],
            "view_probs": [np.asarray(p, dtype=np.float64).tolist() for p in v_prob],
            "target_embeddings": t_emb}


def _evaluator_fingerprint(comps: Components, config: PipelineConfig) -> str:
    return config_hash({"embedder": comps.embedder.provider_id, "features": comps.features.provider_id,
                        "classifier": comps.classifier.provider_id, "nway_trials": config.evaluation.nway_trials,
                        "seed": config.seed})


# -- per-trial run ---------------------------------------------------------------

@dataclass
class TrialOutcome:
    trial_id: str
    decoded: StimulusImage
    description: SemanticDescription | None
    refined: StimulusImage | None
    mesh: TriMesh
    views: list[RenderedView]
    evaluation: dict


def run_trial(trial: EegTrial, target: StimulusImage, config: PipelineConfig, comps: Components,
              cache: StageCache | None, mode: str, sleep: Callable[[float], None] | None = None) -> TrialOutcome:
    """One trial through every stage of ``mode``; raises StageError naming the failing stage."""
    seed, gen = config.seed, config.generation
    views_spec = canonical_views(config.views)
    decoded = run_stage("decode", comps.decoder, trial, {"trial": trial_digest(trial)}, pack_image, unpack_image,
                        cache, mode, seed)
    description = refined = None
    lift_input = decoded
    if mode == "full":
        reasoner = Reasoner(comps.reasoner, policy=RetryPolicy(config.max_retries), sleep=sleep or time.sleep)
        description = run_stage("reason", reasoner, decoded, {"image": image_digest(decoded)}, pack_description,
                                unpack_description, cache, mode, seed)
        t2i = Fingerprinted(lambda d: text_to_image(d, gen, comps.t2i, sleep=sleep),
                            config_hash({"provider": comps.t2i.provider_id, "generation": asdict(gen)}),
                            comps.t2i.provider_id)
        refined = run_stage("t2i", t2i, description,
                            {"description": sha256_hex(description.text.encode("utf-8"))},
                            pack_image, unpack_image, cache, mode, seed)
        lift_input = refined
    to3d = Fingerprinted(lambda im: image_to_mesh(im, gen, comps.to3d, mode=mode, sleep=sleep),
                         config_hash({"provider": comps.to3d.provider_id, "generation": asdict(gen)}),
                         comps.to3d.provider_id)
    mesh = run_stage("to3d", to3d, lift_input, {"image": image_digest(lift_input)}, pack_mesh, unpack_mesh,
                     cache, mode, seed)
    render = Fingerprinted(lambda m: render_all(normalize_mesh(m), views_spec, trial.trial_id),
                           config_hash({"renderer": RENDERER_VERSION, "views": view_set_hash(views_spec)}),
                           "renderer")
    views = run_stage("render", render, mesh, {"mesh": mesh.digest()}, pack_views,
                      unpack_views_with(views_spec, trial.trial_id), cache, mode, seed)
    targets = {"gt": target, "intermediate": decoded}
    evaluate = Fingerprinted(lambda vs: evaluate_views(vs, targets, comps, trial.trial_id, seed,
                                                       config.evaluation.nway_trials),
                             _evaluator_fingerprint(comps, config), "evaluator")
    evaluation = run_stage("evaluate", evaluate, views,
                           {"views": sha256_hex(pack_views(views)), "gt": image_digest(target),
                            "intermediate": image_digest(decoded),
                            "trial": sha256_hex(trial.trial_id.encode("utf-8"))},
                           canonical_json, json.loads, cache, mode, seed)
    return TrialOutcome(trial.trial_id, decoded, description, refined, mesh, views, evaluation)


# -- whole runs ------------------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    trial_ids: list[str]
    outcomes: dict[str, TrialOutcome]
    failures: list[tuple[str, str, str]]
    metrics: dict[str, MetricReport | None]
    scores: dict[str, dict[str, float | None]]
    reports: dict[str, Report]
    meta: dict[str, str] = field(default_factory=dict)

    def report_text(self, name: str) -> str:
        return render_report(self.reports[name])


def set_scores(outcomes: Sequence[TrialOutcome], target: str, config: PipelineConfig):
    """Mean per-view metrics across objects, then IS and FID over the pooled views."""
    scores: dict[str, float | None] = {m: None for m in METRICS}
    if not outcomes:
        return scores, None, False
    per_view = {(o.trial_id, label): s for o in outcomes for label, s in o.evaluation["scores"][target].items()}
    report = aggregate(per_view, VIEW_LABELS, {"target": target})
    for m in PER_VIEW_METRICS:
        scores[m] = report.global_[m][0]
    probs = [p for o in outcomes for p in o.evaluation["view_probs"]]
    scores["is"] = inception_score_from_probs(probs, min(config.evaluation.is_splits, len(probs)))[0]
    views = [e for o in outcomes for e in o.evaluation["view_embeddings"]]
    refs = [o.evaluation["target_embeddings"][target] for o in outcomes]
    regularized = False
    if len(refs) >= 2:
        res = fid_result(np.array(views), np.array(refs))
        scores["fid"], regularized = res.value, res.regularized
    return scores, report, regularized


def _meta(config: PipelineConfig, comps: Components, n_trials: int, regularized: bool) -> dict[str, str]:
    return {
        "trials": str(n_trials),
        "seed": str(config.seed),
        "nway_trials": str(config.evaluation.nway_trials),
        "nway_ties": "lower class index ranks first",
        "nway_pooling": "per view then mean over views and objects",
        "fid_pooling": "all rendered views vs one target image per object",
        "fid_regularized": "yes" if regularized else "no",
        "is_splits": str(config.evaluation.is_splits),
        "views": view_set_hash(canonical_views(config.views))[:16],
        "providers": " ".join(f"{k}={getattr(v, 'provider_id', '?')}" for k, v in comps.providers().items()),
        "evaluators": f"{comps.embedder.provider_id} {comps.features.provider_id} {comps.classifier.provider_id}",
    }


def run_pipeline(config: PipelineConfig, trial_ids: Sequence[str] | None = None, *, mode: str | None = None,
                 data: LoadedDataset | None = None, components: Components | None = None,
                 cache: StageCache | None | bool = True, sleep: Callable[[float], None] | None = None) -> RunResult:
    """Run every trial in ``trial_ids`` (default: the test split) and score both targets.

    ``cache=True`` uses ``config.cache_dir``; ``False``/``None`` disables caching.
    """
    mode = mode or config.mode
    if mode not in SETTING_OF_MODE:
        raise PipelineError(f"unknown mode {mode!r}")
    data = data or load_dataset(config)
    comps = components or build_components(config, data)
    if cache is True:
        cache = StageCache(config.cache_dir)
    elif cache is False:
        cache = None
    if trial_ids is None:
        trial_ids = sorted(t for t, s in data.splits.items() if s == "test")
    trial_ids = list(trial_ids)
    unknown = [t for t in trial_ids if t not in data.trials]
    if unknown:
        raise PipelineError(f"unknown trial ids {unknown}")
    if len(set(trial_ids)) != len(trial_ids):
        raise PipelineError("duplicate trial ids")

    def one(tid):
        try:
            return run_trial(data.trials[tid], data.targets[tid], config, comps, cache, mode, sleep), None
        except StageError as exc:
            log.warning("trial %s failed in %s: %s", tid, exc.stage, exc.cause)
            return None, (tid, exc.stage, str(exc.cause))

    with ThreadPoolExecutor(max_workers=config.worker_limit) as pool:
        results = list(pool.map(one, trial_ids))
    outcomes = {tid: out for tid, (out, _) in zip(trial_ids, results) if out is not None}
    failures = [f for _, f in results if f is not None]

    ordered = [outcomes[t] for t in trial_ids if t in outcomes]
    scores, metrics, regularized = {}, {}, False
    for target in TARGET_NAMES:
        scores[target], metrics[target], reg = set_scores(ordered, target, config)
        regularized |= reg
    meta = _meta(config, comps, len(trial_ids), regularized)
    backbone, setting = config.decoder.id, SETTING_OF_MODE[mode]
    reports = {
        "gt": gt_report([(backbone, setting, scores["gt"])], failures, meta),
        "intermediate": intermediate_report([(backbone, setting, scores["intermediate"], scores["gt"])],
                                            failures, meta),
    }
    return RunResult(mode, trial_ids, outcomes, failures, metrics, scores, reports, meta)


@dataclass
class AblationResult:
    full: RunResult
    direct: RunResult
    report: Report

    def report_text(self) -> str:
        return render_report(self.report)


def run_ablation(config: PipelineConfig, trial_ids: Sequence[str] | None = None, **kwargs) -> AblationResult:
    """Both modes on the same trials and seeds; deltas are full minus direct."""
    data = kwargs.pop("data", None) or load_dataset(config)
    comps = kwargs.pop("components", None) or build_components(config, data)
    full = run_pipeline(config, trial_ids, mode="full", data=data, components=comps, **kwargs)
    direct = run_pipeline(config, full.trial_ids, mode="direct", data=data, components=comps, **kwargs)
    failures = [(t, f"full/{s}", m) for t, s, m in full.failures] + \
               [(t, f"direct/{s}", m) for t, s, m in direct.failures]
    meta = dict(full.meta)
    meta["fid_regularized"] = "yes" if "yes" in (full.meta["fid_regularized"], direct.meta["fid_regularized"]) \
        else "no"
    report = ablation_report([(config.decoder.id, full.scores["gt"], direct.scores["gt"])], failures, meta)
    return AblationResult(full, direct, report)


# -- artifacts -------------------------------------------------------------------

def metrics_text(outcome: TrialOutcome) -> str:
    """``target | view | metric | value`` lines, then the per-object means."""
    lines = []
    for target in TARGET_NAMES:
        per_view = outcome.evaluation["scores"][target]
        for label in VIEW_LABELS:
            for m in PER_VIEW_METRICS:
                lines.append(f"{target} | {label} | {m} | {per_view[label][m]!r}")
        for m in PER_VIEW_METRICS:
            mean = aggregate({(outcome.trial_id, lb): per_view[lb] for lb in VIEW_LABELS}).per_object[
                outcome.trial_id][m]
            lines.append(f"{target} | mean | {m} | {mean!r}")
    return "\n".join(lines) + "\n"


def write_artifacts(result: RunResult, root: str | Path) -> Path:
    base = Path(root) / result.mode
    for tid, o in result.outcomes.items():
        d = base / tid
        (d / "views").mkdir(parents=True, exist_ok=True)
        write_ppm(d / "decoded.ppm", o.decoded.pixels)
        if o.description is not None:
            (d / "description.txt").write_text(o.description.text + "\n", encoding="utf-8")
        if o.refined is not None:
            write_ppm(d / "refined.ppm", o.refined.pixels)
        (d / "mesh.obj").write_text(format_obj(o.mesh), encoding="utf-8")
        for v in o.views:
            (d / "views" / f"{v.view.label}.ppm").write_bytes(encode_ppm(v.pixels))
        (d / "metrics.txt").write_text(metrics_text(o), encoding="utf-8")
    base.mkdir(parents=True, exist_ok=True)
    for name, report in result.reports.items():
        (base / f"report_{name}.txt").write_text(render_report(report), encoding="utf-8")
    return base


def write_ablation(result: AblationResult, root: str | Path) -> Path:
    write_artifacts(result.full, root)
    write_artifacts(result.direct, root)
    path = Path(root) / "report_ablation.txt"
    path.write_text(result.report_text(), encoding="utf-8")
    return path
