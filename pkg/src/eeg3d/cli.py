"""Command-line entry point ``eeg3d``.

Exit codes: 0 when every trial succeeded, 2 when some trials failed, 1 on a
fatal error (bad config, dataset or arguments).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .align import align_project, encode_eeg, retrieval_accuracy, save_params, train_alignment
from .cache import StageCache
from .config import ConfigError, default_config_text, load_config
from .dataset import DatasetError, load_image, load_manifest, load_trial, synth_dataset
from .geometry import GeometryError, load_obj, normalize_mesh
from .metrics import (ColorHistogramEmbedder, GradientFeatures, MetricError, TemplateClassifier, clip_score,
                      inception_score, lpips_distance)
from .pipeline import PipelineError, load_dataset, run_ablation, run_pipeline, write_ablation, write_artifacts
from .pixmap import PixmapError, read_ppm, resize_box, to_unit_range, write_ppm
from .renderer import VIEW_LABELS, RenderError, canonical_views, export_camera_config, render_all
from .report import ReportError, parse_report, render_report
from .toydiffusion import save_denoiser, train_denoiser

FATAL = (ConfigError, DatasetError, PipelineError, GeometryError, MetricError, PixmapError, RenderError,
         ReportError, OSError, ValueError)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=default, help="override the run seed")
    p.add_argument("--cache-dir", default=default, help="override the stage cache directory")
    p.add_argument("--workers", type=int, default=default, help="override the number of concurrent trials")
    p.add_argument("--mode", choices=("full", "direct"), default=default, help="override the pipeline mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eeg3d", description="EEG -> image -> 3D pipeline and evaluation harness")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", parents=[common], help="print or write the default config")
    p.add_argument("--out", help="write here instead of stdout")

    p = sub.add_parser("ingest", parents=[common], help="validate a manifest and every file it names")
    p.add_argument("manifest")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic dataset described by the config")
    p.add_argument("--out", required=True)

    sub.add_parser("train-align", parents=[common],
                   help="train the alignment model and toy denoiser; write the decoder checkpoints")

    for name, text in (("run", "run the pipeline in the configured mode"), ("ablate", "run both modes")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--trials", nargs="+", help="trial ids (default: the test split)")
        p.add_argument("--limit", type=int, help="use only the first N selected trials")
        p.add_argument("--out", help="artifact root (default: config output_dir)")

    p = sub.add_parser("render-views", parents=[common], help="render the six canonical views of an OBJ mesh")
    p.add_argument("mesh")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="score a directory of six views against one image")
    p.add_argument("views", help="directory holding <label>.ppm for every canonical view")
    p.add_argument("--reference", required=True, help="P6 image to compare against")

    p = sub.add_parser("report", parents=[common], help="validate a report file and print it canonically")
    p.add_argument("path")

    p = sub.add_parser("export-cameras", parents=[common], help="write the canonical cameras as JSON lines")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args):
    config = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.cache_dir is not None:
        updates["cache_dir"] = args.cache_dir
    if args.workers is not None:
        updates["worker_limit"] = args.workers
    if args.mode is not None:
        updates["mode"] = args.mode
    try:
        return dataclasses.replace(config, **updates) if updates else config
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _select_trials(args, data):
    ids = args.trials or sorted(t for t, s in data.splits.items() if s == "test")
    return ids[: args.limit] if args.limit is not None else ids


def cmd_init_config(args, config) -> int:
    text = default_config_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ingest(args, config) -> int:
    manifest = load_manifest(args.manifest)
    counts: dict[str, int] = {}
    for e in manifest.entries:
        load_trial(manifest, e)
        load_image(manifest, e)
        counts[e.split] = counts.get(e.split, 0) + 1
    classes = len({e.class_label for e in manifest.entries})
    print(f"{len(manifest.entries)} trials, {classes} classes; " +
          ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    return 0


def cmd_synth(args, config) -> int:
    d = config.dataset
    syn = synth_dataset(d.num_classes, d.trials_per_class, d.channels, d.samples, d.noise_sigma, d.seed,
                        image_side=d.image_side)
    print(syn.write(args.out))
    return 0


def cmd_train_align(args, config) -> int:
    data = load_dataset(config)
    train = [data.trials[t] for t in sorted(data.trials) if data.splits[t] == "train"]
    test = [data.trials[t] for t in sorted(data.trials) if data.splits[t] == "test"]
    result = train_alignment(train, [data.targets[t.trial_id] for t in train], config.align)
    if test:
        scores = retrieval_accuracy(result.params, test, data.class_images)
        print(f"held-out retrieval: 2-way {scores.two_way:.3f}, top-1 {scores.top1:.3f}")
    diff = config.diffusion
    pairs = []
    for t in train:
        img = resize_box(data.targets[t.trial_id].pixels, diff.image_side, diff.image_side)
        pairs.append((to_unit_range(img), align_project(encode_eeg(t, result.params), result.params)))
    trained = train_denoiser(pairs, diff)
    for path in (config.decoder.align_params, config.decoder.denoiser):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, config.decoder.align_params)
    save_denoiser(trained.params, config.decoder.denoiser)
    print(f"wrote {config.decoder.align_params} and {config.decoder.denoiser}")
    return 0


def _run_kwargs(config):
    return {"cache": StageCache(config.cache_dir)}


def cmd_run(args, config) -> int:
    data = load_dataset(config)
    result = run_pipeline(config, _select_trials(args, data), data=data, **_run_kwargs(config))
    write_artifacts(result, args.out or config.output_dir)
    sys.stdout.write(result.report_text("gt"))
    return 2 if result.failures else 0


def cmd_ablate(args, config) -> int:
    data = load_dataset(config)
    result = run_ablation(config, _select_trials(args, data), data=data, **_run_kwargs(config))
    write_ablation(result, args.out or config.output_dir)
    sys.stdout.write(result.report_text())
    return 2 if result.report.failures else 0


def cmd_render_views(args, config) -> int:
    mesh = normalize_mesh(load_obj(args.mesh))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for view in render_all(mesh, canonical_views(config.views), Path(args.mesh).stem):
        write_ppm(out / f"{view.view.label}.ppm", view.pixels)
    print(out)
    return 0


def cmd_evaluate(args, config) -> int:
    ev = config.evaluation
    ref = read_ppm(args.reference)
    views = [read_ppm(Path(args.views) / f"{label}.ppm") for label in VIEW_LABELS]
    embedder, features = ColorHistogramEmbedder(ev.histogram_bins), GradientFeatures(ev.feature_base)
    rows = [(label, clip_score(ref, v, embedder), lpips_distance(ref, v, features))
            for label, v in zip(VIEW_LABELS, views)]
    for label, c, lp in rows:
        print(f"{label} | clip {c:.6f} | lpips {lp:.6f}")
    n = len(rows)
    print(f"mean | clip {sum(r[1] for r in rows) / n:.6f} | lpips {sum(r[2] for r in rows) / n:.6f}")
    is_mean, _ = inception_score(views, TemplateClassifier(ev.classifier_classes), splits=1)
    print(f"is | {is_mean:.6f}")
    return 0


def cmd_report(args, config) -> int:
    sys.stdout.write(render_report(parse_report(Path(args.path).read_text(encoding="utf-8"))))
    return 0


def cmd_export_cameras(args, config) -> int:
    export_camera_config(canonical_views(config.views), args.out)
    print(args.out)
    return 0


COMMANDS = {
    "init-config": cmd_init_config, "ingest": cmd_ingest, "synth": cmd_synth, "train-align": cmd_train_align,
    "run": cmd_run, "ablate": cmd_ablate, "render-views": cmd_render_views, "evaluate": cmd_evaluate,
    "report": cmd_report, "export-cameras": cmd_export_cameras,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except FATAL as exc:
        print(f"eeg3d: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
