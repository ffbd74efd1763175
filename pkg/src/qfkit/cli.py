"""Command-line pipeline driver.

Subcommands mirror the processing flow: prep -> build -> calibrate ->
quantize -> compile -> infer / bench / eval. Every run writes its artifacts
plus a run.json provenance record (command, config, seed, version) under
--output-dir; QFKIT_OUTPUT_DIR sets the default. Exit codes: 0 ok, 2 usage,
3 data/validation error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchReport, compare_report, measure_fps
from .compiler import compile_plan, fold_batchnorm, fuse
from .dataset import (
    DEFAULT_HASH_THRESHOLD,
    DEFAULT_MASK_THRESHOLD,
    DatasetManifest,
    ManifestRecord,
    cluster_faces,
    discover_pairs,
    make_mask,
    split_dataset,
)
from .errors import DataError, QfkError
from .graph import Graph, load_model, save_model
from .quantizer import (
    NodeStats,
    QuantizedGraph,
    collect_calibration,
    compute_all_qparams,
    quantize_graph,
)
from .runtime import (
    PreprocessConfig,
    evaluate,
    load_image,
    load_labels,
    preprocess,
    resize_to_f32,
    run_plan_int8,
    save_mask_npy,
)
from .uynet import UYNetConfig, build_uynet

IMAGE_EXTENSIONS = (".png", ".ppm")


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_run_record(args, out: Path) -> None:
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func" and v is not None
    }
    _write_json(out / "run.json", {"version": __version__, "config": config})


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"image directory {directory} does not exist")
    paths = [p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS]
    if not paths:
        raise DataError(f"no PNG/PPM images under {directory}")
    return paths


def _load_int8_model(path) -> QuantizedGraph:
    model = load_model(path)
    if not isinstance(model, QuantizedGraph):
        raise DataError(f"{path} holds an fp32 model; run `qfkit quantize` first")
    return model


def _load_f32_model(path) -> Graph:
    model = load_model(path)
    if not isinstance(model, Graph):
        raise DataError(f"{path} holds an int8 model; expected fp32")
    return model


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_build(args) -> int:
    out = _out_dir(args)
    cfg = UYNetConfig(
        input_size=(args.input_size[0], args.input_size[1]),
        encoder_depth=args.encoder_depth,
        base_channels=args.base_channels,
    )
    g = build_uynet(cfg, seed=args.seed, include_classifier=not args.seg_only)
    path = out / args.name
    save_model(g, path)
    _write_run_record(args, out)
    print(f"wrote {path} ({len(g.nodes)} nodes)")
    return 0


def cmd_prep(args) -> int:
    out = _out_dir(args)
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    pairs = discover_pairs(args.real_dir, args.fake_dir)

    frames = {}
    mask_paths = {}
    for pair in pairs:
        real = load_image(pair.real_path)
        frames[pair.frame_id] = real
        if pair.is_fake:
            fake = load_image(pair.fake_path)
            mask = make_mask(real, fake, args.mask_threshold)
        else:
            mask = np.zeros(real.shape[:2], dtype=np.uint8)
        if args.mask_format == "npy":
            mask_path = masks_dir / f"{pair.frame_id}.npy"
            save_mask_npy(mask.astype(np.float32), mask_path)
        else:
            from PIL import Image

            mask_path = masks_dir / f"{pair.frame_id}.png"
            Image.fromarray(mask * 255).save(mask_path)
        mask_paths[pair.frame_id] = str(mask_path.relative_to(out))

    clusters = cluster_faces(frames, threshold=args.hash_threshold)
    manifest = split_dataset(clusters, ratios=tuple(args.ratios), seed=args.seed)
    manifest.records = [
        ManifestRecord(
            frame_id=r.frame_id,
            cluster_id=r.cluster_id,
            split=r.split,
            mask_path=mask_paths.get(r.frame_id),
        )
        for r in manifest.records
    ]
    manifest.save(out / "manifest.json")
    _write_run_record(args, out)
    counts = {s: sum(1 for r in manifest.records if r.split == s) for s in ("train", "val", "test")}
    print(f"wrote {out / 'manifest.json'}: {len(manifest.records)} frames, splits {counts}")
    return 0


def _load_calibration_images(model: Graph, directory: Path):
    inp = model.input_node.kind
    images = []
    for path in _list_images(directory):
        arr = load_image(path)
        images.append(resize_to_f32(arr, (inp.height, inp.width)))
    return images


def cmd_calibrate(args) -> int:
    out = _out_dir(args)
    model = fold_batchnorm(_load_f32_model(args.model))
    images = _load_calibration_images(model, Path(args.calib_dir))
    stats = collect_calibration(model, images, force=args.force, batch_size=args.batch)
    path = out / "calibration.json"
    _write_json(path, {str(k): v.to_dict() for k, v in stats.items()})
    _write_run_record(args, out)
    print(f"wrote {path} ({len(images)} images, {len(stats)} nodes)")
    return 0


def cmd_quantize(args) -> int:
    out = _out_dir(args)
    model = fold_batchnorm(_load_f32_model(args.model))
    with open(args.stats, "r", encoding="utf-8") as f:
        stats = {int(k): NodeStats.from_dict(v) for k, v in json.load(f).items()}
    qparams = compute_all_qparams(stats, strategy=args.strategy)
    qg = quantize_graph(model, qparams)
    path = out / args.name
    save_model(qg, path)
    _write_run_record(args, out)
    print(f"wrote {path}")
    return 0


def cmd_compile(args) -> int:
    out = _out_dir(args)
    qg = _load_int8_model(args.model)
    plan = compile_plan(fuse(qg), batch_size=args.batch)
    path = out / "plan.json"
    _write_json(path, plan.to_json_dict())
    _write_run_record(args, out)
    print(
        f"wrote {path}: {len(plan.instructions)} instructions, "
        f"{plan.num_stages} stages, peak {plan.peak_memory} bytes"
    )
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    qg = _load_int8_model(args.model)
    plan = compile_plan(fuse(qg), batch_size=args.batch)
    cfg = PreprocessConfig(
        input_qp=plan.input_qp,
        target_size=(plan.input_shape[1], plan.input_shape[2]),
    )
    paths = _list_images(Path(args.input_dir))

    results = []
    t0 = time.perf_counter()
    for start in range(0, len(paths), args.batch):
        chunk = paths[start : start + args.batch]
        tensors = [preprocess(load_image(p), cfg) for p in chunk]
        results.extend(
            run_plan_int8(plan, tensors, frame_ids=[p.stem for p in chunk],
                          parallel=args.parallel)
        )
    elapsed = time.perf_counter() - t0

    for r in results:
        save_mask_npy(r.mask.data, masks_dir / f"{r.frame_id}.npy")
    predictions = {r.frame_id: {"label": r.label, "score": r.score} for r in results}
    _write_json(out / "predictions.json", predictions)

    report = {"total": len(results), "fps": len(results) / elapsed if elapsed > 0 else 0.0}
    if args.labels:
        ev = evaluate(results, args.labels)
        report.update(ev.to_dict())
    _write_json(out / "report.json", report)
    _write_run_record(args, out)
    if "accuracy" in report:
        print(f"{report['total']} frames, accuracy {report['accuracy']:.6f}, {report['fps']:.1f} fps")
    else:
        print(f"{report['total']} frames, {report['fps']:.1f} fps")
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    if args.compare:
        reports = []
        for path in args.compare:
            with open(path, "r", encoding="utf-8") as f:
                reports.append(BenchReport.from_dict(json.load(f)))
        comparison = compare_report(reports)
        (out / "comparison.txt").write_text(comparison.to_text() + "\n", encoding="utf-8")
        _write_json(out / "comparison.json", comparison.to_json_dict())
        (out / "comparison.csv").write_text(comparison.to_csv(), encoding="utf-8")
        _write_run_record(args, out)
        print(comparison.to_text())
        return 0

    if not args.model:
        raise DataError("bench needs --model (or --compare)")
    model = load_model(args.model)
    if isinstance(model, QuantizedGraph):
        target = compile_plan(fuse(model), batch_size=args.batch)
    else:
        target = model
    report = measure_fps(
        target,
        images=args.images,
        batch=args.batch,
        warmup=args.warmup,
        node_name=args.node_name,
        model_variant=args.variant,
        seed=args.seed,
    )
    path = out / f"bench-{report.node_name}-{report.model_variant}-{report.precision}.json"
    _write_json(path, report.to_dict())
    _write_run_record(args, out)
    print(f"{report.precision} {report.model_variant}: {report.fps:.2f} fps "
          f"({report.images} images in {report.wall_seconds:.3f}s)")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    with open(args.predictions, "r", encoding="utf-8") as f:
        predictions = json.load(f)
    if not predictions:
        raise DataError("no results")
    labels = load_labels(args.labels)
    total = correct = 0
    for frame_id, pred in sorted(predictions.items()):
        if frame_id not in labels:
            raise DataError(f"no label for frame {frame_id!r}")
        total += 1
        correct += int(int(pred["label"]) == labels[frame_id])
    report = {
        "total": total,
        "correct": correct,
        "wrong": total - correct,
        "accuracy": correct / total,
    }
    _write_json(out / "eval.json", report)
    _write_run_record(args, out)
    print(f"accuracy {report['accuracy']:.6f} ({correct}/{total})")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfkit",
        description="INT8 quantization, compilation, and batched inference pipeline",
    )
    parser.add_argument("--version", action="version", version=f"qfkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get("QFKIT_OUTPUT_DIR", "qfkit-out")

    def add_common(p):
        p.add_argument("--output-dir", default=default_out,
                       help="directory for artifacts (default: $QFKIT_OUTPUT_DIR or ./qfkit-out)")
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")

    p = sub.add_parser("build", help="construct a randomly initialized model container")
    add_common(p)
    p.add_argument("--name", default="model.qfk")
    p.add_argument("--input-size", type=int, nargs=2, default=[224, 224], metavar=("H", "W"))
    p.add_argument("--encoder-depth", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--seg-only", action="store_true",
                   help="omit the classification branch (benchmark variant)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("prep", help="build masks and a leakage-free split manifest")
    add_common(p)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--fake-dir")
    p.add_argument("--mask-threshold", type=int, default=DEFAULT_MASK_THRESHOLD)
    p.add_argument("--hash-threshold", type=float, default=DEFAULT_HASH_THRESHOLD)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--mask-format", choices=("npy", "png"), default="npy")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("calibrate", help="collect activation statistics on a calibration set")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calib-dir", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--force", action="store_true",
                   help="allow calibration sets outside the 100-1000 image range")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="emit the INT8 model from calibration statistics")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--strategy", choices=("minmax", "percentile"), default="minmax")
    p.add_argument("--name", default="model-int8.qfk")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("compile", help="fuse, schedule, and dump the executable plan")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("infer", help="run batched INT8 inference over a directory of frames")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--labels")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--parallel", action="store_true",
                   help="run same-stage instructions on a thread pool")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="measure FPS, or compare saved reports with --compare")
    add_common(p)
    p.add_argument("--model")
    p.add_argument("--images", type=int, default=80)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--node-name", default="local")
    p.add_argument("--variant", choices=("full", "seg-only"), default="full")
    p.add_argument("--compare", nargs="+", metavar="REPORT_JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score saved predictions against a labels file")
    add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QfkError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"qfkit: error: {msg}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - single-line internal error contract
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        print(f"qfkit: internal error: {msg}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
