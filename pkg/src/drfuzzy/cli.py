"""``drfuzzy`` command line: train, evaluate, explain, preview, synth,
init-config and verify.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, toy_config
from .dataset import DatasetError, class_distribution, synthesize_fundus
from .evaluation import render_report, report_csv
from .explain import grad_cam, membership_report, upsample_overlay
from .imaging import ImageFormatError, augment, encode_ppm, preprocess, preprocess_stages, read_image, sample_stream
from .model import CheckpointError, ConfigMismatchError, load_checkpoint
from .training import TrainHistory, TrainingError
from .verify import gradient_suite, metric_suite
from .workflow import build_index, evaluate_model, preprocess_from_metadata, run_training, to_arrays

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs", "must be >= 0")
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "verify_grads", False):
        cfg.train = replace(cfg.train, verify_grads=True)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_init_config(args) -> int:
    cfg = toy_config() if args.toy else RunConfig()
    text = cfg.to_ini()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.out_dir()

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  val_loss {rec.val_loss:.4f}  "
              f"train_acc {rec.train_acc:.3f}  val_acc {rec.val_acc:.3f}  lr {rec.lr:.2e}", flush=True)

    outcome = run_training(cfg, out, progress=progress)
    dist = class_distribution(outcome.index.subset("train"))
    (out / "class_distribution.txt").write_text(dist.to_text(), encoding="utf-8")
    if args.emit_svg:
        (out / "history.svg").write_text(history_svg(outcome.result.history), encoding="utf-8")
    print(f"best epoch {outcome.result.best_epoch}; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    n_data = cfg.merge_map().n_classes
    if model.config.n_classes != n_data:
        raise ConfigMismatchError(
            f"checkpoint has {model.config.n_classes} classes but data.class_merge gives {n_data}")
    pc = preprocess_from_metadata(meta) if meta.get("preprocess") else cfg.preprocess
    index = build_index(cfg).subset(args.split)
    if len(index) == 0:
        raise DatasetError(f"the {args.split} split is empty")
    images, labels = to_arrays(index, pc)
    ev = evaluate_model(model, images, labels)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    text = render_report(ev.report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(report_csv(ev.report), encoding="utf-8")
    (out / "confusion.csv").write_text(ev.confusion.to_csv(), encoding="utf-8")
    if ev.roc is not None:
        (out / "roc_auc.csv").write_text(ev.roc.to_csv(ev.report.names), encoding="utf-8")
    sys.stdout.write(text)
    if ev.roc is not None:
        print(f"macro ROC-AUC {ev.roc.macro_auc:.4f}")
    return EXIT_OK


def _target_class(value: str, n_classes: int) -> int | None:
    if value == "predicted":
        return None
    try:
        k = int(value)
    except ValueError:
        raise ConfigError("--class", f"expected 'predicted' or a class id, got {value!r}") from None
    if not 0 <= k < n_classes:
        raise ConfigError("--class", f"class id must lie in [0, {n_classes})")
    return k


def cmd_explain(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    target = _target_class(args.target_class, model.config.n_classes)
    if args.layer not in model.layer_ids:
        raise ConfigError("--layer", f"unknown layer {args.layer!r}; choose one of {', '.join(model.layer_ids)}")
    pc = preprocess_from_metadata(meta)
    if pc.size != model.config.backbone.input_size[0]:
        pc = replace(pc, size=model.config.backbone.input_size[0])
    img = preprocess(read_image(args.image), pc)
    x = img.to_float(model.dtype).pixels.transpose(2, 0, 1)
    report = membership_report(model, x)
    hm = grad_cam(model, x, target, layer=args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    overlay_path = out / f"{stem}_gradcam_c{hm.target_class}.ppm"
    overlay_path.write_bytes(encode_ppm(upsample_overlay(hm, img, alpha=0.5)))
    (out / f"{stem}_heatmap_c{hm.target_class}.csv").write_text(hm.to_csv(), encoding="utf-8")
    (out / f"{stem}_membership.json").write_text(report.to_text(), encoding="utf-8")
    names = report.class_names or tuple(str(i) for i in range(len(report.probabilities)))
    print(f"predicted {names[report.predicted]} (class {report.predicted}); "
          f"probabilities [{', '.join(f'{p:.2f}' for p in report.probabilities)}]; "
          f"explained class {hm.target_class} at layer {hm.layer}")
    return EXIT_OK


def cmd_preview(args) -> int:
    cfg = _load_config(args)
    img = read_image(args.image)
    stages = preprocess_stages(img, cfg.preprocess)
    last = stages[-1][1]
    drawn = augment(last, cfg.augment, sample_stream(cfg.train.seed, 0))
    stages.append(("augment", drawn))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, stage) in enumerate(stages, start=1):
        path = out / f"{i}_{name}.ppm"
        path.write_bytes(encode_ppm(stage.to_uint8()))
        print(path)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out}: {exc}") from None
    index = synthesize_fundus(cfg.synthetic_spec())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id_code", "diagnosis"])
    for s in index:
        (out / f"{s.id_code}.ppm").write_bytes(encode_ppm(s.load()))
        writer.writerow([s.id_code, s.grade])
    (out / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {len(index)} images and labels.csv to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = gradient_suite(seed=args.seed or 0) + metric_suite(seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# SVG curves
# ---------------------------------------------------------------------------

def history_svg(history: TrainHistory, width: int = 640, height: int = 300) -> str:
    """Two side-by-side panels (loss, accuracy) with train and validation
    polylines."""
    panels = (("loss", ("train_loss", "val_loss")), ("accuracy", ("train_acc", "val_acc")))
    colours = ("#1f77b4", "#d62728")
    pw, ph, pad = width / 2, height, 36
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">', '<rect width="100%" height="100%" fill="white"/>']
    epochs = history.column("epoch")
    for p, (title, cols) in enumerate(panels):
        x0 = p * pw
        series = [history.column(c) for c in cols]
        lo = min((s.min() for s in series if s.size), default=0.0)
        hi = max((s.max() for s in series if s.size), default=1.0)
        if hi <= lo:
            hi = lo + 1.0
        e_hi = max(float(epochs.max()) if epochs.size else 1.0, 2.0)
        parts.append(f'<text x="{x0 + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>')
        parts.append(f'<rect x="{x0 + pad:.1f}" y="{pad}" width="{pw - 2 * pad:.1f}" height="{ph - 2 * pad:.1f}" '
                     'fill="none" stroke="#888"/>')
        for s, col, name in zip(series, colours, cols):
            pts = " ".join(
                f"{x0 + pad + (e - 1) / (e_hi - 1) * (pw - 2 * pad):.2f},"
                f"{ph - pad - (v - lo) / (hi - lo) * (ph - 2 * pad):.2f}"
                for e, v in zip(epochs, s)
            )
            parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"><title>{name}</title></polyline>')
        parts.append(f'<text x="{x0 + pad:.1f}" y="{ph - 10}" font-size="10">min {lo:.3g}, max {hi:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drfuzzy", description="Diabetic-retinopathy grading with an attention CNN and a fuzzy head.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug information")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a complete default configuration")
    p.add_argument("--out", help="destination file (default: stdout)")
    p.add_argument("--toy", action="store_true", help="the 600-image 64x64 three-class synthetic run")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train a model and write checkpoints, history and a run manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides train.out_dir)")
    p.add_argument("--verify-grads", action="store_true", help="finite-difference check of the first batch")
    p.add_argument("--emit-svg", action="store_true", help="also render history.svg")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="classification report, confusion matrix and ROC-AUC")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM overlay, heatmap CSV and membership report for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--class", dest="target_class", default="predicted", help="'predicted' or a class id")
    p.add_argument("--layer", default="refined", help="activation to explain (default: refined)")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("preview", help="write every preprocessing stage plus one augmentation draw")
    p.add_argument("image")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="preview")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("synth", help="write a synthetic dataset in APTOS layout")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run the gradient and metric oracle suites")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ImageFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
