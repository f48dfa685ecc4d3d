"""Command-line entry points.

Subcommands cover the full pipeline: ``synth-data`` writes a synthetic
corpus, ``train-teacher`` / ``train-student`` produce checkpoints and metrics
CSVs, ``evaluate`` writes Dice/PR reports, ``infer`` segments a single image
with an uncertainty overlay, and ``sweep-alpha`` trains one student per
confidence-sharpness value. Every command records its fully resolved run
configuration next to its outputs; flags override config-file values which
override defaults. Any error exits nonzero.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoints import load_checkpoint
from .config import RunConfig, resolve_run_config
from .data import (
    generate_synthetic_dataset,
    load_dataset_from_manifest,
    load_image_png,
    save_dataset_to_dir,
    save_labels_png,
    split_train_val,
)
from .errors import ConfigurationError, SemisegError, ShapeError
from .evaluation import (
    confident_subset_report,
    evaluate_model,
    precision_recall_curve,
    render_overlays,
    write_dice_report,
    write_pr_curve,
)
from .inference import entropy_map, mc_mean_prediction
from .model import predict_scores
from .training import train_student, train_teacher


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="PATH", help="JSON run config file")
    parser.add_argument("--seed", type=int, help="master seed for the whole run")
    parser.add_argument("--alpha", type=float, help="confidence sharpness (0 trusts all soft labels)")
    parser.add_argument("--num-passes", type=int, help="stochastic passes per soft label")
    parser.add_argument("--out", metavar="DIR", help="output directory")


def _resolve(args, extra: dict | None = None) -> RunConfig:
    overrides: dict = {
        "seed": args.seed,
        "output_dir": args.out,
        "mc": {"alpha": args.alpha, "num_passes": getattr(args, "num_passes", None)},
        "loss": {"alpha": args.alpha},
    }
    if getattr(args, "max_iterations", None) is not None:
        overrides["train"] = {"max_iterations": args.max_iterations}
    if extra:
        for key, value in extra.items():
            if isinstance(value, dict):
                overrides.setdefault(key, {}).update(value)
            else:
                overrides[key] = value
    return resolve_run_config(args.config, overrides)


def _load_data(cfg: RunConfig):
    if not cfg.data_manifest:
        raise ConfigurationError("no dataset given (use --data or data_manifest in the config)")
    return load_dataset_from_manifest(cfg.data_manifest)


def _check_image_compat(model, image, source):
    d = model.config.spatial_divisor
    h, w = image.shape[:2]
    if h % d or w % d:
        raise ShapeError(
            f"{source}: size {h}x{w} incompatible with checkpoint (needs divisibility by {d})"
        )


def cmd_synth_data(args) -> int:
    cfg = _resolve(args, extra={
        "n_labeled": args.n_labeled, "n_unlabeled": args.n_unlabeled, "n_test": args.n_test,
        "synth": {"num_classes": args.num_classes},
    })
    out_dir = Path(cfg.output_dir)
    cfg.write(out_dir)
    labeled, unlabeled, test = generate_synthetic_dataset(
        cfg.synth, cfg.n_labeled, cfg.n_unlabeled, cfg.n_test
    )
    manifest = save_dataset_to_dir(out_dir, cfg.synth, labeled, unlabeled, test)
    print(f"wrote {len(labeled)} labeled / {len(unlabeled)} unlabeled / {len(test)} test samples")
    print(f"manifest: {manifest}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args, extra={"data_manifest": args.data})
    labeled, _, _, num_classes = _load_data(cfg)
    model_cfg = cfg.model_config(num_classes)
    out_dir = Path(cfg.output_dir) / "teacher"
    cfg.write(out_dir)
    result = train_teacher(
        labeled, model_cfg, cfg.train, loss_cfg=cfg.loss, aug_cfg=cfg.augment,
        out_dir=out_dir, resume_from=args.resume,
    )
    print(f"best validation loss {result.state.best_validation_loss:.5f} "
          f"at iteration {result.state.best_iteration}")
    print(f"checkpoint: {result.best_checkpoint}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _resolve(args, extra={"data_manifest": args.data, "teacher_checkpoint": args.teacher})
    if not cfg.teacher_checkpoint:
        raise ConfigurationError("train-student needs --teacher CHECKPOINT")
    labeled, unlabeled, _, num_classes = _load_data(cfg)
    model_cfg = cfg.model_config(num_classes)
    teacher = load_checkpoint(cfg.teacher_checkpoint, expected_config=model_cfg)
    out_dir = Path(cfg.output_dir) / "student"
    cfg.write(out_dir)
    result = train_student(
        teacher, labeled, unlabeled, model_cfg, cfg.train, cfg.mc,
        loss_cfg=cfg.loss, aug_cfg=cfg.augment, out_dir=out_dir, resume_from=args.resume,
    )
    print(f"best validation loss {result.state.best_validation_loss:.5f} "
          f"at iteration {result.state.best_iteration}")
    print(f"checkpoint: {result.best_checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, extra={"data_manifest": args.data})
    _, _, test, num_classes = _load_data(cfg)
    if len(test) == 0:
        raise ConfigurationError("manifest has no test split to evaluate")
    model = load_checkpoint(args.checkpoint)
    if model.config.num_classes != num_classes:
        raise ConfigurationError(
            f"checkpoint has {model.config.num_classes} classes but dataset has {num_classes}"
        )
    for sample in test:
        _check_image_compat(model, sample.image, sample.id)
    out_dir = Path(cfg.output_dir)
    cfg.write(out_dir)

    report = evaluate_model(model, test)
    write_dice_report(report, out_dir / "dice_report.csv")
    print(f"mean foreground Dice: {report.mean_dice:.4f} over {report.num_images} images")

    if args.confident:
        conf = confident_subset_report(model, test, mc=cfg.mc, threshold=args.threshold)
        write_dice_report(conf, out_dir / "dice_report_confident.csv")
        print(f"confident-subset Dice (w > {args.threshold}, {conf.omega_source}): "
              f"{conf.mean_dice:.4f}, retained fraction {conf.confident_fraction:.3f}")

    pr_class = args.pr_class
    if pr_class is not None:
        if not 0 <= pr_class < num_classes:
            raise ConfigurationError(f"--pr-class must be in [0, {num_classes - 1}]")
        scores = [predict_scores(model, s.image)[:, :, pr_class].ravel() for s in test]
        gts = [(s.label_map == pr_class).ravel() for s in test]
        curve = precision_recall_curve(np.concatenate(scores), np.concatenate(gts))
        write_pr_curve(curve, out_dir / f"pr_curve_class{pr_class}.csv",
                       out_dir / f"pr_curve_class{pr_class}.png",
                       title=f"class {pr_class} precision-recall")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args, extra={})
    model = load_checkpoint(args.checkpoint)
    out_dir = Path(cfg.output_dir)
    image_paths = [Path(p) for p in args.image]
    images = []
    for path in image_paths:
        image = load_image_png(path)
        _check_image_compat(model, image, str(path))
        images.append(image)
    cfg.write(out_dir)
    for path, image in zip(image_paths, images):
        scores = predict_scores(model, image)
        pred = scores.argmax(axis=-1)
        mean = mc_mean_prediction(model, image, cfg.mc)
        u = entropy_map(mean)
        stem = path.stem
        save_labels_png(pred, out_dir / f"{stem}_labels.png")
        render_overlays(image, pred, pred, u, out_dir, stem=stem)
        print(f"{path}: wrote label map and overlays under {out_dir}")
    return 0


def cmd_sweep_alpha(args) -> int:
    alphas = [float(a) for a in args.alphas.split(",") if a != ""]
    if not alphas:
        raise ConfigurationError("--alphas must list at least one value")
    cfg = _resolve(args, extra={"data_manifest": args.data, "teacher_checkpoint": args.teacher})
    if not cfg.teacher_checkpoint:
        raise ConfigurationError("sweep-alpha needs --teacher CHECKPOINT")
    labeled, unlabeled, _, num_classes = _load_data(cfg)
    model_cfg = cfg.model_config(num_classes)
    teacher = load_checkpoint(cfg.teacher_checkpoint, expected_config=model_cfg)
    out_dir = Path(cfg.output_dir)
    cfg.write(out_dir)
    _, val_set = split_train_val(labeled, cfg.train.val_fraction, cfg.train.seed)

    rows = []
    for alpha in alphas:
        from dataclasses import replace

        mc = replace(cfg.mc, alpha=alpha)
        loss = replace(cfg.loss, alpha=alpha)
        result = train_student(
            teacher, labeled, unlabeled, model_cfg, cfg.train, mc, loss_cfg=loss,
            aug_cfg=cfg.augment, out_dir=out_dir / f"student_alpha_{alpha:g}",
        )
        report = evaluate_model(result.model, val_set)
        rows.append({"alpha": alpha, "validation_dice": report.mean_dice,
                     "seed": cfg.train.seed, "iterations": result.state.iteration})
        print(f"alpha={alpha:g}: validation Dice {report.mean_dice:.4f}")

    csv_path = out_dir / "alpha_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["alpha", "validation_dice", "seed", "iterations"])
        writer.writeheader()
        writer.writerows(rows)
    best = max(rows, key=lambda r: (r["validation_dice"], -r["alpha"]))
    print(f"best alpha: {best['alpha']:g} (validation Dice {best['validation_dice']:.4f})")
    (out_dir / "alpha_sweep_best.json").write_text(json.dumps(best, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semiseg",
        description="Uncertainty-guided student-teacher semi-supervised segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic layered-image corpus")
    _add_common(p)
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-teacher", help="train the supervised teacher")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--resume", metavar="CKPT", help="continue from a last checkpoint")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the student from teacher soft labels")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--teacher", required=True, metavar="CKPT")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--resume", metavar="CKPT")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="Dice/PR reports for a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--confident", action="store_true", help="also report Dice on confident pixels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pr-class", type=int, default=1, help="class for the PR curve (-1 to skip)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="segment images and write uncertainty overlays")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--image", required=True, nargs="+", metavar="PNG")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep-alpha", help="train one student per alpha and compare")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--teacher", required=True, metavar="CKPT")
    p.add_argument("--alphas", required=True, help="comma-separated alpha values")
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_sweep_alpha)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "pr_class", None) == -1:
        args.pr_class = None
    try:
        return args.func(args)
    except SemisegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
