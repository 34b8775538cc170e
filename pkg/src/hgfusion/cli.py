"""
``hgfusion`` command line: synth, train, eval, predict, compare.

Exit codes: 0 success, 1 usage/config error, 2 data/IO error, 3 numerical abort.
Standard output tables are tab-separated.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AffineParams,
    PersonAnnotation,
    PoseDataset,
    load_annotations,
    load_image,
    make_activity_tensor,
    prepare_sample,
    split_dataset,
)
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    IngestionError,
    NumericalError,
    UsageError,
    ValidationError,
)
from .evaluation import (
    compare_reports,
    decode_heatmaps,
    evaluate,
    format_table_row,
    parse_thresholds,
    read_report,
    table_header,
    write_diff,
    write_report,
)
from .model import FORMS, INIT_SCHEMES, VARIANTS, ModelConfig, build_model
from .mpii import ACTIVITY_NAMES, JOINT_NAMES, NUM_JOINTS, SKELETON_EDGES
from .synthetic import KINDS, joint_colors, make_synthetic_dataset
from .tensor import Tensor, no_grad
from .training import BEST_CHECKPOINT, TrainConfig, train

log = logging.getLogger("hgfusion")

MANIFEST = "manifest.json"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    path = make_synthetic_dataset(args.kind, args.n, args.seed, args.out, image_side=args.image_side)
    load_annotations(path)
    print(f"wrote {args.n} samples to {path}")
    return EXIT_OK


# ------------------------------------------------------------------ train

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dataset_checksums(annotation_path) -> dict:
    """sha256 of the annotation file and of every referenced image."""
    annotation_path = Path(annotation_path)
    anns = load_annotations(annotation_path)
    images = {}
    for ann in anns:
        if ann.image_path not in images:
            p = annotation_path.parent / ann.image_path
            try:
                images[ann.image_path] = _sha256(p)
            except OSError as exc:
                raise IngestionError(f"cannot read image {p}: {exc}") from exc
    return {"annotations": _sha256(annotation_path), "images": dict(sorted(images.items()))}


TRAIN_KEYS = ("data", "variant", "form", "stacks", "channels", "depth", "input_side", "lr", "batch",
              "epochs", "max_steps", "eval_every", "seed", "augment", "fusion_post", "init", "zero_head", "split", "out")


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            values = tomllib.load(f)
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = set(values) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    form = args.form or "none"
    model_cfg = ModelConfig(
        num_stacks=args.stacks,
        channels=args.channels,
        hourglass_depth=args.depth,
        variant=args.variant,
        form=form,
        input_side=args.input_side,
        fusion_post=args.fusion_post,
        init=args.init,
        zero_head=args.zero_head,
    )
    train_cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.epochs,
        seed=args.seed,
        eval_every=args.eval_every,
        augment=args.augment,
        max_steps=args.max_steps,
    )
    return model_cfg, train_cfg


def _replay(args) -> None:
    """Overwrite run settings from a manifest (data path, configs, seed, split)."""
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        m, t = manifest["model_config"], manifest["train_config"]
        args.data = manifest["data"]["path"]
        args.split = manifest["split"]
    except (OSError, ValueError, KeyError) as exc:
        raise IngestionError(f"cannot replay manifest {args.manifest}: {exc!r}") from exc
    args.variant, args.form = m["variant"], m["form"]
    args.stacks, args.channels, args.depth = m["num_stacks"], m["channels"], m["hourglass_depth"]
    args.input_side, args.fusion_post = m["input_side"], m["fusion_post"]
    args.init, args.zero_head = m.get("init", "he"), m.get("zero_head", False)
    args.lr, args.batch, args.epochs = t["learning_rate"], t["batch_size"], t["max_epochs"]
    args.seed, args.eval_every, args.augment, args.max_steps = t["seed"], t["eval_every"], t["augment"], t["max_steps"]
    expected = manifest["data"]["checksums"]
    if dataset_checksums(args.data) != expected:
        raise IngestionError(f"dataset {args.data} does not match the checksums recorded in {args.manifest}")


def cmd_train(args) -> int:
    if args.manifest:
        _replay(args)
    if args.data is None:
        raise UsageError("train: --data is required (or --manifest)")
    if args.variant == "baseline" and args.form not in (None, "none"):
        raise UsageError(f"variant baseline takes no fusion form, got --form {args.form}")
    if args.variant != "baseline" and args.form in (None, "none"):
        raise UsageError(f"variant {args.variant} needs --form A, B or C")
    model_cfg, train_cfg = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data_path = Path(args.data)
    checksums = dataset_checksums(data_path)
    full = PoseDataset.from_file(data_path, output_side=model_cfg.input_side)
    if args.split == "all":
        train_set, val_set = full, None
    else:
        tr, va, _ = split_dataset(full.annotations, train_cfg.seed)
        train_set, val_set = full.subset(tr), full.subset(va)

    model = build_model(model_cfg, seed=train_cfg.seed)
    state = train(model, train_set, val_set, train_cfg, out_dir=out)

    manifest = {
        "hgfusion_version": __version__,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
        "split": args.split,
        "data": {"path": str(data_path), "checksums": checksums},
        "artifacts": {"checkpoint": BEST_CHECKPOINT, "loss_history": "loss_history.csv"},
        "result": {"steps": state.step, "best_val_loss": state.best_val_loss
                   if np.isfinite(state.best_val_loss) else None},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    last = state.losses("train")[-1]
    print(f"trained {state.step} steps; final train loss {last:.6g}; checkpoint {out / BEST_CHECKPOINT}")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _require_activities(path: Path) -> None:
    """Contextual models need an activity id on every record."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError:
            continue  # reported with location by load_annotations
        if isinstance(record, dict) and record.get("activity_id") is None:
            raise UsageError(f"{path}:{lineno}: contextual checkpoint but the record has no activity_id")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data_path = Path(args.data)
    if model.config.variant == "contextual":
        _require_activities(data_path)
    thresholds = parse_thresholds(args.thresholds)
    dataset = PoseDataset.from_file(data_path, output_side=model.config.input_side)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split_dataset(dataset.annotations, args.seed)))
        dataset = dataset.subset(parts[args.split])
    report = evaluate(model, dataset, thresholds)
    write_report(report, args.out, svg=args.svg)
    print("\t".join(table_header(report.threshold)))
    print(format_table_row(args.label or Path(args.checkpoint).stem, report.table_row()))
    return EXIT_OK


# ------------------------------------------------------------------ predict

def _activity_id(value: str) -> int:
    if value.isdigit():
        return int(value)
    if value in ACTIVITY_NAMES:
        return ACTIVITY_NAMES.index(value)
    raise UsageError(f"unknown activity {value!r}; give an id 0-{len(ACTIVITY_NAMES) - 1} or a category name")


def draw_overlay(image: np.ndarray, coords: np.ndarray, path) -> None:
    from PIL import Image, ImageDraw

    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(pixels, mode="RGB")
    draw = ImageDraw.Draw(im)
    r = max(2, round(max(im.size) / 128))
    for a, b in SKELETON_EDGES:
        draw.line([tuple(coords[a]), tuple(coords[b])], fill=(255, 255, 255), width=max(1, r // 2))
    for (x, y), c in zip(coords, joint_colors()):
        draw.ellipse([x - r, y - r, x + r, y + r], fill=tuple(int(v * 255) for v in c), outline=(0, 0, 0))
    im.save(path, format="PNG")


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    image = load_image(args.image)
    h, w = image.shape[:2]
    center = tuple(args.center) if args.center else (w / 2.0, h / 2.0)
    scale = args.scale if args.scale is not None else max(h, w) / 200.0
    activity = None
    if cfg.variant == "contextual":
        if args.activity is None:
            raise UsageError("this checkpoint is contextual; --activity is required")
        activity = _activity_id(args.activity)
    elif args.activity is not None:
        log.warning("checkpoint variant %s does not use activity; ignoring --activity", cfg.variant)

    ann = PersonAnnotation(
        image_path=str(args.image),
        center=center,
        scale=scale,
        joints=np.zeros((NUM_JOINTS, 2)),
        visible=np.zeros(NUM_JOINTS, dtype=bool),
        activity_id=activity if activity is not None else 0,
        head_length=1.0,
    ).validate()
    sample = prepare_sample(image, ann, AffineParams(output_side=cfg.input_side), cfg.input_side)
    model.eval()
    with no_grad():
        act = Tensor(make_activity_tensor(activity, cfg.feature_side)) if activity is not None else None
        heatmaps = model(Tensor(sample.image), act)[-1]
    stride = cfg.input_side / cfg.feature_side
    (pose,) = decode_heatmaps(heatmaps, [sample.inverse_affine], stride)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "image": str(args.image),
        "center": list(center),
        "scale": scale,
        "activity_id": activity,
        "keypoints": [
            {"joint": name, "x": float(x), "y": float(y), "confidence": float(c), "low_confidence": bool(c <= 0)}
            for name, (x, y), c in zip(JOINT_NAMES, pose.coords, pose.confidence)
        ],
    }
    (out / "keypoints.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    draw_overlay(image, pose.coords, out / "overlay.png")
    print(f"wrote {out / 'keypoints.json'} and {out / 'overlay.png'}")
    return EXIT_OK


# ------------------------------------------------------------------ compare

def cmd_compare(args) -> int:
    a, b = read_report(args.report_a), read_report(args.report_b)
    diff = compare_reports(a, b)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_diff(diff, out)
    print("\t".join(table_header(a.threshold)))
    print(format_table_row("b - a", [diff.categories[c] for c in diff.categories] + [diff.total]))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgfusion", description="Stacked hourglass pose estimation with activity fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a seeded synthetic dataset")
    s.add_argument("--kind", choices=KINDS, default="plain")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-side", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write checkpoint, manifest and loss history")
    t.add_argument("--config", help="TOML file of train options; flags override it")
    t.add_argument("--manifest", help="replay the run recorded in a manifest.json")
    t.add_argument("--data", help="annotations.jsonl")
    t.add_argument("--variant", choices=VARIANTS, default="baseline")
    t.add_argument("--form", choices=FORMS, default=None)
    t.add_argument("--stacks", type=int, default=8)
    t.add_argument("--channels", type=int, default=256)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--input-side", type=int, default=256)
    t.add_argument("--no-fusion-post", dest="fusion_post", action="store_false")
    t.add_argument("--init", choices=INIT_SCHEMES, default="he")
    t.add_argument("--zero-head", action="store_true", help="start every heatmap head at zero")
    t.add_argument("--lr", type=float, default=2.5e-4)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-augment", dest="augment", action="store_false")
    t.add_argument("--split", choices=("80/10/10", "all"), default="80/10/10",
                   help="'all' trains on every record with no validation set")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCKh report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--thresholds", default="0.5", help="'0.5', '0.3,0.5' or 'start:step:stop'")
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--seed", type=int, default=0, help="split seed (match training)")
    e.add_argument("--label", default=None, help="row label for the printed table")
    e.add_argument("--svg", action="store_true")
    e.add_argument("--out", default="report")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="keypoints and skeleton overlay for one image")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--center", type=float, nargs=2, metavar=("X", "Y"))
    q.add_argument("--scale", type=float)
    q.add_argument("--activity", help="activity id or category name")
    q.add_argument("--out", default="prediction")
    q.set_defaults(func=cmd_predict)

    c = sub.add_parser("compare", help="cell-wise b - a diff of two reports")
    c.add_argument("--report-a", required=True)
    c.add_argument("--report-b", required=True)
    c.add_argument("--out", default="diff.csv")
    c.set_defaults(func=cmd_compare)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.config:
        # Re-parse with the file's values as defaults so explicit flags win.
        train_parser = parser._subparsers._group_actions[0].choices["train"]
        train_parser.set_defaults(**_load_toml(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, FormatError, ValidationError, DegenerateInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
