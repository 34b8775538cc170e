"""
Heatmap decoding, PCKh and the per-joint / per-activity / sweep reports.

Counting rules: a keypoint is counted iff it is annotated visible, and it is
correct iff its prediction lies within ``t * head_length`` (inclusive) of
the ground truth.  Paired joints (left/right) are pooled by keypoint count
into the ten table categories, which equals the mean of the two sides when
both have the same number of counted keypoints.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PersonAnnotation, batch
from .errors import IngestionError, UsageError
from .mpii import ACTIVITY_NAMES, JOINT_CATEGORIES, JOINT_NAMES, NUM_ACTIVITIES
from .tensor import Tensor, no_grad

PCKH_THRESHOLD = 0.5


class Outcome(IntEnum):
    NOT_COUNTED = -1
    INCORRECT = 0
    CORRECT = 1


@dataclass(eq=False)
class DecodedPose:
    coords: np.ndarray      # (J, 2) original-image pixels
    confidence: np.ndarray  # (J,) peak heatmap value

    @property
    def low_confidence(self) -> np.ndarray:
        return self.confidence <= 0.0


def heatmap_peaks(heatmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax cell per channel plus a quarter-cell shift toward the larger
    neighbour on each axis (only where both neighbours exist).

    Returns heatmap-space ``(x, y)`` of shape (N, J, 2) and peak values.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    n, j, h, w = hm.shape
    flat = hm.reshape(n, j, h * w)
    idx = flat.argmax(axis=2)
    conf = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    ys, xs = np.divmod(idx, w)
    coords = np.stack([xs, ys], axis=-1).astype(np.float64)
    for ni in range(n):
        for ji in range(j):
            y, x = ys[ni, ji], xs[ni, ji]
            m = hm[ni, ji]
            if 0 < x < w - 1:
                coords[ni, ji, 0] += 0.25 * np.sign(m[y, x + 1] - m[y, x - 1])
            if 0 < y < h - 1:
                coords[ni, ji, 1] += 0.25 * np.sign(m[y + 1, x] - m[y - 1, x])
    return coords, conf


def decode_heatmaps(heatmaps, inverse_affines: Sequence[np.ndarray], stride: float = 4.0) -> list[DecodedPose]:
    """Heatmap peaks -> crop pixels (``cell * stride + stride / 2``) -> original image."""
    hm = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    if len(inverse_affines) != hm.shape[0]:
        raise UsageError(f"{hm.shape[0]} heatmap sets but {len(inverse_affines)} inverse affines")
    cells, conf = heatmap_peaks(hm)
    crop = cells * stride + stride / 2.0
    out = []
    for i, inv in enumerate(inverse_affines):
        pts = crop[i] @ inv[:2, :2].T + inv[:2, 2]
        out.append(DecodedPose(coords=pts, confidence=conf[i]))
    return out


def _within_exact(p, g, t: float, head: float) -> bool:
    dx = Fraction(float(p[0])) - Fraction(float(g[0]))
    dy = Fraction(float(p[1])) - Fraction(float(g[1]))
    r = Fraction(t) * Fraction(head)
    return dx * dx + dy * dy <= r * r


def pckh_outcomes(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, head_length: np.ndarray, t: float) -> np.ndarray:
    """Vectorised PCKh over (M, J) keypoints; returns :class:`Outcome` codes."""
    if t <= 0:
        raise UsageError(f"PCKh threshold must be > 0, got {t}")
    head_length = np.asarray(head_length, dtype=np.float64)
    if np.any(head_length <= 0):
        raise UsageError("head_length must be > 0")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    d = pred - gt
    dist = np.hypot(d[..., 0], d[..., 1])
    radius = np.broadcast_to(t * head_length[..., None], dist.shape)
    correct = dist <= radius
    # Rounding can flip near-ties; settle those in exact rational arithmetic.
    for idx in zip(*np.nonzero(np.abs(dist - radius) <= 1e-9 * radius)):
        correct[idx] = _within_exact(pred[idx], gt[idx], t, float(head_length[idx[:-1]]))
    codes = np.where(correct, Outcome.CORRECT, Outcome.INCORRECT).astype(np.int8)
    codes[~np.asarray(visible, dtype=bool)] = Outcome.NOT_COUNTED
    return codes


def pckh(pred: DecodedPose, ann: PersonAnnotation, t: float = PCKH_THRESHOLD) -> np.ndarray:
    return pckh_outcomes(pred.coords[None], ann.joints[None], ann.visible[None], np.array([ann.head_length]), t)[0]


def _pct(correct, counted) -> float:
    return 100.0 * correct / counted if counted else math.nan


@dataclass(eq=False)
class EvalReport:
    per_joint: dict[str, float]
    joint_counts: dict[str, int]
    categories: dict[str, float]
    category_counts: dict[str, int]
    per_activity: dict[int, float]
    activity_counts: dict[int, int]
    total: float
    total_correct: int
    total_counted: int
    sweep: list[tuple[float, float]] = field(default_factory=list)
    threshold: float = PCKH_THRESHOLD

    def activities_by_count(self) -> list[int]:
        return sorted(self.activity_counts, key=lambda a: (-self.activity_counts[a], a))

    def table_row(self) -> list[float]:
        return [self.categories[c] for c in JOINT_CATEGORIES] + [self.total]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalReport):
            return NotImplemented

        def same(a, b):
            if isinstance(a, dict):
                return a.keys() == b.keys() and all(same(a[k], b[k]) for k in a)
            if isinstance(a, list):
                return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
            if isinstance(a, tuple):
                return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                return True
            return a == b

        names = ("per_joint", "joint_counts", "categories", "category_counts", "per_activity",
                 "activity_counts", "total", "total_correct", "total_counted", "sweep", "threshold")
        return all(same(getattr(self, k), getattr(other, k)) for k in names)


def evaluate_poses(
    poses: Sequence[DecodedPose],
    annotations: Sequence[PersonAnnotation],
    thresholds: Sequence[float] = (PCKH_THRESHOLD,),
    threshold: float = PCKH_THRESHOLD,
) -> EvalReport:
    """Aggregate PCKh for predictions already in original-image coordinates."""
    if not annotations:
        raise UsageError("cannot evaluate an empty dataset")
    if len(poses) != len(annotations):
        raise UsageError(f"{len(poses)} predictions for {len(annotations)} annotations")
    pred = np.stack([p.coords for p in poses])
    gt = np.stack([a.joints for a in annotations])
    vis = np.stack([a.visible for a in annotations])
    head = np.array([a.head_length for a in annotations])
    acts = np.array([a.activity_id for a in annotations])

    codes = pckh_outcomes(pred, gt, vis, head, threshold)
    correct = codes == Outcome.CORRECT
    counted = codes != Outcome.NOT_COUNTED
    jc, jn = correct.sum(axis=0), counted.sum(axis=0)

    per_joint = {name: _pct(jc[j], jn[j]) for j, name in enumerate(JOINT_NAMES)}
    joint_counts = {name: int(jn[j]) for j, name in enumerate(JOINT_NAMES)}
    categories, category_counts = {}, {}
    for cat, members in JOINT_CATEGORIES.items():
        sides = [per_joint[JOINT_NAMES[j]] for j in members if jn[j]]
        categories[cat] = float(np.mean(sides)) if sides else math.nan
        category_counts[cat] = int(jn[list(members)].sum())

    per_activity, activity_counts = {}, {}
    for a in range(NUM_ACTIVITIES):
        rows = acts == a
        activity_counts[a] = int(rows.sum())
        per_activity[a] = _pct(int(correct[rows].sum()), int(counted[rows].sum()))

    sweep = []
    for t in thresholds:
        c = pckh_outcomes(pred, gt, vis, head, t)
        sweep.append((float(t), _pct(int((c == Outcome.CORRECT).sum()), int((c != Outcome.NOT_COUNTED).sum()))))

    total_correct, total_counted = int(correct.sum()), int(counted.sum())
    return EvalReport(
        per_joint=per_joint,
        joint_counts=joint_counts,
        categories=categories,
        category_counts=category_counts,
        per_activity=per_activity,
        activity_counts=activity_counts,
        total=_pct(total_correct, total_counted),
        total_correct=total_correct,
        total_counted=total_counted,
        sweep=sweep,
        threshold=float(threshold),
    )


def predict_poses(model, dataset, batch_size: int = 8) -> list[DecodedPose]:
    """Final-stack predictions for every sample, identity augmentation, BN in inference mode."""
    cfg = model.config
    stride = cfg.input_side / cfg.feature_side
    was_training = any(s.mode == "train" for s in model.batch_norm_states())
    model.eval()
    poses = []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                samples = [dataset.sample(i) for i in range(start, min(start + batch_size, len(dataset)))]
                b = batch(samples)
                activity = Tensor(b.activities) if cfg.variant == "contextual" else None
                heatmaps = model(Tensor(b.images), activity)[-1]
                poses += decode_heatmaps(heatmaps, [s.inverse_affine for s in samples], stride)
    finally:
        if was_training:
            model.train()
    return poses


def evaluate(model, dataset, thresholds: Sequence[float] = (PCKH_THRESHOLD,), batch_size: int = 8) -> EvalReport:
    if len(dataset) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    poses = predict_poses(model, dataset, batch_size)
    return evaluate_poses(poses, dataset.annotations, thresholds)


@dataclass
class ReportDiff:
    """Cell-wise ``b - a`` in percentage points."""

    per_joint: dict[str, float]
    categories: dict[str, float]
    per_activity: dict[int, float]
    total: float
    sweep: list[tuple[float, float]]

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("category", c, v) for c, v in self.categories.items()]
        out.append(("total", "PCKh", self.total))
        out += [("joint", j, v) for j, v in self.per_joint.items()]
        out += [("activity", str(a), v) for a, v in self.per_activity.items()]
        out += [("sweep", repr(t), v) for t, v in self.sweep]
        return out

    def __neg__(self) -> "ReportDiff":
        return ReportDiff(
            per_joint={k: -v for k, v in self.per_joint.items()},
            categories={k: -v for k, v in self.categories.items()},
            per_activity={k: -v for k, v in self.per_activity.items()},
            total=-self.total,
            sweep=[(t, -v) for t, v in self.sweep],
        )


def compare_reports(a: EvalReport, b: EvalReport) -> ReportDiff:
    if a.per_joint.keys() != b.per_joint.keys() or a.categories.keys() != b.categories.keys():
        raise UsageError("reports use different joint vocabularies")
    if a.per_activity.keys() != b.per_activity.keys():
        raise UsageError("reports use different activity vocabularies")
    if [t for t, _ in a.sweep] != [t for t, _ in b.sweep]:
        raise UsageError("reports were swept over different thresholds")
    if a.threshold != b.threshold:
        raise UsageError("reports use different headline thresholds")
    return ReportDiff(
        per_joint={k: b.per_joint[k] - a.per_joint[k] for k in a.per_joint},
        categories={k: b.categories[k] - a.categories[k] for k in a.categories},
        per_activity={k: b.per_activity[k] - a.per_activity[k] for k in a.per_activity},
        total=b.total - a.total,
        sweep=[(t, vb - va) for (t, va), (_, vb) in zip(a.sweep, b.sweep)],
    )


def table_header(threshold: float = PCKH_THRESHOLD) -> list[str]:
    return ["Model", *JOINT_CATEGORIES, f"PCKh@{threshold:g}"]


def format_table_row(label: str, values: Sequence[float]) -> str:
    return "\t".join([label, *(f"{v:.1f}" for v in values)])


def parse_thresholds(spec: str) -> list[float]:
    """``"0.5"``, ``"0.3,0.5,0.7"`` or inclusive ``"start:step:stop"``."""
    spec = spec.strip()
    try:
        if ":" in spec:
            start, step, stop = (float(p) for p in spec.split(":"))
            if step <= 0 or stop < start:
                raise ValueError("need step > 0 and stop >= start")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [round(start + k * step, 10) for k in range(count)]
        else:
            values = [float(p) for p in spec.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(f"bad threshold spec {spec!r}: {exc}") from exc
    if not values or any(v <= 0 for v in values):
        raise UsageError(f"thresholds must be positive, got {spec!r}")
    return values


# ---------------------------------------------------------------- report files

def _fmt(x: float) -> str:
    return repr(float(x))


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write("# per_joint\n")
    w.writerow(["name", "kind", "n", "accuracy"])
    for name in JOINT_NAMES:
        w.writerow([name, "joint", report.joint_counts[name], _fmt(report.per_joint[name])])
    for cat in JOINT_CATEGORIES:
        w.writerow([cat, "category", report.category_counts[cat], _fmt(report.categories[cat])])
    buf.write("# total\n")
    w.writerow(["threshold", "correct", "counted", "accuracy"])
    w.writerow([_fmt(report.threshold), report.total_correct, report.total_counted, _fmt(report.total)])
    buf.write("# per_activity\n")
    w.writerow(["activity_id", "name", "n", "accuracy"])
    for a in report.activities_by_count():
        w.writerow([a, ACTIVITY_NAMES[a], report.activity_counts[a], _fmt(report.per_activity[a])])
    buf.write("# sweep\n")
    w.writerow(["threshold", "accuracy"])
    for t, acc in report.sweep:
        w.writerow([_fmt(t), _fmt(acc)])
    return buf.getvalue()


def _blocks(text: str) -> dict[str, list[dict]]:
    blocks: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("# "):
            current = line[2:].strip()
            blocks[current] = []
        elif current is not None and line.strip():
            blocks[current].append(line)
    return {k: list(csv.DictReader(v)) for k, v in blocks.items()}


def report_from_csv(text: str) -> EvalReport:
    try:
        b = _blocks(text)
        joints = {r["name"]: r for r in b["per_joint"] if r["kind"] == "joint"}
        cats = {r["name"]: r for r in b["per_joint"] if r["kind"] == "category"}
        (tot,) = b["total"]
        acts = {int(r["activity_id"]): r for r in b["per_activity"]}
        return EvalReport(
            per_joint={n: float(joints[n]["accuracy"]) for n in JOINT_NAMES},
            joint_counts={n: int(joints[n]["n"]) for n in JOINT_NAMES},
            categories={c: float(cats[c]["accuracy"]) for c in JOINT_CATEGORIES},
            category_counts={c: int(cats[c]["n"]) for c in JOINT_CATEGORIES},
            per_activity={a: float(acts[a]["accuracy"]) for a in sorted(acts)},
            activity_counts={a: int(acts[a]["n"]) for a in sorted(acts)},
            total=float(tot["accuracy"]),
            total_correct=int(tot["correct"]),
            total_counted=int(tot["counted"]),
            sweep=[(float(r["threshold"]), float(r["accuracy"])) for r in b["sweep"]],
            threshold=float(tot["threshold"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise IngestionError(f"malformed report CSV: {exc!r}") from exc


def read_report(path) -> EvalReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read report {path}: {exc}") from exc
    return report_from_csv(text)


def write_report(report: EvalReport, out_dir, svg: bool = False) -> dict[str, Path]:
    """Write ``report.csv`` plus plottable ``per_activity.csv``/``sweep.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "report.csv", "per_activity": out_dir / "per_activity.csv",
             "sweep": out_dir / "sweep.csv"}
    paths["report"].write_text(report_to_csv(report), encoding="utf-8")
    with open(paths["per_activity"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["activity_id", "name", "n", "accuracy"])
        for a in report.activities_by_count():
            w.writerow([a, ACTIVITY_NAMES[a], report.activity_counts[a], _fmt(report.per_activity[a])])
    with open(paths["sweep"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        for t, acc in report.sweep:
            w.writerow([_fmt(t), _fmt(acc)])
    if svg:
        paths.update(write_svgs(report, out_dir))
    return paths


def write_diff(diff: ReportDiff, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["section", "key", "diff"])
        for section, key, value in diff.rows():
            w.writerow([section, key, _fmt(value)])


def read_diff(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as f:
        return [(r["section"], r["key"], float(r["diff"])) for r in csv.DictReader(f)]


def write_svgs(report: EvalReport, out_dir) -> dict[str, Path]:
    """Line chart of the threshold sweep and bar chart of per-activity accuracy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    plt.rcParams["svg.hashsalt"] = "hgfusion"
    meta = {"Date": None}
    paths = {}

    fig, ax = plt.subplots(figsize=(5, 4))
    ts = [t for t, _ in report.sweep]
    ax.plot(ts, [v for _, v in report.sweep], marker="o")
    ax.set_xlabel("PCKh threshold")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    paths["sweep_svg"] = out_dir / "sweep.svg"
    fig.savefig(paths["sweep_svg"], format="svg", metadata=meta)
    plt.close(fig)

    order = [a for a in report.activities_by_count() if report.activity_counts[a] > 0]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(order)), [report.per_activity[a] for a in order])
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels([ACTIVITY_NAMES[a] for a in order], rotation=75, fontsize=7)
    ax.set_ylabel("PCKh@%g (%%)" % report.threshold)
    ax.set_ylim(0, 100)
    fig.tight_layout()
    paths["per_activity_svg"] = out_dir / "per_activity.svg"
    fig.savefig(paths["per_activity_svg"], format="svg", metadata=meta)
    plt.close(fig)
    return paths
