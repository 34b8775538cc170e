"""
Seeded synthetic pose datasets in the same on-disk schema as real data.

Images are a dim uniform-noise background with one coloured Gaussian blob
per joint (a fixed colour per joint index, so joints are distinguishable
locally).  Joints sit on a lattice of ``image_side / 32`` pixels, offset by
half a lattice step, inside the central region of the image so they stay in
the crop under every in-range augmentation.  The person window covers the
whole image: ``center = side / 2`` and ``scale = side / 200``.

``activity_separable`` datasets come in pairs that share an identical image.
The member with an even activity id is annotated at the blob positions; the
member with an odd id is annotated at the blob positions shifted right by
``image_side / 8`` pixels.  Only a model that reads the activity can fit
both members of a pair.
"""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .data import PersonAnnotation, save_image, write_annotations
from .errors import UsageError
from .mpii import NUM_ACTIVITIES, NUM_JOINTS

KINDS = ("plain", "activity_separable")
ANNOTATION_FILE = "annotations.jsonl"

BLOB_SIGMA_FRACTION = 1.0 / 96
NOISE_LEVEL = 0.15


def joint_colors() -> np.ndarray:
    out = []
    for j in range(NUM_JOINTS):
        hue = (j * 5 % NUM_JOINTS) / NUM_JOINTS
        value = 1.0 if j % 2 == 0 else 0.7
        out.append(colorsys.hsv_to_rgb(hue, 1.0, value))
    return np.array(out)


def random_pose(rng: np.random.Generator, side: int, x_range=(0.25, 0.75), y_range=(0.25, 0.75)) -> np.ndarray:
    """16 distinct lattice points inside the given fractional box."""
    step = side / 32
    cols = np.arange(int(np.ceil(x_range[0] * 32)), int(np.floor(x_range[1] * 32)))
    rows = np.arange(int(np.ceil(y_range[0] * 32)), int(np.floor(y_range[1] * 32)))
    cells = rng.choice(len(cols) * len(rows), size=NUM_JOINTS, replace=False)
    xs = cols[cells % len(cols)]
    ys = rows[cells // len(cols)]
    return np.stack([(xs + 0.5) * step, (ys + 0.5) * step], axis=1)


def render_image(joints: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.0, NOISE_LEVEL, size=(side, side, 3))
    sigma = side * BLOB_SIGMA_FRACTION
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for color, (x, y) in zip(joint_colors(), joints):
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma * sigma))
        img = img * (1 - blob[..., None]) + color[None, None, :] * blob[..., None]
    return np.clip(img, 0.0, 1.0)


def _annotation(name: str, joints: np.ndarray, side: int, activity: int) -> PersonAnnotation:
    return PersonAnnotation(
        image_path=name,
        center=(side / 2, side / 2),
        scale=side / 200.0,
        joints=joints,
        visible=np.ones(NUM_JOINTS, dtype=bool),
        activity_id=int(activity),
        head_length=side / 8,
    ).validate()


def make_synthetic_dataset(kind: str, n: int, seed: int, out_dir, image_side: int = 256) -> Path:
    """Write ``n`` PNG images and ``annotations.jsonl`` under ``out_dir``.

    Returns the path of the annotation file.  Output is byte-identical for
    equal arguments.
    """
    if kind not in KINDS:
        raise UsageError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    if n < 2:
        raise UsageError("synthetic datasets need n >= 2")
    if kind == "activity_separable" and n % 2:
        raise UsageError("activity_separable datasets need an even n (samples come in pairs)")
    if image_side % 32:
        raise UsageError("image_side must be a multiple of 32")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    annotations = []

    if kind == "plain":
        for i in range(n):
            joints = random_pose(rng, image_side)
            name = f"images/{i:05d}.png"
            save_image(render_image(joints, image_side, rng), out_dir / name)
            annotations.append(_annotation(name, joints, image_side, rng.integers(NUM_ACTIVITIES)))
    else:
        shift = image_side / 8
        evens = np.arange(0, NUM_ACTIVITIES, 2)
        odds = np.arange(1, NUM_ACTIVITIES, 2)
        for p in range(n // 2):
            joints = random_pose(rng, image_side, x_range=(0.25, 0.625))
            image = render_image(joints, image_side, rng)
            shifted = joints + np.array([shift, 0.0])
            for member, (ids, target) in enumerate(((evens, joints), (odds, shifted))):
                name = f"images/{2 * p + member:05d}.png"
                save_image(image, out_dir / name)
                annotations.append(_annotation(name, target, image_side, rng.choice(ids)))

    path = out_dir / ANNOTATION_FILE
    write_annotations(annotations, path)
    return path


def activity_blind_floor(pairs) -> float:
    """Lowest mean MSE reachable by any predictor that cannot see activity.

    ``pairs`` holds ``(target_a, target_b)`` heatmap arrays whose inputs are
    indistinguishable without the activity.  The optimum predicts the
    per-pair mean target, leaving ``mean((a - b)^2) / 4`` per pair; the result
    is the average over pairs (per supervised stack).
    """
    pairs = list(pairs)
    if not pairs:
        raise UsageError("activity_blind_floor needs at least one pair")
    return float(np.mean([np.mean((np.asarray(a) - np.asarray(b)) ** 2) / 4.0 for a, b in pairs]))
