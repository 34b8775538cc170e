"""
Annotation ingestion, person-centred cropping, augmentation and target synthesis.

Coordinates are continuous pixel coordinates with pixel ``(row, col)``
centred on ``(x=col, y=row)``.  A crop is defined by a forward affine map
from original-image coordinates to crop coordinates::

    crop = (out / S) * R(theta) @ (p - center) + out / 2

where ``S = 200 * scale * scale_jitter * padding`` is the side of the source
window.  ``R`` rotates the *content* counter-clockwise as seen on screen
(y axis pointing down) for positive angles, so a point right of the centre
ends up above it after a +90 degree rotation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IngestionError, UsageError, ValidationError
from .mpii import NUM_ACTIVITIES, NUM_JOINTS

REFERENCE_BOX = 200.0
ROTATION_RANGE = (-30.0, 30.0)
SCALE_RANGE = (0.75, 1.25)
HEATMAP_SIGMA = 1.0


@dataclass(eq=False)
class PersonAnnotation:
    image_path: str
    center: tuple[float, float]
    scale: float
    joints: np.ndarray
    visible: np.ndarray
    activity_id: int
    head_length: float

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        self.scale = float(self.scale)
        self.head_length = float(self.head_length)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.visible = np.asarray(self.visible).astype(bool)

    def validate(self) -> "PersonAnnotation":
        if not isinstance(self.image_path, str) or not self.image_path:
            raise ValidationError("image: must be a non-empty string")
        if not all(math.isfinite(c) for c in self.center):
            raise ValidationError("center: coordinates must be finite")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"scale: must be > 0, got {self.scale}")
        if self.joints.shape != (NUM_JOINTS, 2) or not np.isfinite(self.joints).all():
            raise ValidationError(f"joints: expected {NUM_JOINTS} finite [x, y] pairs")
        if self.visible.shape != (NUM_JOINTS,):
            raise ValidationError(f"visible: expected {NUM_JOINTS} flags")
        if isinstance(self.activity_id, bool) or not isinstance(self.activity_id, (int, np.integer)):
            raise ValidationError("activity_id: must be an integer")
        if not 0 <= self.activity_id < NUM_ACTIVITIES:
            raise ValidationError(f"activity_id: must be in [0, {NUM_ACTIVITIES - 1}], got {self.activity_id}")
        if not (math.isfinite(self.head_length) and self.head_length > 0):
            raise ValidationError(f"head_length: must be > 0, got {self.head_length}")
        return self

    def to_json(self) -> dict:
        return {
            "image": self.image_path,
            "center": list(self.center),
            "scale": self.scale,
            "joints": self.joints.tolist(),
            "visible": [int(v) for v in self.visible],
            "activity_id": int(self.activity_id),
            "head_length": self.head_length,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PersonAnnotation":
        if not isinstance(obj, dict):
            raise ValidationError("record: expected a JSON object")
        required = ("image", "center", "scale", "joints", "visible", "activity_id", "head_length")
        for key in required:
            if key not in obj:
                raise ValidationError(f"{key}: missing field")
        visible = obj["visible"]
        if not isinstance(visible, list) or any(v not in (0, 1) for v in visible):
            raise ValidationError("visible: flags must be 0 or 1")
        center = obj["center"]
        if not isinstance(center, list) or len(center) != 2:
            raise ValidationError("center: expected [x, y]")
        try:
            joints = np.asarray(obj["joints"], dtype=np.float64)
            ann = cls(
                image_path=obj["image"],
                center=(float(center[0]), float(center[1])),
                scale=float(obj["scale"]),
                joints=joints,
                visible=np.asarray(visible, dtype=bool),
                activity_id=obj["activity_id"],
                head_length=float(obj["head_length"]),
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"record: {exc}") from exc
        return ann.validate()

    def __eq__(self, other) -> bool:
        if not isinstance(other, PersonAnnotation):
            return NotImplemented
        return self.to_json() == other.to_json()


def load_annotations(path) -> list[PersonAnnotation]:
    """Read a JSON-lines annotation file; blank lines are skipped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        try:
            out.append(PersonAnnotation.from_json(obj))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_annotations(annotations: Iterable[PersonAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ann in annotations:
            f.write(json.dumps(ann.to_json(), separators=(",", ":")) + "\n")


def split_dataset(annotations: Sequence, seed: int) -> tuple[list, list, list]:
    """Seeded 80/10/10 partition: floor(0.8n) train, floor(0.1n) val, rest test."""
    n = len(annotations)
    if n == 0:
        raise UsageError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_train = (8 * n) // 10
    n_val = n // 10
    pick = lambda idx: [annotations[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale_jitter: float = 1.0
    output_side: int = 256

    def clamped(self) -> "AffineParams":
        rot = min(max(self.rotation, ROTATION_RANGE[0]), ROTATION_RANGE[1])
        jit = min(max(self.scale_jitter, SCALE_RANGE[0]), SCALE_RANGE[1])
        return AffineParams(rot, jit, self.output_side)


def sample_augmentation(rng: np.random.Generator, output_side: int = 256) -> AffineParams:
    return AffineParams(
        rotation=float(rng.uniform(*ROTATION_RANGE)),
        scale_jitter=float(rng.uniform(*SCALE_RANGE)),
        output_side=output_side,
    )


def crop_affine(center, scale: float, aug: AffineParams, padding: float = 1.0) -> np.ndarray:
    """3x3 homogeneous map from original-image to crop coordinates.

    Positive rotation turns the content counter-clockwise on screen (y down).
    """
    out = float(aug.output_side)
    window = REFERENCE_BOX * scale * aug.scale_jitter * padding
    k = out / window
    theta = math.radians(aug.rotation)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = center
    a = np.array([[k * c, k * s], [-k * s, k * c]])
    t = np.array([out / 2, out / 2]) - a @ np.array([cx, cy])
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = t
    return m


def apply_affine(points: np.ndarray, affine: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ affine[:2, :2].T + affine[:2, 2]


def crop_person(
    image: np.ndarray, ann: PersonAnnotation, aug: AffineParams, padding: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear crop of the person window; pixels outside the image are black.

    Returns ``(crop[out, out, 3], affine, inverse_affine)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise IngestionError(f"expected an H x W x 3 RGB raster, got shape {image.shape}")
    affine = crop_affine(ann.center, ann.scale, aug, padding)
    inverse = np.linalg.inv(affine)
    out = aug.output_side
    ys, xs = np.mgrid[0:out, 0:out].astype(np.float64)
    src_x = inverse[0, 0] * xs + inverse[0, 1] * ys + inverse[0, 2]
    src_y = inverse[1, 0] * xs + inverse[1, 1] * ys + inverse[1, 2]
    crop = np.empty((out, out, 3))
    for ch in range(3):
        crop[..., ch] = ndimage.map_coordinates(
            image[..., ch], [src_y, src_x], order=1, mode="constant", cval=0.0
        )
    return crop, affine, inverse


def transform_joints(joints: np.ndarray, affine: np.ndarray, output_side: int = 256):
    """Map joints into crop space; ``in_crop`` is true inside ``[0, out)^2``."""
    mapped = apply_affine(joints, affine)
    in_crop = np.all((mapped >= 0) & (mapped < output_side), axis=1)
    return mapped, in_crop


def make_heatmaps(
    joints_crop: np.ndarray,
    in_crop: np.ndarray,
    visible: np.ndarray,
    output_side: int = 256,
    side: int = 64,
    sigma: float = HEATMAP_SIGMA,
) -> np.ndarray:
    """Unnormalised Gaussian per joint, peak 1.0 at the floored heatmap cell.

    Support is truncated to the (6 sigma + 1)^2 square around the peak.
    Invisible or out-of-crop joints get an all-zero channel.
    """
    stride = output_side / side
    n = len(joints_crop)
    maps = np.zeros((1, n, side, side))
    radius = int(math.floor(3 * sigma))
    offs = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2.0 * sigma * sigma))
    for j in range(n):
        if not (visible[j] and in_crop[j]):
            continue
        cx = int(math.floor(joints_crop[j, 0] / stride))
        cy = int(math.floor(joints_crop[j, 1] / stride))
        if not (0 <= cx < side and 0 <= cy < side):
            continue
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, side)
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, side)
        maps[0, j, y0:y1, x0:x1] = kernel[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
    return maps


def make_activity_tensor(activity_id: int, side: int = 64, num_activities: int = NUM_ACTIVITIES) -> np.ndarray:
    if not 0 <= activity_id < num_activities:
        raise ValidationError(f"activity_id must be in [0, {num_activities - 1}], got {activity_id}")
    t = np.zeros((1, num_activities, side, side))
    t[0, activity_id] = 1.0
    return t


@dataclass(eq=False)
class TrainingSample:
    image: np.ndarray            # (1, 3, S, S) in [0, 1]
    target_heatmaps: np.ndarray  # (1, J, S/4, S/4)
    activity_tensor: np.ndarray  # (1, A, S/4, S/4)
    in_crop: np.ndarray
    visible: np.ndarray
    affine: np.ndarray
    inverse_affine: np.ndarray
    annotation: PersonAnnotation | None = None


def prepare_sample(
    image: np.ndarray,
    ann: PersonAnnotation,
    aug: AffineParams | None = None,
    output_side: int = 256,
    heatmap_side: int | None = None,
    sigma: float = HEATMAP_SIGMA,
    padding: float = 1.0,
) -> TrainingSample:
    # augmentation parameters are clamped to the training ranges here, not in the geometry
    aug = AffineParams(output_side=output_side) if aug is None else aug.clamped()
    if aug.output_side != output_side:
        aug = AffineParams(aug.rotation, aug.scale_jitter, output_side)
    heatmap_side = output_side // 4 if heatmap_side is None else heatmap_side
    crop, affine, inverse = crop_person(image, ann, aug, padding)
    joints_crop, in_crop = transform_joints(ann.joints, affine, output_side)
    return TrainingSample(
        image=crop.transpose(2, 0, 1)[None].copy(),
        target_heatmaps=make_heatmaps(joints_crop, in_crop, ann.visible, output_side, heatmap_side, sigma),
        activity_tensor=make_activity_tensor(ann.activity_id, heatmap_side),
        in_crop=in_crop,
        visible=ann.visible.copy(),
        affine=affine,
        inverse_affine=inverse,
        annotation=ann,
    )


@dataclass(eq=False)
class Batch:
    images: np.ndarray
    heatmaps: np.ndarray
    activities: np.ndarray
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def batch(samples: Sequence[TrainingSample]) -> Batch:
    if not samples:
        raise UsageError("cannot batch an empty list of samples")
    for attr in ("image", "target_heatmaps", "activity_tensor"):
        shapes = {getattr(s, attr).shape for s in samples}
        if len(shapes) != 1:
            raise UsageError(f"cannot batch samples with differing {attr} shapes: {sorted(shapes)}")
    return Batch(
        images=np.concatenate([s.image for s in samples]),
        heatmaps=np.concatenate([s.target_heatmaps for s in samples]),
        activities=np.concatenate([s.activity_tensor for s in samples]),
        samples=list(samples),
    )


def unbatch(b: Batch) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    return [(b.images[i:i + 1], b.heatmaps[i:i + 1], b.activities[i:i + 1]) for i in range(len(b))]


def load_image(path) -> np.ndarray:
    """Decode an 8-bit raster to float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return rgb / 255.0


def save_image(array: np.ndarray, path) -> None:
    pixels = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


class PoseDataset:
    """Annotations plus lazily decoded images; un-augmented samples are cached."""

    def __init__(
        self,
        annotations: Sequence[PersonAnnotation],
        root=".",
        output_side: int = 256,
        sigma: float = HEATMAP_SIGMA,
        padding: float = 1.0,
    ):
        self.annotations = list(annotations)
        self.root = Path(root)
        self.output_side = output_side
        self.sigma = sigma
        self.padding = padding
        self._images: dict[str, np.ndarray] = {}
        self._plain: dict[int, TrainingSample] = {}

    @classmethod
    def from_file(cls, path, **kw) -> "PoseDataset":
        path = Path(path)
        return cls(load_annotations(path), root=path.parent, **kw)

    def __len__(self) -> int:
        return len(self.annotations)

    def subset(self, annotations: Sequence[PersonAnnotation]) -> "PoseDataset":
        out = PoseDataset(annotations, self.root, self.output_side, self.sigma, self.padding)
        out._images = self._images
        return out

    def image(self, ann: PersonAnnotation) -> np.ndarray:
        if ann.image_path not in self._images:
            self._images[ann.image_path] = load_image(self.root / ann.image_path)
        return self._images[ann.image_path]

    def sample(self, index: int, aug: AffineParams | None = None) -> TrainingSample:
        ann = self.annotations[index]
        if aug is None:
            if index not in self._plain:
                self._plain[index] = prepare_sample(
                    self.image(ann), ann, None, self.output_side, sigma=self.sigma, padding=self.padding
                )
            return self._plain[index]
        return prepare_sample(self.image(ann), ann, aug, self.output_side, sigma=self.sigma, padding=self.padding)
