"""Detection and annotation data model plus dataset ingestion.

Boxes are stored in image-relative center format ``(cx, cy, w, h)`` with all
four values in ``[0, 1]``. Two on-disk layouts are supported:

* the native interchange format: JSON Lines with relative-coordinate boxes,
  one record per line;
* COCO-compatible JSON (``images``/``annotations``/``categories`` objects or
  a results array) with absolute top-left pixel boxes, converted on read.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import ParseError, ReferentialIntegrityError, UsageError, ValidationError

logger = logging.getLogger(__name__)

# Maximum fraction of an image dimension a box may extend beyond the image
# before the record is rejected instead of clamped.
EDGE_CLAMP_TOLERANCE = 0.02

ImageId = str | int
CategoryTable = dict[int, str]


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class BoxGeometry:
    """Axis-aligned box in image-relative center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"box center out of range: cx={self.cx}, cy={self.cy}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"box size out of range: w={self.w}, h={self.h}")
        overhang = max(
            0.5 * self.w - self.cx,
            self.cx + 0.5 * self.w - 1.0,
            0.5 * self.h - self.cy,
            self.cy + 0.5 * self.h - 1.0,
        )
        if overhang > EDGE_CLAMP_TOLERANCE + 1e-12:
            raise ValidationError(
                f"box extends {overhang:.4f} beyond the image, above the "
                f"{EDGE_CLAMP_TOLERANCE:.0%} clamping tolerance: {self}"
            )

    def corners(self) -> tuple[float, float, float, float]:
        """Return ``(x1, y1, x2, y2)`` in relative coordinates."""
        return (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    def to_absolute(self, width_px: int, height_px: int) -> tuple[float, float, float, float]:
        """Return ``[x_topleft, y_topleft, w, h]`` in pixels for the given image size."""
        return (
            (self.cx - 0.5 * self.w) * width_px,
            (self.cy - 0.5 * self.h) * height_px,
            self.w * width_px,
            self.h * height_px,
        )


@dataclass(frozen=True)
class Detection:
    """One predicted box with class label and confidence score."""

    image_id: ImageId
    category_id: int
    score: float
    box: BoxGeometry

    def __post_init__(self):
        score = _require_finite("score", self.score)
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "category_id", int(self.category_id))


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated box. Crowd regions are skipped by the matcher by default."""

    image_id: ImageId
    category_id: int
    box: BoxGeometry
    crowd_flag: bool = False

    def __post_init__(self):
        object.__setattr__(self, "category_id", int(self.category_id))
        object.__setattr__(self, "crowd_flag", bool(self.crowd_flag))


@dataclass(frozen=True)
class ImageRecord:
    """Pixel dimensions of one image, keyed by its identifier."""

    image_id: ImageId
    width_px: int
    height_px: int

    def __post_init__(self):
        if int(self.width_px) <= 0 or int(self.height_px) <= 0:
            raise ValidationError(
                f"image {self.image_id!r} has nonpositive dimensions "
                f"{self.width_px}x{self.height_px}"
            )
        object.__setattr__(self, "width_px", int(self.width_px))
        object.__setattr__(self, "height_px", int(self.height_px))


def box_from_absolute(
    bbox: Iterable[float],
    width_px: int,
    height_px: int,
    *,
    clamp_tol: float = EDGE_CLAMP_TOLERANCE,
) -> BoxGeometry:
    """Convert an absolute ``[x, y, w, h]`` top-left pixel box to relative center format.

    Boxes sticking out of the image by at most ``clamp_tol`` of the image
    dimension are clamped back inside; larger overhangs raise
    :class:`ValidationError`, as do nonpositive box sizes.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValidationError(f"box has nonpositive width/height: {[x, y, w, h]}")
    x2, y2 = x + w, y + h
    overhang_x = max(0.0, -x, x2 - width_px) / width_px
    overhang_y = max(0.0, -y, y2 - height_px) / height_px
    if overhang_x > clamp_tol or overhang_y > clamp_tol:
        raise ValidationError(
            f"box {[x, y, w, h]} extends {max(overhang_x, overhang_y):.4f} beyond the "
            f"{width_px}x{height_px} image, above the {clamp_tol:.0%} tolerance"
        )
    x, y = max(x, 0.0), max(y, 0.0)
    x2, y2 = min(x2, float(width_px)), min(y2, float(height_px))
    if x2 <= x or y2 <= y:
        raise ValidationError(f"box {[x, y, w, h]} collapses after clamping")
    return BoxGeometry(
        cx=(x + x2) / (2.0 * width_px),
        cy=(y + y2) / (2.0 * height_px),
        w=(x2 - x) / width_px,
        h=(y2 - y) / height_px,
    )


def _box_from_relative(obj: dict[str, Any], *, clamp_tol: float = EDGE_CLAMP_TOLERANCE) -> BoxGeometry:
    """Build a box from a native-format ``{cx, cy, w, h}`` mapping, clamping small overhangs."""
    try:
        cx, cy, w, h = (float(obj[k]) for k in ("cx", "cy", "w", "h"))
    except KeyError as exc:
        raise ValidationError(f"box record missing field {exc}") from exc
    if w <= 0 or h <= 0:
        raise ValidationError(f"box has nonpositive width/height: {obj}")
    x1, y1, x2, y2 = cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h
    overhang = max(0.0, -x1, x2 - 1.0, -y1, y2 - 1.0)
    if overhang > clamp_tol:
        raise ValidationError(
            f"box {obj} extends {overhang:.4f} beyond the image, above the "
            f"{clamp_tol:.0%} tolerance"
        )
    if overhang > 0.0:
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        cx, cy, w, h = (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1
    return BoxGeometry(cx=cx, cy=cy, w=w, h=h)


def box_to_json(box: BoxGeometry) -> dict[str, float]:
    return {"cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h}


def _iter_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc


def _load_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}: malformed JSON: {exc.msg}") from exc


def sniff_format(path: str | Path) -> str:
    """Return ``"native"`` (JSON Lines) or ``"coco"`` (single JSON document)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        rest = fh.read(4096)
    if not first.strip():
        return "native"
    try:
        value = json.loads(first)
    except json.JSONDecodeError:
        # Single pretty-printed JSON document spanning several lines.
        return "coco"
    if rest.strip():
        return "native"
    # One-line file: a native record is a flat object carrying a relative box.
    if isinstance(value, dict) and "box" in value:
        return "native"
    if isinstance(value, dict) and ("image" in value or "category" in value):
        return "native"
    return "coco"


class _RecordPolicy:
    """Shared fail-versus-skip handling for record-level validation errors."""

    def __init__(self, on_invalid: str):
        if on_invalid not in ("fail", "skip"):
            raise UsageError(f"on_invalid must be 'fail' or 'skip', got {on_invalid!r}")
        self.on_invalid = on_invalid
        self.skipped = 0

    def handle(self, exc: ValidationError, context: str) -> None:
        if self.on_invalid == "fail":
            raise type(exc)(f"{context}: {exc}") from exc
        self.skipped += 1
        logger.warning("skipping %s: %s", context, exc)


def _load_native_annotations(path: Path, policy: _RecordPolicy):
    images: dict[ImageId, ImageRecord] = {}
    ground_truth: list[GroundTruthObject] = []
    categories: CategoryTable = {}
    for lineno, obj in _iter_jsonl(path):
        context = f"{path}:{lineno}"
        if not isinstance(obj, dict):
            raise ParseError(f"{context}: expected a JSON object per line")
        if "image" in obj:
            rec = obj["image"]
            image = ImageRecord(rec["image_id"], rec["width_px"], rec["height_px"])
            if image.image_id in images:
                raise ValidationError(f"{context}: duplicate image record {image.image_id!r}")
            images[image.image_id] = image
        elif "category" in obj:
            rec = obj["category"]
            categories[int(rec["id"])] = str(rec.get("name", rec["id"]))
        else:
            try:
                ground_truth.append(
                    GroundTruthObject(
                        image_id=obj["image_id"],
                        category_id=obj["category_id"],
                        box=_box_from_relative(obj["box"]),
                        crowd_flag=bool(obj.get("crowd_flag", False)),
                    )
                )
            except KeyError as exc:
                raise ValidationError(f"{context}: annotation record missing field {exc}") from exc
            except ValidationError as exc:
                policy.handle(exc, context)
    return images, ground_truth, categories


def _load_native_detections(path: Path, images: dict[ImageId, ImageRecord], policy: _RecordPolicy):
    detections: list[Detection] = []
    for lineno, obj in _iter_jsonl(path):
        context = f"{path}:{lineno}"
        try:
            if images and obj["image_id"] not in images:
                raise ReferentialIntegrityError(f"unknown image_id {obj['image_id']!r}")
            detections.append(
                Detection(
                    image_id=obj["image_id"],
                    category_id=obj["category_id"],
                    score=obj["score"],
                    box=_box_from_relative(obj["box"]),
                )
            )
        except KeyError as exc:
            raise ValidationError(f"{context}: detection record missing field {exc}") from exc
        except ValidationError as exc:
            policy.handle(exc, context)
    return detections


def _load_coco_annotations(path: Path, policy: _RecordPolicy):
    doc = _load_json(path)
    if not isinstance(doc, dict) or "images" not in doc:
        raise ValidationError(f"{path}: COCO annotation file must contain an 'images' array")
    images: dict[ImageId, ImageRecord] = {}
    for rec in doc["images"]:
        image = ImageRecord(rec["id"], rec["width"], rec["height"])
        if image.image_id in images:
            raise ValidationError(f"{path}: duplicate image id {image.image_id!r}")
        images[image.image_id] = image
    categories: CategoryTable = {
        int(rec["id"]): str(rec.get("name", rec["id"])) for rec in doc.get("categories", [])
    }
    ground_truth: list[GroundTruthObject] = []
    for i, rec in enumerate(doc.get("annotations", [])):
        context = f"{path}: annotation #{i}"
        try:
            image = images.get(rec["image_id"])
            if image is None:
                raise ReferentialIntegrityError(f"unknown image_id {rec['image_id']!r}")
            ground_truth.append(
                GroundTruthObject(
                    image_id=rec["image_id"],
                    category_id=rec["category_id"],
                    box=box_from_absolute(rec["bbox"], image.width_px, image.height_px),
                    crowd_flag=bool(rec.get("iscrowd", 0)),
                )
            )
        except ValidationError as exc:
            policy.handle(exc, context)
    return images, ground_truth, categories


def _load_coco_detections(path: Path, images: dict[ImageId, ImageRecord], policy: _RecordPolicy):
    doc = _load_json(path)
    if isinstance(doc, dict):
        doc = doc.get("annotations", doc.get("results"))
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: COCO detection file must be a results array")
    detections: list[Detection] = []
    for i, rec in enumerate(doc):
        context = f"{path}: result #{i}"
        try:
            image = images.get(rec["image_id"])
            if image is None:
                raise ReferentialIntegrityError(f"unknown image_id {rec['image_id']!r}")
            detections.append(
                Detection(
                    image_id=rec["image_id"],
                    category_id=rec["category_id"],
                    score=rec["score"],
                    box=box_from_absolute(rec["bbox"], image.width_px, image.height_px),
                )
            )
        except KeyError as exc:
            raise ValidationError(f"{context}: missing field {exc}") from exc
        except ValidationError as exc:
            policy.handle(exc, context)
    return detections


def load_dataset(
    detections_path: str | Path,
    annotations_path: str | Path,
    *,
    fmt: str = "auto",
    on_invalid: str = "fail",
) -> tuple[list[Detection], list[GroundTruthObject], CategoryTable]:
    """Load a detection file and its annotation file into the relative data model.

    ``fmt`` selects ``"native"`` JSON Lines, ``"coco"`` JSON, or ``"auto"``
    sniffing per file. ``on_invalid`` controls record-level validation
    failures: ``"fail"`` raises, ``"skip"`` drops the record with a warning.
    Input order is preserved for all surviving records.
    """
    detections_path, annotations_path = Path(detections_path), Path(annotations_path)
    if fmt not in ("auto", "native", "coco"):
        raise UsageError(f"unknown dataset format {fmt!r}")
    ann_fmt = sniff_format(annotations_path) if fmt == "auto" else fmt
    det_fmt = sniff_format(detections_path) if fmt == "auto" else fmt
    policy = _RecordPolicy(on_invalid)

    if ann_fmt == "native":
        images, ground_truth, categories = _load_native_annotations(annotations_path, policy)
    else:
        images, ground_truth, categories = _load_coco_annotations(annotations_path, policy)
    if det_fmt == "native":
        detections = _load_native_detections(detections_path, images, policy)
    else:
        if not images:
            raise ValidationError(
                f"{detections_path}: COCO detections need image dimensions from the annotation file"
            )
        detections = _load_coco_detections(detections_path, images, policy)

    if not categories:
        categories = {
            cid: str(cid)
            for cid in sorted({g.category_id for g in ground_truth} | {d.category_id for d in detections})
        }
    else:
        for d in detections:
            if d.category_id not in categories:
                raise ReferentialIntegrityError(
                    f"detection category {d.category_id} missing from the category table"
                )
    if policy.skipped:
        logger.warning("skipped %d invalid records", policy.skipped)
    return detections, ground_truth, categories


def detection_to_json(det: Detection) -> dict[str, Any]:
    return {
        "image_id": det.image_id,
        "category_id": det.category_id,
        "score": det.score,
        "box": box_to_json(det.box),
    }


def write_detections(detections: Iterable[Detection], path: str | Path) -> None:
    """Write detections in the native JSON Lines format, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(detection_to_json(det)))
            fh.write("\n")


def write_annotations(
    ground_truth: Iterable[GroundTruthObject],
    images: Iterable[ImageRecord],
    path: str | Path,
    categories: CategoryTable | None = None,
) -> None:
    """Write a native annotation file: image records, then object records."""
    with open(path, "w", encoding="utf-8") as fh:
        for image in images:
            rec = {
                "image": {
                    "image_id": image.image_id,
                    "width_px": image.width_px,
                    "height_px": image.height_px,
                }
            }
            fh.write(json.dumps(rec))
            fh.write("\n")
        for cid, name in (categories or {}).items():
            fh.write(json.dumps({"category": {"id": cid, "name": name}}))
            fh.write("\n")
        for gt in ground_truth:
            rec = {
                "image_id": gt.image_id,
                "category_id": gt.category_id,
                "box": box_to_json(gt.box),
                "crowd_flag": gt.crowd_flag,
            }
            fh.write(json.dumps(rec))
            fh.write("\n")
