"""Object manifests, grouped splits, preprocessing, and synthetic data.

Manifests are JSON-lines files, one object per line, with the ObjectRecord
fields.  Splits are assigned per source image so that all objects cropped
from the same image land in the same subset.

The synthetic generator exists so the full pipeline can be exercised
without any external dataset.  Each generated object is a rectangle whose
brightness and noise amplitude are driven by a texture-strength parameter
t in [0, 1]; its label is jrd = clamp(floor(20 + 30 t + 0.5), 0, 63).
The per-object t values are written to a sidecar (texture.json) so the rule
can be re-run independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DataIOError, FormatError, ValidationError
from .resample import bilinear_resize_2d

N_QP = 64

SIZE_SMALL_MAX = 32 * 32
SIZE_MEDIUM_MAX = 96 * 96

SPLIT_NAMES = ("train", "val", "test")

PREPROCESS_MEAN = 0.5
PREPROCESS_STD = 0.5


def size_class_for(bbox) -> str:
    """COCO-style size bucket from bbox area: small < 32^2 <= medium < 96^2 <= large."""
    x1, y1, x2, y2 = bbox
    area = (x2 - x1) * (y2 - y1)
    if area < SIZE_SMALL_MAX:
        return "small"
    if area < SIZE_MEDIUM_MAX:
        return "medium"
    return "large"


@dataclass(frozen=True)
class ObjectRecord:
    object_id: str
    source_image_id: str
    image_path: str
    bbox: tuple  # (x_ul, y_ul, x_lr, y_lr) in pixels
    jrd: int
    category: str
    size_class: str = ""

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if x2 <= x1 or y2 <= y1:
            raise ValidationError(
                f"object {self.object_id!r}: bbox {self.bbox} has non-positive extent"
            )
        if not 0 <= self.jrd <= N_QP - 1:
            raise ValidationError(
                f"object {self.object_id!r}: jrd {self.jrd} out of [0, {N_QP - 1}]"
            )
        derived = size_class_for(self.bbox)
        if self.size_class and self.size_class != derived:
            raise ValidationError(
                f"object {self.object_id!r}: size_class {self.size_class!r} "
                f"inconsistent with bbox area (expected {derived!r})"
            )
        object.__setattr__(self, "bbox", tuple(self.bbox))
        object.__setattr__(self, "size_class", derived)

    def to_json(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        return d


def load_manifest(path) -> list[ObjectRecord]:
    """Parse a JSON-lines manifest; every problem names its line number."""
    records: list[ObjectRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                record = ObjectRecord(
                    object_id=raw["object_id"],
                    source_image_id=raw["source_image_id"],
                    image_path=raw["image_path"],
                    bbox=tuple(raw["bbox"]),
                    jrd=int(raw["jrd"]),
                    category=raw["category"],
                    size_class=raw.get("size_class", ""),
                )
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if record.object_id in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate object_id {record.object_id!r}"
                )
            seen.add(record.object_id)
            records.append(record)
    return records


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def group_split(records, ratios=(8, 1, 1), seed: int = 0) -> dict[str, str]:
    """source_image_id -> split name, at ratios by group count.

    Group keys are shuffled with the seed, then quotas are fixed by
    largest-remainder rounding of len(groups) * ratio and filled in order,
    so the same seed always reproduces the same assignment.
    """
    if not records:
        raise ContractError("group_split on empty records")
    if len(ratios) != len(SPLIT_NAMES) or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ContractError(f"ratios must be {len(SPLIT_NAMES)} non-negative values")
    groups = sorted({r.source_image_id for r in records})
    rng = np.random.default_rng(seed)
    rng.shuffle(groups)
    total = len(groups)
    exact = [total * r / sum(ratios) for r in ratios]
    counts = [math.floor(e) for e in exact]
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in range(total - sum(counts)):
        counts[remainders[i % len(ratios)]] += 1
    assignment: dict[str, str] = {}
    cursor = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for key in groups[cursor:cursor + count]:
            assignment[key] = name
        cursor += count
    return assignment


def split_records(records, assignment) -> dict[str, list[ObjectRecord]]:
    out = {name: [] for name in SPLIT_NAMES}
    for r in records:
        if r.source_image_id not in assignment:
            raise ValidationError(
                f"object {r.object_id!r}: source image {r.source_image_id!r} "
                "missing from split assignment"
            )
        out[assignment[r.source_image_id]].append(r)
    return out


def _load_image(record: ObjectRecord) -> np.ndarray:
    try:
        with Image.open(record.image_path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataIOError(
            f"cannot read image for object {record.object_id!r}: {exc}",
            object_id=record.object_id,
        ) from exc


def preprocess(record: ObjectRecord, target_size: int) -> np.ndarray:
    """Crop to bbox, bilinear-resize to S x S, map to (x/255 - 0.5) / 0.5.

    Returns float32 [3, S, S].  The crop uses integer pixel coordinates;
    the resize uses the half-pixel convention.
    """
    image = _load_image(record)
    h, w = image.shape[:2]
    x1, y1, x2, y2 = (int(v) for v in record.bbox)
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        raise ValidationError(
            f"object {record.object_id!r}: bbox {record.bbox} exceeds image {w}x{h}"
        )
    crop = image[y1:y2, x1:x2]
    resized = bilinear_resize_2d(crop, target_size, target_size)
    scaled = resized / 255.0
    normalized = (scaled - PREPROCESS_MEAN) / PREPROCESS_STD
    return normalized.transpose(2, 0, 1).astype(np.float32)


@dataclass
class ArrayDataset:
    """Preprocessed crops plus labels, ready for batched training."""

    images: np.ndarray  # [n, 3, S, S] float32
    jrd: np.ndarray  # [n] int64
    image_ids: list[str]
    object_ids: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(records, target_size: int) -> ArrayDataset:
    if not records:
        raise ContractError("load_dataset on empty records")
    images = np.stack([preprocess(r, target_size) for r in records])
    jrd = np.array([r.jrd for r in records], dtype=np.int64)
    return ArrayDataset(
        images=images,
        jrd=jrd,
        image_ids=[r.source_image_id for r in records],
        object_ids=[r.object_id for r in records],
    )


# -- synthetic data ---------------------------------------------------------

SYNTH_SCENE_SIZE = 192

SYNTH_BASE_GRAY = 128


def synth_label(t: float) -> int:
    """Texture strength t in [0, 1] -> QP label; floor(x + 0.5) rounds half up."""
    return int(np.clip(math.floor(20.0 + 30.0 * t + 0.5), 0, N_QP - 1))


def _render_object(scene: np.ndarray, bbox, t: float, rng) -> None:
    """Paint a rectangle whose brightness and 4x4 block noise encode t."""
    x1, y1, x2, y2 = bbox
    h, w = y2 - y1, x2 - x1
    brightness = 208.0 - 160.0 * t
    amplitude = 10.0 + 22.0 * t
    blocks = rng.uniform(-1.0, 1.0, size=(math.ceil(h / 4), math.ceil(w / 4)))
    noise = np.repeat(np.repeat(blocks, 4, axis=0), 4, axis=1)[:h, :w]
    patch = np.clip(brightness + amplitude * noise, 0, 255)
    scene[y1:y2, x1:x2, :] = patch[:, :, None]


def synth_dataset(n: int, seed: int, out_dir) -> tuple[list[ObjectRecord], dict[str, float]]:
    """Generate n objects across scenes of 1-2 objects each.

    Writes PNG scenes under out_dir/images and returns (records, textures)
    where textures maps object_id -> t, enough to recompute every label.
    """
    if n < 1:
        raise ContractError(f"synth_dataset needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    records: list[ObjectRecord] = []
    textures: dict[str, float] = {}
    scene_idx = 0
    while len(records) < n:
        image_id = f"scene_{scene_idx:05d}"
        scene = np.full(
            (SYNTH_SCENE_SIZE, SYNTH_SCENE_SIZE, 3), SYNTH_BASE_GRAY, dtype=np.float64
        )
        want = min(int(rng.integers(1, 3)), n - len(records))
        placed: list[tuple] = []
        for k in range(want):
            bbox = _sample_bbox(rng, placed)
            if bbox is None:
                break
            placed.append(bbox)
            t = float(rng.uniform(0.0, 1.0))
            _render_object(scene, bbox, t, rng)
            object_id = f"{image_id}_obj{k}"
            path = images_dir / f"{image_id}.png"
            records.append(
                ObjectRecord(
                    object_id=object_id,
                    source_image_id=image_id,
                    image_path=str(path),
                    bbox=bbox,
                    jrd=synth_label(t),
                    category="synthetic",
                )
            )
            textures[object_id] = t
        Image.fromarray(np.rint(scene).astype(np.uint8)).save(
            images_dir / f"{image_id}.png"
        )
        scene_idx += 1
    return records, textures


def _sample_bbox(rng, placed, tries: int = 20):
    """A random box in the scene that overlaps none of ``placed``."""
    for _ in range(tries):
        side_x = int(rng.integers(24, 121))
        side_y = int(rng.integers(24, 121))
        x1 = int(rng.integers(0, SYNTH_SCENE_SIZE - side_x + 1))
        y1 = int(rng.integers(0, SYNTH_SCENE_SIZE - side_y + 1))
        bbox = (x1, y1, x1 + side_x, y1 + side_y)
        if all(
            bbox[2] <= p[0] or p[2] <= bbox[0] or bbox[3] <= p[1] or p[3] <= bbox[1]
            for p in placed
        ):
            return bbox
    return None
