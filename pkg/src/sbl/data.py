"""Datasets: synthetic shape scenes, on-disk formats, and large-image chipping.

Images are (H, W, 3) float32 arrays in [0, 1], quantized to 8-bit steps so a
write/read roundtrip through PNG is exact. Boxes follow the pixel-extent
convention: x_max is one past the last covered column, so a box's width equals
the number of columns the object touches.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import iou_matrix


class DataError(Exception):
    """Raised for malformed annotation files or inconsistent dataset contents."""


DOTA_CLASS_NAMES = (
    "plane", "baseball-diamond", "bridge", "ground-track-field", "small-vehicle",
    "large-vehicle", "ship", "tennis-court", "basketball-court", "storage-tank",
    "soccer-ball-field", "roundabout", "harbor", "swimming-pool", "helicopter",
)

_SHAPE_NAMES = ("rect", "disk", "tri")

_PALETTE = (
    (0.90, 0.15, 0.10),
    (0.10, 0.85, 0.20),
    (0.15, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.90, 0.20, 0.90),
    (0.10, 0.90, 0.90),
)

ANNOTATION_FORMAT = "sbl-annotations"
ANNOTATION_VERSION = 1


def quantize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Snap float pixels to the 8-bit grid used by the PNG encoding."""
    u8 = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / np.float32(255.0)


@dataclass(frozen=True)
class AnnotatedImage:
    """One image with its ground-truth boxes, labels, and difficult flags."""

    image_id: str
    pixels: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    difficult: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DataError(f"{self.image_id}: pixels must be (H, W, 3), got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise DataError(f"{self.image_id}: pixel values must lie in [0, 1]")
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        difficult = np.asarray(self.difficult, dtype=bool).reshape(-1)
        if not (boxes.shape[0] == labels.shape[0] == difficult.shape[0]):
            raise DataError(
                f"{self.image_id}: {boxes.shape[0]} boxes, {labels.shape[0]} labels, "
                f"{difficult.shape[0]} difficult flags"
            )
        h, w = pixels.shape[:2]
        if boxes.size:
            if np.any(boxes[:, 0] > boxes[:, 2]) or np.any(boxes[:, 1] > boxes[:, 3]):
                raise DataError(f"{self.image_id}: box with negative extent")
            if boxes.min() < 0 or np.any(boxes[:, 0::2] > w) or np.any(boxes[:, 1::2] > h):
                raise DataError(f"{self.image_id}: box outside image bounds {w}x{h}")
        if labels.size and labels.min() < 0:
            raise DataError(f"{self.image_id}: negative class label")
        for arr in (pixels, boxes, labels, difficult):
            arr.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "difficult", difficult)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class ImageChip:
    """A window cut from a larger image, remembering where it came from."""

    pixels: np.ndarray
    source_id: str
    offset: tuple[int, int]  # (x, y) of the chip origin in the source image


@dataclass
class Dataset:
    """An ordered image collection plus the class-name table indexing labels."""

    class_names: tuple[str, ...]
    images: list[AnnotatedImage]

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError(f"duplicate class names: {self.class_names}")
        for img in self.images:
            if img.labels.size and img.labels.max() >= len(self.class_names):
                raise DataError(
                    f"{img.image_id}: label {int(img.labels.max())} exceeds class table "
                    f"of size {len(self.class_names)}"
                )

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, idx: int) -> AnnotatedImage:
        return self.images[idx]


def corpus_fingerprint(dataset: Dataset) -> str:
    """Content hash of a dataset: class table, ids, pixels, and annotations.

    Images are hashed in image_id order so the fingerprint is independent of
    load order.
    """
    digest = hashlib.sha256()
    digest.update(json.dumps(list(dataset.class_names)).encode())
    for img in sorted(dataset.images, key=lambda im: im.image_id):
        digest.update(img.image_id.encode())
        u8 = np.clip(np.rint(img.pixels.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        digest.update(u8.tobytes())
        digest.update(np.ascontiguousarray(img.boxes).tobytes())
        digest.update(np.ascontiguousarray(img.labels).tobytes())
        digest.update(np.ascontiguousarray(img.difficult.astype(np.uint8)).tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scene generator settings.

    complexity is the background-complexity knob in [0, 1]: it scales both the
    count of unannotated low-contrast distractor shapes and the additive noise
    level, while leaving the annotated objects unchanged. complexity_choices,
    when given, draws a per-image complexity uniformly from the listed values
    instead of using the single global value.
    """

    num_images: int = 100
    image_size: int = 128
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (12, 36)
    complexity: float = 0.5
    complexity_choices: tuple[float, ...] | None = None
    clutter_max: int = 10
    noise_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_images <= 0:
            raise ValueError("num_images must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not 1 <= self.num_classes <= len(_PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(_PALETTE)}]")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range: {self.objects_per_image}")
        slo, shi = self.size_range
        if not 4 <= slo <= shi or shi > self.image_size - 4:
            raise ValueError(f"size_range {self.size_range} does not fit image_size {self.image_size}")
        for lam in (self.complexity, *(self.complexity_choices or ())):
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"complexity values must lie in [0, 1], got {lam}")
        if self.clutter_max < 0 or self.noise_scale < 0:
            raise ValueError("clutter_max and noise_scale must be non-negative")


def _shape_mask(kind: int, size: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Rasterize one primitive into a (size, size) bool mask.

    Every primitive exactly fills the pixel block [x0, x0+w) x [y0, y0+h):
    its tight extents equal that block, which is what gets annotated.
    """
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:  # rectangle
        mask[y0:y0 + h, x0:x0 + w] = True
    elif kind == 1:  # disk (w == h)
        r = (w - 1) / 2.0
        cx, cy = x0 + r, y0 + r
        yy, xx = np.ogrid[:size, :size]
        mask[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r + 1e-9] = True
    else:  # upward triangle
        cx = x0 + (w - 1) / 2.0
        for i in range(h):
            width_i = max(1, int(round((i + 1) / h * w)))
            left = int(round(cx - (width_i - 1) / 2.0))
            left = min(max(left, x0), x0 + w - width_i)
            mask[y0 + i, left:left + width_i] = True
        mask[y0 + h - 1, x0:x0 + w] = True  # base row spans the full extent
    return mask


def _mask_extent_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _boxes_clash(candidate: np.ndarray, placed: list[np.ndarray], margin: float = 2.0) -> bool:
    if not placed:
        return False
    grown = candidate + np.array([-margin, -margin, margin, margin])
    return bool(np.any(iou_matrix(grown[None, :], np.stack(placed)) > 0))


def synthesize_dataset(config: SynthConfig) -> Dataset:
    """Render a deterministic synthetic detection dataset.

    Scenes are flat backgrounds carrying bright annotated shapes (class id
    selects the primitive and color), plus complexity-controlled low-contrast
    clutter and Gaussian pixel noise. Annotated boxes are the exact pixel
    extents of the rendered shapes; clutter is never annotated.
    """
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    class_names = tuple(
        _SHAPE_NAMES[i] if i < len(_SHAPE_NAMES) else f"class{i}" for i in range(config.num_classes)
    )
    images: list[AnnotatedImage] = []
    for index in range(config.num_images):
        if config.complexity_choices:
            lam = float(rng.choice(np.asarray(config.complexity_choices, dtype=np.float64)))
        else:
            lam = config.complexity
        base = rng.uniform(0.25, 0.40)
        bg = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        img = np.ones((size, size, 3), dtype=np.float64) * bg

        # Low-contrast clutter first, so real objects always draw on top.
        for _ in range(int(round(lam * config.clutter_max))):
            s = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            x0 = int(rng.integers(0, size - s + 1))
            y0 = int(rng.integers(0, size - s + 1))
            kind = int(rng.integers(0, 3))
            color = np.clip(bg + rng.choice((-1, 1), size=3) * rng.uniform(0.08, 0.20, size=3), 0.0, 1.0)
            img[_shape_mask(kind, size, x0, y0, s, s)] = color

        count = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
        placed: list[np.ndarray] = []
        boxes, labels = [], []
        for _ in range(count):
            for _attempt in range(40):
                cls = int(rng.integers(0, config.num_classes))
                kind = cls % 3
                w = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
                h = w if kind == 1 else int(rng.integers(config.size_range[0], config.size_range[1] + 1))
                x0 = int(rng.integers(1, size - w))
                y0 = int(rng.integers(1, size - h))
                candidate = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
                if _boxes_clash(candidate, placed):
                    continue
                mask = _shape_mask(kind, size, x0, y0, w, h)
                color = np.clip(np.asarray(_PALETTE[cls]) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
                img[mask] = color
                box = _mask_extent_box(mask)
                placed.append(box)
                boxes.append(box)
                labels.append(cls)
                break
        if config.noise_scale * lam > 0:
            img = img + rng.normal(0.0, config.noise_scale * lam, size=img.shape)
        pixels = quantize_pixels(np.clip(img, 0.0, 1.0))
        images.append(
            AnnotatedImage(
                image_id=f"img_{index:05d}",
                pixels=pixels,
                boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                labels=np.asarray(labels, dtype=np.int64),
                difficult=np.zeros(len(labels), dtype=bool),
                meta={"complexity": lam},
            )
        )
    return Dataset(class_names=class_names, images=images)


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    """Write a dataset to out_dir: images/*.png, annotations.jsonl, manifest.json."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    records = []
    for img in dataset.images:
        u8 = np.clip(np.rint(img.pixels.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(u8).save(os.path.join(images_dir, f"{img.image_id}.png"))
        records.append(
            {
                "image_id": img.image_id,
                "file": f"images/{img.image_id}.png",
                "boxes": [[float(v) for v in row] for row in img.boxes],
                "labels": [dataset.class_names[i] for i in img.labels],
                "difficult": [bool(v) for v in img.difficult],
                "meta": img.meta,
            }
        )
    header = {
        "format": ANNOTATION_FORMAT,
        "version": ANNOTATION_VERSION,
        "class_names": list(dataset.class_names),
    }
    with open(os.path.join(out_dir, "annotations.jsonl"), "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "format": "sbl-dataset",
        "version": ANNOTATION_VERSION,
        "num_images": len(dataset.images),
        "class_names": list(dataset.class_names),
        "corpus_fingerprint": corpus_fingerprint(dataset),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_image_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"{path}: image file not found")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def _load_native(root: str) -> Dataset:
    ann_path = os.path.join(root, "annotations.jsonl")
    if not os.path.exists(ann_path):
        raise DataError(f"{ann_path}: annotation file not found")
    with open(ann_path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{ann_path}: empty annotation file")

    def fail(line_no: int, msg: str):
        raise DataError(f"{ann_path}:{line_no}: {msg}")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"invalid JSON: {exc}")
    if not isinstance(header, dict) or header.get("format") != ANNOTATION_FORMAT:
        fail(1, f"expected header with format={ANNOTATION_FORMAT!r}")
    if header.get("version") != ANNOTATION_VERSION:
        fail(1, f"unsupported version {header.get('version')}")
    class_names = tuple(header.get("class_names", ()))
    if not class_names:
        fail(1, "header missing class_names")
    name_to_id = {name: i for i, name in enumerate(class_names)}

    images = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(line_no, f"invalid JSON: {exc}")
        for key in ("image_id", "file", "boxes", "labels", "difficult"):
            if key not in rec:
                fail(line_no, f"record missing {key!r}")
        labels = []
        for name in rec["labels"]:
            if name not in name_to_id:
                fail(line_no, f"unknown class {name!r}; table is {list(class_names)}")
            labels.append(name_to_id[name])
        if len(rec["boxes"]) != len(labels) or len(rec["difficult"]) != len(labels):
            fail(line_no, "boxes, labels, and difficult must have equal length")
        pixels = _load_image_file(os.path.join(root, rec["file"]))
        try:
            images.append(
                AnnotatedImage(
                    image_id=rec["image_id"],
                    pixels=pixels,
                    boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                    labels=np.asarray(labels, dtype=np.int64),
                    difficult=np.asarray(rec["difficult"], dtype=bool),
                    meta=dict(rec.get("meta", {})),
                )
            )
        except DataError as exc:
            fail(line_no, str(exc))
    return Dataset(class_names=class_names, images=images)


def _load_dota_hbb(root: str, class_names: tuple[str, ...]) -> Dataset:
    """Read horizontal-box annotations stored as 8-corner quads.

    Expects root/images/*.png and root/labelTxt/*.txt, one label file per
    image. Each data line is 8 corner floats, a category, and a difficult
    flag; quads collapse to their min/max hull and are clipped to the image.
    """
    label_dir = os.path.join(root, "labelTxt")
    if not os.path.isdir(label_dir):
        raise DataError(f"{label_dir}: labelTxt directory not found")
    name_to_id = {name: i for i, name in enumerate(class_names)}
    images = []
    for fname in sorted(os.listdir(label_dir)):
        if not fname.endswith(".txt"):
            continue
        stem = fname[:-4]
        label_path = os.path.join(label_dir, fname)
        pixels = _load_image_file(os.path.join(root, "images", stem + ".png"))
        h, w = pixels.shape[:2]
        boxes, labels, difficult = [], [], []
        with open(label_path) as fh:
            for line_no, line in enumerate(fh, start=1):
                text = line.strip()
                if not text or text.startswith(("imagesource", "gsd")):
                    continue
                parts = text.split()
                if len(parts) != 10:
                    raise DataError(
                        f"{label_path}:{line_no}: expected 8 coordinates, category, "
                        f"difficult flag; got {len(parts)} fields"
                    )
                try:
                    coords = [float(v) for v in parts[:8]]
                    diff = int(parts[9])
                except ValueError as exc:
                    raise DataError(f"{label_path}:{line_no}: {exc}") from None
                category = parts[8]
                if category not in name_to_id:
                    raise DataError(
                        f"{label_path}:{line_no}: unknown category {category!r}; "
                        f"table is {list(class_names)}"
                    )
                xs, ys = coords[0::2], coords[1::2]
                x0 = min(max(min(xs), 0.0), w)
                x1 = min(max(max(xs), 0.0), w)
                y0 = min(max(min(ys), 0.0), h)
                y1 = min(max(max(ys), 0.0), h)
                boxes.append([x0, y0, x1, y1])
                labels.append(name_to_id[category])
                difficult.append(bool(diff))
        images.append(
            AnnotatedImage(
                image_id=stem,
                pixels=pixels,
                boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                labels=np.asarray(labels, dtype=np.int64),
                difficult=np.asarray(difficult, dtype=bool),
            )
        )
    return Dataset(class_names=class_names, images=images)


def load_dataset(path: str, format: str = "native-json", class_names: tuple[str, ...] | None = None) -> Dataset:
    """Load a dataset directory in the given annotation format.

    Supported formats: "native-json" (the layout save_dataset writes) and
    "dota-hbb" (8-corner quads under labelTxt/, hulled to horizontal boxes).
    class_names overrides the dota-hbb class table; the native format carries
    its own table.
    """
    if format == "native-json":
        return _load_native(path)
    if format == "dota-hbb":
        return _load_dota_hbb(path, tuple(class_names) if class_names else DOTA_CLASS_NAMES)
    raise DataError(f"unknown annotation format {format!r}; supported: native-json, dota-hbb")


def _chip_starts(extent: int, chip_size: int, stride: int) -> list[int]:
    if extent <= chip_size:
        return [0]
    starts = list(range(0, extent - chip_size + 1, stride))
    if starts[-1] != extent - chip_size:
        starts.append(extent - chip_size)  # final chip shifts inward to stay in bounds
    return starts


def to_chips(pixels: np.ndarray, source_id: str, chip_size: int, overlap: int) -> list[ImageChip]:
    """Cut an image into overlapping square chips, padding small images with zeros."""
    if not 0 <= overlap < chip_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < chip_size, got {overlap}")
    pixels = np.asarray(pixels, dtype=np.float32)
    h, w = pixels.shape[:2]
    stride = chip_size - overlap
    chips = []
    for y0 in _chip_starts(h, chip_size, stride):
        for x0 in _chip_starts(w, chip_size, stride):
            window = pixels[y0:y0 + chip_size, x0:x0 + chip_size]
            if window.shape[0] < chip_size or window.shape[1] < chip_size:
                padded = np.zeros((chip_size, chip_size, 3), dtype=np.float32)
                padded[: window.shape[0], : window.shape[1]] = window
                window = padded
            chips.append(ImageChip(pixels=window, source_id=source_id, offset=(x0, y0)))
    return chips


def chip_image(image: AnnotatedImage, chip_size: int, overlap: int, min_area_fraction: float = 0.3) -> list[AnnotatedImage]:
    """Split an annotated image into chips, carrying boxes into chip coordinates.

    A ground-truth box lands in a chip when its clipped area is at least
    min_area_fraction of the original; smaller slivers are dropped. Chip ids
    are derived from the source id and the chip offset.
    """
    chips = to_chips(image.pixels, image.image_id, chip_size, overlap)
    out = []
    for chip in chips:
        ox, oy = chip.offset
        boxes, labels, difficult = [], [], []
        for box, label, diff in zip(image.boxes, image.labels, image.difficult):
            shifted = box - np.array([ox, oy, ox, oy], dtype=np.float64)
            clipped = np.array(
                [
                    min(max(shifted[0], 0.0), chip_size),
                    min(max(shifted[1], 0.0), chip_size),
                    min(max(shifted[2], 0.0), chip_size),
                    min(max(shifted[3], 0.0), chip_size),
                ]
            )
            area = max(clipped[2] - clipped[0], 0.0) * max(clipped[3] - clipped[1], 0.0)
            original = (box[2] - box[0]) * (box[3] - box[1])
            if original <= 0 or area < min_area_fraction * original or area <= 0:
                continue
            boxes.append(clipped)
            labels.append(int(label))
            difficult.append(bool(diff))
        out.append(
            AnnotatedImage(
                image_id=f"{image.image_id}_x{ox}_y{oy}",
                pixels=chip.pixels,
                boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                labels=np.asarray(labels, dtype=np.int64),
                difficult=np.asarray(difficult, dtype=bool),
                meta={"source_id": image.image_id, "offset": [ox, oy]},
            )
        )
    return out


def chip_dataset(dataset: Dataset, chip_size: int, overlap: int, min_area_fraction: float = 0.3) -> Dataset:
    """Apply chip_image to every image, keeping the class table."""
    images = []
    for img in dataset.images:
        images.extend(chip_image(img, chip_size, overlap, min_area_fraction))
    return Dataset(class_names=dataset.class_names, images=images)
