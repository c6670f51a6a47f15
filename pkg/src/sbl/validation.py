"""Input validation for the estimator API.

These helpers normalize user-facing inputs (image lists, box arrays, label
arrays) into the canonical dtypes the rest of the package expects, raising
ValueError with a concrete description when something is off.
"""

from __future__ import annotations

import numpy as np


def check_image(pixels, name: str = "image") -> np.ndarray:
    """Coerce one image to (H, W, 3) float32 in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name}: empty image")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{name}: pixel values must lie in [0, 1], found range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def check_images(X) -> list[np.ndarray]:
    """Coerce a sequence of images; a single 3-d array with matching sizes also works."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    try:
        items = list(X)
    except TypeError:
        raise ValueError(f"expected a sequence of images, got {type(X).__name__}") from None
    if not items:
        raise ValueError("expected at least one image, got an empty sequence")
    return [check_image(img, name=f"image {i}") for i, img in enumerate(items)]


def check_boxes(boxes, name: str = "boxes") -> np.ndarray:
    """Coerce to (G, 4) float64 corner boxes with non-negative extents."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"{name}: expected shape (G, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite coordinates")
    if np.any(arr[:, 0] > arr[:, 2]) or np.any(arr[:, 1] > arr[:, 3]):
        bad = int(np.flatnonzero((arr[:, 0] > arr[:, 2]) | (arr[:, 1] > arr[:, 3]))[0])
        raise ValueError(f"{name}: row {bad} has negative extent: {arr[bad].tolist()}")
    return arr


def check_labels(labels, num_boxes: int, num_classes: int | None = None, name: str = "labels") -> np.ndarray:
    """Coerce to (G,) int64 class ids; bounds-checked when num_classes is given."""
    arr = np.asarray(labels)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.all(as_int == arr):
            raise ValueError(f"{name}: class labels must be integers, got {arr.dtype}")
        arr = as_int
    arr = arr.astype(np.int64).reshape(-1)
    if arr.shape[0] != num_boxes:
        raise ValueError(f"{name}: {arr.shape[0]} labels for {num_boxes} boxes")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name}: negative class label {int(arr.min())}")
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        raise ValueError(
            f"{name}: class label {int(arr.max())} out of range for {num_classes} classes"
        )
    return arr


def check_detection_targets(y, num_images: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate per-image (boxes, labels) training targets."""
    try:
        items = list(y)
    except TypeError:
        raise ValueError(f"expected a sequence of (boxes, labels) pairs, got {type(y).__name__}") from None
    if len(items) != num_images:
        raise ValueError(f"got targets for {len(items)} images but {num_images} images")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, (tuple, list)) or len(item) != 2:
            raise ValueError(f"target {i}: expected a (boxes, labels) pair")
        boxes = check_boxes(item[0], name=f"target {i} boxes")
        labels = check_labels(item[1], boxes.shape[0], name=f"target {i} labels")
        out.append((boxes, labels))
    return out
