"""Per-image salience scores from a frozen feature extractor.

The raw salience of an image is the plain mean of one tap's activation grid
(mean over channels and spatial positions). Corpus-wide min/max statistics,
computed once before training, map raw scores into a configured weight band;
those weights later scale the classification loss. The extractor's weights are
fixed at construction and never reach any optimizer, so salience scores are
reproducible bit for bit.

Every feature extraction bumps a module-level counter, which lets tests prove
that inference paths perform zero salience work.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np
import torch
import torch.nn.functional as F

from .data import AnnotatedImage, Dataset, corpus_fingerprint

TAPS = ("C2", "C3", "C4", "C5")

_extraction_count = 0


class StaleStatsError(Exception):
    """Raised when salience statistics do not match the corpus or extractor."""


def salience_call_count() -> int:
    """Number of feature extractions since import (or the last reset)."""
    return _extraction_count


def reset_salience_call_count() -> None:
    global _extraction_count
    _extraction_count = 0


@dataclass(frozen=True)
class FeatureMap:
    """One tap's activation grid, shape (channels, height, width)."""

    tap: str
    values: np.ndarray


class FrozenExtractor:
    """A small fixed-weight convolution stack with four stride-2 stages.

    Stage outputs are tapped as C2 (highest resolution) through C5. Weights
    are drawn from a seeded generator at construction, are never trainable,
    and are fingerprinted so downstream statistics can detect a mismatched
    extractor. Input images are (H, W, 3) float arrays in [0, 1]; the
    extractor owns its preprocessing (shift to [-1, 1]).
    """

    TAPS = TAPS

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (8, 16, 32, 64)):
        if len(channels) != len(TAPS):
            raise ValueError(f"need {len(TAPS)} channel counts, got {channels}")
        self.seed = int(seed)
        self.channels = tuple(int(c) for c in channels)
        gen = torch.Generator().manual_seed(self.seed)
        self.weights: list[torch.Tensor] = []
        fan_in = 3
        for out in self.channels:
            w = torch.randn(out, fan_in, 3, 3, generator=gen, dtype=torch.float32)
            w = w * (2.0 / (fan_in * 9)) ** 0.5
            w.requires_grad_(False)
            self.weights.append(w)
            fan_in = out

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for w in self.weights:
            digest.update(str(tuple(w.shape)).encode())
            digest.update(w.numpy().tobytes())
        return digest.hexdigest()

    def features(self, image: np.ndarray) -> dict[str, FeatureMap]:
        """Run the frozen stack over one image and return all tapped grids."""
        global _extraction_count
        pixels = np.asarray(image, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {pixels.shape}")
        if pixels.size == 0:
            raise ValueError("empty image")
        _extraction_count += 1
        x = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
        x = x * 2.0 - 1.0
        out: dict[str, FeatureMap] = {}
        with torch.no_grad():
            for tap, w in zip(TAPS, self.weights):
                x = F.relu(F.conv2d(x, w, stride=2, padding=1))
                out[tap] = FeatureMap(tap=tap, values=x.squeeze(0).numpy().copy())
        return out

    def save_weights(self, path: str) -> None:
        arrays = {f"w{i}": w.numpy() for i, w in enumerate(self.weights)}
        np.savez(path, **arrays)

    @classmethod
    def from_weights(cls, path: str) -> "FrozenExtractor":
        """Build an extractor from externally supplied convolution weights."""
        with np.load(path) as data:
            arrays = [data[f"w{i}"] for i in range(len(data.files))]
        inst = cls.__new__(cls)
        inst.seed = -1
        inst.channels = tuple(a.shape[0] for a in arrays)
        if len(inst.channels) != len(TAPS):
            raise ValueError(f"weight file must hold {len(TAPS)} stages, got {len(arrays)}")
        inst.weights = [torch.from_numpy(np.asarray(a, dtype=np.float32)) for a in arrays]
        for w in inst.weights:
            w.requires_grad_(False)
        return inst


def estimate_salience(image: np.ndarray, extractor: FrozenExtractor, tap: str = "C2") -> float:
    """Raw salience: the mean activation of one extractor tap over the image."""
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}; valid taps: {TAPS}")
    feats = extractor.features(image)
    return float(np.mean(feats[tap].values, dtype=np.float64))


@dataclass(frozen=True)
class SalienceStats:
    """Corpus min/max per tap plus the target weight band and provenance hashes."""

    tap_stats: dict
    new_min: float
    new_max: float
    corpus_fingerprint: str
    extractor_fingerprint: str
    created_at: str

    def __post_init__(self):
        if not 0.0 <= self.new_min <= self.new_max:
            raise ValueError(f"weight band must satisfy 0 <= new_min <= new_max: {self.new_min}, {self.new_max}")
        for tap, (mn, mx) in self.tap_stats.items():
            if tap not in TAPS:
                raise ValueError(f"unknown tap {tap!r} in stats")
            if not (np.isfinite(mn) and np.isfinite(mx) and mn <= mx):
                raise ValueError(f"bad min/max for tap {tap}: ({mn}, {mx})")

    def to_dict(self) -> dict:
        return {
            "format": "sbl-salience-stats",
            "version": 1,
            "tap_stats": {tap: [mn, mx] for tap, (mn, mx) in sorted(self.tap_stats.items())},
            "new_min": self.new_min,
            "new_max": self.new_max,
            "corpus_fingerprint": self.corpus_fingerprint,
            "extractor_fingerprint": self.extractor_fingerprint,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SalienceStats":
        if payload.get("format") != "sbl-salience-stats":
            raise ValueError("not a salience statistics payload")
        return cls(
            tap_stats={tap: (float(mn), float(mx)) for tap, (mn, mx) in payload["tap_stats"].items()},
            new_min=float(payload["new_min"]),
            new_max=float(payload["new_max"]),
            corpus_fingerprint=payload["corpus_fingerprint"],
            extractor_fingerprint=payload["extractor_fingerprint"],
            created_at=payload["created_at"],
        )


def _timestamp() -> str:
    # Honors SOURCE_DATE_EPOCH so repeated runs serialize identically.
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _corpus_items(corpus) -> tuple[list[np.ndarray], str]:
    if isinstance(corpus, Dataset):
        return [img.pixels for img in corpus.images], corpus_fingerprint(corpus)
    images = [np.asarray(img.pixels if isinstance(img, AnnotatedImage) else img, dtype=np.float32) for img in corpus]
    digest = hashlib.sha256()
    for arr in images:
        u8 = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        digest.update(u8.tobytes())
    return images, digest.hexdigest()


def compute_stats(
    corpus,
    extractor: FrozenExtractor,
    taps: tuple[str, ...] = TAPS,
    new_min: float = 0.5,
    new_max: float = 1.0,
) -> SalienceStats:
    """Scan a corpus once and record per-tap raw salience minima and maxima.

    corpus may be a Dataset or a plain sequence of images. The returned stats
    are stamped with corpus and extractor fingerprints; consumers refuse stats
    whose fingerprints no longer match.
    """
    for tap in taps:
        if tap not in TAPS:
            raise ValueError(f"unknown tap {tap!r}; valid taps: {TAPS}")
    images, fingerprint = _corpus_items(corpus)
    if not images:
        raise ValueError("cannot compute salience statistics over an empty corpus")
    mins = {tap: np.inf for tap in taps}
    maxs = {tap: -np.inf for tap in taps}
    for pixels in images:
        feats = extractor.features(pixels)
        for tap in taps:
            raw = float(np.mean(feats[tap].values, dtype=np.float64))
            mins[tap] = min(mins[tap], raw)
            maxs[tap] = max(maxs[tap], raw)
    return SalienceStats(
        tap_stats={tap: (mins[tap], maxs[tap]) for tap in taps},
        new_min=float(new_min),
        new_max=float(new_max),
        corpus_fingerprint=fingerprint,
        extractor_fingerprint=extractor.fingerprint,
        created_at=_timestamp(),
    )


def normalize_salience(raw: float, stats: SalienceStats, tap: str = "C2") -> float:
    """Map a raw salience score into the stats' weight band.

    Stored minimum and maximum land exactly on new_min and new_max; scores
    outside the recorded range clamp to the band. A degenerate corpus whose
    min equals its max maps everything to new_max.
    """
    if tap not in stats.tap_stats:
        raise ValueError(f"stats carry no tap {tap!r}; available: {sorted(stats.tap_stats)}")
    mn, mx = stats.tap_stats[tap]
    if raw >= mx:
        return stats.new_max
    if raw <= mn:
        return stats.new_min
    t = (raw - mn) / (mx - mn)
    return t * (stats.new_max - stats.new_min) + stats.new_min


def check_stats_fresh(stats: SalienceStats, corpus, extractor: FrozenExtractor) -> None:
    """Raise StaleStatsError unless stats match this corpus and extractor."""
    _, fingerprint = _corpus_items(corpus)
    if stats.corpus_fingerprint != fingerprint:
        raise StaleStatsError(
            "salience statistics were computed on a different corpus "
            f"({stats.corpus_fingerprint[:12]} vs {fingerprint[:12]}); recompute them"
        )
    if stats.extractor_fingerprint != extractor.fingerprint:
        raise StaleStatsError(
            "salience statistics were computed with a different extractor "
            f"({stats.extractor_fingerprint[:12]} vs {extractor.fingerprint[:12]}); recompute them"
        )


def save_stats(stats: SalienceStats, path: str, force: bool = False) -> None:
    """Serialize stats as JSON; refuses to overwrite an existing file unless forced."""
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} already exists; pass force=True to overwrite")
    with open(path, "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stats(path: str) -> SalienceStats:
    with open(path) as fh:
        return SalienceStats.from_dict(json.load(fh))


@dataclass(frozen=True)
class RankEntry:
    image_id: str
    raw: float
    normalized: float


@dataclass(frozen=True)
class SalienceRanking:
    """Corpus ordered by raw salience, with band scores and a 50-bin histogram."""

    tap: str
    entries: tuple[RankEntry, ...]
    top: tuple[RankEntry, ...]
    bottom: tuple[RankEntry, ...]
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    saturated: bool


def rank_images(
    corpus,
    extractor: FrozenExtractor,
    tap: str = "C2",
    k: int = 10,
    stats: SalienceStats | None = None,
) -> SalienceRanking:
    """Order a corpus by raw salience and report the k most and least salient.

    When stats are given they must cover the tap and are used for the band
    scores; otherwise the corpus's own min/max are used. The distribution is
    flagged saturated when the two extreme histogram bins hold at least half
    the corpus (or the range is degenerate).
    """
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}; valid taps: {TAPS}")
    if isinstance(corpus, Dataset):
        ids = [img.image_id for img in corpus.images]
        pixel_list = [img.pixels for img in corpus.images]
    else:
        pixel_list = [np.asarray(getattr(img, "pixels", img), dtype=np.float32) for img in corpus]
        ids = [getattr(img, "image_id", f"img_{i:05d}") for i, img in enumerate(corpus)]
    if not ids:
        raise ValueError("cannot rank an empty corpus")
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must be in [1, {len(ids)}], got {k}")
    raws = np.array(
        [estimate_salience(pixels, extractor, tap) for pixels in pixel_list], dtype=np.float64
    )
    if stats is None:
        stats = SalienceStats(
            tap_stats={tap: (float(raws.min()), float(raws.max()))},
            new_min=0.5,
            new_max=1.0,
            corpus_fingerprint="",
            extractor_fingerprint=extractor.fingerprint,
            created_at=_timestamp(),
        )
    entries = tuple(
        RankEntry(image_id=ids[i], raw=float(raws[i]), normalized=normalize_salience(float(raws[i]), stats, tap))
        for i in sorted(range(len(ids)), key=lambda i: (-raws[i], ids[i]))
    )
    lo, hi = float(raws.min()), float(raws.max())
    degenerate = hi <= lo
    counts, edges = np.histogram(raws, bins=50, range=(lo, hi if not degenerate else lo + 1.0))
    saturated = bool(degenerate or (counts[0] + counts[-1]) >= 0.5 * len(ids))
    return SalienceRanking(
        tap=tap,
        entries=entries,
        top=entries[:k],
        bottom=entries[-k:],
        histogram_counts=counts,
        histogram_edges=edges,
        saturated=saturated,
    )
