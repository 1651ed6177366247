"""Media normalization, collection filtering, and project partitioning.

Every kept image ends up as a lossless 512-px-wide raster with
proportional height; animated and video sources contribute one
reproducibly chosen frame.  Collections are excluded when their media
is entirely duplicated, they hold fewer than 500 tokens, or their
metadata carries no semantic content, and the survivors are split
80:5:15 into train/val/test with the project as the unit of division
so look-alike tokens never straddle splits.
"""

from __future__ import annotations

import hashlib
import io
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import svg
from .errors import NftkitError
from .prng import generator

__all__ = [
    "STANDARD_WIDTH",
    "RESAMPLING_KERNEL",
    "MIN_TOKENS",
    "DEFAULT_RATIOS",
    "StdImage",
    "CollectionStats",
    "CollectionVerdict",
    "SplitAssignment",
    "standardize_image",
    "select_frame",
    "filter_collection",
    "partition",
    "content_hash",
    "UndecodableMedia",
    "ZeroDimension",
    "NoFrames",
    "TooFewCollections",
]

STANDARD_WIDTH = 512
RESAMPLING_KERNEL = "bicubic"
MIN_TOKENS = 500
DEFAULT_RATIOS = (0.80, 0.05, 0.15)
SPLITS = ("train", "val", "test")


class UndecodableMedia(NftkitError):
    """Bytes are not decodable as any supported media format."""


class ZeroDimension(NftkitError):
    """Source media has a zero-sized axis."""


class NoFrames(NftkitError):
    """Animated media without a single frame."""


class TooFewCollections(NftkitError):
    """Partitioning needs at least three collections."""


@dataclass(frozen=True)
class StdImage:
    """8-bit RGB(A) raster at the standard width."""

    pixels: np.ndarray
    source_format: str

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (3, 4):
            raise ValueError(f"expected HxWx3 or HxWx4, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_pil(self) -> Image.Image:
        mode = "RGBA" if self.pixels.shape[2] == 4 else "RGB"
        return Image.fromarray(self.pixels, mode=mode)

    def save_png(self, path: str | Path) -> None:
        self.to_pil().save(path, format="PNG")


def content_hash(std: StdImage) -> str:
    """Hash of the decoded RGBA raster, so re-encoded covers still collide."""
    rgba = std.pixels
    if rgba.shape[2] == 3:
        rgba = np.dstack([rgba, np.full(rgba.shape[:2], 255, np.uint8)])
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(rgba).tobytes())
    return h.hexdigest()


def _target_size(w: int, h: int, width: int) -> tuple[int, int]:
    if w <= 0 or h <= 0:
        raise ZeroDimension(f"source is {w}x{h}")
    return width, max(1, round(width * h / w))


def _resize(img: Image.Image, width: int) -> np.ndarray:
    if img.mode not in ("RGB", "RGBA"):
        img = img.convert("RGBA" if "A" in img.mode or "P" in img.mode else "RGB")
    tw, th = _target_size(img.width, img.height, width)
    if (img.width, img.height) != (tw, th):
        img = img.resize((tw, th), Image.Resampling.BICUBIC)
    return np.asarray(img)


def _sniff(raw: bytes, hint: str | None) -> str:
    head = raw[:256].lstrip()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return "png"
    if raw[:3] == b"\xff\xd8\xff":
        return "jpg"
    if raw[:4] == b"RIFF" and raw[8:12] == b"WEBP":
        return "webp"
    if raw[:6] in (b"GIF87a", b"GIF89a"):
        return "gif"
    if len(raw) > 11 and raw[4:8] == b"ftyp":
        return "mp4"
    if head.startswith(b"<?xml") or head.startswith(b"<svg") or b"<svg" in raw[:2048]:
        return "svg"
    if hint:
        return hint.lower().lstrip(".")
    raise UndecodableMedia("unrecognized media container")


def _mp4_frames(raw: bytes) -> list[np.ndarray]:
    import cv2

    with tempfile.NamedTemporaryFile(suffix=".mp4") as tmp:
        tmp.write(raw)
        tmp.flush()
        cap = cv2.VideoCapture(tmp.name)
        frames = []
        try:
            while True:
                ok, frame = cap.read()
                if not ok:
                    break
                frames.append(frame[:, :, ::-1].copy())  # BGR -> RGB
        finally:
            cap.release()
    return frames


def _pil_frames(img: Image.Image) -> int:
    return getattr(img, "n_frames", 1)


def select_frame(raw: bytes, seed: int) -> np.ndarray:
    """Pick one representative frame of animated media, reproducibly.

    The frame index is a uniform draw keyed by ``seed``; recording the
    seed in the manifest makes the choice repeatable.
    """
    fmt = _sniff(raw, None)
    if fmt == "mp4":
        frames = _mp4_frames(raw)
        if not frames:
            raise NoFrames("video decodes to zero frames")
        idx = int(generator("frame", seed).integers(0, len(frames)))
        return frames[idx]
    try:
        img = Image.open(io.BytesIO(raw))
        n = _pil_frames(img)
        if n < 1:
            raise NoFrames("zero frames")
        idx = int(generator("frame", seed).integers(0, n))
        img.seek(idx)
        frame = img.convert("RGBA" if "A" in img.mode or img.mode == "P" else "RGB")
        return np.asarray(frame)
    except UnidentifiedImageError as exc:
        raise UndecodableMedia(str(exc)) from exc


def standardize_image(
    raw: bytes,
    format_hint: str | None = None,
    *,
    frame_seed: int = 0,
    width: int = STANDARD_WIDTH,
) -> StdImage:
    """Normalize any supported media to the standard-width raster.

    Static images resize bicubically to ``width`` with proportional
    height; GIF/MP4 (and other animations) go through
    :func:`select_frame` first; SVG rasterizes directly at target
    width.  Applying this to its own PNG output is a no-op.
    """
    fmt = _sniff(raw, format_hint)
    if fmt == "svg":
        if not svg.available():
            raise UndecodableMedia("SVG input but librsvg is not available")
        try:
            pixels = svg.rasterize(raw, width)
        except ValueError as exc:
            raise UndecodableMedia(f"svg: {exc}") from exc
        return StdImage(pixels, "svg")
    if fmt == "mp4":
        frame = select_frame(raw, frame_seed)
        if frame.shape[0] == 0 or frame.shape[1] == 0:
            raise ZeroDimension(f"frame is {frame.shape[1]}x{frame.shape[0]}")
        img = Image.fromarray(frame)
        return StdImage(_resize(img, width), "mp4")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise UndecodableMedia(str(exc)) from exc
    source_format = (img.format or fmt).lower()
    if _pil_frames(img) > 1:
        frame = select_frame(raw, frame_seed)
        return StdImage(_resize(Image.fromarray(frame), width), source_format)
    return StdImage(_resize(img, width), source_format)


@dataclass(frozen=True)
class CollectionStats:
    """Facts the exclusion filters need, per collection."""

    collection: str
    token_count: int
    media_hashes: tuple[str, ...]
    metadata_present: int  # tokens with a metadata file
    semantic_tokens: int  # tokens whose metadata yields >= 1 attribute


@dataclass(frozen=True)
class CollectionVerdict:
    collection: str
    kept: bool
    reasons: tuple[str, ...]
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kept != (len(self.reasons) == 0):
            raise ValueError("kept must be true exactly when reasons is empty")


def filter_collection(
    stats: CollectionStats, *, min_tokens: int = MIN_TOKENS
) -> CollectionVerdict:
    """Apply the three exclusion rules; borderline cases get a note.

    A collection is dropped when all media hashes are identical, when
    it has fewer than ``min_tokens`` tokens, or when no token carries
    semantic metadata.
    """
    reasons: list[str] = []
    notes: list[str] = []
    if stats.token_count < min_tokens:
        reasons.append("TooFewTokens")
    if stats.token_count >= 2 and len(set(stats.media_hashes)) == 1:
        reasons.append("AllDuplicateMedia")
    if stats.metadata_present == 0:
        reasons.append("MissingMetadata")
    elif stats.semantic_tokens == 0:
        reasons.append("NoSemanticContent")
    elif stats.semantic_tokens < stats.token_count / 2:
        notes.append(
            f"only {stats.semantic_tokens}/{stats.token_count} tokens carry "
            "semantic metadata; review before keeping"
        )
    return CollectionVerdict(
        stats.collection, kept=not reasons, reasons=tuple(reasons), notes=tuple(notes)
    )


@dataclass(frozen=True)
class SplitAssignment:
    """Each collection's split, a pure function of (sorted ids, seed)."""

    assignment: dict[str, str]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    counts: dict[str, int] = field(default_factory=dict)

    def split_of(self, collection: str) -> str:
        return self.assignment[collection]


def partition(
    collections: Sequence[str],
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> SplitAssignment:
    """Shuffle collections and cut train/val by floor, test absorbs the rest.

    1000 collections at the default ratios give exactly 800/50/150.
    """
    ids = sorted(set(collections))
    if len(ids) != len(collections):
        raise ValueError("duplicate collection ids")
    if len(ids) < 3:
        raise TooFewCollections(f"need >= 3 collections, got {len(ids)}")
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be 3 values summing to 1, got {ratios}")
    order = generator("partition", seed).permutation(len(ids))
    shuffled = [ids[int(i)] for i in order]
    p = len(ids)
    n_train = math.floor(ratios[0] * p)
    n_val = math.floor(ratios[1] * p)
    n_test = p - n_train - n_val
    assignment: dict[str, str] = {}
    for pos, cid in enumerate(shuffled):
        if pos < n_train:
            assignment[cid] = "train"
        elif pos < n_train + n_val:
            assignment[cid] = "val"
        else:
            assignment[cid] = "test"
    counts = {"train": n_train, "val": n_val, "test": n_test}
    return SplitAssignment(assignment, seed, tuple(ratios), counts)
