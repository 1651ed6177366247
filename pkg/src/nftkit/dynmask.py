"""Dynamically masked training pairs.

Before a training pair is consumed, each of its recoverable components
is blanked with probability ``p`` and the matching caption phrase is
deleted, producing a pair that lacks the same local pixels and the
same descriptive words.  Plans come from a counter-based generator
keyed by (seed, epoch, token), so any pair is reproducible in
isolation and a worker pool changes throughput, never content.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .components import ComponentLibrary, GeometryMismatch, Mask, load_library
from .errors import NftkitError
from .manifest import TokenRecord, read_manifest
from .metadata import Caption, TraitKey, remove_trait
from .prng import derive_key, generator
from .standardize import StdImage

__all__ = [
    "MaskPolicy",
    "MaskPlan",
    "AugmentedPair",
    "SkipRecord",
    "plan_mask",
    "apply_mask",
    "augment_pair",
    "augment_stream",
    "MissingComponentAsset",
]

DEFAULT_P = 0.5


class MissingComponentAsset(NftkitError):
    """Plan names a trait the component library does not hold."""


@dataclass(frozen=True)
class MaskPolicy:
    """How aggressively to mask.

    ``independent`` mode draws a Bernoulli(p) per component; ``single``
    masks exactly one uniformly chosen component with probability p.
    """

    p: float = DEFAULT_P
    fill: tuple[int, int, int] = (0, 0, 0)
    per_epoch_reseed: bool = True
    seed: int = 0
    mode: str = "independent"

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.mode not in ("independent", "single"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class MaskPlan:
    token_id: int
    masked_traits: tuple[TraitKey, ...]
    draw_seed: int


@dataclass(frozen=True)
class AugmentedPair:
    image: StdImage
    caption: Caption
    plan: MaskPlan


@dataclass(frozen=True)
class SkipRecord:
    collection: str
    token_id: int
    reason: str


def plan_mask(
    token: TokenRecord,
    library: ComponentLibrary,
    policy: MaskPolicy,
    epoch: int = 0,
) -> MaskPlan:
    """Decide which of the token's components this epoch masks.

    One uniform draw happens per attribute (in attribute order), so a
    trait's inclusion does not depend on which other traits happen to
    have recovered components.
    """
    effective_epoch = epoch if policy.per_epoch_reseed else 0
    key_parts = ("dynmask", policy.seed, effective_epoch, token.collection, token.token_id)
    rng = generator(*key_parts)
    draws = rng.random(len(token.attributes) + 1)
    maskable = [
        (i, attr.key)
        for i, attr in enumerate(token.attributes)
        if library.get(attr.key) is not None
    ]
    masked: tuple[TraitKey, ...]
    if policy.mode == "single":
        if maskable and draws[len(token.attributes)] < policy.p:
            pick = int(rng.integers(0, len(maskable)))
            masked = (maskable[pick][1],)
        else:
            masked = ()
    else:
        masked = tuple(key for i, key in maskable if draws[i] < policy.p)
    return MaskPlan(token.token_id, masked, derive_key(*key_parts) & 0xFFFFFFFFFFFFFFFF)


def apply_mask(
    image: StdImage, masks: Iterable[Mask], fill: tuple[int, int, int] = (0, 0, 0)
) -> StdImage:
    """Fill the union of the mask regions; overlaps fill once."""
    union: np.ndarray | None = None
    for mask in masks:
        if mask.shape != (image.height, image.width):
            raise GeometryMismatch(
                f"mask {mask.shape} vs image {(image.height, image.width)}"
            )
        union = mask.bitmap.copy() if union is None else (union | mask.bitmap)
    if union is None or not union.any():
        return image
    pixels = image.pixels.copy()
    pixels[union, :3] = np.asarray(fill, dtype=np.uint8)
    if pixels.shape[2] == 4:
        pixels[union, 3] = 255
    return StdImage(pixels, image.source_format)


def augment_pair(
    token: TokenRecord,
    library: ComponentLibrary,
    plan: MaskPlan,
    policy: MaskPolicy,
    *,
    image: StdImage | None = None,
    root: str | Path | None = None,
) -> AugmentedPair:
    """Produce the masked image and the correspondingly reduced caption.

    ``image`` may be passed directly; otherwise the token's image is
    loaded relative to ``root``.
    """
    if image is None:
        base = Path(root) if root is not None else Path(".")
        src = np.asarray(Image.open(base / token.image))
        image = StdImage(src, "png")
    masks = []
    for key in plan.masked_traits:
        asset = library.get(key)
        if asset is None:
            raise MissingComponentAsset(f"{key!r} not in library")
        masks.append(asset.mask)
    out_image = apply_mask(image, masks, policy.fill)
    caption = token.caption
    for key in plan.masked_traits:
        caption = remove_trait(caption, key)
    return AugmentedPair(out_image, caption, plan)


def augment_stream(
    manifest_path: str | Path,
    library_root: str | Path,
    policy: MaskPolicy,
    epoch: int = 0,
    *,
    split: str = "train",
    skip_sink: list[SkipRecord] | None = None,
) -> Iterator[tuple[TokenRecord, AugmentedPair]]:
    """Yield one augmented pair per training token, in manifest order.

    Tokens whose collection has no component library pass through
    unmasked; unreadable tokens are recorded in ``skip_sink`` and the
    stream continues.
    """
    manifest_path = Path(manifest_path)
    library_root = Path(library_root)
    _, records = read_manifest(manifest_path)
    libraries: dict[str, ComponentLibrary | None] = {}
    for rec in records:
        if split and rec.split != split:
            continue
        if rec.collection not in libraries:
            lib_dir = library_root / rec.collection
            try:
                libraries[rec.collection] = load_library(lib_dir)
            except (OSError, ValueError, KeyError):
                libraries[rec.collection] = None
        library = libraries[rec.collection]
        try:
            src = np.asarray(Image.open(manifest_path.parent / rec.image))
            image = StdImage(src, "png")
            if library is None:
                # no recovered components for this collection: pass through
                yield rec, AugmentedPair(image, rec.caption, MaskPlan(rec.token_id, (), 0))
                continue
            plan = plan_mask(rec, library, policy, epoch)
            yield rec, augment_pair(
                rec, library, plan, policy, image=image
            )
        except (OSError, NftkitError, ValueError) as exc:
            if skip_sink is not None:
                skip_sink.append(SkipRecord(rec.collection, rec.token_id, str(exc)))
