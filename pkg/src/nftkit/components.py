"""Recover per-trait pixel layers by differencing and superposition.

Tokens of one collection that share a trait render that trait's layer
pixel-identically.  Sampling small groups of carriers and keeping the
pixels on which the whole group agrees yields a fragment of the layer;
unioning fragments over several rounds fills in regions that happened
to be occluded in one group.  A support threshold (pixels must agree
in at least ``min_support`` rounds) suppresses coincidental agreement,
e.g. tokens that happen to share a background color.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import NftkitError
from .metadata import TraitIndex, TraitKey
from .prng import generator

__all__ = [
    "Mask",
    "ComponentAsset",
    "SeparationConfig",
    "ComponentLibrary",
    "shared_mask",
    "separate_component",
    "separate_collection",
    "save_library",
    "load_library",
    "trait_hash",
    "GeometryMismatch",
    "InsufficientImages",
]


class GeometryMismatch(NftkitError):
    """Images involved in one comparison must share height and width."""


class InsufficientImages(NftkitError):
    """Fewer carriers than the per-round group size."""


@dataclass(frozen=True)
class Mask:
    """Boolean raster marking one component's pixels."""

    bitmap: np.ndarray

    def __post_init__(self) -> None:
        if self.bitmap.dtype != np.bool_ or self.bitmap.ndim != 2:
            raise ValueError("mask bitmap must be a 2-D boolean array")

    @property
    def coverage(self) -> float:
        return float(self.bitmap.mean()) if self.bitmap.size else 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.bitmap.shape


@dataclass(frozen=True)
class SeparationConfig:
    """Differencing schedule; defaults follow the 4-image, 8-round recipe."""

    group_size: int = 4
    rounds: int = 8
    pixel_tolerance: int = 0
    min_support: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 1 <= self.min_support <= self.rounds:
            raise ValueError("min_support must be in [1, rounds]")
        if self.pixel_tolerance < 0:
            raise ValueError("pixel_tolerance must be >= 0")


@dataclass(frozen=True)
class ComponentAsset:
    """One recovered component: mask, cutout pixels, and provenance."""

    trait_key: TraitKey
    mask: Mask
    cutout: np.ndarray  # RGBA, opaque exactly where mask is true
    rounds_used: int
    support: np.ndarray  # per-pixel count of rounds that agreed

    def __post_init__(self) -> None:
        opaque = self.cutout[:, :, 3] == 255
        if not np.array_equal(opaque, self.mask.bitmap):
            raise ValueError("cutout opacity must match the mask exactly")


def _rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] not in (3, 4):
        raise ValueError(f"expected HxWx3 or HxWx4 image, got {img.shape}")
    return img[:, :, :3]


def shared_mask(
    template: np.ndarray, others: Sequence[np.ndarray], tolerance: int = 0
) -> Mask:
    """Pixels at which every other image matches the template.

    Comparison runs per RGB channel with ``tolerance`` as the maximum
    allowed intensity delta.  Fully transparent template pixels never
    enter the mask: transparency is container metadata, not content.
    """
    t_rgb = _rgb(template).astype(np.int16)
    agree = np.ones(t_rgb.shape[:2], dtype=np.bool_)
    for other in others:
        if other.shape[:2] != template.shape[:2]:
            raise GeometryMismatch(
                f"{other.shape[:2]} does not match template {template.shape[:2]}"
            )
        diff = np.abs(_rgb(other).astype(np.int16) - t_rgb)
        agree &= (diff <= tolerance).all(axis=2)
    if template.shape[2] == 4:
        agree &= template[:, :, 3] != 0
    return Mask(agree)


def separate_component(
    trait_key: TraitKey,
    carrier_ids: Sequence[int],
    load_image: Callable[[int], np.ndarray],
    cfg: SeparationConfig = SeparationConfig(),
) -> ComponentAsset:
    """Recover one trait's component from the tokens carrying it.

    Each round samples ``group_size`` carriers without replacement
    (independently across rounds), uses the first as template, and
    keeps the group's shared pixels.  The final mask keeps pixels
    shared in at least ``min_support`` rounds; cutout pixels come from
    the most recent round in which the pixel was shared.
    """
    ids = sorted(carrier_ids)
    if len(ids) < cfg.group_size:
        raise InsufficientImages(
            f"{trait_key!r}: {len(ids)} carriers < group size {cfg.group_size}"
        )
    rng = generator("separate", cfg.seed, trait_key[0], trait_key[1])
    support: np.ndarray | None = None
    cutout_rgb: np.ndarray | None = None
    for _ in range(cfg.rounds):
        picks = rng.choice(len(ids), size=cfg.group_size, replace=False)
        group = [load_image(ids[int(i)]) for i in picks]
        template, others = group[0], group[1:]
        round_mask = shared_mask(template, others, cfg.pixel_tolerance).bitmap
        if support is None:
            support = np.zeros(round_mask.shape, dtype=np.uint16)
            cutout_rgb = np.zeros((*round_mask.shape, 3), dtype=np.uint8)
        support[round_mask] += 1
        cutout_rgb[round_mask] = _rgb(template)[round_mask]
    assert support is not None and cutout_rgb is not None
    final = support >= cfg.min_support
    cutout = np.zeros((*final.shape, 4), dtype=np.uint8)
    cutout[final, :3] = cutout_rgb[final]
    cutout[final, 3] = 255
    return ComponentAsset(trait_key, Mask(final), cutout, cfg.rounds, support)


@dataclass(frozen=True)
class ComponentLibrary:
    """Every separable trait of one collection, plus skip records."""

    assets: Mapping[TraitKey, ComponentAsset]
    skipped: Mapping[TraitKey, str]
    cfg: SeparationConfig

    def get(self, key: TraitKey) -> ComponentAsset | None:
        return self.assets.get(key)

    def __len__(self) -> int:
        return len(self.assets)


def separate_collection(
    index: TraitIndex,
    load_image: Callable[[int], np.ndarray],
    cfg: SeparationConfig = SeparationConfig(),
) -> ComponentLibrary:
    """Separate every trait with enough carriers; record the rest as skipped."""
    assets: dict[TraitKey, ComponentAsset] = {}
    skipped: dict[TraitKey, str] = {}
    for key in index.trait_keys():
        carriers = index.carriers(key)
        if len(carriers) < cfg.group_size:
            skipped[key] = (
                f"{len(carriers)} carriers < group size {cfg.group_size}"
            )
            continue
        assets[key] = separate_component(key, carriers, load_image, cfg)
    return ComponentLibrary(assets, skipped, cfg)


def trait_hash(key: TraitKey) -> str:
    """Stable directory-safe identifier for a trait key."""
    h = hashlib.blake2b(digest_size=8)
    h.update(key[0].encode("utf-8"))
    h.update(b"\x1f")
    h.update(key[1].encode("utf-8"))
    return h.hexdigest()


def save_library(lib: ComponentLibrary, root: str | Path) -> Path:
    """Persist to ``<root>/components/<trait_hash>/{mask,cutout}.png + meta.json``.

    Output is byte-stable: traits are written in sorted order and all
    JSON uses sorted keys.
    """
    base = Path(root) / "components"
    base.mkdir(parents=True, exist_ok=True)
    catalog: dict[str, dict] = {}
    for key in sorted(lib.assets):
        asset = lib.assets[key]
        th = trait_hash(key)
        adir = base / th
        adir.mkdir(parents=True, exist_ok=True)
        mask_img = Image.fromarray(asset.mask.bitmap.astype(np.uint8) * 255)
        mask_img.convert("1").save(adir / "mask.png")
        Image.fromarray(asset.cutout, mode="RGBA").save(adir / "cutout.png")
        meta = {
            "trait_type": key[0],
            "value": key[1],
            "coverage": asset.mask.coverage,
            "rounds_used": asset.rounds_used,
            "config": asdict(lib.cfg),
        }
        (adir / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        catalog[th] = {
            "trait_type": key[0],
            "value": key[1],
            "coverage": asset.mask.coverage,
        }
    doc = {
        "config": asdict(lib.cfg),
        "assets": catalog,
        "skipped": [
            {"trait_type": k[0], "value": k[1], "reason": lib.skipped[k]}
            for k in sorted(lib.skipped)
        ],
    }
    out = base / "library.json"
    out.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out


def load_library(root: str | Path) -> ComponentLibrary:
    base = Path(root) / "components"
    doc = json.loads((base / "library.json").read_text(encoding="utf-8"))
    cfg = SeparationConfig(**doc["config"])
    assets: dict[TraitKey, ComponentAsset] = {}
    for th, info in doc["assets"].items():
        adir = base / th
        bitmap = np.array(Image.open(adir / "mask.png").convert("1"), dtype=np.bool_)
        cutout = np.array(Image.open(adir / "cutout.png").convert("RGBA"))
        key = (info["trait_type"], info["value"])
        support = np.zeros(bitmap.shape, dtype=np.uint16)
        support[bitmap] = cfg.min_support  # round counts are not persisted
        assets[key] = ComponentAsset(key, Mask(bitmap), cutout, cfg.rounds, support)
    skipped = {
        (item["trait_type"], item["value"]): item["reason"]
        for item in doc["skipped"]
    }
    return ComponentLibrary(assets, skipped, cfg)
