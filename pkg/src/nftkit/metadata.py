"""Token attribute parsing and deterministic template captions.

NFT metadata files describe each token as a list of
``{"trait_type": ..., "value": ...}`` objects.  This module parses
that layout into an :class:`AttributeList`, renders captions from a
fixed sentence template, and supports the reverse edit (dropping one
trait's phrase) needed by dynamic masking.  Everything here is a pure
function over immutable values and safe to call concurrently.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import NftkitError

__all__ = [
    "TEMPLATE_ID",
    "Attribute",
    "AttributeList",
    "Caption",
    "TraitIndex",
    "TraitKey",
    "parse_metadata",
    "render_caption",
    "remove_trait",
    "build_trait_index",
    "MalformedMetadata",
    "NoSemanticContent",
    "EmptyAttributes",
    "TraitNotPresent",
]

# Identifier of the active sentence template, recorded in manifests so
# alternate templates can be introduced without invalidating old data.
TEMPLATE_ID = "nft-with-v1"

TraitKey = tuple[str, str]

_WS_RUN = re.compile(r"\s+")


class MalformedMetadata(NftkitError):
    """Bytes could not be interpreted as conventional token metadata."""


class NoSemanticContent(NftkitError):
    """Metadata parsed but yielded zero usable attributes; exclude the token."""


class EmptyAttributes(NftkitError):
    """Caption rendering needs at least one attribute."""


class TraitNotPresent(NftkitError):
    """The requested trait has no segment in this caption."""


@dataclass(frozen=True, slots=True)
class Attribute:
    """One (category, value) pair, e.g. ("Hat", "Commie hat")."""

    trait_type: str
    value: str

    @property
    def key(self) -> TraitKey:
        return (self.trait_type, self.value)


@dataclass(frozen=True, slots=True)
class AttributeList:
    """Deduplicated attributes in source-file order."""

    attrs: tuple[Attribute, ...]

    def __post_init__(self) -> None:
        if len({a.key for a in self.attrs}) != len(self.attrs):
            raise ValueError("duplicate (trait_type, value) pairs")
        for a in self.attrs:
            if not a.trait_type:
                raise ValueError("empty trait_type")

    def __iter__(self) -> Iterator[Attribute]:
        return iter(self.attrs)

    def __len__(self) -> int:
        return len(self.attrs)

    def keys(self) -> tuple[TraitKey, ...]:
        return tuple(a.key for a in self.attrs)

    def without(self, key: TraitKey) -> "AttributeList":
        return AttributeList(tuple(a for a in self.attrs if a.key != key))


@dataclass(frozen=True, slots=True)
class Caption:
    """A rendered caption plus its per-trait segmentation.

    ``rendered`` is always the deterministic join of ``segments``
    under the active template, so each segment can be removed and the
    caption re-joined without re-parsing text.
    """

    collection_name: str
    segments: tuple[tuple[TraitKey, str], ...]
    rendered: str
    template_id: str = TEMPLATE_ID

    def trait_keys(self) -> tuple[TraitKey, ...]:
        return tuple(key for key, _ in self.segments)


def _clean(text: str) -> str:
    """Trim and collapse internal whitespace runs; values keep their case."""
    return _WS_RUN.sub(" ", text.strip())


def _stringify(value: object) -> str | None:
    """Render a scalar metadata value as text; None if not a scalar.

    Numbers never use exponent notation (1e-07 becomes "0.0000001").
    """
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return np.format_float_positional(value, trim="-")
    return None


def parse_metadata(raw_bytes: bytes, *, keep_empty: bool = False) -> AttributeList:
    """Parse a token metadata file into its attribute list.

    Only the conventional top-level ``attributes`` array of
    ``{trait_type, value}`` objects is honored; other layouts are
    rejected rather than guessed.  Entries that are not such objects
    are skipped, duplicates keep their first occurrence, and values
    that are empty after cleanup are dropped unless ``keep_empty``.

    Raises:
        MalformedMetadata: bytes are not a JSON object, or the
            ``attributes`` field is present but not an array.
        NoSemanticContent: zero usable attributes; the token carries
            no semantic content and must be excluded.
    """
    try:
        obj = json.loads(raw_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMetadata(f"unparseable metadata: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedMetadata(f"top level is {type(obj).__name__}, expected object")
    entries = obj.get("attributes", [])
    if not isinstance(entries, list):
        raise MalformedMetadata(
            f"'attributes' is {type(entries).__name__}, expected array"
        )

    attrs: list[Attribute] = []
    seen: set[TraitKey] = set()
    for entry in entries:
        if not isinstance(entry, dict):
            continue
        trait_type = _stringify(entry.get("trait_type"))
        value = _stringify(entry.get("value"))
        if trait_type is None or value is None:
            continue
        trait_type = _clean(trait_type)
        value = _clean(value)
        if not trait_type:
            continue
        if not value and not keep_empty:
            continue
        key = (trait_type, value)
        if key in seen:
            continue
        seen.add(key)
        attrs.append(Attribute(trait_type, value))

    if not attrs:
        raise NoSemanticContent("no usable attributes")
    return AttributeList(tuple(attrs))


def _phrase(attr: Attribute) -> str:
    return f"{attr.value} {attr.trait_type.lower()}"


def _join(collection_name: str, segments: tuple[tuple[TraitKey, str], ...]) -> str:
    head = f"a {collection_name} NFT"
    if not segments:
        return head
    return head + " with " + ", ".join(phrase for _, phrase in segments)


def render_caption(collection_name: str, attrs: AttributeList) -> Caption:
    """Render the fixed template caption for one token.

    The template is ``"a <collection> NFT with <value> <trait_type>, ..."``
    with phrases in attribute order, trait types lowercased, and values
    kept in their original case.
    """
    if len(attrs) == 0:
        raise EmptyAttributes("cannot render a caption from zero attributes")
    segments = tuple((a.key, _phrase(a)) for a in attrs)
    return Caption(collection_name, segments, _join(collection_name, segments))


def remove_trait(caption: Caption, trait_key: TraitKey) -> Caption:
    """Drop one trait's segment and re-join the remaining phrases.

    Removing every segment leaves just the collection-prefix phrase.
    """
    if trait_key not in caption.trait_keys():
        raise TraitNotPresent(f"{trait_key!r} not in caption")
    segments = tuple(seg for seg in caption.segments if seg[0] != trait_key)
    return Caption(
        caption.collection_name,
        segments,
        _join(caption.collection_name, segments),
        caption.template_id,
    )


@dataclass(frozen=True)
class TraitIndex:
    """Inverted index: trait key -> ascending token ids carrying it."""

    entries: Mapping[TraitKey, tuple[int, ...]] = field(default_factory=dict)

    def carriers(self, key: TraitKey) -> tuple[int, ...]:
        return self.entries.get(key, ())

    def trait_keys(self) -> list[TraitKey]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def build_trait_index(records: Iterable) -> TraitIndex:
    """Index which tokens of one collection share each trait.

    ``records`` may be any iterable of objects exposing ``token_id``
    and ``attributes`` (e.g. manifest TokenRecords).
    """
    acc: dict[TraitKey, set[int]] = {}
    for rec in records:
        for attr in rec.attributes:
            acc.setdefault(attr.key, set()).add(rec.token_id)
    return TraitIndex({key: tuple(sorted(ids)) for key, ids in acc.items()})
