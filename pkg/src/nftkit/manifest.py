"""Line-delimited token manifests: the contract between pipeline stages.

A manifest is UTF-8 JSONL: one header object (toolkit version,
resampling kernel, ratios, template id, seed) followed by one object
per token with fields ``collection``, ``token_id``, ``image``,
``caption``, ``template_id``, ``attributes``, ``split`` and
``frame_seed``.  Records are written in (collection, token_id) order
so output bytes are stable regardless of worker count.  Image paths
are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .errors import NftkitError
from .metadata import (
    TEMPLATE_ID,
    Attribute,
    AttributeList,
    Caption,
    render_caption,
)
from .standardize import DEFAULT_RATIOS, RESAMPLING_KERNEL, SPLITS

__all__ = [
    "TokenRecord",
    "ManifestHeader",
    "Finding",
    "VerifyReport",
    "write_manifest",
    "read_manifest",
    "verify_manifest",
    "IoFailure",
    "ManifestInconsistent",
]


class IoFailure(NftkitError):
    pass


class ManifestInconsistent(NftkitError):
    """Manifest is structurally unreadable (vs. content findings)."""


@dataclass(frozen=True)
class TokenRecord:
    """One token: where its image lives and what its caption says."""

    collection: str
    token_id: int
    image: str
    caption: Caption
    attributes: AttributeList
    split: str
    frame_seed: int | None = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def key(self) -> str:
        return f"{self.collection}/{self.token_id}"


@dataclass(frozen=True)
class ManifestHeader:
    version: str = __version__
    template_id: str = TEMPLATE_ID
    resampling_kernel: str = RESAMPLING_KERNEL
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0


def _record_obj(rec: TokenRecord) -> dict:
    return {
        "collection": rec.collection,
        "token_id": rec.token_id,
        "image": rec.image,
        "caption": rec.caption.rendered,
        "template_id": rec.caption.template_id,
        "attributes": [
            {"trait_type": a.trait_type, "value": a.value} for a in rec.attributes
        ],
        "split": rec.split,
        "frame_seed": rec.frame_seed,
    }


def write_manifest(
    records: Iterable[TokenRecord], path: str | Path, header: ManifestHeader | None = None
) -> Path:
    """Write records sorted by (collection, token_id); atomic replace."""
    path = Path(path)
    header = header or ManifestHeader()
    ordered = sorted(records, key=lambda r: (r.collection, r.token_id))
    head_obj = {
        "manifest": "nftkit",
        "version": header.version,
        "template_id": header.template_id,
        "resampling_kernel": header.resampling_kernel,
        "ratios": list(header.ratios),
        "seed": header.seed,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(head_obj, sort_keys=True) + "\n")
            for rec in ordered:
                fh.write(json.dumps(_record_obj(rec), sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def _parse_record(obj: dict, lineno: int) -> TokenRecord:
    try:
        attrs = AttributeList(
            tuple(
                Attribute(a["trait_type"], a["value"]) for a in obj["attributes"]
            )
        )
        if len(attrs) == 0:
            raise ValueError("record has zero attributes")
        # segments come from the attributes; the stored caption string is
        # kept verbatim so verify can catch disagreement
        rebuilt = render_caption(obj["collection"], attrs)
        caption = Caption(
            obj["collection"], rebuilt.segments, obj["caption"], obj["template_id"]
        )
        return TokenRecord(
            collection=obj["collection"],
            token_id=int(obj["token_id"]),
            image=obj["image"],
            caption=caption,
            attributes=attrs,
            split=obj["split"],
            frame_seed=obj.get("frame_seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestInconsistent(f"line {lineno}: bad record: {exc}") from exc


def read_manifest(path: str | Path) -> tuple[ManifestHeader, list[TokenRecord]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ManifestInconsistent(f"{path}: empty manifest")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestInconsistent(f"{path}: bad header: {exc}") from exc
    if not isinstance(head, dict) or head.get("manifest") != "nftkit":
        raise ManifestInconsistent(f"{path}: missing nftkit header line")
    header = ManifestHeader(
        version=head.get("version", "?"),
        template_id=head.get("template_id", TEMPLATE_ID),
        resampling_kernel=head.get("resampling_kernel", RESAMPLING_KERNEL),
        ratios=tuple(head.get("ratios", DEFAULT_RATIOS)),
        seed=int(head.get("seed", 0)),
    )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestInconsistent(f"line {lineno}: bad JSON: {exc}") from exc
        records.append(_parse_record(obj, lineno))
    return header, records


@dataclass(frozen=True)
class Finding:
    kind: str  # MissingFile | CaptionMismatch | SplitLeakage | DuplicateToken
    collection: str
    token_id: int | None
    detail: str


@dataclass(frozen=True)
class VerifyReport:
    manifest: str
    records: int
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "kind": f.kind,
                    "collection": f.collection,
                    "token_id": f.token_id,
                    "detail": f.detail,
                },
                sort_keys=True,
            )
            for f in self.findings
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def verify_manifest(path: str | Path) -> VerifyReport:
    """Re-check file existence, split consistency, and caption agreement.

    Content problems come back as findings; a structurally unreadable
    manifest raises :class:`ManifestInconsistent` instead.
    """
    path = Path(path)
    header, records = read_manifest(path)
    if header.template_id != TEMPLATE_ID:
        raise ManifestInconsistent(
            f"{path}: unknown template {header.template_id!r}; cannot verify captions"
        )
    findings: list[Finding] = []
    base = path.parent
    seen: set[str] = set()
    splits_per_collection: dict[str, set[str]] = {}
    for rec in records:
        key = rec.key()
        if key in seen:
            findings.append(
                Finding("DuplicateToken", rec.collection, rec.token_id, "repeated token")
            )
        seen.add(key)
        splits_per_collection.setdefault(rec.collection, set()).add(rec.split)
        if not (base / rec.image).is_file():
            findings.append(
                Finding("MissingFile", rec.collection, rec.token_id, rec.image)
            )
        expected = render_caption(rec.collection, rec.attributes).rendered
        if expected != rec.caption.rendered:
            findings.append(
                Finding(
                    "CaptionMismatch",
                    rec.collection,
                    rec.token_id,
                    f"stored {rec.caption.rendered!r} != rendered {expected!r}",
                )
            )
    for collection, splits in sorted(splits_per_collection.items()):
        if len(splits) > 1:
            findings.append(
                Finding(
                    "SplitLeakage",
                    collection,
                    None,
                    f"collection spans splits {sorted(splits)}",
                )
            )
    return VerifyReport(str(path), len(records), tuple(findings))
