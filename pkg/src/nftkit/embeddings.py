"""Bit-exact storage and linear algebra for feature matrices.

Encoders live out of process: anything that writes the ``NFTEMB01``
container plugs into the toolkit.  The container is
``magic(8) | header_len(u32 LE) | JSON header | f32 LE row-major payload``
and round-trips bit-exactly.  Similarity products accumulate in
float64 so results are machine-independent at 1e-6.
"""

from __future__ import annotations

import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NftkitError

__all__ = [
    "MAGIC",
    "EmbeddingMatrix",
    "SimilarityMatrix",
    "write_matrix",
    "read_matrix",
    "write_similarity",
    "read_similarity",
    "l2_normalize",
    "similarity",
    "BadMagic",
    "HeaderMismatch",
    "NonFiniteValue",
    "ZeroRow",
    "DimMismatch",
    "RowCountMismatch",
]

MAGIC = b"NFTEMB01"
_DTYPE = "f32le"


class BadMagic(NftkitError):
    """File does not start with the NFTEMB01 magic."""


class HeaderMismatch(NftkitError):
    """Header contradicts itself or the payload size."""


class NonFiniteValue(NftkitError):
    """Matrix contains NaN or infinity."""


class ZeroRow(NftkitError):
    """A row with zero norm cannot be normalized."""


class DimMismatch(NftkitError):
    pass


class RowCountMismatch(NftkitError):
    pass


def _check_finite(data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data))[0][0])
        raise NonFiniteValue(f"non-finite value in row {bad}")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x M float32 feature matrix with one identifier per row."""

    data: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValueError(f"expected 2-D data, got {self.data.ndim}-D")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))
        if len(self.ids) != self.data.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("row ids must be unique")
        _check_finite(self.data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SimilarityMatrix:
    """N x N inner products between two row-aligned matrices."""

    values: np.ndarray
    left_ids: tuple[str, ...]
    right_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        n, m = self.values.shape
        if n != m:
            raise ValueError(f"similarity matrix must be square, got {n}x{m}")
        if len(self.left_ids) != n or len(self.right_ids) != n:
            raise ValueError("id count does not match matrix shape")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def write_matrix(
    m: EmbeddingMatrix, path: str | Path, extra_header: dict | None = None
) -> None:
    """Serialize to the NFTEMB01 container (bit-exact round trip)."""
    header = {"rows": m.rows, "dim": m.dim, "dtype": _DTYPE, "ids": list(m.ids)}
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    payload = m.data if sys.byteorder == "little" else m.data.byteswap()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def _read_container(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise HeaderMismatch(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise HeaderMismatch(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"{path}: unreadable header: {exc}") from exc
    for field_name in ("rows", "dim", "dtype", "ids"):
        if field_name not in header:
            raise HeaderMismatch(f"{path}: header missing '{field_name}'")
    if header["dtype"] != _DTYPE:
        raise HeaderMismatch(f"{path}: unsupported dtype {header['dtype']!r}")
    rows, dim = int(header["rows"]), int(header["dim"])
    if len(header["ids"]) != rows:
        raise HeaderMismatch(f"{path}: {len(header['ids'])} ids for {rows} rows")
    payload = raw[12 + hlen :]
    expected = rows * dim * 4
    if len(payload) != expected:
        raise HeaderMismatch(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    if sys.byteorder != "little":
        data = data.byteswap().view(data.dtype.newbyteorder())
    _check_finite(data)
    return header, np.ascontiguousarray(data)


def read_matrix(path: str | Path) -> EmbeddingMatrix:
    """Load an NFTEMB01 file; inverse of :func:`write_matrix`."""
    header, data = _read_container(path)
    return EmbeddingMatrix(data, tuple(str(i) for i in header["ids"]))


def write_similarity(s: SimilarityMatrix, path: str | Path) -> None:
    """Persist a similarity matrix in the same container.

    Column identifiers ride along as an extra ``right_ids`` header key.
    """
    m = EmbeddingMatrix(s.values, s.left_ids)
    write_matrix(m, path, extra_header={"right_ids": list(s.right_ids)})


def read_similarity(path: str | Path) -> SimilarityMatrix:
    header, data = _read_container(path)
    left = tuple(str(i) for i in header["ids"])
    right = tuple(str(i) for i in header.get("right_ids", header["ids"]))
    return SimilarityMatrix(data, left, right)


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm (computed in float64)."""
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ZeroRow(f"row {m.ids[int(zero[0])]!r} has zero norm")
    scaled = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(scaled, m.ids)


def similarity(a: EmbeddingMatrix, b: EmbeddingMatrix) -> SimilarityMatrix:
    """values[i][j] = <a_i, b_j>, accumulated in float64, stored float32."""
    if a.dim != b.dim:
        raise DimMismatch(f"dims differ: {a.dim} vs {b.dim}")
    if a.rows != b.rows:
        raise RowCountMismatch(f"row counts differ: {a.rows} vs {b.rows}")
    prod = a.data.astype(np.float64) @ b.data.astype(np.float64).T
    return SimilarityMatrix(prod.astype(np.float32), a.ids, b.ids)
