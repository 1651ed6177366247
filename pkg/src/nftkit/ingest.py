"""Token media/metadata downloading with retries and resumability.

Content-addressed URIs (``ipfs://``, ``ar://``) are rewritten into one
candidate URL per configured gateway, in preference order.  Fetching
tries candidates in order with per-candidate exponential backoff, and
collection runs persist per-token progress so an interrupted run
resumes instead of re-downloading.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from urllib.parse import urlsplit

import requests

from .errors import NftkitError

__all__ = [
    "GatewayConfig",
    "RetryPolicy",
    "FetchPlan",
    "CollectionTarget",
    "DownloadReport",
    "resolve_uri",
    "fetch_token",
    "fetch_collection",
    "load_targets",
    "UnsupportedScheme",
    "AllCandidatesFailed",
    "SizeLimitExceeded",
]

DEFAULT_IPFS_GATEWAYS = ("https://ipfs.io", "https://cloudflare-ipfs.com")
DEFAULT_ARWEAVE_GATEWAY = "https://arweave.net"
COMPLETENESS_THRESHOLD = 0.99

GATEWAYS_ENV = "NFTKIT_IPFS_GATEWAYS"
ARWEAVE_ENV = "NFTKIT_ARWEAVE_GATEWAY"


class UnsupportedScheme(NftkitError):
    pass


class AllCandidatesFailed(NftkitError):
    """Every candidate URL failed; carries the last error per candidate."""

    def __init__(self, message: str, errors: dict[str, str]):
        super().__init__(message)
        self.errors = errors


class SizeLimitExceeded(NftkitError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    ipfs_gateways: tuple[str, ...] = DEFAULT_IPFS_GATEWAYS
    arweave_gateway: str = DEFAULT_ARWEAVE_GATEWAY

    @classmethod
    def from_env(cls) -> "GatewayConfig":
        """Gateway list override via NFTKIT_IPFS_GATEWAYS (comma-separated)."""
        ipfs = os.environ.get(GATEWAYS_ENV)
        ar = os.environ.get(ARWEAVE_ENV, DEFAULT_ARWEAVE_GATEWAY)
        gateways = (
            tuple(g.strip() for g in ipfs.split(",") if g.strip())
            if ipfs
            else DEFAULT_IPFS_GATEWAYS
        )
        return cls(gateways, ar)


@dataclass(frozen=True)
class RetryPolicy:
    retries: int = 3  # extra attempts per candidate after the first
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    timeout: float = 30.0
    size_limit: int = 64 * 2**20


@dataclass(frozen=True)
class FetchPlan:
    original_uri: str
    candidate_urls: tuple[str, ...]
    kind: str  # media | metadata

    def __post_init__(self) -> None:
        if not self.candidate_urls:
            raise ValueError("candidate_urls must not be empty")


def resolve_uri(
    uri: str, gateways: GatewayConfig = GatewayConfig(), kind: str = "media"
) -> FetchPlan:
    """Rewrite a token URI into concrete candidate URLs, gateway order kept."""
    if not uri:
        raise ValueError("empty uri")
    lowered = uri.lower()
    if lowered.startswith("ipfs://"):
        suffix = uri[len("ipfs://") :].lstrip("/")
        if suffix.startswith("ipfs/"):
            suffix = suffix[len("ipfs/") :]
        candidates = tuple(
            f"{gw.rstrip('/')}/ipfs/{suffix}" for gw in gateways.ipfs_gateways
        )
        return FetchPlan(uri, candidates, kind)
    if lowered.startswith("ar://"):
        suffix = uri[len("ar://") :].lstrip("/")
        return FetchPlan(
            uri, (f"{gateways.arweave_gateway.rstrip('/')}/{suffix}",), kind
        )
    if lowered.startswith("http://") or lowered.startswith("https://"):
        return FetchPlan(uri, (uri,), kind)
    scheme = uri.split(":", 1)[0]
    raise UnsupportedScheme(f"cannot resolve scheme {scheme!r}")


_local = threading.local()


def _session() -> requests.Session:
    sess = getattr(_local, "session", None)
    if sess is None:
        sess = requests.Session()
        _local.session = sess
    return sess


def _get_with_cap(
    session: requests.Session, url: str, policy: RetryPolicy
) -> tuple[int, bytes | None]:
    resp = session.get(url, timeout=policy.timeout, stream=True)
    try:
        if resp.status_code != 200:
            return resp.status_code, None
        chunks = []
        total = 0
        for chunk in resp.iter_content(chunk_size=65536):
            total += len(chunk)
            if total > policy.size_limit:
                raise SizeLimitExceeded(f"{url}: exceeds {policy.size_limit} bytes")
            chunks.append(chunk)
        return 200, b"".join(chunks)
    finally:
        resp.close()


def fetch_token(
    plan: FetchPlan,
    policy: RetryPolicy = RetryPolicy(),
    *,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> bytes:
    """Bytes of the first candidate that succeeds.

    Candidates are tried in order; transient failures (timeouts,
    connection errors, 429/5xx) retry with exponential backoff up to
    the policy cap, permanent ones (other 4xx) move straight to the
    next candidate.
    """
    sess = session or _session()
    errors: dict[str, str] = {}
    for url in plan.candidate_urls:
        for attempt in range(policy.retries + 1):
            if attempt:
                sleep(policy.backoff_base * policy.backoff_factor ** (attempt - 1))
            try:
                status, body = _get_with_cap(sess, url, policy)
            except SizeLimitExceeded:
                raise
            except requests.RequestException as exc:
                errors[url] = f"{type(exc).__name__}: {exc}"
                continue
            if body is not None:
                return body
            errors[url] = f"HTTP {status}"
            if status not in (429,) and status < 500:
                break  # permanent for this candidate
    raise AllCandidatesFailed(
        f"{plan.original_uri}: all {len(plan.candidate_urls)} candidates failed",
        errors,
    )


@dataclass(frozen=True)
class CollectionTarget:
    """One line of the target list: URI patterns with an ``{id}`` hole."""

    name: str
    media_uri: str | None
    meta_uri: str | None
    first_id: int
    last_id: int

    def token_ids(self) -> range:
        return range(self.first_id, self.last_id + 1)

    def __post_init__(self) -> None:
        if self.last_id < self.first_id:
            raise ValueError(f"{self.name}: empty id range")
        if not (self.media_uri or self.meta_uri):
            raise ValueError(f"{self.name}: target needs at least one URI pattern")


def load_targets(path: str | Path) -> list[CollectionTarget]:
    targets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        obj = json.loads(line)
        targets.append(
            CollectionTarget(
                name=obj["name"],
                media_uri=obj.get("media_uri"),
                meta_uri=obj.get("meta_uri"),
                first_id=int(obj["first_id"]),
                last_id=int(obj["last_id"]),
            )
        )
    return targets


@dataclass(frozen=True)
class DownloadReport:
    collection: str
    attempted: int
    succeeded: int
    failed: tuple[tuple[int, str], ...]
    skipped: int
    bytes_total: int
    wall_time: float
    complete: bool
    completeness_threshold: float = COMPLETENESS_THRESHOLD

    def __post_init__(self) -> None:
        if self.attempted != self.succeeded + len(self.failed):
            raise ValueError("attempted must equal succeeded + failed")

    def to_json(self) -> str:
        return json.dumps(
            {
                "collection": self.collection,
                "attempted": self.attempted,
                "succeeded": self.succeeded,
                "failed": [[tid, err] for tid, err in self.failed],
                "skipped": self.skipped,
                "bytes_total": self.bytes_total,
                "wall_time": self.wall_time,
                "complete": self.complete,
                "completeness_threshold": self.completeness_threshold,
            },
            sort_keys=True,
        )


def _ext_from_pattern(pattern: str) -> str:
    path = urlsplit(pattern.replace("{id}", "0")).path
    suffix = Path(path).suffix.lstrip(".")
    return suffix or "bin"


class _HostLimiter:
    """Caps in-flight requests per host."""

    def __init__(self, per_host: int):
        self.per_host = per_host
        self._lock = threading.Lock()
        self._sems: dict[str, threading.BoundedSemaphore] = {}

    def acquire(self, url: str) -> threading.BoundedSemaphore:
        host = urlsplit(url).netloc
        with self._lock:
            sem = self._sems.get(host)
            if sem is None:
                sem = threading.BoundedSemaphore(self.per_host)
                self._sems[host] = sem
        return sem


def fetch_collection(
    target: CollectionTarget,
    root: str | Path,
    *,
    gateways: GatewayConfig | None = None,
    policy: RetryPolicy = RetryPolicy(),
    jobs: int = 8,
    per_host: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> DownloadReport:
    """Download every token of one collection, resumably.

    Tokens already on disk with sizes matching the progress ledger are
    skipped; per-token failures are recorded in the report, never
    raised.  At most ``jobs`` tokens are in flight, and at most
    ``per_host`` requests per host.
    """
    gateways = gateways or GatewayConfig.from_env()
    base = Path(root) / target.name
    media_dir = base / "media"
    meta_dir = base / "meta"
    state_path = base / ".fetch_state.json"
    base.mkdir(parents=True, exist_ok=True)
    media_dir.mkdir(exist_ok=True)
    meta_dir.mkdir(exist_ok=True)

    state: dict[str, dict] = {}
    if state_path.is_file():
        try:
            state = json.loads(state_path.read_text(encoding="utf-8")).get("tokens", {})
        except (OSError, json.JSONDecodeError):
            state = {}
    state_lock = threading.Lock()
    limiter = _HostLimiter(per_host)
    media_ext = _ext_from_pattern(target.media_uri) if target.media_uri else None

    def _paths(tid: int) -> dict[str, Path]:
        parts = {}
        if target.media_uri:
            parts["media"] = media_dir / f"{tid}.{media_ext}"
        if target.meta_uri:
            parts["meta"] = meta_dir / f"{tid}.json"
        return parts

    def _already_done(tid: int) -> bool:
        entry = state.get(str(tid))
        if not entry:
            return False
        for part, path in _paths(tid).items():
            size = entry.get(f"{part}_size")
            if size is None or not path.is_file() or path.stat().st_size != size:
                return False
        return True

    def _fetch_one(tid: int) -> int:
        """Returns bytes downloaded; raises on failure."""
        total = 0
        entry: dict[str, int] = {}
        for part, pattern in (("media", target.media_uri), ("meta", target.meta_uri)):
            if not pattern:
                continue
            plan = resolve_uri(pattern.replace("{id}", str(tid)), gateways, part)
            sem = limiter.acquire(plan.candidate_urls[0])
            with sem:
                body = fetch_token(plan, policy, sleep=sleep)
            path = _paths(tid)[part]
            path.write_bytes(body)
            entry[f"{part}_size"] = len(body)
            total += len(body)
        with state_lock:
            state[str(tid)] = entry
        return total

    started = time.monotonic()
    todo = [tid for tid in target.token_ids() if not _already_done(tid)]
    skipped = len(target.token_ids()) - len(todo)
    succeeded = 0
    bytes_total = 0
    failed: list[tuple[int, str]] = []
    if todo:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_fetch_one, tid): tid for tid in todo}
            for done, fut in enumerate(as_completed(futures), start=1):
                tid = futures[fut]
                try:
                    bytes_total += fut.result()
                    succeeded += 1
                except NftkitError as exc:
                    failed.append((tid, type(exc).__name__))
                except requests.RequestException as exc:
                    failed.append((tid, type(exc).__name__))
                if done % 50 == 0:  # keep interrupted runs resumable
                    with state_lock:
                        _write_state(state_path, dict(state))
    failed.sort()
    _write_state(state_path, state)
    done_total = skipped + succeeded
    complete = done_total >= COMPLETENESS_THRESHOLD * len(target.token_ids())
    return DownloadReport(
        collection=target.name,
        attempted=len(todo),
        succeeded=succeeded,
        failed=tuple(failed),
        skipped=skipped,
        bytes_total=bytes_total,
        wall_time=time.monotonic() - started,
        complete=complete,
    )


def _write_state(path: Path, tokens: dict[str, dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(
        json.dumps({"tokens": tokens}, sort_keys=True), encoding="utf-8"
    )
    os.replace(tmp, path)
