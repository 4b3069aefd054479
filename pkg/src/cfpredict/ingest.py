"""Codeforces public API client with rate limiting and an on-disk raw cache.

Every response body is written to the cache *before* it is parsed, so a warm
cache directory doubles as a replayable fixture set and lets every fetch run
offline.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .errors import (
    ApiFailure,
    CacheMiss,
    IoFailure,
    MalformedResponse,
    NotAParticipant,
    TransportError,
    UnknownHandle,
)

logger = logging.getLogger(__name__)

API_BASE = "https://codeforces.com/api/"
DEFAULT_RATE_LIMIT_MS = 2000
STATUS_PAGE_SIZE = 1000


class Verdict(str, enum.Enum):
    OK = "OK"
    WRONG_ANSWER = "WRONG_ANSWER"
    TIME_LIMIT = "TIME_LIMIT"
    MEMORY_LIMIT = "MEMORY_LIMIT"
    RUNTIME_ERROR = "RUNTIME_ERROR"
    COMPILATION_ERROR = "COMPILATION_ERROR"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, raw) -> "Verdict":
        # the API spells these TIME_LIMIT_EXCEEDED etc.
        aliases = {
            "TIME_LIMIT_EXCEEDED": cls.TIME_LIMIT,
            "MEMORY_LIMIT_EXCEEDED": cls.MEMORY_LIMIT,
        }
        if raw in aliases:
            return aliases[raw]
        try:
            return cls(raw)
        except ValueError:
            return cls.OTHER


class ParticipantType(str, enum.Enum):
    CONTESTANT = "CONTESTANT"
    PRACTICE = "PRACTICE"
    VIRTUAL = "VIRTUAL"
    OUT_OF_COMPETITION = "OUT_OF_COMPETITION"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, raw) -> "ParticipantType":
        try:
            return cls(raw)
        except ValueError:
            return cls.OTHER


@dataclass(frozen=True)
class RatingChange:
    contest_id: int
    contest_name: str
    rank: int
    old_rating: int
    new_rating: int
    update_time: int


@dataclass(frozen=True)
class Submission:
    submission_id: int
    contest_id: int
    problem_key: str
    creation_time: int
    verdict: Verdict
    participant_type: ParticipantType


@dataclass(frozen=True)
class StandingsRow:
    contest_id: int
    handle: str
    points: float
    rank: int


# ---------------------------------------------------------------------------
# cache


def request_key(method: str, params: Mapping[str, object]) -> str:
    """Canonical cache key: ``method?k1=v1&k2=v2`` with sorted argument names."""
    args = "&".join(f"{k}={params[k]}" for k in sorted(params))
    return f"{method}?{args}"


class RawCache:
    """One file per request under ``<root>/<method>/<arg-hash>.json``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path_for(self, key: str) -> Path:
        method, _, args = key.partition("?")
        digest = hashlib.sha256(args.encode("utf-8")).hexdigest()[:32]
        return self.root / method / f"{digest}.json"

    def get(self, key: str) -> bytes | None:
        path = self.path_for(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise IoFailure(f"cannot read cache entry {path}: {exc}") from exc

    def put(self, key: str, payload: bytes) -> None:
        path = self.path_for(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise IoFailure(f"cannot write cache entry {path}: {exc}") from exc


def cache_get(cache: RawCache, key: str) -> bytes | None:
    return cache.get(key)


def cache_put(cache: RawCache, key: str, payload: bytes) -> None:
    cache.put(key, payload)


# ---------------------------------------------------------------------------
# transport and rate limiting

Transport = Callable[[str, Mapping[str, object]], bytes]


class HttpTransport:
    """Plain HTTPS GET against the public API."""

    def __init__(self, base_url: str = API_BASE, timeout: float = 30.0):
        self.base_url = base_url
        self.timeout = timeout

    def __call__(self, method: str, params: Mapping[str, object]) -> bytes:
        import httpx

        try:
            resp = httpx.get(self.base_url + method, params=dict(params), timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"{method}: {exc}") from exc
        # FAILED envelopes come back with HTTP 400 and a JSON body
        if resp.status_code not in (200, 400):
            raise TransportError(f"{method}: HTTP {resp.status_code}")
        return resp.content


def offline_transport(method: str, params: Mapping[str, object]) -> bytes:
    raise CacheMiss(f"offline mode: {request_key(method, params)} is not cached")


class RateLimiter:
    """Serializes requests and spaces their issue times by ``interval`` seconds.

    The lock is held for the whole request, so at most one request is ever in
    flight.
    """

    def __init__(
        self,
        interval: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = float(interval)
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._last: float | None = None

    def run(self, fn: Callable[[], bytes]) -> bytes:
        with self._lock:
            if self._last is not None:
                wait = self._last + self.interval - self.clock()
                while wait > 0:
                    self.sleep(wait)
                    wait = self._last + self.interval - self.clock()
            self._last = self.clock()
            return fn()


# ---------------------------------------------------------------------------
# parsing


def _envelope(payload: bytes, method: str):
    try:
        doc = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedResponse(f"{method}: response is not JSON") from exc
    if not isinstance(doc, dict) or "status" not in doc:
        raise MalformedResponse(f"{method}: missing status envelope")
    if doc["status"] == "FAILED":
        raise ApiFailure(str(doc.get("comment", "")))
    if doc["status"] != "OK" or "result" not in doc:
        raise MalformedResponse(f"{method}: unexpected status {doc['status']!r}")
    return doc["result"]


def parse_rating_history(payload: bytes) -> list[RatingChange]:
    result = _envelope(payload, "user.rating")
    if not isinstance(result, list):
        raise MalformedResponse("user.rating: result is not a list")
    out = []
    try:
        for row in result:
            rc = RatingChange(
                contest_id=int(row["contestId"]),
                contest_name=str(row.get("contestName", "")),
                rank=int(row["rank"]),
                old_rating=int(row["oldRating"]),
                new_rating=int(row["newRating"]),
                update_time=int(row["ratingUpdateTimeSeconds"]),
            )
            if rc.rank < 1:
                raise MalformedResponse(f"user.rating: rank {rc.rank} < 1")
            out.append(rc)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"user.rating: bad record ({exc!r})") from exc
    out.sort(key=lambda r: r.update_time)
    return out


def _problem_key(problem: Mapping) -> str:
    owner = problem.get("contestId", problem.get("problemsetName", "?"))
    return f"{owner}/{problem['index']}"


def parse_submissions(payload: bytes) -> list[Submission]:
    result = _envelope(payload, "user.status")
    if not isinstance(result, list):
        raise MalformedResponse("user.status: result is not a list")
    out = []
    try:
        for row in result:
            problem = row["problem"]
            out.append(
                Submission(
                    submission_id=int(row["id"]),
                    contest_id=int(row.get("contestId", problem.get("contestId", 0))),
                    problem_key=_problem_key(problem),
                    creation_time=int(row["creationTimeSeconds"]),
                    verdict=Verdict.parse(row.get("verdict")),
                    participant_type=ParticipantType.parse(row.get("author", {}).get("participantType")),
                )
            )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise MalformedResponse(f"user.status: bad record ({exc!r})") from exc
    return out


def parse_standings_row(payload: bytes, contest_id: int, handle: str) -> StandingsRow:
    result = _envelope(payload, "contest.standings")
    try:
        rows = result["rows"]
        candidates = []
        for row in rows:
            members = [m["handle"].lower() for m in row["party"]["members"]]
            if handle.lower() in members:
                candidates.append(row)
        if not candidates:
            raise NotAParticipant(f"{handle} has no standings row in contest {contest_id}")
        candidates.sort(key=lambda r: r["party"].get("participantType") != "CONTESTANT")
        row = candidates[0]
        results = row.get("problemResults")
        if results is None:
            points = float(row["points"])
        else:
            points = float(sum(float(pr.get("points", 0.0)) for pr in results))
        standing = StandingsRow(contest_id=int(contest_id), handle=handle, points=points, rank=int(row["rank"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"contest.standings: bad payload ({exc!r})") from exc
    if standing.points < 0:
        raise MalformedResponse(f"contest.standings: negative points {standing.points}")
    # unofficial rows carry rank 0; treat as the bottom of the table
    if standing.rank < 1:
        standing = StandingsRow(standing.contest_id, handle, standing.points, max(1, len(rows)))
    return standing


# ---------------------------------------------------------------------------
# client


class CodeforcesClient:
    """Fetches and parses the three API methods the dataset needs.

    ``transport`` defaults to HTTPS; pass ``offline=True`` to forbid network
    use entirely (cache misses then raise :class:`CacheMiss`).
    """

    def __init__(
        self,
        cache_dir: str | os.PathLike,
        *,
        transport: Transport | None = None,
        offline: bool = False,
        rate_limit_ms: int = DEFAULT_RATE_LIMIT_MS,
        limiter: RateLimiter | None = None,
        page_size: int = STATUS_PAGE_SIZE,
    ):
        self.cache = RawCache(cache_dir)
        self.offline = offline
        if offline:
            self.transport: Transport = offline_transport
        else:
            self.transport = transport if transport is not None else HttpTransport()
        self.limiter = limiter or RateLimiter(rate_limit_ms / 1000.0)
        self.page_size = page_size

    def raw(self, method: str, params: Mapping[str, object]) -> bytes:
        key = request_key(method, params)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        if self.offline:
            raise CacheMiss(f"offline mode: {key} is not cached")
        logger.debug("GET %s", key)
        payload = self.limiter.run(lambda: self.transport(method, params))
        self.cache.put(key, payload)
        return payload

    def fetch_rating_history(self, handle: str) -> list[RatingChange]:
        _need_handle(handle)
        try:
            return parse_rating_history(self.raw("user.rating", {"handle": handle}))
        except ApiFailure as exc:
            raise UnknownHandle(exc.comment) from exc

    def fetch_submissions(self, handle: str) -> list[Submission]:
        _need_handle(handle)
        seen: dict[int, Submission] = {}
        start = 1
        while True:
            params = {"handle": handle, "from": start, "count": self.page_size}
            try:
                page = parse_submissions(self.raw("user.status", params))
            except ApiFailure as exc:
                raise UnknownHandle(exc.comment) from exc
            for sub in page:
                seen.setdefault(sub.submission_id, sub)
            if len(page) < self.page_size:
                break
            start += self.page_size
        return sorted(seen.values(), key=lambda s: (s.creation_time, s.submission_id))

    def fetch_standings_row(self, contest_id: int, handle: str) -> StandingsRow:
        _need_handle(handle)
        params = {"contestId": int(contest_id), "handles": handle}
        return parse_standings_row(self.raw("contest.standings", params), contest_id, handle)


def _need_handle(handle: str) -> None:
    if not handle or not handle.strip():
        raise ValueError("handle must be nonempty")


def read_handles(path: str | os.PathLike) -> list[str]:
    """Newline-delimited handle list; blank lines and ``#`` comments skipped."""
    handles = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            handles.append(line)
    return handles
