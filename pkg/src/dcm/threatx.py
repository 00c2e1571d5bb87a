"""Threat-event exchange between app stores and CAs.

Publishers append flat indicator-of-compromise records to an ordered
journal; subscribers pull with their own cursor. :func:`ingest` turns a
received event into store/CA actions.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import _http
from .authority import CertificateAuthority
from .encoding import Reader, Writer
from .errors import BadCursor, DecodeError, DuplicateEventId, UnregisteredPublisher
from .policy import THREAT_SEVERITIES, OpenThreat
from .trust import DIGEST_SIZE, TrustLevel


@dataclass(frozen=True)
class ThreatEvent:
    event_id: str
    developer_fingerprint: bytes
    severity: TrustLevel
    reported_by: str
    timestamp: int
    package_digest: Optional[bytes] = None
    indicators: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.severity not in THREAT_SEVERITIES:
            raise ValueError("severity must be Warning or Critical")
        if not self.event_id:
            raise ValueError("event_id must be non-empty")
        if len(self.developer_fingerprint) != DIGEST_SIZE:
            raise ValueError("developer_fingerprint must be 32 bytes")
        if self.package_digest is not None and len(self.package_digest) != DIGEST_SIZE:
            raise ValueError("package_digest must be 32 bytes")
        object.__setattr__(self, "indicators", tuple(self.indicators))

    def encode(self) -> bytes:
        w = Writer().text(self.event_id).fixed(self.developer_fingerprint, DIGEST_SIZE)
        if self.package_digest is None:
            w.u8(0)
        else:
            w.u8(1).fixed(self.package_digest, DIGEST_SIZE)
        w.text(self.severity.value).u32(len(self.indicators))
        for ioc in self.indicators:
            w.text(ioc)
        return w.text(self.reported_by).u64(self.timestamp).getvalue()

    @classmethod
    def read_from(cls, r: Reader) -> "ThreatEvent":
        event_id, dev = r.text(), r.fixed(DIGEST_SIZE)
        pkg = r.fixed(DIGEST_SIZE) if r.flag() else None
        try:
            severity = TrustLevel(r.text())
            indicators = tuple(r.text() for _ in range(r.u32()))
            return cls(event_id, dev, severity, r.text(), r.u64(), pkg, indicators)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    @classmethod
    def decode(cls, data: bytes) -> "ThreatEvent":
        r = Reader(data)
        event = cls.read_from(r)
        r.done()
        return event

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "developer_fingerprint": self.developer_fingerprint.hex(),
            "package_digest": None if self.package_digest is None else self.package_digest.hex(),
            "severity": self.severity.value,
            "indicators": list(self.indicators),
            "reported_by": self.reported_by,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ThreatEvent":
        pkg = data.get("package_digest")
        return cls(
            event_id=data["event_id"],
            developer_fingerprint=bytes.fromhex(data["developer_fingerprint"]),
            severity=TrustLevel(data["severity"]),
            reported_by=data["reported_by"],
            timestamp=int(data["timestamp"]),
            package_digest=None if pkg is None else bytes.fromhex(pkg),
            indicators=tuple(data.get("indicators", ())),
        )


def encode_events(events: list[ThreatEvent], cursor: int) -> bytes:
    w = Writer().u64(cursor).u32(len(events))
    for e in events:
        w.blob(e.encode())
    return w.getvalue()


def decode_events(data: bytes) -> tuple[list[ThreatEvent], int]:
    r = Reader(data)
    cursor = r.u64()
    events = [ThreatEvent.decode(r.blob()) for _ in range(r.u32())]
    r.done()
    return events, cursor


@dataclass(frozen=True)
class Ack:
    event_id: str
    index: int


class ThreatExchange:
    """Append-only event journal; optionally file-backed (one hex event per line)."""

    def __init__(self, path: Optional[Union[str, Path]] = None, publishers: Optional[set[str]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.publishers = publishers
        self._events: list[ThreatEvent] = []
        self._ids: set[str] = set()
        self.cursors: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._add(ThreatEvent.decode(bytes.fromhex(line)))

    def _add(self, event: ThreatEvent) -> int:
        if event.event_id in self._ids:
            raise DuplicateEventId(event.event_id)
        self._events.append(event)
        self._ids.add(event.event_id)
        return len(self._events) - 1

    def publish(self, event: ThreatEvent) -> Ack:
        with self._lock:
            if self.publishers is not None and event.reported_by not in self.publishers:
                raise UnregisteredPublisher(event.reported_by)
            if event.event_id in self._ids:
                raise DuplicateEventId(event.event_id)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(event.encode().hex() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            return Ack(event.event_id, self._add(event))

    def pull_since(self, cursor: int) -> tuple[list[ThreatEvent], int]:
        with self._lock:
            if not 0 <= cursor <= len(self._events):
                raise BadCursor(f"cursor {cursor} outside [0, {len(self._events)}]")
            return list(self._events[cursor:]), len(self._events)

    def pull(self, subscriber: str) -> list[ThreatEvent]:
        """Pull using (and advancing) the cursor stored for ``subscriber``."""
        events, cursor = self.pull_since(self.cursors.get(subscriber, 0))
        self.cursors[subscriber] = cursor
        return events

    @property
    def events(self) -> tuple[ThreatEvent, ...]:
        return tuple(self._events)

    def __len__(self) -> int:
        return len(self._events)


class ExchangeClient:
    """HTTP client with the same publish/pull_since contract as ThreatExchange."""

    def __init__(self, url: str, timeout: float = 5.0) -> None:
        self.url = url.rstrip("/")
        self.timeout = timeout

    def publish(self, event: ThreatEvent) -> Ack:
        status, data = _http.request(self.url + "/events", event.encode(), self.timeout)
        payload = json.loads(data)
        if status == 409:
            raise DuplicateEventId(event.event_id)
        if status == 403:
            raise UnregisteredPublisher(event.reported_by)
        if status != 200:
            raise ValueError(payload.get("error", f"HTTP {status}"))
        return Ack(payload["event_id"], payload["index"])

    def pull_since(self, cursor: int) -> tuple[list[ThreatEvent], int]:
        status, data = _http.request(f"{self.url}/events?cursor={cursor}", timeout=self.timeout)
        if status == 400:
            raise BadCursor(json.loads(data).get("error", "bad cursor"))
        if status != 200:
            raise ValueError(f"HTTP {status}")
        return decode_events(data)


def make_exchange_server(exchange: ThreatExchange, host: str = "127.0.0.1", port: int = 0):
    def post_events(query, body):
        try:
            ack = exchange.publish(ThreatEvent.decode(body))
        except DuplicateEventId as exc:
            raise _http.HttpError(409, f"duplicate event id {exc}") from None
        except UnregisteredPublisher as exc:
            raise _http.HttpError(403, f"unregistered publisher {exc}") from None
        return _http.json_response({"event_id": ack.event_id, "index": ack.index})

    def _pull(query):
        try:
            return exchange.pull_since(_http.int_param(query, "cursor", 0))
        except BadCursor as exc:
            raise _http.HttpError(400, str(exc)) from None

    def get_events(query, body):
        events, cursor = _pull(query)
        return 200, _http.BINARY, encode_events(events, cursor)

    def get_events_json(query, body):
        events, cursor = _pull(query)
        return _http.json_response({"cursor": cursor, "events": [e.to_json() for e in events]})

    routes = {
        ("POST", "/events"): post_events,
        ("GET", "/events"): get_events,
        ("GET", "/events.json"): get_events_json,
    }
    return _http.make_server(routes, host, port)


# ---------------------------------------------------------------------------
# Store / CA actors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DelistPackage:
    package_digest: bytes
    package_name: str


@dataclass(frozen=True)
class TriggerReevaluation:
    developer_fingerprint: bytes
    threat: OpenThreat


Action = Union[DelistPackage, TriggerReevaluation]


@dataclass(frozen=True)
class Listing:
    package_name: str
    developer_fingerprint: bytes


@dataclass
class StoreActor:
    """An app store, optionally also acting as an intermediate CA."""

    store_id: str
    authority: Optional[CertificateAuthority] = None
    listings: dict[bytes, Listing] = field(default_factory=dict)
    delisted: dict[bytes, Listing] = field(default_factory=dict)
    open_threats: dict[bytes, list[OpenThreat]] = field(default_factory=dict)
    handled: set[str] = field(default_factory=set)

    def list_package(self, package_digest: bytes, package_name: str, developer_fingerprint: bytes) -> None:
        self.listings[package_digest] = Listing(package_name, developer_fingerprint)

    def is_listed(self, package_digest: bytes) -> bool:
        return package_digest in self.listings


def ingest(actor: StoreActor, event: ThreatEvent) -> list[Action]:
    """Apply an event to ``actor``; repeated delivery of the same event is a no-op."""
    if event.event_id in actor.handled:
        return []
    actor.handled.add(event.event_id)
    actions: list[Action] = []
    if event.package_digest is not None and event.package_digest in actor.listings:
        listing = actor.listings.pop(event.package_digest)
        actor.delisted[event.package_digest] = listing
        actions.append(DelistPackage(event.package_digest, listing.package_name))
    ca = actor.authority
    if ca is not None and ca.has_issued_to(event.developer_fingerprint):
        threat = OpenThreat(event.severity, event.event_id)
        actor.open_threats.setdefault(event.developer_fingerprint, []).append(threat)
        actions.append(TriggerReevaluation(event.developer_fingerprint, threat))
    return actions
