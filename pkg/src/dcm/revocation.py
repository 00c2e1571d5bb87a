"""OCSP-style status responder and client, plus signed CRLs.

Wire format: ``POST /status`` with a canonical :class:`StatusRequest`, answered
by a canonical :class:`StatusResponse`. ``GET /status.json`` mirrors the
answer as JSON for debugging and ``GET /crl?issuer=<hex>`` serves the CRL.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import _http
from .authority import CertificateAuthority, RegistryView, RevocationReason
from .encoding import Reader, Writer
from .errors import (
    BadResponderSignature,
    DecodeError,
    SignatureInvalid,
    StaleResponse,
    Unreachable,
)
from .trust import (
    DIGEST_SIZE,
    OCSP_SIGNING_EXT,
    SIGNATURE_SIZE,
    Certificate,
    read_certificate_from,
    sign_bytes,
    signature_valid,
    verify_certificate_signature,
    write_certificate_to,
)

DEFAULT_MAX_AGE = 600


class CertStatus(enum.Enum):
    GOOD = "good"
    UNKNOWN = "unknown"
    REVOKED = "revoked"


@dataclass(frozen=True)
class StatusRequest:
    issuer_fingerprint: bytes
    serial: int

    def encode(self) -> bytes:
        return Writer().fixed(self.issuer_fingerprint, DIGEST_SIZE).u128(self.serial).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "StatusRequest":
        r = Reader(data)
        req = cls(r.fixed(DIGEST_SIZE), r.u128())
        r.done()
        return req


@dataclass(frozen=True)
class StatusResponse:
    issuer_fingerprint: bytes
    serial: int
    status: CertStatus
    revoked_at: Optional[int]
    reason: Optional[RevocationReason]
    produced_at: int
    signature: bytes = b""
    # Present when a delegated key, not the issuer key, signed the response.
    delegation: Optional[Certificate] = None

    def body_bytes(self) -> bytes:
        w = Writer().fixed(self.issuer_fingerprint, DIGEST_SIZE).u128(self.serial)
        w.text(self.status.value).opt_u64(self.revoked_at)
        w.opt_text(None if self.reason is None else self.reason.value)
        return w.u64(self.produced_at).getvalue()

    def encode(self) -> bytes:
        w = Writer().blob(self.body_bytes()).fixed(self.signature, SIGNATURE_SIZE)
        if self.delegation is None:
            w.u8(0)
        else:
            w.u8(1)
            write_certificate_to(w, self.delegation)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "StatusResponse":
        r = Reader(data)
        body = Reader(r.blob())
        signature = r.fixed(SIGNATURE_SIZE)
        delegation = read_certificate_from(r) if r.flag() else None
        r.done()
        try:
            issuer, serial = body.fixed(DIGEST_SIZE), body.u128()
            status = CertStatus(body.text())
            revoked_at = body.opt_u64()
            reason_text = body.opt_text()
            reason = None if reason_text is None else RevocationReason(reason_text)
            produced_at = body.u64()
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        body.done()
        return cls(issuer, serial, status, revoked_at, reason, produced_at, signature, delegation)

    def to_json(self) -> dict:
        return {
            "issuer_fingerprint": self.issuer_fingerprint.hex(),
            "serial": self.serial,
            "status": self.status.value,
            "revoked_at": self.revoked_at,
            "reason": None if self.reason is None else self.reason.value,
            "produced_at": self.produced_at,
            "signature": self.signature.hex(),
            "delegated": self.delegation is not None,
        }


def serve_status(
    request: StatusRequest,
    registry: RegistryView,
    signing_key: Ed25519PrivateKey,
    now: int,
    delegation: Optional[Certificate] = None,
) -> StatusResponse:
    """Answer one status query against a registry snapshot."""
    revoked_at = reason = None
    if request.issuer_fingerprint != registry.issuer_fingerprint or request.serial not in registry.issued:
        status = CertStatus.UNKNOWN
    elif request.serial in registry.revoked:
        record = registry.revoked[request.serial]
        status, revoked_at, reason = CertStatus.REVOKED, record.revoked_at, record.reason
    else:
        status = CertStatus.GOOD
    unsigned = StatusResponse(
        request.issuer_fingerprint, request.serial, status, revoked_at, reason, now
    )
    signature = sign_bytes(signing_key, unsigned.body_bytes())
    return StatusResponse(
        unsigned.issuer_fingerprint, unsigned.serial, status, revoked_at, reason, now, signature, delegation
    )


@dataclass
class _Issuer:
    registry: Callable[[], RegistryView]
    signing_key: Ed25519PrivateKey
    delegation: Optional[Certificate]


class OcspResponder:
    """Answers for any number of issuers; each answer reads a fresh snapshot."""

    def __init__(self, clock: Callable[[], int]) -> None:
        self.clock = clock
        self._issuers: dict[bytes, _Issuer] = {}
        self._lock = threading.Lock()

    def add_authority(
        self,
        ca: CertificateAuthority,
        signing_key: Optional[Ed25519PrivateKey] = None,
        delegation: Optional[Certificate] = None,
    ) -> None:
        if (signing_key is None) != (delegation is None):
            raise ValueError("a delegated signing key needs its delegation certificate")
        self.add_registry(ca.fingerprint, ca.registry_view, signing_key or ca.secret_key, delegation)

    def add_registry(
        self,
        issuer_fingerprint: bytes,
        registry: Callable[[], RegistryView],
        signing_key: Ed25519PrivateKey,
        delegation: Optional[Certificate] = None,
    ) -> None:
        with self._lock:
            self._issuers[issuer_fingerprint] = _Issuer(registry, signing_key, delegation)

    def respond(self, request: StatusRequest) -> StatusResponse:
        with self._lock:
            issuer = self._issuers.get(request.issuer_fingerprint)
        if issuer is None:
            raise LookupError(f"not authoritative for issuer {request.issuer_fingerprint.hex()[:16]}")
        return serve_status(request, issuer.registry(), issuer.signing_key, self.clock(), issuer.delegation)

    def respond_bytes(self, data: bytes) -> bytes:
        return self.respond(StatusRequest.decode(data)).encode()

    def crl(self, issuer_fingerprint: bytes) -> "Crl":
        issuer = self._issuers[issuer_fingerprint]
        return build_crl(issuer.registry(), issuer.signing_key, self.clock())


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


class Transport(Protocol):
    def query(self, request: bytes) -> bytes: ...


class LoopbackTransport:
    """In-process transport; ``up=False`` simulates an unreachable responder."""

    def __init__(self, responder: OcspResponder, up: bool = True) -> None:
        self.responder = responder
        self.up = up

    def query(self, request: bytes) -> bytes:
        if not self.up:
            raise Unreachable("responder is down")
        try:
            return self.responder.respond_bytes(request)
        except LookupError as exc:
            raise Unreachable(str(exc)) from exc


class HttpTransport:
    def __init__(self, url: str, timeout: float = 5.0) -> None:
        self.url = url.rstrip("/")
        self.timeout = timeout

    def query(self, request: bytes) -> bytes:
        try:
            status, data = _http.request(self.url + "/status", request, self.timeout)
        except OSError as exc:
            raise Unreachable(str(exc)) from exc
        if status != 200:
            raise Unreachable(f"responder answered HTTP {status}")
        return data


Endpoint = Union[str, Transport]


def _transport(endpoint: Endpoint) -> Transport:
    return HttpTransport(endpoint) if isinstance(endpoint, str) else endpoint


def verify_response(
    response: StatusResponse,
    request: StatusRequest,
    responder_key: bytes,
    now: int,
    max_age: int = DEFAULT_MAX_AGE,
) -> None:
    if (response.issuer_fingerprint, response.serial) != (request.issuer_fingerprint, request.serial):
        raise BadResponderSignature("response does not answer the request")
    signer = responder_key
    if response.delegation is not None:
        d = response.delegation
        try:
            verify_certificate_signature(d, responder_key)
        except SignatureInvalid as exc:
            raise BadResponderSignature("delegation certificate not signed by issuer") from exc
        if d.body.extensions.get(OCSP_SIGNING_EXT) != "1" or d.body.issuer_fingerprint != request.issuer_fingerprint:
            raise BadResponderSignature("delegation certificate lacks status-signing authority")
        if not d.body.not_before <= now <= d.body.not_after:
            raise BadResponderSignature("delegation certificate outside validity window")
        signer = d.public_key
    if not signature_valid(signer, response.signature, response.body_bytes()):
        raise BadResponderSignature("response signature does not verify")
    if now - response.produced_at > max_age:
        raise StaleResponse(f"response is {now - response.produced_at}s old (max {max_age}s)")


class StatusClient:
    """Verifying status client with a per-process cache bounded by ``max_age``."""

    def __init__(self, endpoint: Endpoint, max_age: int = DEFAULT_MAX_AGE, cache: bool = True) -> None:
        self.transport = _transport(endpoint)
        self.max_age = max_age
        self._cache: Optional[dict[tuple[bytes, int], StatusResponse]] = {} if cache else None
        self._lock = threading.Lock()

    def check(self, serial: int, issuer_fingerprint: bytes, responder_key: bytes, now: int) -> StatusResponse:
        key = (issuer_fingerprint, serial)
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None and now - hit.produced_at <= self.max_age:
                return hit
        request = StatusRequest(issuer_fingerprint, serial)
        raw = self.transport.query(request.encode())
        try:
            response = StatusResponse.decode(raw)
        except DecodeError as exc:
            raise BadResponderSignature(f"unparseable response: {exc}") from exc
        verify_response(response, request, responder_key, now, self.max_age)
        if self._cache is not None:
            with self._lock:
                self._cache[key] = response
        return response

    def clear_cache(self) -> None:
        if self._cache is not None:
            with self._lock:
                self._cache.clear()


def check_status(
    serial: int,
    issuer_fingerprint: bytes,
    endpoint: Endpoint,
    responder_key: bytes,
    now: int,
    max_age: int = DEFAULT_MAX_AGE,
) -> CertStatus:
    client = StatusClient(endpoint, max_age, cache=False)
    return client.check(serial, issuer_fingerprint, responder_key, now).status


# ---------------------------------------------------------------------------
# CRL
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrlEntry:
    serial: int
    revoked_at: int
    reason: RevocationReason


@dataclass(frozen=True)
class Crl:
    issuer_fingerprint: bytes
    issued_at: int
    entries: tuple[CrlEntry, ...]
    signature: bytes = b""

    def body_bytes(self) -> bytes:
        w = Writer().fixed(self.issuer_fingerprint, DIGEST_SIZE).u64(self.issued_at).u32(len(self.entries))
        for e in self.entries:
            w.u128(e.serial).u64(e.revoked_at).text(e.reason.value)
        return w.getvalue()

    def encode(self) -> bytes:
        return Writer().blob(self.body_bytes()).fixed(self.signature, SIGNATURE_SIZE).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Crl":
        r = Reader(data)
        body = Reader(r.blob())
        signature = r.fixed(SIGNATURE_SIZE)
        r.done()
        issuer, issued_at = body.fixed(DIGEST_SIZE), body.u64()
        try:
            entries = tuple(
                CrlEntry(body.u128(), body.u64(), RevocationReason(body.text())) for _ in range(body.u32())
            )
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        body.done()
        return cls(issuer, issued_at, entries, signature)

    def serials(self) -> set[int]:
        return {e.serial for e in self.entries}

    def __contains__(self, serial: int) -> bool:
        return serial in self.serials()

    def to_json(self) -> dict:
        return {
            "issuer_fingerprint": self.issuer_fingerprint.hex(),
            "issued_at": self.issued_at,
            "entries": [
                {"serial": e.serial, "revoked_at": e.revoked_at, "reason": e.reason.value} for e in self.entries
            ],
        }


def build_crl(registry: RegistryView, signing_key: Ed25519PrivateKey, now: int) -> Crl:
    entries = tuple(
        CrlEntry(serial, rec.revoked_at, rec.reason) for serial, rec in sorted(registry.revoked.items())
    )
    unsigned = Crl(registry.issuer_fingerprint, now, entries)
    return Crl(unsigned.issuer_fingerprint, now, entries, sign_bytes(signing_key, unsigned.body_bytes()))


def verify_crl(crl: Crl, issuer_public: bytes) -> bool:
    serials = [e.serial for e in crl.entries]
    if serials != sorted(serials):
        return False
    return signature_valid(issuer_public, crl.signature, crl.body_bytes())


# ---------------------------------------------------------------------------
# HTTP
# ---------------------------------------------------------------------------


def make_ocsp_server(responder: OcspResponder, host: str = "127.0.0.1", port: int = 0):
    def status(query, body):
        try:
            return 200, _http.BINARY, responder.respond_bytes(body)
        except DecodeError as exc:
            raise _http.HttpError(400, f"bad request: {exc}") from None
        except LookupError as exc:
            raise _http.HttpError(404, str(exc)) from None

    def status_json(query, body):
        try:
            req = StatusRequest(bytes.fromhex(query.get("issuer", "")), _http.int_param(query, "serial"))
            return _http.json_response(responder.respond(req).to_json())
        except ValueError as exc:
            raise _http.HttpError(400, str(exc)) from None
        except LookupError as exc:
            raise _http.HttpError(404, str(exc)) from None

    def crl(query, body):
        try:
            return 200, _http.BINARY, responder.crl(bytes.fromhex(query.get("issuer", ""))).encode()
        except (KeyError, ValueError):
            raise _http.HttpError(404, "unknown issuer") from None

    routes = {
        ("POST", "/status"): status,
        ("GET", "/status.json"): status_json,
        ("POST", "/status.json"): status_json,
        ("GET", "/crl"): crl,
    }
    return _http.make_server(routes, host, port)


def fetch_crl(url: str, issuer_fingerprint: bytes, timeout: float = 5.0) -> Crl:
    try:
        status, data = _http.request(f"{url.rstrip('/')}/crl?issuer={issuer_fingerprint.hex()}", timeout=timeout)
    except OSError as exc:
        raise Unreachable(str(exc)) from exc
    if status != 200:
        raise Unreachable(f"HTTP {status}")
    return Crl.decode(data)
