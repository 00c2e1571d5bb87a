"""Append-only certificate transparency log.

Merkle tree hashing follows RFC 6962: leaves are ``H(0x00 || data)``,
interior nodes ``H(0x01 || left || right)``, the empty tree hashes to
``H("")``. Proof verification follows the iterative algorithms of RFC 9162.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import _http
from .encoding import Reader, Writer
from .errors import (
    CtLogUnreachable,
    DecodeError,
    IndexOutOfRange,
    LogCorrupted,
    SizeOutOfRange,
)
from .policy import PolicyEvidence, evaluate_policy
from .trust import (
    DIGEST_SIZE,
    SIGNATURE_SIZE,
    Certificate,
    CertificateRole,
    TrustLevel,
    decode_certificate,
    digest,
    encode_certificate,
    fingerprint,
    generate_signing_key,
    public_key_bytes,
    read_secret_key,
    sign_bytes,
    signature_valid,
    write_secret_key,
)

logger = logging.getLogger(__name__)

EMPTY_ROOT = digest(b"")


def hash_leaf(data: bytes) -> bytes:
    return digest(b"\x00" + data)


def hash_children(left: bytes, right: bytes) -> bytes:
    return digest(b"\x01" + left + right)


def certificate_leaf_hash(cert: Certificate) -> bytes:
    return hash_leaf(encode_certificate(cert))


def _split(n: int) -> int:
    """Largest power of two strictly smaller than n (n >= 2)."""
    k = 1
    while k << 1 < n:
        k <<= 1
    return k


def merkle_root(leaf_hashes: Sequence[bytes]) -> bytes:
    """Tree head over already-hashed leaves."""
    n = len(leaf_hashes)
    if n == 0:
        return EMPTY_ROOT
    if n == 1:
        return leaf_hashes[0]
    k = _split(n)
    return hash_children(merkle_root(leaf_hashes[:k]), merkle_root(leaf_hashes[k:]))


def inclusion_path(index: int, leaf_hashes: Sequence[bytes]) -> list[bytes]:
    n = len(leaf_hashes)
    if n <= 1:
        return []
    k = _split(n)
    if index < k:
        return inclusion_path(index, leaf_hashes[:k]) + [merkle_root(leaf_hashes[k:])]
    return inclusion_path(index - k, leaf_hashes[k:]) + [merkle_root(leaf_hashes[:k])]


def consistency_path(old_size: int, leaf_hashes: Sequence[bytes]) -> list[bytes]:
    def subproof(m: int, hashes: Sequence[bytes], complete: bool) -> list[bytes]:
        n = len(hashes)
        if m == n:
            return [] if complete else [merkle_root(hashes)]
        k = _split(n)
        if m <= k:
            return subproof(m, hashes[:k], complete) + [merkle_root(hashes[k:])]
        return subproof(m - k, hashes[k:], False) + [merkle_root(hashes[:k])]

    if old_size == len(leaf_hashes):
        return []
    return subproof(old_size, leaf_hashes, True)


def verify_inclusion(
    path: Sequence[bytes], leaf_hash: bytes, root: bytes, index: int, size: int
) -> bool:
    if not 0 <= index < size:
        return False
    fn, sn = index, size - 1
    r = leaf_hash
    for p in path:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            r = hash_children(p, r)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            r = hash_children(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root


def verify_consistency(
    path: Sequence[bytes], old_root: bytes, new_root: bytes, old_size: int, new_size: int
) -> bool:
    if not 0 < old_size <= new_size:
        return False
    if old_size == new_size:
        return not path and old_root == new_root
    if not path:
        return False
    path = list(path)
    if old_size & (old_size - 1) == 0:
        path.insert(0, old_root)
    fn, sn = old_size - 1, new_size - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = hash_children(c, fr)
            sr = hash_children(c, sr)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = hash_children(sr, c)
        fn >>= 1
        sn >>= 1
    return fr == old_root and sr == new_root and sn == 0


# ---------------------------------------------------------------------------
# Entries, receipts, proofs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    index: int
    timestamp: int
    certificate: Certificate

    @property
    def leaf_hash(self) -> bytes:
        return certificate_leaf_hash(self.certificate)

    def encode(self) -> bytes:
        w = Writer().u64(self.index).u64(self.timestamp)
        w.blob(encode_certificate(self.certificate))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "LogEntry":
        r = Reader(data)
        entry = cls(r.u64(), r.u64(), decode_certificate(r.blob()))
        r.done()
        return entry


@dataclass(frozen=True)
class SignedCertificateTimestamp:
    log_id: bytes
    index: int
    timestamp: int
    signature: bytes

    @staticmethod
    def signed_data(log_id: bytes, index: int, timestamp: int, leaf_hash: bytes) -> bytes:
        w = Writer().fixed(log_id, DIGEST_SIZE).u64(index).u64(timestamp)
        return w.fixed(leaf_hash, DIGEST_SIZE).getvalue()

    def verify(self, leaf_hash: bytes, log_public_key) -> bool:
        if fingerprint(log_public_key) != self.log_id:
            return False
        data = self.signed_data(self.log_id, self.index, self.timestamp, leaf_hash)
        return signature_valid(log_public_key, self.signature, data)

    def write_to(self, w: Writer) -> None:
        w.fixed(self.log_id, DIGEST_SIZE).u64(self.index).u64(self.timestamp)
        w.fixed(self.signature, SIGNATURE_SIZE)

    @classmethod
    def read_from(cls, r: Reader) -> "SignedCertificateTimestamp":
        return cls(r.fixed(DIGEST_SIZE), r.u64(), r.u64(), r.fixed(SIGNATURE_SIZE))

    def encode(self) -> bytes:
        w = Writer()
        self.write_to(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SignedCertificateTimestamp":
        r = Reader(data)
        sct = cls.read_from(r)
        r.done()
        return sct

    def to_json(self) -> dict:
        return {
            "log_id": self.log_id.hex(),
            "index": self.index,
            "timestamp": self.timestamp,
            "signature": self.signature.hex(),
        }


@dataclass(frozen=True)
class InclusionProof:
    index: int
    size: int
    path: tuple[bytes, ...]

    def to_json(self) -> dict:
        return {"index": self.index, "size": self.size, "path": [h.hex() for h in self.path]}


@dataclass(frozen=True)
class ConsistencyProof:
    old_size: int
    new_size: int
    path: tuple[bytes, ...]

    def to_json(self) -> dict:
        return {
            "old_size": self.old_size,
            "new_size": self.new_size,
            "path": [h.hex() for h in self.path],
        }


# ---------------------------------------------------------------------------
# The log
# ---------------------------------------------------------------------------

Clock = Callable[[], int]


def _wall_clock() -> int:
    return int(time.time())


class CTLog:
    """In-memory log, optionally backed by a directory.

    Directory layout: ``log.key`` (secret), ``entries.log`` (one hex-encoded
    entry per line, append-only) and ``checkpoint.json`` (last size + root,
    checked on load).
    """

    def __init__(
        self,
        signing_key: Optional[Ed25519PrivateKey] = None,
        clock: Clock = _wall_clock,
        directory: Optional[Union[str, Path]] = None,
    ) -> None:
        self.signing_key = signing_key or generate_signing_key()
        self.clock = clock
        self.directory = Path(directory) if directory is not None else None
        self._entries: list[LogEntry] = []
        self._leaves: list[bytes] = []
        self._lock = threading.Lock()

    @property
    def public_key(self) -> bytes:
        return public_key_bytes(self.signing_key)

    @property
    def log_id(self) -> bytes:
        return fingerprint(self.public_key)

    @property
    def size(self) -> int:
        return len(self._leaves)

    @property
    def entries(self) -> tuple[LogEntry, ...]:
        return tuple(self._entries)

    def leaf_hashes(self, size: Optional[int] = None) -> list[bytes]:
        return self._leaves[: self.size if size is None else size]

    # -- persistence -------------------------------------------------------

    @classmethod
    def create(cls, directory: Union[str, Path], clock: Clock = _wall_clock, signing_key=None) -> "CTLog":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        log = cls(signing_key, clock, directory)
        write_secret_key(directory / "log.key", log.signing_key)
        (directory / "entries.log").touch()
        log._write_checkpoint()
        return log

    @classmethod
    def open(cls, directory: Union[str, Path], clock: Clock = _wall_clock) -> "CTLog":
        directory = Path(directory)
        log = cls(read_secret_key(directory / "log.key"), clock, directory)
        for lineno, line in enumerate((directory / "entries.log").read_text().splitlines()):
            if not line.strip():
                continue
            try:
                entry = LogEntry.decode(bytes.fromhex(line))
            except (ValueError, DecodeError) as exc:
                raise LogCorrupted(f"entries.log line {lineno + 1}: {exc}") from exc
            if entry.index != log.size:
                raise LogCorrupted(f"entry index {entry.index} out of sequence at line {lineno + 1}")
            log._entries.append(entry)
            log._leaves.append(entry.leaf_hash)
        checkpoint = json.loads((directory / "checkpoint.json").read_text())
        size = checkpoint["size"]
        if size > log.size or log.root_hash(size).hex() != checkpoint["root"]:
            raise LogCorrupted(f"recomputed root does not match checkpoint at size {size}")
        return log

    def _write_checkpoint(self) -> None:
        assert self.directory is not None
        tmp = self.directory / "checkpoint.json.tmp"
        tmp.write_text(json.dumps({"size": self.size, "root": self.root_hash().hex()}))
        os.replace(tmp, self.directory / "checkpoint.json")

    # -- operations --------------------------------------------------------

    def append(self, certificate: Certificate, now: Optional[int] = None) -> SignedCertificateTimestamp:
        with self._lock:
            timestamp = self.clock() if now is None else now
            entry = LogEntry(self.size, timestamp, certificate)
            if self.directory is not None:
                with open(self.directory / "entries.log", "a") as fh:
                    fh.write(entry.encode().hex() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._entries.append(entry)
            self._leaves.append(entry.leaf_hash)
            if self.directory is not None:
                self._write_checkpoint()
            data = SignedCertificateTimestamp.signed_data(
                self.log_id, entry.index, timestamp, entry.leaf_hash
            )
            return SignedCertificateTimestamp(self.log_id, entry.index, timestamp, sign_bytes(self.signing_key, data))

    submit = append

    def root_hash(self, size: Optional[int] = None) -> bytes:
        size = self.size if size is None else size
        if not 0 <= size <= self.size:
            raise SizeOutOfRange(f"size {size} outside [0, {self.size}]")
        return merkle_root(self._leaves[:size])

    def inclusion_proof(self, index: int, size: Optional[int] = None) -> InclusionProof:
        size = self.size if size is None else size
        if not 0 <= index < size <= self.size:
            raise IndexOutOfRange(f"need 0 <= index({index}) < size({size}) <= {self.size}")
        return InclusionProof(index, size, tuple(inclusion_path(index, self._leaves[:size])))

    def consistency_proof(self, old_size: int, new_size: Optional[int] = None) -> ConsistencyProof:
        new_size = self.size if new_size is None else new_size
        if not 0 < old_size <= new_size <= self.size:
            raise SizeOutOfRange(f"need 0 < old({old_size}) <= new({new_size}) <= {self.size}")
        path = consistency_path(old_size, self._leaves[:new_size])
        return ConsistencyProof(old_size, new_size, tuple(path))

    def find(self, certificate: Certificate) -> Optional[LogEntry]:
        leaf = certificate_leaf_hash(certificate)
        for entry, h in zip(self._entries, self._leaves):
            if h == leaf:
                return entry
        return None


# ---------------------------------------------------------------------------
# Monitor
# ---------------------------------------------------------------------------


class AlertKind(enum.Enum):
    TRUSTED_WITHOUT_EVIDENCE = "TrustedWithoutEvidence"
    DUPLICATE_ACTIVE_CERT = "DuplicateActiveCert"
    UNKNOWN_ISSUER = "UnknownIssuer"


@dataclass(frozen=True)
class MonitorAlert:
    kind: AlertKind
    index: int
    detail: str

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "index": self.index, "detail": self.detail}


@dataclass
class MonitorContext:
    """What a monitor knows besides the log itself.

    ``evidence_for(issuer_fp, serial)`` returns the evidence the issuer holds
    for that issuance (or None); ``is_revoked(issuer_fp, serial)`` reports
    revocation state.
    """

    known_issuers: set[bytes]
    evidence_for: Callable[[bytes, int], Optional[PolicyEvidence]]
    is_revoked: Callable[[bytes, int], bool] = lambda issuer, serial: False
    policy: Callable[[PolicyEvidence], TrustLevel] = evaluate_policy


def monitor_scan(entries: Iterable[LogEntry], context: MonitorContext) -> list[MonitorAlert]:
    if isinstance(entries, CTLog):
        entries = entries.entries
    alerts: list[MonitorAlert] = []
    active: dict[bytes, LogEntry] = {}
    for entry in entries:
        body = entry.certificate.body
        issuer = body.issuer_fingerprint
        if issuer not in context.known_issuers:
            alerts.append(MonitorAlert(
                AlertKind.UNKNOWN_ISSUER, entry.index,
                f"serial {body.serial} issued by unregistered issuer {issuer.hex()[:16]}",
            ))
            continue
        if body.role is not CertificateRole.DEVELOPER:
            continue
        if body.trust_level is TrustLevel.TRUSTED:
            evidence = context.evidence_for(issuer, body.serial)
            if evidence is None or context.policy(evidence) is not TrustLevel.TRUSTED:
                got = "no evidence" if evidence is None else f"evidence grades {context.policy(evidence).value}"
                alerts.append(MonitorAlert(
                    AlertKind.TRUSTED_WITHOUT_EVIDENCE, entry.index,
                    f"serial {body.serial} marked Trusted but issuer has {got}",
                ))
        if context.is_revoked(issuer, body.serial):
            continue
        dev = body.subject_fingerprint
        previous = active.get(dev)
        if previous is not None and not context.is_revoked(
            previous.certificate.body.issuer_fingerprint, previous.certificate.serial
        ):
            alerts.append(MonitorAlert(
                AlertKind.DUPLICATE_ACTIVE_CERT, entry.index,
                f"developer {dev.hex()[:16]} already holds active cert at index {previous.index}",
            ))
        active[dev] = entry
    return alerts


# ---------------------------------------------------------------------------
# HTTP service and client
# ---------------------------------------------------------------------------


def make_ctlog_server(
    log: CTLog,
    host: str = "127.0.0.1",
    port: int = 0,
    monitor_context: Optional[Callable[[], MonitorContext]] = None,
):
    def submit(query, body):
        cert = decode_certificate(body)
        return 200, _http.BINARY, log.append(cert).encode()

    def root(query, body):
        size = _http.int_param(query, "size", log.size)
        try:
            return _http.json_response({"size": size, "root": log.root_hash(size).hex()})
        except SizeOutOfRange as exc:
            raise _http.HttpError(400, str(exc)) from None

    def inclusion(query, body):
        try:
            proof = log.inclusion_proof(_http.int_param(query, "index"), _http.int_param(query, "size", log.size))
        except IndexOutOfRange as exc:
            raise _http.HttpError(400, str(exc)) from None
        return _http.json_response(proof.to_json())

    def consistency(query, body):
        try:
            proof = log.consistency_proof(_http.int_param(query, "old"), _http.int_param(query, "new", log.size))
        except SizeOutOfRange as exc:
            raise _http.HttpError(400, str(exc)) from None
        return _http.json_response(proof.to_json())

    def alerts(query, body):
        if monitor_context is None:
            return _http.json_response([])
        return _http.json_response([a.to_json() for a in monitor_scan(log.entries, monitor_context())])

    def key(query, body):
        return _http.json_response({"public_key": log.public_key.hex(), "log_id": log.log_id.hex()})

    routes = {
        ("POST", "/submit"): submit,
        ("GET", "/root"): root,
        ("GET", "/inclusion"): inclusion,
        ("GET", "/consistency"): consistency,
        ("GET", "/alerts"): alerts,
        ("GET", "/key"): key,
    }
    return _http.make_server(routes, host, port)


class CtLogClient:
    """Remote log; ``submit`` has the same contract as :meth:`CTLog.append`."""

    def __init__(self, url: str, timeout: float = 5.0) -> None:
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _get_json(self, path: str) -> dict:
        try:
            status, data = _http.request(self.url + path, timeout=self.timeout)
        except OSError as exc:
            raise CtLogUnreachable(str(exc)) from exc
        payload = json.loads(data)
        if status != 200:
            raise ValueError(payload.get("error", f"HTTP {status}"))
        return payload

    def submit(self, certificate: Certificate) -> SignedCertificateTimestamp:
        try:
            status, data = _http.request(self.url + "/submit", encode_certificate(certificate), self.timeout)
        except OSError as exc:
            raise CtLogUnreachable(str(exc)) from exc
        if status != 200:
            raise CtLogUnreachable(f"log rejected submission: HTTP {status}")
        return SignedCertificateTimestamp.decode(data)

    @property
    def public_key(self) -> bytes:
        return bytes.fromhex(self._get_json("/key")["public_key"])

    def root_hash(self, size: Optional[int] = None) -> bytes:
        q = "" if size is None else f"?size={size}"
        return bytes.fromhex(self._get_json("/root" + q)["root"])

    def inclusion_proof(self, index: int, size: int) -> InclusionProof:
        p = self._get_json(f"/inclusion?index={index}&size={size}")
        return InclusionProof(p["index"], p["size"], tuple(bytes.fromhex(h) for h in p["path"]))

    def consistency_proof(self, old_size: int, new_size: int) -> ConsistencyProof:
        p = self._get_json(f"/consistency?old={old_size}&new={new_size}")
        return ConsistencyProof(p["old_size"], p["new_size"], tuple(bytes.fromhex(h) for h in p["path"]))

    def alerts(self) -> list[dict]:
        return self._get_json("/alerts")
