"""Certificate model, canonical encoding, signatures and chain validation.

Certificates bind a subject identity and an Ed25519 public key to an issuer.
Developer certificates additionally carry a trust level in the
``dcm.trust_level`` extension.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import os
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from .encoding import Reader, Writer
from .errors import DecodeError, InvalidBody, InvalidIdentity, SignatureInvalid

KEY_SIZE = 32
SIGNATURE_SIZE = 64
DIGEST_SIZE = 32
TRUST_LEVEL_EXT = "dcm.trust_level"
THREATS_EXT = "dcm.threats"
OCSP_SIGNING_EXT = "dcm.ocsp_signing"
CERT_FILE_MAGIC = b"DCM1"
_BODY_VERSION = 1
_COUNTRY = re.compile(r"^[A-Z]{2}$")

PublicKeyLike = Union[bytes, Ed25519PublicKey]


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


def generate_signing_key(rng: Optional[random.Random] = None) -> Ed25519PrivateKey:
    """Fresh Ed25519 key. Pass a seeded ``random.Random`` for reproducible runs."""
    if rng is None:
        return Ed25519PrivateKey.generate()
    return Ed25519PrivateKey.from_private_bytes(rng.randbytes(KEY_SIZE))


def public_key_bytes(key: Union[Ed25519PrivateKey, PublicKeyLike]) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    if isinstance(key, Ed25519PublicKey):
        return key.public_bytes(Encoding.Raw, PublicFormat.Raw)
    key = bytes(key)
    if len(key) != KEY_SIZE:
        raise ValueError(f"public key must be {KEY_SIZE} bytes")
    return key


def secret_key_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def fingerprint(public_key: PublicKeyLike) -> bytes:
    """32-byte SHA-256 digest of the raw public key bytes."""
    return digest(public_key_bytes(public_key))


def sign_bytes(secret: Ed25519PrivateKey, data: bytes) -> bytes:
    return secret.sign(data)


def signature_valid(public_key: PublicKeyLike, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key_bytes(public_key)).verify(
            bytes(signature), data
        )
    except (InvalidSignature, ValueError):
        return False
    return True


def write_secret_key(path: Union[str, Path], key: Ed25519PrivateKey) -> None:
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(secret_key_bytes(key).hex() + "\n")
    os.chmod(path, 0o600)


def read_secret_key(path: Union[str, Path]) -> Ed25519PrivateKey:
    raw = bytes.fromhex(Path(path).read_text().strip())
    return Ed25519PrivateKey.from_private_bytes(raw)


def write_public_key(path: Union[str, Path], key: PublicKeyLike) -> None:
    Path(path).write_text(public_key_bytes(key).hex() + "\n")


def read_public_key(path: Union[str, Path]) -> bytes:
    return public_key_bytes(bytes.fromhex(Path(path).read_text().strip()))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@functools.total_ordering
class TrustLevel(enum.Enum):
    """Developer trust level, ordered by severity."""

    TRUSTED = "Trusted"
    UNKNOWN = "Unknown"
    WARNING = "Warning"
    CRITICAL = "Critical"

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, TrustLevel):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, text: str) -> "TrustLevel":
        return cls(text)


_RANK = {
    TrustLevel.TRUSTED: 0,
    TrustLevel.UNKNOWN: 1,
    TrustLevel.WARNING: 2,
    TrustLevel.CRITICAL: 3,
}


class CertificateRole(enum.Enum):
    ROOT = 1
    INTERMEDIATE = 2
    DEVELOPER = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class SubjectIdentity:
    common_name: str
    organization: str = ""
    organizational_unit: Optional[str] = None
    locality: Optional[str] = None
    state_region: Optional[str] = None
    country: Optional[str] = None
    email: Optional[str] = None

    def validate(self) -> None:
        if not self.common_name:
            raise InvalidIdentity("common_name must be non-empty")
        if self.country is not None and not _COUNTRY.match(self.country):
            raise InvalidIdentity(f"country must be 2 uppercase letters, got {self.country!r}")

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class CertificateBody:
    serial: int
    role: CertificateRole
    subject: SubjectIdentity
    subject_public_key: bytes
    issuer_fingerprint: bytes
    not_before: int
    not_after: int
    extensions: Mapping[str, str] = field(default_factory=dict)

    @property
    def trust_level(self) -> Optional[TrustLevel]:
        value = self.extensions.get(TRUST_LEVEL_EXT)
        if value is None:
            return None
        try:
            return TrustLevel(value)
        except ValueError:
            return None

    @property
    def subject_fingerprint(self) -> bytes:
        return fingerprint(self.subject_public_key)

    def validate(self) -> None:
        try:
            self.subject.validate()
        except InvalidIdentity as exc:
            raise InvalidBody(str(exc)) from exc
        if not 0 <= self.serial < 1 << 128:
            raise InvalidBody("serial must be a 128-bit unsigned integer")
        if len(self.subject_public_key) != KEY_SIZE:
            raise InvalidBody("subject_public_key must be 32 bytes")
        if len(self.issuer_fingerprint) != DIGEST_SIZE:
            raise InvalidBody("issuer_fingerprint must be 32 bytes")
        if not 0 <= self.not_before < self.not_after:
            raise InvalidBody("validity window requires 0 <= not_before < not_after")
        has_level = TRUST_LEVEL_EXT in self.extensions
        if self.role is CertificateRole.DEVELOPER:
            if self.trust_level is None:
                raise InvalidBody("developer certificate needs a valid dcm.trust_level extension")
        elif has_level:
            raise InvalidBody(f"{self.role.label} certificate must not carry a trust level")


@dataclass(frozen=True)
class Certificate:
    body: CertificateBody
    signature: bytes

    @property
    def serial(self) -> int:
        return self.body.serial

    @property
    def role(self) -> CertificateRole:
        return self.body.role

    @property
    def public_key(self) -> bytes:
        return self.body.subject_public_key

    @property
    def fingerprint(self) -> bytes:
        """Fingerprint of the certified (subject) key."""
        return self.body.subject_fingerprint

    @property
    def trust_level(self) -> Optional[TrustLevel]:
        return self.body.trust_level

    def encode(self) -> bytes:
        return encode_certificate(self)


CertificateChain = Sequence[Certificate]


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------


def canonical_encode(body: CertificateBody, *, strict: bool = True) -> bytes:
    """Deterministic byte encoding of a certificate body.

    Field order: version, serial, role, subject (CN, O, OU, L, S, C, email),
    subject key, issuer fingerprint, not_before, not_after, extensions sorted
    by key. ``strict=False`` skips semantic validation; it exists so tests can
    fabricate malformed certificates.
    """
    if strict:
        body.validate()
    s = body.subject
    w = Writer()
    w.u8(_BODY_VERSION)
    w.u128(body.serial)
    w.u8(body.role.value)
    w.text(s.common_name).text(s.organization)
    w.opt_text(s.organizational_unit).opt_text(s.locality).opt_text(s.state_region)
    w.opt_text(s.country).opt_text(s.email)
    w.fixed(body.subject_public_key, KEY_SIZE)
    w.fixed(body.issuer_fingerprint, DIGEST_SIZE)
    w.u64(body.not_before).u64(body.not_after)
    w.u32(len(body.extensions))
    for key in sorted(body.extensions):
        w.text(key).text(body.extensions[key])
    return w.getvalue()


def read_body(r: Reader) -> CertificateBody:
    version = r.u8()
    if version != _BODY_VERSION:
        raise DecodeError(f"unsupported body version {version}")
    serial = r.u128()
    try:
        role = CertificateRole(r.u8())
    except ValueError as exc:
        raise DecodeError("unknown certificate role") from exc
    subject = SubjectIdentity(
        common_name=r.text(),
        organization=r.text(),
        organizational_unit=r.opt_text(),
        locality=r.opt_text(),
        state_region=r.opt_text(),
        country=r.opt_text(),
        email=r.opt_text(),
    )
    key = r.fixed(KEY_SIZE)
    issuer = r.fixed(DIGEST_SIZE)
    not_before, not_after = r.u64(), r.u64()
    extensions: dict[str, str] = {}
    for _ in range(r.u32()):
        k = r.text()
        if k in extensions:
            raise DecodeError(f"duplicate extension {k!r}")
        extensions[k] = r.text()
    if list(extensions) != sorted(extensions):
        raise DecodeError("extensions not in canonical order")
    return CertificateBody(serial, role, subject, key, issuer, not_before, not_after, extensions)


def decode_body(data: bytes) -> CertificateBody:
    """Structural inverse of :func:`canonical_encode` (no semantic checks)."""
    r = Reader(data)
    body = read_body(r)
    r.done()
    return body


def write_certificate_to(w: Writer, cert: Certificate) -> None:
    w.blob(canonical_encode(cert.body, strict=False))
    w.fixed(cert.signature, SIGNATURE_SIZE)


def read_certificate_from(r: Reader) -> Certificate:
    body = decode_body(r.blob())
    return Certificate(body, r.fixed(SIGNATURE_SIZE))


def encode_certificate(cert: Certificate) -> bytes:
    w = Writer()
    write_certificate_to(w, cert)
    return w.getvalue()


def decode_certificate(data: bytes) -> Certificate:
    r = Reader(data)
    cert = read_certificate_from(r)
    r.done()
    return cert


def encode_chain(chain: Iterable[Certificate]) -> bytes:
    chain = list(chain)
    w = Writer().u32(len(chain))
    for cert in chain:
        write_certificate_to(w, cert)
    return w.getvalue()


def decode_chain(data: bytes) -> list[Certificate]:
    r = Reader(data)
    chain = [read_certificate_from(r) for _ in range(r.u32())]
    r.done()
    return chain


def write_certificate(path: Union[str, Path], cert: Certificate) -> None:
    Path(path).write_bytes(CERT_FILE_MAGIC + encode_certificate(cert))


def read_certificate(path: Union[str, Path]) -> Certificate:
    data = Path(path).read_bytes()
    if not data.startswith(CERT_FILE_MAGIC):
        raise DecodeError(f"{path}: missing DCM1 magic")
    return decode_certificate(data[len(CERT_FILE_MAGIC):])


def certificate_to_json(cert: Certificate) -> dict:
    """Human-readable dump. Not authoritative; never parse it back."""
    b = cert.body
    return {
        "serial": b.serial,
        "role": b.role.label,
        "subject": b.subject.to_json(),
        "subject_public_key": b.subject_public_key.hex(),
        "subject_fingerprint": b.subject_fingerprint.hex(),
        "issuer_fingerprint": b.issuer_fingerprint.hex(),
        "not_before": b.not_before,
        "not_after": b.not_after,
        "extensions": dict(sorted(b.extensions.items())),
        "signature": cert.signature.hex(),
    }


def dump_certificate_json(cert: Certificate) -> str:
    return json.dumps(certificate_to_json(cert), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


def sign_certificate(body: CertificateBody, issuer_secret: Ed25519PrivateKey) -> Certificate:
    return Certificate(body, sign_bytes(issuer_secret, canonical_encode(body)))


def verify_certificate_signature(cert: Certificate, issuer_public: PublicKeyLike) -> None:
    """Raise :class:`SignatureInvalid` unless the issuer key signed this body."""
    try:
        data = canonical_encode(cert.body, strict=False)
    except ValueError as exc:
        raise SignatureInvalid(f"body not encodable: {exc}") from exc
    if not signature_valid(issuer_public, cert.signature, data):
        raise SignatureInvalid(f"signature on serial {cert.serial} does not verify")


# ---------------------------------------------------------------------------
# Chain validation
# ---------------------------------------------------------------------------

UNKNOWN_ANCHOR = "UnknownAnchor"
EXPIRED = "Expired"
NOT_YET_VALID = "NotYetValid"
ROLE_ORDER_VIOLATION = "RoleOrderViolation"
SIGNATURE_INVALID = "SignatureInvalid"


@dataclass(frozen=True)
class LinkReport:
    index: int
    role: CertificateRole
    signature_ok: bool
    validity: str  # "ok", Expired or NotYetValid
    role_ok: bool
    anchor_ok: bool

    @property
    def errors(self) -> list[str]:
        out = []
        if not self.role_ok:
            out.append(ROLE_ORDER_VIOLATION)
        if not self.anchor_ok:
            out.append(UNKNOWN_ANCHOR)
        if self.validity != "ok":
            out.append(self.validity)
        if not self.signature_ok:
            out.append(SIGNATURE_INVALID)
        return out

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class ChainReport:
    links: tuple[LinkReport, ...]

    @property
    def ok(self) -> bool:
        return all(link.ok for link in self.links)

    @property
    def errors(self) -> list[tuple[int, str]]:
        return [(link.index, e) for link in self.links for e in link.errors]

    def first_error(self, *kinds: str) -> Optional[tuple[int, str]]:
        for index, err in self.errors:
            if not kinds or err in kinds:
                return index, err
        return None


def _role_ok(chain: Sequence[Certificate], i: int) -> bool:
    role = chain[i].role
    last = i == len(chain) - 1
    if last:
        ok = role is CertificateRole.ROOT
        return ok and chain[i].body.issuer_fingerprint == chain[i].fingerprint
    if role is CertificateRole.ROOT:
        return False
    if role is CertificateRole.DEVELOPER and i != 0:
        return False
    return chain[i].body.issuer_fingerprint == chain[i + 1].fingerprint


def validate_chain(
    chain: Sequence[Certificate], anchors: Iterable[Certificate], now: int
) -> ChainReport:
    """Check every link of ``[leaf, intermediates..., root]``.

    Failures are reported per link, never raised. Structural problems
    (wrong role position, issuer fingerprint not matching the next link) are
    reported as RoleOrderViolation; anchor membership is decided by the root
    key fingerprint.
    """
    if not chain:
        raise ValueError("chain must be non-empty")
    anchor_fps = {a.fingerprint for a in anchors}
    links = []
    for i, cert in enumerate(chain):
        last = i == len(chain) - 1
        issuer_key = cert.public_key if last else chain[i + 1].public_key
        try:
            verify_certificate_signature(cert, issuer_key)
            sig_ok = True
        except SignatureInvalid:
            sig_ok = False
        if now < cert.body.not_before:
            validity = NOT_YET_VALID
        elif now > cert.body.not_after:
            validity = EXPIRED
        else:
            validity = "ok"
        anchor_ok = (cert.fingerprint in anchor_fps) if last else True
        links.append(LinkReport(i, cert.role, sig_ok, validity, _role_ok(chain, i), anchor_ok))
    return ChainReport(tuple(links))


# ---------------------------------------------------------------------------
# Trust-level state machine
# ---------------------------------------------------------------------------

TRANSITIONS: Mapping[TrustLevel, frozenset[TrustLevel]] = {
    TrustLevel.UNKNOWN: frozenset(TrustLevel),
    TrustLevel.TRUSTED: frozenset({TrustLevel.TRUSTED, TrustLevel.WARNING, TrustLevel.CRITICAL}),
    TrustLevel.WARNING: frozenset({TrustLevel.WARNING, TrustLevel.TRUSTED, TrustLevel.CRITICAL}),
    # Critical recovers only through Warning.
    TrustLevel.CRITICAL: frozenset({TrustLevel.CRITICAL, TrustLevel.WARNING}),
}


def transition_allowed(current: TrustLevel, next_level: TrustLevel) -> bool:
    return next_level in TRANSITIONS[current]


def nearest_allowed(current: TrustLevel, target: TrustLevel) -> TrustLevel:
    """Closest level to ``target`` (walking back toward ``current``) that is reachable."""
    if transition_allowed(current, target):
        return target
    step = 1 if current.rank > target.rank else -1
    for rank in range(target.rank + step, current.rank + step, step):
        level = next(lvl for lvl, r in _RANK.items() if r == rank)
        if transition_allowed(current, level):
            return level
    return current
