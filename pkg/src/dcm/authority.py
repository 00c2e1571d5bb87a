"""Root and intermediate certification authorities.

A :class:`CertificateAuthority` owns its signing key, a serial counter and
the issuance/revocation registries. Every mutation is appended to a
:class:`Journal` before it is applied, so replaying the journal rebuilds the
registries exactly.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Protocol, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .ctlog import MonitorContext, SignedCertificateTimestamp, certificate_leaf_hash
from .encoding import Reader, Writer
from .errors import (
    ActiveCertificateExists,
    AlreadyRevoked,
    CtLogUnreachable,
    DecodeError,
    InvalidBody,
    InvalidIdentity,
    JournalCorrupted,
    NoActiveCertificate,
    NotAnIntermediate,
    NotARoot,
    UnknownSerial,
)
from .policy import PolicyEvidence, evaluate_policy, read_evidence, write_evidence
from .trust import (
    OCSP_SIGNING_EXT,
    THREATS_EXT,
    TRUST_LEVEL_EXT,
    Certificate,
    CertificateBody,
    CertificateRole,
    SubjectIdentity,
    TrustLevel,
    fingerprint,
    generate_signing_key,
    nearest_allowed,
    public_key_bytes,
    read_certificate_from,
    sign_certificate,
    write_certificate_to,
)

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400


class RevocationReason(enum.Enum):
    TRUST_LEVEL_CHANGE = "TrustLevelChange"
    KEY_COMPROMISE = "KeyCompromise"
    POLICY_VIOLATION = "PolicyViolation"
    CA_MISISSUANCE = "CaMisissuance"


@dataclass(frozen=True)
class RevocationRecord:
    serial: int
    revoked_at: int
    reason: RevocationReason


@dataclass(frozen=True)
class IssuanceRecord:
    certificate: Certificate
    evidence_snapshot: Optional[PolicyEvidence] = None
    sct: Optional[SignedCertificateTimestamp] = None
    # Level the evidence asked for when the transition table forbade it.
    shortfall: Optional[TrustLevel] = None


@dataclass(frozen=True)
class RegistryView:
    """Read-only snapshot of one issuer's registries."""

    issuer_fingerprint: bytes
    issued: frozenset[int]
    revoked: Mapping[int, RevocationRecord]


@dataclass(frozen=True)
class Unchanged:
    level: TrustLevel


@dataclass(frozen=True)
class Reissued:
    certificate: Certificate
    sct: SignedCertificateTimestamp
    revoked_serial: int
    previous_level: TrustLevel
    shortfall: Optional[TrustLevel] = None


class CtSubmitter(Protocol):
    def submit(self, certificate: Certificate) -> SignedCertificateTimestamp: ...


# ---------------------------------------------------------------------------
# Journal
# ---------------------------------------------------------------------------

_ISSUE, _REVOKE = 1, 2


def encode_issuance(record: IssuanceRecord) -> bytes:
    w = Writer().u8(_ISSUE)
    write_certificate_to(w, record.certificate)
    write_evidence(w, record.evidence_snapshot)
    if record.sct is None:
        w.u8(0)
    else:
        w.u8(1)
        record.sct.write_to(w)
    w.opt_text(None if record.shortfall is None else record.shortfall.value)
    return w.getvalue()


def encode_revocation(record: RevocationRecord) -> bytes:
    w = Writer().u8(_REVOKE).u128(record.serial).u64(record.revoked_at)
    return w.text(record.reason.value).getvalue()


def decode_record(data: bytes) -> Union[IssuanceRecord, RevocationRecord]:
    r = Reader(data)
    kind = r.u8()
    try:
        if kind == _ISSUE:
            cert = read_certificate_from(r)
            evidence = read_evidence(r)
            sct = SignedCertificateTimestamp.read_from(r) if r.flag() else None
            shortfall = r.opt_text()
            record: Union[IssuanceRecord, RevocationRecord] = IssuanceRecord(
                cert, evidence, sct, None if shortfall is None else TrustLevel(shortfall)
            )
        elif kind == _REVOKE:
            record = RevocationRecord(r.u128(), r.u64(), RevocationReason(r.text()))
        else:
            raise DecodeError(f"unknown journal record kind {kind}")
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc
    r.done()
    return record


class Journal:
    """Append-only record log: one hex-encoded canonical record per line.

    With a path every append is fsynced before returning; without one the
    journal lives in memory only.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self._lines: list[bytes] = []
        if self.path is not None and self.path.exists():
            for lineno, line in enumerate(self.path.read_text().splitlines()):
                if line.strip():
                    try:
                        self._lines.append(bytes.fromhex(line))
                    except ValueError as exc:
                        raise JournalCorrupted(f"{self.path}:{lineno + 1}: {exc}") from exc

    def append(self, record: bytes) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(record.hex() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        self._lines.append(record)

    def raw(self) -> list[bytes]:
        return list(self._lines)

    def records(self) -> list[Union[IssuanceRecord, RevocationRecord]]:
        out = []
        for i, raw in enumerate(self._lines):
            try:
                out.append(decode_record(raw))
            except DecodeError as exc:
                raise JournalCorrupted(f"record {i}: {exc}") from exc
        return out

    def __len__(self) -> int:
        return len(self._lines)


# ---------------------------------------------------------------------------
# Authority
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CertificateAuthority:
    certificate: Certificate
    secret_key: Ed25519PrivateKey
    journal: Journal = field(default_factory=Journal)
    policy: Callable[[PolicyEvidence], TrustLevel] = evaluate_policy
    next_serial: int = 1
    issued: dict[int, IssuanceRecord] = field(default_factory=dict)
    revoked: dict[int, RevocationRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        # A root is its own issuer; its serial space already holds its own cert.
        if self.certificate.role is CertificateRole.ROOT:
            self.next_serial = max(self.next_serial, self.certificate.serial + 1)

    @property
    def role(self) -> CertificateRole:
        return self.certificate.role

    @property
    def public_key(self) -> bytes:
        return self.certificate.public_key

    @property
    def fingerprint(self) -> bytes:
        return self.certificate.fingerprint

    @property
    def name(self) -> str:
        return self.certificate.body.subject.common_name

    # -- replay --------------------------------------------------------------

    @classmethod
    def from_journal(
        cls,
        certificate: Certificate,
        secret_key: Ed25519PrivateKey,
        journal: Journal,
        policy: Callable[[PolicyEvidence], TrustLevel] = evaluate_policy,
    ) -> "CertificateAuthority":
        ca = cls(certificate, secret_key, journal, policy)
        for record in journal.records():
            ca._apply(record)
        return ca

    def _apply(self, record: Union[IssuanceRecord, RevocationRecord]) -> None:
        if isinstance(record, IssuanceRecord):
            serial = record.certificate.serial
            if serial in self.issued:
                raise JournalCorrupted(f"serial {serial} issued twice")
            self.issued[serial] = record
            self.next_serial = max(self.next_serial, serial + 1)
        else:
            if record.serial not in self.issued:
                raise JournalCorrupted(f"revocation of unissued serial {record.serial}")
            self.revoked[record.serial] = record

    def _commit(self, record: Union[IssuanceRecord, RevocationRecord]) -> None:
        if isinstance(record, IssuanceRecord):
            self.journal.append(encode_issuance(record))
        else:
            self.journal.append(encode_revocation(record))
        self._apply(record)

    # -- issuance ------------------------------------------------------------

    def _body(
        self,
        role: CertificateRole,
        identity: SubjectIdentity,
        public_key: bytes,
        lifetime_days: int,
        now: int,
        extensions: Optional[dict[str, str]] = None,
    ) -> CertificateBody:
        if lifetime_days <= 0:
            raise InvalidIdentity("lifetime_days must be positive")
        identity.validate()
        return CertificateBody(
            serial=self.next_serial,
            role=role,
            subject=identity,
            subject_public_key=public_key_bytes(public_key),
            issuer_fingerprint=self.fingerprint,
            not_before=now,
            not_after=now + lifetime_days * SECONDS_PER_DAY,
            extensions=extensions or {},
        )

    def issue_intermediate(
        self,
        identity: SubjectIdentity,
        lifetime_days: int,
        now: int,
        secret_key: Optional[Ed25519PrivateKey] = None,
        policy: Callable[[PolicyEvidence], TrustLevel] = evaluate_policy,
        journal: Optional[Journal] = None,
    ) -> tuple[Certificate, "CertificateAuthority"]:
        if self.role is not CertificateRole.ROOT:
            raise NotARoot(f"{self.name} is a {self.role.label} CA")
        secret_key = secret_key or generate_signing_key()
        body = self._body(CertificateRole.INTERMEDIATE, identity, public_key_bytes(secret_key), lifetime_days, now)
        cert = sign_certificate(body, self.secret_key)
        self._commit(IssuanceRecord(cert))
        logger.info("%s issued intermediate %s serial=%d", self.name, identity.common_name, cert.serial)
        return cert, CertificateAuthority(cert, secret_key, Journal() if journal is None else journal, policy)

    def issue_responder_certificate(
        self, responder_public_key, lifetime_days: int, now: int
    ) -> Certificate:
        """Delegation certificate letting another key sign status responses."""
        identity = SubjectIdentity(f"{self.name} status responder", self.certificate.body.subject.organization)
        body = self._body(
            CertificateRole.INTERMEDIATE, identity, public_key_bytes(responder_public_key),
            lifetime_days, now, {OCSP_SIGNING_EXT: "1"},
        )
        cert = sign_certificate(body, self.secret_key)
        self._commit(IssuanceRecord(cert))
        return cert

    def issue_developer(
        self,
        identity: SubjectIdentity,
        public_key,
        evidence: PolicyEvidence,
        lifetime_days: int,
        ctlog: CtSubmitter,
        now: int,
    ) -> tuple[Certificate, SignedCertificateTimestamp]:
        """Issue a developer certificate; nothing is recorded unless the log accepts it."""
        if self.role is not CertificateRole.INTERMEDIATE:
            raise NotAnIntermediate(f"{self.name} is a {self.role.label} CA")
        dev_fp = fingerprint(public_key)
        if self.active_record(dev_fp) is not None:
            raise ActiveCertificateExists(f"developer {dev_fp.hex()[:16]} already certified; use reevaluate")
        level = self.policy(evidence)
        cert, sct = self._issue_logged(identity, public_key, level, evidence, lifetime_days, now, ctlog)
        self._commit(IssuanceRecord(cert, evidence, sct))
        logger.info("%s issued developer %s at %s serial=%d", self.name, identity.common_name, level.value, cert.serial)
        return cert, sct

    def _issue_logged(self, identity, public_key, level, evidence, lifetime_days, now, ctlog):
        extensions = {TRUST_LEVEL_EXT: level.value}
        if level in (TrustLevel.WARNING, TrustLevel.CRITICAL) and evidence.open_threats:
            extensions[THREATS_EXT] = ",".join(sorted({t.event_id for t in evidence.open_threats}))
        body = self._body(CertificateRole.DEVELOPER, identity, public_key, lifetime_days, now, extensions)
        cert = sign_certificate(body, self.secret_key)
        try:
            sct = ctlog.submit(cert)
        except OSError as exc:
            raise CtLogUnreachable(str(exc)) from exc
        if sct is None:
            raise CtLogUnreachable("log returned no receipt")
        log_key = getattr(ctlog, "public_key", None)
        if log_key is not None and not sct.verify(certificate_leaf_hash(cert), log_key):
            raise CtLogUnreachable("log receipt does not verify")
        return cert, sct

    # -- revocation ------------------------------------------------------------

    def revoke(self, serial: int, reason: RevocationReason, now: int) -> RevocationRecord:
        if serial not in self.issued:
            raise UnknownSerial(serial)
        if serial in self.revoked:
            raise AlreadyRevoked(f"serial {serial} already revoked")
        record = RevocationRecord(serial, now, reason)
        self._commit(record)
        logger.info("%s revoked serial=%d (%s)", self.name, serial, reason.value)
        return record

    def is_revoked(self, serial: int) -> bool:
        return serial in self.revoked

    def active_record(self, developer_fingerprint: bytes) -> Optional[IssuanceRecord]:
        for serial, record in self.issued.items():
            cert = record.certificate
            if (
                cert.role is CertificateRole.DEVELOPER
                and serial not in self.revoked
                and cert.fingerprint == developer_fingerprint
            ):
                return record
        return None

    def has_issued_to(self, developer_fingerprint: bytes) -> bool:
        return any(
            r.certificate.role is CertificateRole.DEVELOPER and r.certificate.fingerprint == developer_fingerprint
            for r in self.issued.values()
        )

    def reevaluate(
        self,
        developer_fingerprint: bytes,
        new_evidence: PolicyEvidence,
        now: int,
        ctlog: CtSubmitter,
        lifetime_days: Optional[int] = None,
    ) -> Union[Unchanged, Reissued]:
        """Revoke and reissue when the developer's level changes."""
        record = self.active_record(developer_fingerprint)
        if record is None:
            raise NoActiveCertificate(f"no active certificate for {developer_fingerprint.hex()[:16]}")
        old = record.certificate
        current = old.trust_level
        if current is None:
            raise InvalidBody(f"serial {old.serial} carries no trust level")
        target = self.policy(new_evidence)
        if target is current:
            return Unchanged(current)
        level = nearest_allowed(current, target)
        if level is current:
            return Unchanged(current)
        shortfall = target if level is not target else None
        if lifetime_days is None:
            lifetime_days = max(1, (old.body.not_after - old.body.not_before) // SECONDS_PER_DAY)
        cert, sct = self._issue_logged(
            old.body.subject, old.public_key, level, new_evidence, lifetime_days, now, ctlog
        )
        self._commit(RevocationRecord(old.serial, now, RevocationReason.TRUST_LEVEL_CHANGE))
        self._commit(IssuanceRecord(cert, new_evidence, sct, shortfall))
        logger.info(
            "%s reissued %s: %s -> %s (serial %d -> %d)",
            self.name, old.body.subject.common_name, current.value, level.value, old.serial, cert.serial,
        )
        return Reissued(cert, sct, old.serial, current, shortfall)

    # -- views -------------------------------------------------------------------

    def registry_view(self) -> RegistryView:
        return RegistryView(
            self.fingerprint, frozenset(self.issued), MappingProxyType(dict(self.revoked))
        )

    def evidence_for(self, serial: int) -> Optional[PolicyEvidence]:
        record = self.issued.get(serial)
        return None if record is None else record.evidence_snapshot

    def state_tuple(self) -> tuple:
        """Comparable summary of registry state (used to check journal replay)."""
        return (self.next_serial, dict(self.issued), dict(self.revoked))


def init_root(
    identity: SubjectIdentity,
    lifetime_days: int,
    now: int,
    secret_key: Optional[Ed25519PrivateKey] = None,
    journal: Optional[Journal] = None,
    serial: int = 1,
) -> CertificateAuthority:
    """Self-signed root CA with empty registries."""
    if lifetime_days <= 0:
        raise InvalidIdentity("lifetime_days must be positive")
    identity.validate()
    secret_key = secret_key or generate_signing_key()
    key = public_key_bytes(secret_key)
    body = CertificateBody(
        serial=serial,
        role=CertificateRole.ROOT,
        subject=identity,
        subject_public_key=key,
        issuer_fingerprint=fingerprint(key),
        not_before=now,
        not_after=now + lifetime_days * SECONDS_PER_DAY,
    )
    cert = sign_certificate(body, secret_key)
    return CertificateAuthority(cert, secret_key, Journal() if journal is None else journal)


def monitor_context(authorities: Iterable[CertificateAuthority]) -> MonitorContext:
    """Monitor view over a set of registered CAs."""
    by_fp = {ca.fingerprint: ca for ca in authorities}

    def evidence_for(issuer: bytes, serial: int) -> Optional[PolicyEvidence]:
        ca = by_fp.get(issuer)
        return None if ca is None else ca.evidence_for(serial)

    def is_revoked(issuer: bytes, serial: int) -> bool:
        ca = by_fp.get(issuer)
        return ca is not None and ca.is_revoked(serial)

    return MonitorContext(set(by_fp), evidence_for, is_revoked)
