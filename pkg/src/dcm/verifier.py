"""Install-time package verification and the install decision.

Steps run in order and stop at the first failure:

1. developer signature over the manifest, content digests, package name
2. chain structure leads to a trusted anchor
3. every certificate inside its validity window
4. no chain certificate revoked
5. every certificate signature verifies
6. trust level present on the developer certificate
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

from . import trust
from .errors import (
    BadResponderSignature,
    MalformedMetadata,
    MissingMetadata,
    StaleResponse,
    Unreachable,
)
from .package import extract_metadata, read_contents
from .revocation import CertStatus, Endpoint, StatusClient
from .trust import (
    THREATS_EXT,
    TRUST_LEVEL_EXT,
    Certificate,
    CertificateRole,
    TrustLevel,
    digest,
    signature_valid,
    validate_chain,
)

logger = logging.getLogger(__name__)

STEP_NAMES = {
    1: "developer_signature",
    2: "certificate_authority",
    3: "expiration",
    4: "revocation",
    5: "digital_signature",
    6: "trust_level",
}

DIGEST_MISMATCH = "DigestMismatch"
SIGNATURE_INVALID = trust.SIGNATURE_INVALID
UNKNOWN_ANCHOR = trust.UNKNOWN_ANCHOR
ROLE_ORDER_VIOLATION = trust.ROLE_ORDER_VIOLATION
EXPIRED = trust.EXPIRED
NOT_YET_VALID = trust.NOT_YET_VALID
REVOKED = "Revoked"
REVOCATION_UNAVAILABLE = "RevocationUnavailable"
MISSING_TRUST_LEVEL = "MissingTrustLevel"
MISSING_PACKAGE_NAME = "MissingPackageName"
MALFORMED_METADATA = "MalformedMetadata"


class OfflinePolicy(enum.Enum):
    FAIL_OPEN = "FailOpen"
    FAIL_CLOSED = "FailClosed"


@dataclass
class VerifierConfig:
    trust_anchors: list[Certificate]
    revocation_endpoint: Optional[Union[Endpoint, StatusClient]] = None
    offline_policy: OfflinePolicy = OfflinePolicy.FAIL_OPEN
    clock: Callable[[], int] = field(default=lambda: int(time.time()))

    def __post_init__(self) -> None:
        self.trust_anchors = list(self.trust_anchors)
        if not self.trust_anchors:
            raise ValueError("at least one trust anchor is required")
        if self.revocation_endpoint is not None and not isinstance(self.revocation_endpoint, StatusClient):
            self.revocation_endpoint = StatusClient(self.revocation_endpoint)

    @property
    def status_client(self) -> Optional[StatusClient]:
        return self.revocation_endpoint  # type: ignore[return-value]


@dataclass(frozen=True)
class StepResult:
    step: int
    passed: bool
    reason: Optional[str] = None
    detail: str = ""

    @property
    def name(self) -> str:
        return STEP_NAMES[self.step]

    def to_json(self) -> dict:
        return {"step": self.step, "name": self.name, "passed": self.passed, "reason": self.reason, "detail": self.detail}


@dataclass(frozen=True)
class VerificationReport:
    steps: tuple[StepResult, ...]
    trust_level: Optional[TrustLevel] = None
    package_name: Optional[str] = None
    threat_summary: Optional[str] = None

    @property
    def passed(self) -> bool:
        return len(self.steps) == 6 and all(s.passed for s in self.steps)

    @property
    def failed_step(self) -> Optional[StepResult]:
        for s in self.steps:
            if not s.passed:
                return s
        return None

    @property
    def overall(self) -> str:
        failed = self.failed_step
        return "pass" if failed is None else f"fail(step {failed.step}: {failed.reason})"

    def step(self, number: int) -> Optional[StepResult]:
        for s in self.steps:
            if s.step == number:
                return s
        return None

    def to_json(self) -> dict:
        failed = self.failed_step
        return {
            "overall": "pass" if failed is None else "fail",
            "failed_step": None if failed is None else failed.step,
            "reason": None if failed is None else failed.reason,
            "trust_level": None if self.trust_level is None else self.trust_level.value,
            "package_name": self.package_name,
            "threat_summary": self.threat_summary,
            "steps": [s.to_json() for s in self.steps],
        }


class _Stop(Exception):
    def __init__(self, result: StepResult) -> None:
        self.result = result


def _check_content(archive: bytes, manifest, block) -> StepResult:
    leaf = block.leaf
    if digest(manifest.encode()) != block.manifest_digest:
        return StepResult(1, False, SIGNATURE_INVALID, "manifest digest differs from signed digest")
    if not signature_valid(leaf.public_key, block.signature, block.manifest_digest):
        return StepResult(1, False, SIGNATURE_INVALID, "developer signature does not verify under leaf key")
    contents = read_contents(archive)
    listed = {f.path for f in manifest.files}
    extra = sorted(set(contents) - listed)
    if extra:
        return StepResult(1, False, DIGEST_MISMATCH, f"unlisted file {extra[0]}")
    for entry in manifest.files:
        data = contents.get(entry.path)
        if data is None:
            return StepResult(1, False, DIGEST_MISMATCH, f"missing file {entry.path}")
        if len(data) != entry.size or digest(data) != entry.digest:
            return StepResult(1, False, DIGEST_MISMATCH, f"content of {entry.path} does not match manifest")
    if not manifest.package_name:
        return StepResult(1, False, MISSING_PACKAGE_NAME, "manifest has no package name")
    return StepResult(1, True)


def _check_revocation(chain: tuple[Certificate, ...], config: VerifierConfig, now: int) -> StepResult:
    client = config.status_client
    unavailable = None
    if client is None:
        unavailable = "no revocation endpoint configured"
    else:
        # Roots are trust anchors, not revocable through their own responder.
        for i, cert in enumerate(chain[:-1]):
            issuer = chain[i + 1]
            try:
                response = client.check(cert.serial, cert.body.issuer_fingerprint, issuer.public_key, now)
            except (Unreachable, BadResponderSignature, StaleResponse) as exc:
                unavailable = f"{type(exc).__name__}: {exc}"
                break
            if response.status is CertStatus.REVOKED:
                reason = response.reason.value if response.reason else "unspecified"
                return StepResult(
                    4, False, REVOKED,
                    f"link {i} ({cert.role.label} serial {cert.serial}) revoked at {response.revoked_at} ({reason})",
                )
            if response.status is CertStatus.UNKNOWN:
                unavailable = f"responder does not know link {i} serial {cert.serial}"
                break
    if unavailable is None:
        return StepResult(4, True)
    if config.offline_policy is OfflinePolicy.FAIL_CLOSED:
        return StepResult(4, False, REVOCATION_UNAVAILABLE, unavailable)
    return StepResult(4, True, REVOCATION_UNAVAILABLE, unavailable)


def verify_package(archive: bytes, config: VerifierConfig) -> VerificationReport:
    """Run the six steps; failures become report entries, nothing is raised."""
    now = config.clock()
    steps: list[StepResult] = []
    level = package_name = threats = None

    def record(result: StepResult) -> None:
        steps.append(result)
        if not result.passed:
            raise _Stop(result)

    try:
        try:
            manifest, block = extract_metadata(archive)
            record(_check_content(archive, manifest, block))
        except (MissingMetadata, MalformedMetadata) as exc:
            record(StepResult(1, False, MALFORMED_METADATA, f"{type(exc).__name__}: {exc}"))
        package_name = manifest.package_name
        chain = block.chain

        report = validate_chain(chain, config.trust_anchors, now)
        structural = report.first_error(ROLE_ORDER_VIOLATION, UNKNOWN_ANCHOR)
        if structural is None and chain[0].role is not CertificateRole.DEVELOPER:
            structural = (0, ROLE_ORDER_VIOLATION)
        if structural:
            record(StepResult(2, False, structural[1], f"link {structural[0]}"))
        record(StepResult(2, True))

        timing = report.first_error(EXPIRED, NOT_YET_VALID)
        if timing:
            record(StepResult(3, False, timing[1], f"link {timing[0]} at t={now}"))
        record(StepResult(3, True))

        record(_check_revocation(chain, config, now))

        bad_sig = report.first_error(SIGNATURE_INVALID)
        if bad_sig:
            record(StepResult(5, False, SIGNATURE_INVALID, f"link {bad_sig[0]}"))
        record(StepResult(5, True))

        leaf_ext = chain[0].body.extensions
        level = chain[0].trust_level
        if level is None:
            record(StepResult(6, False, MISSING_TRUST_LEVEL, f"{TRUST_LEVEL_EXT}={leaf_ext.get(TRUST_LEVEL_EXT)!r}"))
        threats = leaf_ext.get(THREATS_EXT)
        record(StepResult(6, True, detail=level.value))
    except _Stop as stop:
        logger.info("verification failed at step %d: %s", stop.result.step, stop.result.reason)
    return VerificationReport(tuple(steps), level, package_name, threats)


# ---------------------------------------------------------------------------
# Install decision
# ---------------------------------------------------------------------------


class DecisionKind(enum.Enum):
    INSTALL = "Install"
    PROMPT = "Prompt"
    DENY = "Deny"


EXIT_CODES = {DecisionKind.INSTALL: 0, DecisionKind.PROMPT: 10, DecisionKind.DENY: 20}


@dataclass(frozen=True)
class InstallDecision:
    kind: DecisionKind
    message: str = ""
    trust_level: Optional[TrustLevel] = None

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.kind]

    def to_json(self) -> dict:
        return {
            "decision": self.kind.value,
            "message": self.message,
            "trust_level": None if self.trust_level is None else self.trust_level.value,
        }


def decide_install(report: VerificationReport) -> InstallDecision:
    failed = report.failed_step
    if failed is not None or report.trust_level is None:
        reason = failed.reason if failed else "incomplete verification"
        step = failed.step if failed else len(report.steps)
        return InstallDecision(DecisionKind.DENY, f"step {step} ({STEP_NAMES.get(step, '?')}): {reason}")
    level = report.trust_level
    if level is TrustLevel.TRUSTED:
        return InstallDecision(DecisionKind.INSTALL, "developer is Trusted", level)
    if level is TrustLevel.CRITICAL:
        return InstallDecision(DecisionKind.DENY, "developer is Critical; package is not installable", level)
    if level is TrustLevel.WARNING:
        summary = report.threat_summary or "no details published"
        return InstallDecision(
            DecisionKind.PROMPT, f"developer flagged Warning (reported threats: {summary}); install at your own risk", level
        )
    return InstallDecision(DecisionKind.PROMPT, "developer trust is Unknown; not enough track record", level)


def load_anchors(certs: Iterable[Certificate]) -> list[Certificate]:
    anchors = [c for c in certs if c.role is CertificateRole.ROOT]
    if not anchors:
        raise ValueError("no root certificates among anchors")
    return anchors
