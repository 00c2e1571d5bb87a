"""Trust-level policy: evidence about a developer in, trust level out."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .encoding import Reader, Writer
from .errors import DecodeError
from .trust import TrustLevel

THREAT_SEVERITIES = (TrustLevel.WARNING, TrustLevel.CRITICAL)


@dataclass(frozen=True)
class PolicyThresholds:
    # Both comparisons are strict: an app must be older than min_app_age_days
    # and have more than min_installs installs.
    min_app_age_days: int = 730
    min_installs: int = 10_000


DEFAULT_THRESHOLDS = PolicyThresholds()


@dataclass(frozen=True)
class OpenThreat:
    severity: TrustLevel
    event_id: str

    def __post_init__(self) -> None:
        if self.severity not in THREAT_SEVERITIES:
            raise ValueError(f"threat severity must be Warning or Critical, not {self.severity}")


@dataclass(frozen=True)
class PolicyEvidence:
    identity_verified: bool = False
    oldest_app_age_days: int = 0
    total_installs: int = 0
    open_threats: tuple[OpenThreat, ...] = ()

    def __post_init__(self) -> None:
        if self.oldest_app_age_days < 0 or self.total_installs < 0:
            raise ValueError("evidence counts must be non-negative")
        object.__setattr__(self, "open_threats", tuple(self.open_threats))

    def with_threat(self, threat: OpenThreat) -> "PolicyEvidence":
        if threat in self.open_threats:
            return self
        return PolicyEvidence(
            self.identity_verified,
            self.oldest_app_age_days,
            self.total_installs,
            self.open_threats + (threat,),
        )

    def to_json(self) -> dict:
        return {
            "identity_verified": self.identity_verified,
            "oldest_app_age_days": self.oldest_app_age_days,
            "total_installs": self.total_installs,
            "open_threats": [
                {"severity": t.severity.value, "event_id": t.event_id} for t in self.open_threats
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicyEvidence":
        return cls(
            identity_verified=bool(data.get("identity_verified", False)),
            oldest_app_age_days=int(data.get("oldest_app_age_days", 0)),
            total_installs=int(data.get("total_installs", 0)),
            open_threats=tuple(
                OpenThreat(TrustLevel(t["severity"]), str(t["event_id"]))
                for t in data.get("open_threats", ())
            ),
        )


def evaluate_policy(
    evidence: PolicyEvidence, thresholds: PolicyThresholds = DEFAULT_THRESHOLDS
) -> TrustLevel:
    """Threat severity dominates track record."""
    severities = {t.severity for t in evidence.open_threats}
    if TrustLevel.CRITICAL in severities:
        return TrustLevel.CRITICAL
    if TrustLevel.WARNING in severities:
        return TrustLevel.WARNING
    if (
        evidence.identity_verified
        and evidence.oldest_app_age_days > thresholds.min_app_age_days
        and evidence.total_installs > thresholds.min_installs
    ):
        return TrustLevel.TRUSTED
    return TrustLevel.UNKNOWN


def lax_policy(evidence: PolicyEvidence) -> TrustLevel:
    """A non-compliant CA: anyone without a reported threat is Trusted."""
    level = evaluate_policy(evidence)
    return TrustLevel.TRUSTED if level is TrustLevel.UNKNOWN else level


def write_evidence(w: Writer, evidence: Optional[PolicyEvidence]) -> None:
    if evidence is None:
        w.u8(0)
        return
    w.u8(1)
    w.u8(1 if evidence.identity_verified else 0)
    w.u64(evidence.oldest_app_age_days).u64(evidence.total_installs)
    w.u32(len(evidence.open_threats))
    for t in evidence.open_threats:
        w.text(t.severity.value).text(t.event_id)


def read_evidence(r: Reader) -> Optional[PolicyEvidence]:
    if not r.flag():
        return None
    verified = r.flag()
    age, installs = r.u64(), r.u64()
    threats = []
    for _ in range(r.u32()):
        try:
            severity = TrustLevel(r.text())
            threats.append(OpenThreat(severity, r.text()))
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
    return PolicyEvidence(verified, age, installs, tuple(threats))
