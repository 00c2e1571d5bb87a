"""Developer certification: trust levels, CAs, signed packages, verification."""

from .authority import CertificateAuthority, Journal, RevocationReason, init_root
from .ctlog import CTLog
from .package import build_manifest, sign_package
from .policy import PolicyEvidence, evaluate_policy, lax_policy
from .revocation import OcspResponder, StatusClient
from .sim import EcosystemConfig, run_scenario
from .threatx import ThreatEvent, ThreatExchange, ingest
from .trust import Certificate, CertificateRole, SubjectIdentity, TrustLevel
from .verifier import OfflinePolicy, VerifierConfig, decide_install, verify_package

__version__ = "0.1.0"

__all__ = [
    "CTLog",
    "Certificate",
    "CertificateAuthority",
    "CertificateRole",
    "EcosystemConfig",
    "Journal",
    "OcspResponder",
    "OfflinePolicy",
    "PolicyEvidence",
    "RevocationReason",
    "StatusClient",
    "SubjectIdentity",
    "ThreatEvent",
    "ThreatExchange",
    "TrustLevel",
    "VerifierConfig",
    "build_manifest",
    "decide_install",
    "evaluate_policy",
    "ingest",
    "init_root",
    "lax_policy",
    "run_scenario",
    "sign_package",
    "verify_package",
]
