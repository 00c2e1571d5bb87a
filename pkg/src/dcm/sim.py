"""Deterministic end-to-end ecosystem scenarios.

Every scenario builds a fresh ecosystem (root CA, store-run intermediate
CAs, CT log, status responder, threat exchange) from an
:class:`EcosystemConfig`, drives it over a simulated clock and returns a
:class:`ScenarioResult` with a timeline and named terminal assertions.
Keys come from a seeded RNG, so identical configs give identical results.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

from . import _http
from .authority import (
    SECONDS_PER_DAY,
    CertificateAuthority,
    Reissued,
    RevocationReason,
    init_root,
    monitor_context,
)
from .ctlog import AlertKind, CTLog, CtLogClient, certificate_leaf_hash, make_ctlog_server, monitor_scan
from .errors import ConfigInvalid
from .package import build_manifest, package_digest, sign_package
from .policy import PolicyEvidence, evaluate_policy, lax_policy
from .revocation import (
    CertStatus,
    HttpTransport,
    LoopbackTransport,
    OcspResponder,
    StatusClient,
    make_ocsp_server,
)
from .threatx import (
    DelistPackage,
    ExchangeClient,
    StoreActor,
    ThreatEvent,
    ThreatExchange,
    TriggerReevaluation,
    ingest,
    make_exchange_server,
)
from .trust import Certificate, SubjectIdentity, TrustLevel, generate_signing_key
from .verifier import DecisionKind, OfflinePolicy, VerifierConfig, decide_install, verify_package

POLICIES: dict[str, Callable[[PolicyEvidence], TrustLevel]] = {
    "strict": evaluate_policy,
    "lax": lax_policy,
}

# One day past the declared thresholds (730 days, 10000 installs).
PROMOTION_AGE_DAYS = 731
PROMOTION_INSTALLS = 10_001

SCENARIOS = ("honest", "weakest-link", "dormant-developer")


@dataclass(frozen=True)
class ScenarioSchedule:
    """Scripted facts of a run (which services are up, who detects what, delays)."""

    responder_up: bool = True
    offline_policy: OfflinePolicy = OfflinePolicy.FAIL_OPEN
    monitor_enabled: bool = True
    exchange_enabled: bool = True
    detecting_store: int = 1
    detect_before_promotion: bool = False
    second_install_delay_days: int = 1


@dataclass(frozen=True)
class EcosystemConfig:
    ica_policies: tuple[str, ...] = ("strict", "lax")
    clock_start: int = 1_700_000_000
    seed: int = 2023
    root_lifetime_days: int = 7300
    ica_lifetime_days: int = 3650
    developer_lifetime_days: int = 1095
    schedule: ScenarioSchedule = field(default_factory=ScenarioSchedule)
    transport: str = "loopback"

    def validate(self) -> None:
        if not self.ica_policies:
            raise ConfigInvalid("at least one intermediate CA is required")
        unknown = set(self.ica_policies) - set(POLICIES)
        if unknown:
            raise ConfigInvalid(f"unknown ICA policy {sorted(unknown)}; use strict or lax")
        if self.transport not in ("loopback", "http"):
            raise ConfigInvalid("transport must be 'loopback' or 'http'")
        if min(self.root_lifetime_days, self.ica_lifetime_days, self.developer_lifetime_days) <= 0:
            raise ConfigInvalid("lifetimes must be positive")

    def with_schedule(self, **changes) -> "EcosystemConfig":
        return replace(self, schedule=replace(self.schedule, **changes))


class SimClock:
    def __init__(self, start: int) -> None:
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, seconds: int = 0, days: int = 0) -> int:
        self.now += seconds + days * SECONDS_PER_DAY
        return self.now


@dataclass(frozen=True)
class TimelineEntry:
    time: int
    actor: str
    action: str


@dataclass
class ScenarioResult:
    scenario: str
    status: str = "passed"
    timeline: list[TimelineEntry] = field(default_factory=list)
    assertions: dict[str, bool] = field(default_factory=dict)
    invariants: dict[str, bool] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def finish(self) -> "ScenarioResult":
        if self.status != "NotApplicable":
            self.status = "passed" if all(self.assertions.values()) else "failed"
        return self

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "status": self.status,
            "assertions": dict(self.assertions),
            "invariants": dict(self.invariants),
            "timeline": [{"time": e.time, "actor": e.actor, "action": e.action} for e in self.timeline],
            "details": self.details,
        }

    def timeline_text(self) -> str:
        lines = [f"scenario {self.scenario}: {self.status}"]
        lines += [f"  t={e.time:<12d} {e.actor:<16s} {e.action}" for e in self.timeline]
        for name, ok in self.assertions.items():
            lines.append(f"  assert {name}: {'pass' if ok else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, json_path: Union[str, Path], text_path: Optional[Union[str, Path]] = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if text_path is not None:
            Path(text_path).write_text(self.timeline_text())


class Ecosystem:
    def __init__(self, config: EcosystemConfig, result: ScenarioResult) -> None:
        config.validate()
        self.config = config
        self.result = result
        self.rng = random.Random(config.seed)
        self.clock = SimClock(config.clock_start)
        self._servers = []

        now = self.clock()
        self.root = init_root(
            SubjectIdentity("DCM Root CA", "DCM Root Authority", country="BE"),
            config.root_lifetime_days, now, secret_key=self.key(),
        )
        self.log("root", "initialised root CA")
        self.icas: list[CertificateAuthority] = []
        self.stores: list[StoreActor] = []
        for i, policy_name in enumerate(config.ica_policies):
            letter = chr(ord("A") + i)
            _, ica = self.root.issue_intermediate(
                SubjectIdentity(f"Store{letter} CA", f"Store {letter}", country="PT"),
                config.ica_lifetime_days, now, secret_key=self.key(), policy=POLICIES[policy_name],
            )
            self.icas.append(ica)
            self.stores.append(StoreActor(f"store-{letter.lower()}", authority=ica))
            self.log("root", f"issued intermediate to Store{letter} CA ({policy_name})")

        self.ctlog = CTLog(signing_key=self.key(), clock=self.clock)
        self.responder = OcspResponder(self.clock)
        for ca in [self.root, *self.icas]:
            self.responder.add_authority(ca)
        self.exchange = ThreatExchange(publishers={s.store_id for s in self.stores})

        self.ct_endpoint = self.ctlog
        self.exchange_endpoint = self.exchange
        if config.transport == "http":
            self._start_http()

    # -- plumbing ------------------------------------------------------------------

    def key(self):
        return generate_signing_key(self.rng)

    def log(self, actor: str, action: str) -> None:
        self.result.timeline.append(TimelineEntry(self.clock(), actor, action))

    def _serve(self, server) -> str:
        _http.serve_in_background(server)
        self._servers.append(server)
        return _http.server_url(server)

    def _start_http(self) -> None:
        self.ct_endpoint = CtLogClient(self._serve(make_ctlog_server(self.ctlog)))
        self.ocsp_url = self._serve(make_ocsp_server(self.responder))
        self.exchange_endpoint = ExchangeClient(self._serve(make_exchange_server(self.exchange)))

    def close(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()

    def __enter__(self) -> "Ecosystem":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def chain_for(self, ca: CertificateAuthority, leaf: Certificate) -> list[Certificate]:
        return [leaf, ca.certificate, self.root.certificate]

    def verifier_config(self) -> VerifierConfig:
        schedule = self.config.schedule
        if not schedule.responder_up:
            transport = LoopbackTransport(self.responder, up=False)
        elif self.config.transport == "http":
            transport = HttpTransport(self.ocsp_url)
        else:
            transport = LoopbackTransport(self.responder)
        return VerifierConfig(
            trust_anchors=[self.root.certificate],
            revocation_endpoint=StatusClient(transport, cache=False),
            offline_policy=schedule.offline_policy,
            clock=self.clock,
        )

    def install(self, archive: bytes, where: str):
        report = verify_package(archive, self.verifier_config())
        decision = decide_install(report)
        failed = report.failed_step
        note = f" (step {failed.step} {failed.reason})" if failed else ""
        self.log(where, f"install check -> {decision.kind.value}{note}")
        return report, decision

    def status_of(self, cert: Certificate) -> CertStatus:
        issuer = next(ca for ca in [self.root, *self.icas] if ca.fingerprint == cert.body.issuer_fingerprint)
        client = StatusClient(LoopbackTransport(self.responder), cache=False)
        return client.check(cert.serial, issuer.fingerprint, issuer.public_key, self.clock()).status

    def check_invariants(self) -> None:
        replay_ok = True
        for ca in [self.root, *self.icas]:
            rebuilt = CertificateAuthority.from_journal(ca.certificate, ca.secret_key, ca.journal, ca.policy)
            replay_ok &= rebuilt.state_tuple() == ca.state_tuple()
        self.result.invariants["journal_replay"] = replay_ok

        sct_ok = True
        entries = self.ctlog.entries
        for ca in self.icas:
            for record in ca.issued.values():
                if record.evidence_snapshot is None:
                    continue
                sct = record.sct
                sct_ok &= (
                    sct is not None
                    and sct.index < len(entries)
                    and entries[sct.index].leaf_hash == certificate_leaf_hash(record.certificate)
                    and sct.verify(entries[sct.index].leaf_hash, self.ctlog.public_key)
                )
        self.result.invariants["sct_logged"] = sct_ok


def _package(name: str, version: int, files: dict[str, bytes], secret, chain) -> bytes:
    manifest = build_manifest(name, version, files)
    return sign_package(files, manifest, secret, chain)


def _run(name: str, config: EcosystemConfig, body: Callable[[Ecosystem, ScenarioResult], None]) -> ScenarioResult:
    result = ScenarioResult(name)
    with Ecosystem(config, result) as eco:
        body(eco, result)
        eco.check_invariants()
    return result.finish()


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def run_honest_flow(config: EcosystemConfig = EcosystemConfig()) -> ScenarioResult:
    """A Trusted developer signs an Android and an iOS build with one certificate."""

    def body(eco: Ecosystem, result: ScenarioResult) -> None:
        ica, store = eco.icas[0], eco.stores[0]
        dev_key = eco.key()
        evidence = PolicyEvidence(identity_verified=True, oldest_app_age_days=800, total_installs=15_000)
        cert, _ = ica.issue_developer(
            SubjectIdentity("Example Notes Ltd", "Example Notes Ltd", country="PT", email="dev@example.org"),
            dev_key, evidence, config.developer_lifetime_days, eco.ct_endpoint, eco.clock(),
        )
        eco.log(store.store_id, f"certified developer serial={cert.serial} level={cert.trust_level.value}")
        chain = eco.chain_for(ica, cert)
        android = _package("org.example.notes", 7, {
            "AndroidManifest.xml": b"<manifest package='org.example.notes'/>",
            "classes.dex": b"dex\n035\x00" + bytes(range(64)),
        }, dev_key, chain)
        ios = _package("org.example.notes", 7, {
            "Payload/Notes.app/Info.plist": b"<plist><dict><key>CFBundleIdentifier</key></dict></plist>",
            "Payload/Notes.app/Notes": b"\xcf\xfa\xed\xfe" + bytes(range(64, 128)),
        }, dev_key, chain)
        eco.log("developer", "signed android and ios builds with the same certificate")

        eco.clock.advance(days=1)
        _, first = eco.install(android, "android-device")
        eco.clock.advance(days=config.schedule.second_install_delay_days)
        second_report, second = eco.install(ios, "ios-device")

        result.assertions["certified_trusted"] = cert.trust_level is TrustLevel.TRUSTED
        result.assertions["android_install"] = first.kind is DecisionKind.INSTALL
        result.assertions["ios_install"] = second.kind is DecisionKind.INSTALL
        failed = second_report.failed_step
        result.details["second_install_failed_step"] = None if failed is None else failed.step
        result.details["second_install_reason"] = None if failed is None else failed.reason

    return _run("honest", config, body)


def run_weakest_link(config: EcosystemConfig = EcosystemConfig()) -> ScenarioResult:
    """An unqualified developer shops for the laxest CA; the log monitor catches it."""
    if len(config.ica_policies) < 2:
        raise ConfigInvalid("weakest-link needs at least two intermediate CAs")

    def body(eco: Ecosystem, result: ScenarioResult) -> None:
        attacker_key = eco.key()
        evidence = PolicyEvidence(identity_verified=False, oldest_app_age_days=12, total_installs=40)
        target = next((i for i, ca in enumerate(eco.icas) if ca.policy(evidence) is TrustLevel.TRUSTED), None)
        if target is None:
            eco.log("attacker", "no CA grants Trusted without qualifying evidence")
            result.status = "NotApplicable"
            return
        ica, store = eco.icas[target], eco.stores[target]
        cert, _ = ica.issue_developer(
            SubjectIdentity("Totally Legit Apps"), attacker_key, evidence,
            config.developer_lifetime_days, eco.ct_endpoint, eco.clock(),
        )
        eco.log(store.store_id, f"certified attacker serial={cert.serial} level={cert.trust_level.value}")
        archive = _package("com.legit.flashlight", 1, {"classes.dex": b"steal-contacts()"}, attacker_key,
                           eco.chain_for(ica, cert))
        store.list_package(package_digest(archive), "com.legit.flashlight", cert.fingerprint)
        eco.log(store.store_id, "listed attacker package")

        eco.clock.advance(days=1)
        alerts = []
        if config.schedule.monitor_enabled:
            alerts = [
                a for a in monitor_scan(eco.ctlog.entries, monitor_context(eco.icas))
                if a.kind is AlertKind.TRUSTED_WITHOUT_EVIDENCE
            ]
            eco.log("monitor", f"scanned {eco.ctlog.size} log entries, {len(alerts)} TrustedWithoutEvidence")
        result.details["alerts"] = [a.to_json() for a in alerts]
        if alerts:
            eco.root.revoke(ica.certificate.serial, RevocationReason.CA_MISISSUANCE, eco.clock())
            eco.log("root", f"revoked intermediate {ica.name} serial={ica.certificate.serial}")

        eco.clock.advance(seconds=3600)
        report, decision = eco.install(archive, "sideload-device")
        failed = report.failed_step
        result.assertions["alert_raised"] = bool(alerts)
        result.assertions["ica_revoked"] = (
            eco.root.is_revoked(ica.certificate.serial) and eco.status_of(ica.certificate) is CertStatus.REVOKED
        )
        result.assertions["install_denied"] = (
            decision.kind is DecisionKind.DENY and failed is not None and failed.step == 4
        )

    return _run("weakest-link", config, body)


def run_dormant_developer(config: EcosystemConfig = EcosystemConfig()) -> ScenarioResult:
    """A developer earns Trusted, then ships malware; sharing and revocation stop it."""
    if len(config.ica_policies) < 2:
        raise ConfigInvalid("dormant-developer needs at least two stores")
    detecting = config.schedule.detecting_store
    if not 0 < detecting < len(config.ica_policies):
        raise ConfigInvalid("detecting_store must name a store other than the issuing store (index 0)")

    def body(eco: Ecosystem, result: ScenarioResult) -> None:
        schedule = config.schedule
        ica, store_a, store_b = eco.icas[0], eco.stores[0], eco.stores[detecting]
        dev_key = eco.key()
        identity = SubjectIdentity("Sleepy Games", "Sleepy Games Lda", country="PT")
        evidence = PolicyEvidence(identity_verified=True)
        cert, _ = ica.issue_developer(identity, dev_key, evidence, config.developer_lifetime_days,
                                      eco.ct_endpoint, eco.clock())
        eco.log(store_a.store_id, f"certified developer serial={cert.serial} level={cert.trust_level.value}")
        levels = [cert.trust_level]

        benign = _package("games.sleepy.puzzle", 1, {"classes.dex": b"puzzle-v1"}, dev_key, eco.chain_for(ica, cert))
        for store in (store_a, store_b):
            store.list_package(package_digest(benign), "games.sleepy.puzzle", cert.fingerprint)
        eco.log("developer", "released benign v1 to both stores")

        if not schedule.detect_before_promotion:
            eco.clock.advance(days=PROMOTION_AGE_DAYS)
            evidence = PolicyEvidence(True, PROMOTION_AGE_DAYS, PROMOTION_INSTALLS)
            outcome = ica.reevaluate(cert.fingerprint, evidence, eco.clock(), eco.ct_endpoint)
            if isinstance(outcome, Reissued):
                cert = outcome.certificate
                eco.log(store_a.store_id, f"reissued serial={cert.serial} at {cert.trust_level.value}")
            levels.append(cert.trust_level)

        malicious_cert = cert
        malicious = _package("games.sleepy.puzzle", 2, {"classes.dex": b"puzzle-v2;exfiltrate(contacts)"},
                             dev_key, eco.chain_for(ica, cert))
        mal_digest = package_digest(malicious)
        for store in (store_a, store_b):
            store.list_package(mal_digest, "games.sleepy.puzzle", cert.fingerprint)
        eco.log(store_a.store_id, "accepted v2 (malware not detected)")

        eco.clock.advance(days=1)
        event = ThreatEvent(
            event_id=f"{store_b.store_id}-0001",
            developer_fingerprint=cert.fingerprint,
            severity=TrustLevel.CRITICAL,
            reported_by=store_b.store_id,
            timestamp=eco.clock(),
            package_digest=mal_digest,
            indicators=("exfiltrates contact list", "beacon to hxxp://203.0.113.7/c2"),
        )
        store_b.listings.pop(mal_digest, None)
        eco.log(store_b.store_id, "detected malware in v2 and delisted it")
        if schedule.exchange_enabled:
            eco.exchange_endpoint.publish(event)
            eco.log(store_b.store_id, f"published threat event {event.event_id}")

        eco.clock.advance(seconds=600)
        evidence_now = evidence
        for store in eco.stores:
            if store is store_b or not schedule.exchange_enabled:
                continue
            cursor = eco.exchange.cursors.get(store.store_id, 0)
            events, cursor = eco.exchange_endpoint.pull_since(cursor)
            eco.exchange.cursors[store.store_id] = cursor
            for received in events:
                for action in ingest(store, received):
                    if isinstance(action, DelistPackage):
                        eco.log(store.store_id, f"delisted {action.package_name} ({action.package_digest.hex()[:12]})")
                    elif isinstance(action, TriggerReevaluation) and store.authority is not None:
                        evidence_now = evidence_now.with_threat(action.threat)
                        outcome = store.authority.reevaluate(
                            action.developer_fingerprint, evidence_now, eco.clock(), eco.ct_endpoint
                        )
                        if isinstance(outcome, Reissued):
                            cert = outcome.certificate
                            levels.append(cert.trust_level)
                            eco.log(store.store_id, f"revoked serial={outcome.revoked_serial}, "
                                                    f"reissued serial={cert.serial} at {cert.trust_level.value}")

        eco.clock.advance(seconds=3600)
        _, decision = eco.install(malicious, "sideload-device")

        result.details["levels"] = [lvl.value for lvl in levels]
        result.details["ever_trusted"] = TrustLevel.TRUSTED in levels
        result.assertions["shared"] = (
            any(e.event_id == event.event_id for e in eco.exchange.events) and event.event_id in store_a.handled
        )
        result.assertions["delisted"] = mal_digest in store_a.delisted and not store_a.is_listed(mal_digest)
        result.assertions["revoked"] = (
            ica.is_revoked(malicious_cert.serial)
            and eco.status_of(malicious_cert) is CertStatus.REVOKED
            and ica.active_record(malicious_cert.fingerprint) is not None
            and ica.active_record(malicious_cert.fingerprint).certificate.trust_level is TrustLevel.CRITICAL
        )
        result.assertions["sideload_denied"] = decision.kind is DecisionKind.DENY

    return _run("dormant-developer", config, body)


RUNNERS: dict[str, Callable[[EcosystemConfig], ScenarioResult]] = {
    "honest": run_honest_flow,
    "weakest-link": run_weakest_link,
    "dormant-developer": run_dormant_developer,
}


def run_scenario(name: str, config: EcosystemConfig = EcosystemConfig()) -> ScenarioResult:
    try:
        runner = RUNNERS[name]
    except KeyError:
        raise ConfigInvalid(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return runner(config)
