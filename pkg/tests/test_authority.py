import random

import pytest

from dcm.authority import (
    CertificateAuthority,
    IssuanceRecord,
    Journal,
    Reissued,
    RevocationReason,
    RevocationRecord,
    Unchanged,
    decode_record,
    encode_issuance,
    encode_revocation,
    init_root,
)
from dcm.ctlog import CTLog, certificate_leaf_hash
from dcm.errors import (
    ActiveCertificateExists,
    AlreadyRevoked,
    CtLogUnreachable,
    InvalidIdentity,
    JournalCorrupted,
    NoActiveCertificate,
    NotAnIntermediate,
    NotARoot,
    UnknownSerial,
)
from dcm.policy import OpenThreat, PolicyEvidence
from dcm.trust import CertificateRole, SubjectIdentity, TrustLevel, fingerprint, generate_signing_key, validate_chain
from pki import CRITICAL_EVIDENCE, T0, TRUSTED_EVIDENCE, UNKNOWN_EVIDENCE, WARNING_EVIDENCE, identity, make_world


class DownLog:
    def submit(self, cert):
        raise ConnectionRefusedError("log offline")


def test_init_root():
    root = init_root(identity("R"), 3650, T0)
    assert root.certificate.role is CertificateRole.ROOT
    assert validate_chain([root.certificate], [root.certificate], T0).ok
    assert init_root(identity("R"), 3650, T0).fingerprint != root.fingerprint


@pytest.mark.parametrize("days", [0, -5])
def test_init_root_rejects_empty_window(days):
    with pytest.raises(InvalidIdentity):
        init_root(identity("R"), days, T0)


def test_init_root_rejects_bad_identity():
    with pytest.raises(InvalidIdentity):
        init_root(SubjectIdentity("R", country="usa"), 10, T0)


def test_issue_intermediate_chain_and_serials():
    root = init_root(identity("R"), 3650, T0)
    a, _ = root.issue_intermediate(identity("StoreA CA"), 1000, T0)
    b, _ = root.issue_intermediate(identity("StoreB CA"), 1000, T0)
    assert b.serial == a.serial + 1
    assert a.serial != root.certificate.serial
    assert validate_chain([a, root.certificate], [root.certificate], T0 + 1).ok


def test_role_pairs():
    w = make_world()
    with pytest.raises(NotARoot):
        w.ica.issue_intermediate(identity("x"), 10, T0)
    with pytest.raises(NotAnIntermediate):
        w.root.issue_developer(identity("d"), generate_signing_key().public_key(), TRUSTED_EVIDENCE, 10, w.log, T0)
    dev_as_ca = CertificateAuthority(w.dev_cert, w.dev_key, Journal())
    with pytest.raises(NotARoot):
        dev_as_ca.issue_intermediate(identity("x"), 10, T0)
    with pytest.raises(NotAnIntermediate):
        dev_as_ca.issue_developer(identity("d"), generate_signing_key().public_key(), TRUSTED_EVIDENCE, 10, w.log, T0)


def test_issue_developer_logs_and_tags():
    w = make_world()
    assert w.dev_cert.body.extensions["dcm.trust_level"] == "Trusted"
    record = w.ica.issued[w.dev_cert.serial]
    assert record.sct.verify(certificate_leaf_hash(w.dev_cert), w.log.public_key)
    assert w.log.find(w.dev_cert) is not None


def test_threat_summary_extension():
    w = make_world(evidence=WARNING_EVIDENCE)
    assert w.dev_cert.trust_level is TrustLevel.WARNING
    assert w.dev_cert.body.extensions["dcm.threats"] == "ioc-w1"


def test_ct_down_aborts_without_record():
    w = make_world()
    before = (dict(w.ica.issued), len(w.ica.journal), w.ica.next_serial)
    with pytest.raises(CtLogUnreachable):
        w.ica.issue_developer(identity("Bob"), generate_signing_key().public_key(), TRUSTED_EVIDENCE, 10, DownLog(), T0)
    assert (dict(w.ica.issued), len(w.ica.journal), w.ica.next_serial) == before


def test_second_active_cert_refused():
    w = make_world()
    with pytest.raises(ActiveCertificateExists):
        w.ica.issue_developer(identity("Alice Dev"), w.dev_key.public_key(), TRUSTED_EVIDENCE, 10, w.log, T0)


def test_revoke():
    w = make_world()
    rec = w.ica.revoke(w.dev_cert.serial, RevocationReason.KEY_COMPROMISE, T0 + 5)
    assert w.ica.is_revoked(w.dev_cert.serial) and rec.revoked_at == T0 + 5
    with pytest.raises(AlreadyRevoked):
        w.ica.revoke(w.dev_cert.serial, RevocationReason.KEY_COMPROMISE, T0 + 6)
    with pytest.raises(UnknownSerial):
        w.ica.revoke(999, RevocationReason.KEY_COMPROMISE, T0)


class TestReevaluate:
    def test_unknown_to_trusted(self):
        w = make_world(evidence=UNKNOWN_EVIDENCE)
        out = w.ica.reevaluate(w.dev_cert.fingerprint, TRUSTED_EVIDENCE, T0 + 10, w.log)
        assert isinstance(out, Reissued)
        assert out.certificate.trust_level is TrustLevel.TRUSTED
        assert out.revoked_serial == w.dev_cert.serial and w.ica.is_revoked(w.dev_cert.serial)
        assert w.ica.revoked[w.dev_cert.serial].reason is RevocationReason.TRUST_LEVEL_CHANGE
        assert out.certificate.serial == w.dev_cert.serial + 1
        assert w.log.find(out.certificate) is not None

    def test_identical_evidence_unchanged(self):
        w = make_world()
        state = w.ica.state_tuple()
        assert w.ica.reevaluate(w.dev_cert.fingerprint, TRUSTED_EVIDENCE, T0 + 10, w.log) == Unchanged(TrustLevel.TRUSTED)
        assert w.ica.state_tuple() == state

    def test_trusted_to_critical(self):
        w = make_world()
        out = w.ica.reevaluate(w.dev_cert.fingerprint, CRITICAL_EVIDENCE, T0 + 10, w.log)
        assert out.certificate.trust_level is TrustLevel.CRITICAL
        assert out.previous_level is TrustLevel.TRUSTED

    def test_critical_recovers_only_to_warning(self):
        w = make_world(evidence=CRITICAL_EVIDENCE)
        out = w.ica.reevaluate(w.dev_cert.fingerprint, TRUSTED_EVIDENCE, T0 + 10, w.log)
        assert out.certificate.trust_level is TrustLevel.WARNING
        assert out.shortfall is TrustLevel.TRUSTED

    def test_trusted_cannot_fall_to_unknown(self):
        w = make_world()
        assert w.ica.reevaluate(w.dev_cert.fingerprint, UNKNOWN_EVIDENCE, T0 + 10, w.log) == Unchanged(TrustLevel.TRUSTED)

    def test_no_active(self):
        w = make_world()
        with pytest.raises(NoActiveCertificate):
            w.ica.reevaluate(b"\0" * 32, TRUSTED_EVIDENCE, T0, w.log)

    def test_ct_down_keeps_old_cert(self):
        w = make_world(evidence=UNKNOWN_EVIDENCE)
        with pytest.raises(CtLogUnreachable):
            w.ica.reevaluate(w.dev_cert.fingerprint, TRUSTED_EVIDENCE, T0 + 10, DownLog())
        assert not w.ica.is_revoked(w.dev_cert.serial)


def test_journal_records_round_trip():
    w = make_world()
    record = w.ica.issued[w.dev_cert.serial]
    assert decode_record(encode_issuance(record)) == record
    rev = RevocationRecord(5, T0, RevocationReason.CA_MISISSUANCE)
    assert decode_record(encode_revocation(rev)) == rev


def test_journal_replay_after_random_operations(tmp_path):
    rng = random.Random(11)
    root = init_root(identity("R"), 3650, T0, secret_key=generate_signing_key(rng))
    _, ica = root.issue_intermediate(identity("I"), 3650, T0, secret_key=generate_signing_key(rng),
                                     journal=Journal(tmp_path / "j.log"))
    log = CTLog(generate_signing_key(rng), clock=lambda: T0)
    devs = []
    for step in range(40):
        op = rng.random()
        if op < 0.5 or not devs:
            k = generate_signing_key(rng)
            ev = PolicyEvidence(rng.random() < 0.5, rng.randrange(1500), rng.randrange(20_000))
            ica.issue_developer(identity(f"d{step}"), k.public_key(), ev, 365, log, T0 + step)
            devs.append(k)
        elif op < 0.8:
            k = rng.choice(devs)
            try:
                ica.reevaluate(fingerprint(k), TRUSTED_EVIDENCE.with_threat(
                    OpenThreat(TrustLevel.WARNING, f"e{step}")), T0 + step, log)
            except NoActiveCertificate:
                pass
        else:
            live = [s for s in ica.issued if s not in ica.revoked]
            if live:
                ica.revoke(rng.choice(live), RevocationReason.POLICY_VIOLATION, T0 + step)
    replayed = CertificateAuthority.from_journal(ica.certificate, ica.secret_key, Journal(tmp_path / "j.log"))
    assert replayed.state_tuple() == ica.state_tuple()


def test_corrupted_journal(tmp_path):
    (tmp_path / "j.log").write_text("zz\n")
    with pytest.raises(JournalCorrupted):
        Journal(tmp_path / "j.log")
