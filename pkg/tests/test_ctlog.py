import json

import pytest

import merkle_oracle as oracle
from dcm import _http
from dcm.ctlog import (
    EMPTY_ROOT,
    AlertKind,
    CTLog,
    CtLogClient,
    LogEntry,
    MonitorContext,
    SignedCertificateTimestamp,
    certificate_leaf_hash,
    consistency_path,
    hash_children,
    hash_leaf,
    inclusion_path,
    make_ctlog_server,
    merkle_root,
    monitor_scan,
    verify_consistency,
    verify_inclusion,
)
from dcm.authority import RevocationReason, monitor_context
from dcm.errors import CtLogUnreachable, IndexOutOfRange, LogCorrupted, SizeOutOfRange
from dcm.policy import lax_policy
from dcm.trust import generate_signing_key
from pki import T0, TRUSTED_EVIDENCE, UNKNOWN_EVIDENCE, identity, make_world

LEAVES = [oracle.leaf(bytes([i]) * (i + 1)) for i in range(16)]


def test_roots_against_oracle():
    assert merkle_root([]) == EMPTY_ROOT == oracle.root([])
    assert EMPTY_ROOT.hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert merkle_root(LEAVES[:1]) == LEAVES[0] == hash_leaf(bytes([0]))
    l0, l1, l2 = LEAVES[:3]
    assert merkle_root(LEAVES[:3]) == hash_children(hash_children(l0, l1), l2)
    for n in range(17):
        assert merkle_root(LEAVES[:n]) == oracle.root(LEAVES[:n])


def test_inclusion_paths_match_oracle_7_leaves():
    leaves = LEAVES[:7]
    pairs = [(i, n) for n in range(1, 8) for i in range(n)]
    assert len(pairs) == 28
    for i, n in pairs:
        path = inclusion_path(i, leaves[:n])
        assert path == oracle.audit_path(i, leaves[:n])
        assert verify_inclusion(path, leaves[i], oracle.root(leaves[:n]), i, n)


def test_inclusion_single_node_and_tamper():
    assert inclusion_path(0, LEAVES[:1]) == []
    assert verify_inclusion([], LEAVES[0], LEAVES[0], 0, 1)
    path = inclusion_path(3, LEAVES[:7])
    assert not verify_inclusion(path, LEAVES[4], merkle_root(LEAVES[:7]), 3, 7)
    assert not verify_inclusion(path, LEAVES[3], merkle_root(LEAVES[:7]), 3, 4)
    assert not verify_inclusion(path, LEAVES[3], merkle_root(LEAVES[:7]), 7, 7)
    assert not verify_inclusion(path + [LEAVES[0]], LEAVES[3], merkle_root(LEAVES[:7]), 3, 7)


def test_consistency_8_leaves():
    leaves = LEAVES[:8]
    for new in range(1, 9):
        for old in range(1, new + 1):
            path = consistency_path(old, leaves[:new])
            assert verify_consistency(path, oracle.root(leaves[:old]), oracle.root(leaves[:new]), old, new)
    assert consistency_path(5, leaves[:5]) == []


def test_consistency_rejects_fork():
    forked = list(LEAVES[:8])
    forked[2] = oracle.leaf(b"forged")
    for old in range(3, 8):
        path = consistency_path(old, forked)
        assert not verify_consistency(path, merkle_root(LEAVES[:old]), merkle_root(forked), old, 8)


def test_consistency_degenerate_inputs():
    r = merkle_root(LEAVES[:4])
    assert not verify_consistency([r], r, r, 4, 4)
    assert not verify_consistency([], r, merkle_root(LEAVES[:5]), 4, 5)
    assert not verify_consistency([], r, r, 0, 4)


class TestLog:
    def test_append_indices_and_sct(self):
        w = make_world()
        log = CTLog(generate_signing_key(), clock=lambda: T0)
        s0 = log.append(w.dev_cert)
        s1 = log.append(w.ica.certificate)
        assert (s0.index, s1.index, log.size) == (0, 1, 2)
        assert s0.verify(certificate_leaf_hash(w.dev_cert), log.public_key)
        assert not s0.verify(certificate_leaf_hash(w.ica.certificate), log.public_key)
        assert not s0.verify(certificate_leaf_hash(w.dev_cert), generate_signing_key().public_key())
        assert SignedCertificateTimestamp.decode(s0.encode()) == s0

    def test_entry_codec(self):
        w = make_world()
        entry = w.log.entries[0]
        assert LogEntry.decode(entry.encode()) == entry

    def test_range_errors(self):
        w = make_world()
        with pytest.raises(SizeOutOfRange):
            w.log.root_hash(5)
        with pytest.raises(IndexOutOfRange):
            w.log.inclusion_proof(1, 1)
        with pytest.raises(SizeOutOfRange):
            w.log.consistency_proof(0, 1)

    def test_persistence(self, tmp_path):
        w = make_world()
        log = CTLog.create(tmp_path / "log", clock=lambda: T0)
        log.append(w.dev_cert)
        log.append(w.ica.certificate)
        again = CTLog.open(tmp_path / "log")
        assert again.root_hash() == log.root_hash() and again.public_key == log.public_key
        lines = (tmp_path / "log" / "entries.log").read_text().splitlines()
        (tmp_path / "log" / "entries.log").write_text(lines[1] + "\n" + lines[0] + "\n")
        with pytest.raises(LogCorrupted):
            CTLog.open(tmp_path / "log")

    def test_truncated_log_detected(self, tmp_path):
        w = make_world()
        log = CTLog.create(tmp_path / "log", clock=lambda: T0)
        log.append(w.dev_cert)
        (tmp_path / "log" / "entries.log").write_text("")
        with pytest.raises(LogCorrupted):
            CTLog.open(tmp_path / "log")


class TestMonitor:
    def _lax_world(self):
        w = make_world()
        w.ica.policy = lax_policy
        k = generate_signing_key()
        cert, _ = w.ica.issue_developer(identity("Mallory"), k.public_key(), UNKNOWN_EVIDENCE, 365, w.log, T0)
        return w, cert

    def test_clean_log(self):
        w = make_world()
        assert monitor_scan(w.log, monitor_context([w.ica])) == []

    def test_trusted_without_evidence(self):
        w, cert = self._lax_world()
        alerts = monitor_scan(w.log, monitor_context([w.ica]))
        assert [a.kind for a in alerts] == [AlertKind.TRUSTED_WITHOUT_EVIDENCE]
        assert alerts[0].index == w.log.find(cert).index

    def test_unknown_issuer(self):
        w = make_world()
        other = make_world(seed=5)
        w.log.append(other.dev_cert)
        assert [a.kind for a in monitor_scan(w.log, monitor_context([w.ica]))] == [AlertKind.UNKNOWN_ISSUER]

    def test_duplicate_active_cert(self):
        w = make_world()
        other = make_world(seed=5)
        other.ica.issued.clear()
        # Second CA certifies the same developer key.
        cert, _ = other.ica.issue_developer(identity("Alice Dev"), w.dev_key.public_key(), TRUSTED_EVIDENCE, 10, w.log, T0)
        alerts = monitor_scan(w.log, monitor_context([w.ica, other.ica]))
        assert [a.kind for a in alerts] == [AlertKind.DUPLICATE_ACTIVE_CERT]
        w.ica.revoke(w.dev_cert.serial, RevocationReason.KEY_COMPROMISE, T0)
        assert monitor_scan(w.log, monitor_context([w.ica, other.ica])) == []

    def test_reissue_is_not_duplicate(self):
        w = make_world(evidence=UNKNOWN_EVIDENCE)
        w.ica.reevaluate(w.dev_cert.fingerprint, TRUSTED_EVIDENCE, T0 + 5, w.log)
        assert monitor_scan(w.log, monitor_context([w.ica])) == []


def test_http_service():
    w = make_world()
    server = make_ctlog_server(w.log, monitor_context=lambda: monitor_context([w.root, w.ica]))
    _http.serve_in_background(server)
    try:
        client = CtLogClient(_http.server_url(server))
        assert client.public_key == w.log.public_key
        sct = client.submit(w.ica.certificate)
        assert sct.index == 1 and sct.verify(certificate_leaf_hash(w.ica.certificate), w.log.public_key)
        proof = client.inclusion_proof(0, 2)
        assert verify_inclusion(proof.path, w.log.leaf_hashes()[0], client.root_hash(2), 0, 2)
        cons = client.consistency_proof(1, 2)
        assert verify_consistency(cons.path, client.root_hash(1), client.root_hash(2), 1, 2)
        assert client.alerts() == []
        with pytest.raises(ValueError):
            client.inclusion_proof(5, 2)
    finally:
        server.shutdown()
        server.server_close()
    with pytest.raises(CtLogUnreachable):
        CtLogClient(_http.server_url(server), timeout=0.5).submit(w.dev_cert)
