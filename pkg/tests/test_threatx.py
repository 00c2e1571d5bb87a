import pytest
from hypothesis import given, strategies as st

from dcm import _http
from dcm.errors import BadCursor, DuplicateEventId, UnregisteredPublisher
from dcm.threatx import (
    DelistPackage,
    ExchangeClient,
    StoreActor,
    ThreatEvent,
    ThreatExchange,
    TriggerReevaluation,
    decode_events,
    encode_events,
    ingest,
    make_exchange_server,
)
from dcm.package import package_digest
from dcm.trust import TrustLevel
from pki import T0, make_world


def event(i, dev=b"\x11" * 32, severity=TrustLevel.CRITICAL, pkg=None, by="storeA"):
    return ThreatEvent(f"ev-{i}", dev, severity, by, T0 + i, pkg, ("sha256:abc", "domain:evil.example"))


@given(
    st.text(min_size=1, max_size=10), st.binary(min_size=32, max_size=32),
    st.sampled_from([TrustLevel.WARNING, TrustLevel.CRITICAL]), st.text(max_size=6),
    st.integers(0, 2**64 - 1), st.none() | st.binary(min_size=32, max_size=32), st.lists(st.text(max_size=5), max_size=3),
)
def test_event_codecs(eid, dev, sev, by, ts, pkg, iocs):
    e = ThreatEvent(eid, dev, sev, by, ts, pkg, tuple(iocs))
    assert ThreatEvent.decode(e.encode()) == e
    assert ThreatEvent.from_json(e.to_json()) == e


def test_event_validation():
    with pytest.raises(ValueError):
        event(0, severity=TrustLevel.TRUSTED)
    with pytest.raises(ValueError):
        ThreatEvent("", b"\0" * 32, TrustLevel.WARNING, "s", 0)


def test_publish_and_duplicates():
    x = ThreatExchange()
    assert x.publish(event(0)).index == 0 and len(x) == 1
    with pytest.raises(DuplicateEventId):
        x.publish(event(0))


def test_interleaved_publishers_keep_arrival_order():
    x = ThreatExchange()
    order = [event(0, by="a"), event(1, by="b"), event(2, by="a"), event(3, by="b")]
    for e in order:
        x.publish(e)
    assert list(x.events) == order


def test_registered_publishers_only():
    x = ThreatExchange(publishers={"storeA"})
    with pytest.raises(UnregisteredPublisher):
        x.publish(event(0, by="mallory"))


def test_pull_semantics():
    x = ThreatExchange()
    for i in range(3):
        x.publish(event(i))
    assert len(x.pull_since(0)[0]) == 3
    assert x.pull_since(3) == ([], 3)
    with pytest.raises(BadCursor):
        x.pull_since(4)
    assert len(x.pull("storeB")) == 3
    assert x.pull("storeB") == [] and x.pull("storeB") == []


def test_file_backed_journal(tmp_path):
    x = ThreatExchange(tmp_path / "tx.log")
    for i in range(3):
        x.publish(event(i))
    again = ThreatExchange(tmp_path / "tx.log")
    assert again.events == x.events
    with pytest.raises(DuplicateEventId):
        again.publish(event(1))


def test_batch_codec():
    events = [event(i) for i in range(3)]
    assert decode_events(encode_events(events, 9)) == (events, 9)


class TestIngest:
    def test_critical_listed_package(self):
        w = make_world()
        archive = w.package()
        store = StoreActor("storeA", w.ica)
        store.list_package(package_digest(archive), "com.example.app", w.dev_cert.fingerprint)
        actions = ingest(store, event(0, dev=w.dev_cert.fingerprint, pkg=package_digest(archive)))
        assert [type(a) for a in actions] == [DelistPackage, TriggerReevaluation]
        assert not store.is_listed(package_digest(archive))

    def test_unknown_developer(self):
        w = make_world()
        assert ingest(StoreActor("storeA", w.ica), event(0)) == []

    def test_warning_known_developer_reissues_at_warning(self):
        w = make_world()
        store = StoreActor("storeA", w.ica)
        actions = ingest(store, event(0, dev=w.dev_cert.fingerprint, severity=TrustLevel.WARNING))
        assert [type(a) for a in actions] == [TriggerReevaluation]
        record = w.ica.active_record(w.dev_cert.fingerprint)
        evidence = record.evidence_snapshot.with_threat(actions[0].threat)
        out = w.ica.reevaluate(w.dev_cert.fingerprint, evidence, T0 + 10, w.log)
        assert out.certificate.trust_level is TrustLevel.WARNING

    def test_idempotent(self):
        w = make_world()
        store = StoreActor("storeA", w.ica)
        e = event(0, dev=w.dev_cert.fingerprint)
        assert ingest(store, e) and ingest(store, e) == []
        assert len(store.open_threats[w.dev_cert.fingerprint]) == 1


def test_http_exchange():
    x = ThreatExchange(publishers={"storeA"})
    server = make_exchange_server(x)
    _http.serve_in_background(server)
    try:
        client = ExchangeClient(_http.server_url(server))
        assert client.publish(event(0)).index == 0
        with pytest.raises(DuplicateEventId):
            client.publish(event(0))
        with pytest.raises(UnregisteredPublisher):
            client.publish(event(1, by="mallory"))
        events, cursor = client.pull_since(0)
        assert events == [event(0)] and cursor == 1
        with pytest.raises(BadCursor):
            client.pull_since(7)
    finally:
        server.shutdown()
        server.server_close()
