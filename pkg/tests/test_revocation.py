import json

import pytest

from dcm import _http
from dcm.authority import RevocationReason
from dcm.errors import BadResponderSignature, StaleResponse, Unreachable
from dcm.revocation import (
    CertStatus,
    Crl,
    HttpTransport,
    LoopbackTransport,
    OcspResponder,
    StatusClient,
    StatusRequest,
    StatusResponse,
    build_crl,
    check_status,
    fetch_crl,
    make_ocsp_server,
    serve_status,
    verify_crl,
    verify_response,
)
from dcm.trust import generate_signing_key
from pki import T0, TRUSTED_EVIDENCE, identity, make_world


def _responder_at(w, t):
    r = OcspResponder(clock=lambda: t)
    r.add_authority(w.ica)
    return r


def test_status_vocabulary():
    w = make_world()
    view = w.ica.registry_view()
    key = w.ica.secret_key
    good = serve_status(StatusRequest(w.ica.fingerprint, w.dev_cert.serial), view, key, T0)
    assert good.status is CertStatus.GOOD
    assert serve_status(StatusRequest(w.ica.fingerprint, 77), view, key, T0).status is CertStatus.UNKNOWN
    w.ica.revoke(w.dev_cert.serial, RevocationReason.KEY_COMPROMISE, T0 + 3)
    revoked = serve_status(StatusRequest(w.ica.fingerprint, w.dev_cert.serial), w.ica.registry_view(), key, T0 + 5)
    assert revoked.status is CertStatus.REVOKED and revoked.revoked_at == T0 + 3
    assert revoked.reason is RevocationReason.KEY_COMPROMISE


def test_response_codec():
    w = make_world()
    resp = w.responder.respond(StatusRequest(w.ica.fingerprint, w.dev_cert.serial))
    assert StatusResponse.decode(resp.encode()) == resp


def test_live_client_good():
    w = make_world()
    assert check_status(w.dev_cert.serial, w.ica.fingerprint, w.transport, w.ica.public_key, T0 + 60) is CertStatus.GOOD


def test_wrong_key_signature():
    w = make_world()
    r = OcspResponder(clock=lambda: T0)
    r.add_registry(w.ica.fingerprint, w.ica.registry_view, generate_signing_key())
    with pytest.raises(BadResponderSignature):
        check_status(w.dev_cert.serial, w.ica.fingerprint, LoopbackTransport(r), w.ica.public_key, T0)


def test_response_for_other_request_rejected():
    w = make_world()
    resp = w.responder.respond(StatusRequest(w.ica.fingerprint, w.dev_cert.serial))
    with pytest.raises(BadResponderSignature):
        verify_response(resp, StatusRequest(w.ica.fingerprint, w.dev_cert.serial + 1), w.ica.public_key, T0)


@pytest.mark.parametrize("age,stale", [(0, False), (599, False), (600, False), (601, True), (5000, True)])
def test_staleness_boundary(age, stale):
    w = make_world()
    client = StatusClient(LoopbackTransport(_responder_at(w, T0)), cache=False)
    if stale:
        with pytest.raises(StaleResponse):
            client.check(w.dev_cert.serial, w.ica.fingerprint, w.ica.public_key, T0 + age)
    else:
        assert client.check(w.dev_cert.serial, w.ica.fingerprint, w.ica.public_key, T0 + age).status is CertStatus.GOOD


def test_cache_respects_max_age():
    w = make_world()
    transport = LoopbackTransport(_responder_at(w, T0))
    client = StatusClient(transport, max_age=600)
    client.check(w.dev_cert.serial, w.ica.fingerprint, w.ica.public_key, T0)
    transport.up = False
    assert client.check(w.dev_cert.serial, w.ica.fingerprint, w.ica.public_key, T0 + 600).status is CertStatus.GOOD
    with pytest.raises(Unreachable):
        client.check(w.dev_cert.serial, w.ica.fingerprint, w.ica.public_key, T0 + 601)


def test_delegated_responder():
    w = make_world()
    delegate = generate_signing_key()
    delegation = w.root.issue_responder_certificate(delegate.public_key(), 30, T0)
    r = OcspResponder(clock=lambda: T0)
    r.add_authority(w.root, delegate, delegation)
    status = check_status(w.ica.certificate.serial, w.root.fingerprint, LoopbackTransport(r), w.root.public_key, T0)
    assert status is CertStatus.GOOD


def test_delegation_without_signing_flag_rejected():
    w = make_world()
    r = OcspResponder(clock=lambda: T0)
    # A plain intermediate cert is not a status-signing delegation.
    r.add_authority(w.root, w.ica.secret_key, w.ica.certificate)
    with pytest.raises(BadResponderSignature):
        check_status(w.ica.certificate.serial, w.root.fingerprint, LoopbackTransport(r), w.root.public_key, T0)


def test_unreachable():
    w = make_world()
    w.transport.up = False
    with pytest.raises(Unreachable):
        check_status(w.dev_cert.serial, w.ica.fingerprint, w.transport, w.ica.public_key, T0)


class TestCrl:
    def test_empty(self):
        w = make_world()
        crl = build_crl(w.ica.registry_view(), w.ica.secret_key, T0)
        assert crl.entries == () and verify_crl(crl, w.ica.public_key)

    def test_sorted_entries_and_codec(self):
        w = make_world()
        serials = []
        for i in range(3):
            k = generate_signing_key()
            cert, _ = w.ica.issue_developer(identity(f"d{i}"), k.public_key(), TRUSTED_EVIDENCE, 10, w.log, T0)
            serials.append(cert.serial)
        for s in reversed(serials):
            w.ica.revoke(s, RevocationReason.POLICY_VIOLATION, T0 + s)
        crl = build_crl(w.ica.registry_view(), w.ica.secret_key, T0 + 10)
        assert [e.serial for e in crl.entries] == sorted(serials)
        assert Crl.decode(crl.encode()) == crl and verify_crl(crl, w.ica.public_key)
        assert not verify_crl(crl, w.root.public_key)
        for s in crl.serials():
            assert w.responder.respond(StatusRequest(w.ica.fingerprint, s)).status is CertStatus.REVOKED


def test_http_endpoints():
    w = make_world()
    w.ica.revoke(w.dev_cert.serial, RevocationReason.KEY_COMPROMISE, T0 + 1)
    server = make_ocsp_server(w.responder)
    _http.serve_in_background(server)
    try:
        url = _http.server_url(server)
        assert check_status(w.dev_cert.serial, w.ica.fingerprint, HttpTransport(url), w.ica.public_key, T0 + 60) is CertStatus.REVOKED
        status, body = _http.request(f"{url}/status.json?issuer={w.ica.fingerprint.hex()}&serial={w.dev_cert.serial}")
        assert status == 200 and json.loads(body)["status"] == "revoked"
        status, _ = _http.request(f"{url}/status.json?issuer={'00' * 32}&serial=1")
        assert status == 404
        crl = fetch_crl(url, w.ica.fingerprint)
        assert w.dev_cert.serial in crl and verify_crl(crl, w.ica.public_key)
    finally:
        server.shutdown()
        server.server_close()
    with pytest.raises(Unreachable):
        HttpTransport(url, timeout=0.5).query(StatusRequest(w.ica.fingerprint, 1).encode())
