import pytest

from dcm.policy import OpenThreat
from dcm.revocation import LoopbackTransport
from dcm.trust import TrustLevel
from dcm.verifier import (
    DecisionKind,
    OfflinePolicy,
    StepResult,
    VerificationReport,
    decide_install,
    verify_package,
)
from faults import SINGLE_FAULTS, honest, tampered_content
from pki import CRITICAL_EVIDENCE, UNKNOWN_EVIDENCE, WARNING_EVIDENCE, make_world


def test_honest_passes_all_six():
    archive, config = honest(make_world())
    report = verify_package(archive, config)
    assert report.passed and [s.step for s in report.steps] == [1, 2, 3, 4, 5, 6]
    assert report.trust_level is TrustLevel.TRUSTED
    assert report.package_name == "com.example.app"
    assert decide_install(report).kind is DecisionKind.INSTALL


@pytest.mark.parametrize("fault", list(SINGLE_FAULTS), ids=lambda f: f.__name__)
def test_single_fault_stops_at_its_step(fault):
    step, reason = SINGLE_FAULTS[fault]
    report = verify_package(*fault(make_world()))
    failed = report.failed_step
    assert (failed.step, failed.reason) == (step, reason)
    assert len(report.steps) == step  # later steps not evaluated
    assert decide_install(report).kind is DecisionKind.DENY


def test_unlisted_file_rejected():
    w = make_world()
    import io, zipfile

    buf = io.BytesIO(w.package())
    with zipfile.ZipFile(buf, "a") as zf:
        zf.writestr("extra.so", b"payload")
    report = verify_package(buf.getvalue(), w.config())
    assert (report.failed_step.step, report.failed_step.reason) == (1, "DigestMismatch")


def test_garbage_archive_is_malformed():
    w = make_world()
    report = verify_package(b"garbage", w.config())
    assert (report.failed_step.step, report.failed_step.reason) == (1, "MalformedMetadata")


def test_responder_down_fail_open_vs_closed():
    w = make_world()
    w.transport.up = False
    report = verify_package(w.package(), w.config())
    assert report.passed and report.step(4).reason == "RevocationUnavailable"
    closed = verify_package(w.package(), w.config(offline=OfflinePolicy.FAIL_CLOSED))
    assert (closed.failed_step.step, closed.failed_step.reason) == (4, "RevocationUnavailable")


def test_no_endpoint_fail_closed():
    w = make_world()
    report = verify_package(w.package(), w.config(endpoint=False, offline=OfflinePolicy.FAIL_CLOSED))
    assert report.failed_step.step == 4


def test_revoked_intermediate_denies():
    from dcm.authority import RevocationReason

    w = make_world()
    w.root.revoke(w.ica.certificate.serial, RevocationReason.CA_MISISSUANCE, w.now + 1)
    report = verify_package(w.package(), w.config())
    assert (report.failed_step.step, report.failed_step.reason) == (4, "Revoked")
    assert "link 1" in report.failed_step.detail


@pytest.mark.parametrize(
    "evidence,kind",
    [(UNKNOWN_EVIDENCE, DecisionKind.PROMPT), (WARNING_EVIDENCE, DecisionKind.PROMPT), (CRITICAL_EVIDENCE, DecisionKind.DENY)],
)
def test_decisions_by_level(evidence, kind):
    w = make_world(evidence=evidence)
    report = verify_package(w.package(), w.config())
    assert report.passed
    decision = decide_install(report)
    assert decision.kind is kind and decision.trust_level is report.trust_level


def test_warning_prompt_carries_threat_summary():
    w = make_world(evidence=WARNING_EVIDENCE)
    decision = decide_install(verify_package(w.package(), w.config()))
    assert "ioc-w1" in decision.message and decision.exit_code == 10


def test_decide_on_synthetic_reports():
    steps = tuple(StepResult(i, True) for i in range(1, 7))
    assert decide_install(VerificationReport(steps, TrustLevel.TRUSTED)).exit_code == 0
    assert decide_install(VerificationReport(steps, TrustLevel.CRITICAL)).exit_code == 20
    failed = steps[:2] + (StepResult(3, False, "Expired"),)
    assert decide_install(VerificationReport(failed)).kind is DecisionKind.DENY


def test_report_json_shape():
    archive, config = tampered_content(make_world())
    js = verify_package(archive, config).to_json()
    assert js["overall"] == "fail" and js["failed_step"] == 1 and js["reason"] == "DigestMismatch"
