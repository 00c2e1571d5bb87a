"""``dcm`` command-line entry point.

Exit codes: 0 success/Install, 10 Prompt, 20 Deny or verification failure,
30 usage or input error. Set ``DCM_CLOCK`` to a unix timestamp to pin "now".
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import click

from . import _http
from .authority import (
    CertificateAuthority,
    Journal,
    Reissued,
    RevocationReason,
    init_root,
    monitor_context,
)
from .ctlog import CTLog, CtLogClient, make_ctlog_server, monitor_scan, verify_consistency, verify_inclusion
from .errors import DcmError
from .package import build_manifest, extract_metadata, package_digest, sign_package
from .policy import PolicyEvidence
from .revocation import HttpTransport, OcspResponder, StatusClient, build_crl, make_ocsp_server
from .sim import SCENARIOS, EcosystemConfig, run_scenario
from .threatx import ExchangeClient, ThreatEvent, ThreatExchange, make_exchange_server
from .trust import (
    CertificateRole,
    SubjectIdentity,
    certificate_to_json,
    fingerprint,
    generate_signing_key,
    read_certificate,
    read_public_key,
    read_secret_key,
    write_certificate,
    write_public_key,
    write_secret_key,
)
from .verifier import (
    MALFORMED_METADATA,
    OfflinePolicy,
    VerifierConfig,
    decide_install,
    verify_package,
)

EXIT_OK, EXIT_PROMPT, EXIT_DENY, EXIT_USAGE = 0, 10, 20, 30
POLICY_NAMES = ("strict", "lax")


def now() -> int:
    raw = os.environ.get("DCM_CLOCK")
    if raw is None:
        return int(time.time())
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"DCM_CLOCK must be an integer timestamp, got {raw!r}") from None


def emit(obj, as_json: bool, text: Optional[str] = None) -> None:
    if as_json:
        click.echo(json.dumps(obj, indent=2, sort_keys=True))
    else:
        click.echo(text if text is not None else json.dumps(obj, indent=2, sort_keys=True))


def identity_options(f):
    for opt in reversed([
        click.option("--cn", "common_name", required=True, help="Common Name"),
        click.option("--org", "organization", default="", help="Organization"),
        click.option("--ou", "organizational_unit", default=None),
        click.option("--locality", default=None),
        click.option("--state", "state_region", default=None),
        click.option("--country", default=None, help="2-letter country code"),
        click.option("--email", default=None),
    ]):
        f = opt(f)
    return f


def _identity(kw: dict) -> SubjectIdentity:
    keys = ("common_name", "organization", "organizational_unit", "locality", "state_region", "country", "email")
    return SubjectIdentity(**{k: kw.pop(k) for k in keys})


# -- CA directories ---------------------------------------------------------------
# <dir>/ca.cert  <dir>/ca.key  <dir>/journal.log  <dir>/ca.json


def save_ca(directory: Path, ca: CertificateAuthority, policy: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_certificate(directory / "ca.cert", ca.certificate)
    write_secret_key(directory / "ca.key", ca.secret_key)
    (directory / "ca.json").write_text(json.dumps({"policy": policy}) + "\n")
    journal = Journal(directory / "journal.log")
    for raw in ca.journal.raw():
        journal.append(raw)
    ca.journal = journal


def load_ca(directory: Path) -> CertificateAuthority:
    from .sim import POLICIES

    directory = Path(directory)
    meta = json.loads((directory / "ca.json").read_text())
    return CertificateAuthority.from_journal(
        read_certificate(directory / "ca.cert"),
        read_secret_key(directory / "ca.key"),
        Journal(directory / "journal.log"),
        POLICIES[meta.get("policy", "strict")],
    )


def ct_endpoint(location: str):
    if location.startswith(("http://", "https://")):
        return CtLogClient(location)
    return open_log(Path(location))


def open_log(directory: Path) -> CTLog:
    if (directory / "log.key").exists():
        return CTLog.open(directory, clock=now)
    return CTLog.create(directory, clock=now)


def load_evidence(path: Path) -> PolicyEvidence:
    return PolicyEvidence.from_json(json.loads(Path(path).read_text()))


def load_anchor_certs(paths) -> list:
    certs = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.cert")) if p.is_dir() else [p]
        certs += [read_certificate(f) for f in files]
    anchors = [c for c in certs if c.role is CertificateRole.ROOT]
    if not anchors:
        raise click.UsageError("no root certificates found among --anchors")
    return anchors


def _fp_arg(value: str) -> bytes:
    path = Path(value)
    if path.exists():
        return fingerprint(read_public_key(path))
    return bytes.fromhex(value)


# ---------------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log to stderr.")
def cli(verbose: bool) -> None:
    """Developer certification toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Writes OUT.key and OUT.pub")
@click.option("--seed", default=None, help="32-byte hex seed for reproducible keys")
def keygen(out: Path, seed: Optional[str]) -> int:
    """Generate an Ed25519 key pair."""
    if seed is not None:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(seed))
    else:
        key = generate_signing_key()
    write_secret_key(out.with_suffix(".key"), key)
    write_public_key(out.with_suffix(".pub"), key.public_key())
    click.echo(fingerprint(key.public_key()).hex())
    return EXIT_OK


# -- ca -----------------------------------------------------------------------------


@cli.group()
def ca() -> None:
    """Certification authority operations."""


@ca.command("init-root")
@identity_options
@click.option("--days", type=int, required=True)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="CA directory to create")
@click.option("--key", type=click.Path(exists=True, path_type=Path), default=None, help="Existing secret key")
def ca_init_root(days: int, out: Path, key: Optional[Path], **kw) -> int:
    root = init_root(_identity(kw), days, now(), secret_key=read_secret_key(key) if key else None)
    save_ca(out, root, "strict")
    click.echo(json.dumps(certificate_to_json(root.certificate), indent=2, sort_keys=True))
    return EXIT_OK


@ca.command("issue-intermediate")
@click.option("--ca", "ca_dir", required=True, type=click.Path(exists=True, path_type=Path))
@identity_options
@click.option("--days", type=int, required=True)
@click.option("--policy", type=click.Choice(POLICY_NAMES), default="strict")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--key", type=click.Path(exists=True, path_type=Path), default=None)
def ca_issue_intermediate(ca_dir: Path, days: int, policy: str, out: Path, key: Optional[Path], **kw) -> int:
    from .sim import POLICIES

    root = load_ca(ca_dir)
    _, ica = root.issue_intermediate(
        _identity(kw), days, now(), secret_key=read_secret_key(key) if key else None, policy=POLICIES[policy]
    )
    save_ca(out, ica, policy)
    click.echo(json.dumps(certificate_to_json(ica.certificate), indent=2, sort_keys=True))
    return EXIT_OK


@ca.command("issue-developer")
@click.option("--ca", "ca_dir", required=True, type=click.Path(exists=True, path_type=Path))
@identity_options
@click.option("--pubkey", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--evidence", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--days", type=int, required=True)
@click.option("--ctlog", "ctlog_target", required=True, help="Log URL or local log directory")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Certificate file to write")
def ca_issue_developer(ca_dir, pubkey, evidence, days, ctlog_target, out, **kw) -> int:
    ica = load_ca(ca_dir)
    cert, sct = ica.issue_developer(
        _identity(kw), read_public_key(pubkey), load_evidence(evidence), days, ct_endpoint(ctlog_target), now()
    )
    write_certificate(out, cert)
    click.echo(json.dumps({"certificate": certificate_to_json(cert), "sct": sct.to_json()}, indent=2, sort_keys=True))
    return EXIT_OK


@ca.command("revoke")
@click.option("--ca", "ca_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--serial", type=int, required=True)
@click.option("--reason", type=click.Choice([r.value for r in RevocationReason]), default="PolicyViolation")
def ca_revoke(ca_dir: Path, serial: int, reason: str) -> int:
    authority = load_ca(ca_dir)
    record = authority.revoke(serial, RevocationReason(reason), now())
    click.echo(json.dumps({"serial": record.serial, "revoked_at": record.revoked_at, "reason": record.reason.value}))
    return EXIT_OK


@ca.command("reevaluate")
@click.option("--ca", "ca_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--developer", required=True, help="Developer public key file or hex fingerprint")
@click.option("--evidence", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--ctlog", "ctlog_target", required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Where to write a reissued certificate")
def ca_reevaluate(ca_dir, developer, evidence, ctlog_target, out) -> int:
    authority = load_ca(ca_dir)
    outcome = authority.reevaluate(_fp_arg(developer), load_evidence(evidence), now(), ct_endpoint(ctlog_target))
    if isinstance(outcome, Reissued):
        if out is not None:
            write_certificate(out, outcome.certificate)
        click.echo(json.dumps({
            "outcome": "Reissued",
            "revoked_serial": outcome.revoked_serial,
            "previous_level": outcome.previous_level.value,
            "shortfall": None if outcome.shortfall is None else outcome.shortfall.value,
            "certificate": certificate_to_json(outcome.certificate),
        }, indent=2, sort_keys=True))
    else:
        click.echo(json.dumps({"outcome": "Unchanged", "level": outcome.level.value}, sort_keys=True))
    return EXIT_OK


# -- pkg ----------------------------------------------------------------------------


@cli.group()
def pkg() -> None:
    """Build and inspect signed packages."""


@pkg.command("sign")
@click.argument("source", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--name", "package_name", required=True)
@click.option("--version-code", type=int, required=True)
@click.option("--key", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--chain", "chain_files", multiple=True, required=True, type=click.Path(exists=True, path_type=Path),
              help="Certificates leaf first, root last (repeat)")
@click.option("--out", required=True, type=click.Path(path_type=Path))
def pkg_sign(source: Path, package_name, version_code, key, chain_files, out: Path) -> int:
    files = {
        p.relative_to(source).as_posix(): p.read_bytes()
        for p in sorted(source.rglob("*")) if p.is_file()
    }
    manifest = build_manifest(package_name, version_code, files)
    archive = sign_package(files, manifest, read_secret_key(key), [read_certificate(c) for c in chain_files])
    out.write_bytes(archive)
    click.echo(package_digest(archive).hex())
    return EXIT_OK


@pkg.command("inspect")
@click.argument("package", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--json", "as_json", is_flag=True)
def pkg_inspect(package: Path, as_json: bool) -> int:
    archive = package.read_bytes()
    manifest, block = extract_metadata(archive)
    info = {
        "package_digest": package_digest(archive).hex(),
        "manifest": manifest.to_json(),
        "manifest_digest": block.manifest_digest.hex(),
        "chain": [certificate_to_json(c) for c in block.chain],
    }
    leaf = block.leaf
    level = leaf.trust_level.value if leaf.trust_level else "none"
    text = (f"{manifest.package_name} v{manifest.version_code}: {len(manifest.files)} files, "
            f"signed by {leaf.body.subject.common_name} ({level}), chain length {len(block.chain)}")
    emit(info, as_json, text)
    return EXIT_OK


# -- verify -------------------------------------------------------------------------


@cli.command()
@click.argument("package", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--anchors", multiple=True, required=True, type=click.Path(exists=True, path_type=Path),
              help="Root certificate file or directory of *.cert files (repeatable)")
@click.option("--ocsp", "ocsp_url", default=None, help="Status responder URL")
@click.option("--fail-closed", is_flag=True, help="Fail step 4 when revocation status is unavailable")
@click.option("--json", "as_json", is_flag=True)
def verify(package: Path, anchors, ocsp_url, fail_closed, as_json) -> int:
    """Run install-time verification and print the decision."""
    clock_value = now()
    config = VerifierConfig(
        trust_anchors=load_anchor_certs(anchors),
        revocation_endpoint=StatusClient(HttpTransport(ocsp_url), cache=False) if ocsp_url else None,
        offline_policy=OfflinePolicy.FAIL_CLOSED if fail_closed else OfflinePolicy.FAIL_OPEN,
        clock=lambda: clock_value,
    )
    report = verify_package(package.read_bytes(), config)
    decision = decide_install(report)
    failed = report.failed_step
    if failed is not None:
        click.echo(f"step {failed.step} ({failed.name}) failed: {failed.reason} {failed.detail}".rstrip(), err=True)
    emit({"report": report.to_json(), "decision": decision.to_json()}, as_json,
         f"{decision.kind.value}: {decision.message}")
    if failed is not None and failed.reason == MALFORMED_METADATA:
        return EXIT_USAGE
    return decision.exit_code


# -- ocsp ---------------------------------------------------------------------------


@cli.group()
def ocsp() -> None:
    """Revocation status responder."""


def _responder(ca_dirs) -> OcspResponder:
    responder = OcspResponder(clock=now)
    for d in ca_dirs:
        d = Path(d)
        cert = read_certificate(d / "ca.cert")
        key = read_secret_key(d / "ca.key")

        def view(d=d, cert=cert, key=key):
            # Re-read the journal so revocations by other processes are visible.
            return CertificateAuthority.from_journal(cert, key, Journal(d / "journal.log")).registry_view()

        responder.add_registry(cert.fingerprint, view, key)
    return responder


@ocsp.command("serve")
@click.option("--ca", "ca_dirs", multiple=True, required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
def ocsp_serve(ca_dirs, host, port) -> int:
    server = make_ocsp_server(_responder(ca_dirs), host, port)
    click.echo(f"status responder on {_http.server_url(server)}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


@ocsp.command("query")
@click.option("--url", required=True)
@click.option("--issuer", required=True, type=click.Path(exists=True, path_type=Path), help="Issuer certificate")
@click.option("--serial", type=int, required=True)
@click.option("--max-age", type=int, default=600)
@click.option("--json", "as_json", is_flag=True)
def ocsp_query(url, issuer, serial, max_age, as_json) -> int:
    issuer_cert = read_certificate(issuer)
    client = StatusClient(HttpTransport(url), max_age=max_age, cache=False)
    response = client.check(serial, issuer_cert.fingerprint, issuer_cert.public_key, now())
    emit(response.to_json(), as_json, response.status.value)
    return EXIT_OK


@ocsp.command("crl")
@click.option("--ca", "ca_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None)
def ocsp_crl(ca_dir, out) -> int:
    """Build a signed CRL for one CA."""
    authority = load_ca(ca_dir)
    crl = build_crl(authority.registry_view(), authority.secret_key, now())
    if out is not None:
        out.write_bytes(crl.encode())
    click.echo(json.dumps(crl.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


# -- ctlog --------------------------------------------------------------------------


@cli.group()
def ctlog() -> None:
    """Certificate transparency log."""


@ctlog.command("serve")
@click.option("--log", "log_dir", required=True, type=click.Path(path_type=Path))
@click.option("--ca", "ca_dirs", multiple=True, type=click.Path(exists=True, path_type=Path),
              help="Registered CAs for /alerts")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8081)
def ctlog_serve(log_dir, ca_dirs, host, port) -> int:
    log = open_log(log_dir)
    context = (lambda: monitor_context([load_ca(d) for d in ca_dirs])) if ca_dirs else None
    server = make_ctlog_server(log, host, port, monitor_context=context)
    click.echo(f"ct log on {_http.server_url(server)}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


@ctlog.command("submit")
@click.option("--log", "log_target", required=True, help="Log URL or directory")
@click.argument("certificate", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def ctlog_submit(log_target, certificate) -> int:
    sct = ct_endpoint(log_target).submit(read_certificate(certificate))
    click.echo(json.dumps(sct.to_json(), sort_keys=True))
    return EXIT_OK


@ctlog.command("prove")
@click.option("--log", "log_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--index", type=int, default=None, help="Inclusion proof for this leaf")
@click.option("--size", type=int, default=None)
@click.option("--old", type=int, default=None, help="Consistency proof from this size")
@click.option("--new", type=int, default=None)
def ctlog_prove(log_dir, index, size, old, new) -> int:
    """Print (and self-check) an inclusion or consistency proof."""
    log = open_log(log_dir)
    if (index is None) == (old is None):
        raise click.UsageError("give exactly one of --index or --old")
    if index is not None:
        size = log.size if size is None else size
        proof = log.inclusion_proof(index, size)
        ok = verify_inclusion(proof.path, log.leaf_hashes()[index], log.root_hash(size), index, size)
        out = proof.to_json() | {"root": log.root_hash(size).hex(), "verified": ok}
    else:
        new = log.size if new is None else new
        proof = log.consistency_proof(old, new)
        ok = verify_consistency(proof.path, log.root_hash(old), log.root_hash(new), old, new)
        out = proof.to_json() | {"old_root": log.root_hash(old).hex(), "new_root": log.root_hash(new).hex(), "verified": ok}
    click.echo(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_DENY


@ctlog.command("monitor")
@click.option("--log", "log_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--ca", "ca_dirs", multiple=True, required=True, type=click.Path(exists=True, path_type=Path),
              help="Registered intermediate CA directories")
def ctlog_monitor(log_dir, ca_dirs) -> int:
    """Scan the log; exit 20 when any alert is raised."""
    alerts = monitor_scan(open_log(log_dir).entries, monitor_context([load_ca(d) for d in ca_dirs]))
    click.echo(json.dumps([a.to_json() for a in alerts], indent=2, sort_keys=True))
    return EXIT_DENY if alerts else EXIT_OK


# -- threatx ------------------------------------------------------------------------


@cli.group()
def threatx() -> None:
    """Threat-event exchange."""


def _exchange(location: str):
    if location.startswith(("http://", "https://")):
        return ExchangeClient(location)
    return ThreatExchange(Path(location))


@threatx.command("serve")
@click.option("--journal", required=True, type=click.Path(path_type=Path))
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8082)
def threatx_serve(journal, host, port) -> int:
    server = make_exchange_server(ThreatExchange(journal), host, port)
    click.echo(f"threat exchange on {_http.server_url(server)}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


@threatx.command("publish")
@click.option("--to", "target", required=True, help="Exchange URL or journal file")
@click.argument("event_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def threatx_publish(target, event_file) -> int:
    event = ThreatEvent.from_json(json.loads(event_file.read_text()))
    ack = _exchange(target).publish(event)
    click.echo(json.dumps({"event_id": ack.event_id, "index": ack.index}, sort_keys=True))
    return EXIT_OK


@threatx.command("pull")
@click.option("--from", "source", required=True, help="Exchange URL or journal file")
@click.option("--cursor", type=int, default=0)
def threatx_pull(source, cursor) -> int:
    events, new_cursor = _exchange(source).pull_since(cursor)
    click.echo(json.dumps({"cursor": new_cursor, "events": [e.to_json() for e in events]}, indent=2, sort_keys=True))
    return EXIT_OK


# -- sim ----------------------------------------------------------------------------


@cli.group()
def sim() -> None:
    """Ecosystem scenarios."""


@sim.command("run")
@click.option("--scenario", required=True, type=click.Choice(SCENARIOS))
@click.option("--seed", type=int, default=2023)
@click.option("--http", "use_http", is_flag=True, help="Run services over loopback sockets")
@click.option("--json", "as_json", is_flag=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Write JSON report here")
@click.option("--timeline", type=click.Path(path_type=Path), default=None, help="Write timeline text here")
def sim_run(scenario, seed, use_http, as_json, out, timeline) -> int:
    config = EcosystemConfig(seed=seed, transport="http" if use_http else "loopback")
    result = run_scenario(scenario, config)
    if out is not None:
        result.write(out, timeline)
    elif timeline is not None:
        timeline.write_text(result.timeline_text())
    emit(result.to_json(), as_json, result.timeline_text().rstrip())
    return EXIT_OK if result.status in ("passed", "NotApplicable") else EXIT_DENY


def main(argv: Optional[list[str]] = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="dcm", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except (DcmError, OSError, ValueError, KeyError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_USAGE
    return int(rv or 0)


if __name__ == "__main__":
    sys.exit(main())
