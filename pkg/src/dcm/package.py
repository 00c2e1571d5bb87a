"""Signed app packages.

A package is a zip archive holding the content files plus three metadata
entries::

    DCM-META/manifest.bin   package name, version, (path, sha256, size) per file
    DCM-META/sig.bin        sha256(manifest.bin) and the developer's signature over it
    DCM-META/chain.bin      [developer cert, intermediates..., root]

Entries are written in a fixed order with zeroed timestamps so that signing
the same inputs twice yields identical bytes.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .encoding import Reader, Writer
from .errors import (
    DecodeError,
    DuplicatePath,
    EmptyPackage,
    KeyMismatch,
    MalformedMetadata,
    ManifestMismatch,
    MissingMetadata,
    NotADeveloperCert,
)
from .trust import (
    DIGEST_SIZE,
    SIGNATURE_SIZE,
    Certificate,
    CertificateRole,
    decode_chain,
    digest,
    encode_chain,
    public_key_bytes,
    sign_bytes,
)

META_DIR = "DCM-META/"
MANIFEST_PATH = META_DIR + "manifest.bin"
SIGNATURE_PATH = META_DIR + "sig.bin"
CHAIN_PATH = META_DIR + "chain.bin"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

Files = Union[Mapping[str, bytes], Iterable[tuple[str, bytes]]]


@dataclass(frozen=True)
class FileEntry:
    path: str
    digest: bytes
    size: int


@dataclass(frozen=True)
class PackageManifest:
    package_name: str
    version_code: int
    files: tuple[FileEntry, ...]

    def encode(self) -> bytes:
        w = Writer().text(self.package_name).u64(self.version_code).u32(len(self.files))
        for f in self.files:
            w.text(f.path).fixed(f.digest, DIGEST_SIZE).u64(f.size)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "PackageManifest":
        r = Reader(data)
        name, version = r.text(), r.u64()
        files = tuple(FileEntry(r.text(), r.fixed(DIGEST_SIZE), r.u64()) for _ in range(r.u32()))
        r.done()
        paths = [f.path for f in files]
        if paths != sorted(set(paths)):
            raise DecodeError("manifest paths not sorted and unique")
        return cls(name, version, files)

    @property
    def digest(self) -> bytes:
        return digest(self.encode())

    def entry(self, path: str) -> FileEntry:
        for f in self.files:
            if f.path == path:
                return f
        raise KeyError(path)

    def to_json(self) -> dict:
        return {
            "package_name": self.package_name,
            "version_code": self.version_code,
            "files": [{"path": f.path, "sha256": f.digest.hex(), "size": f.size} for f in self.files],
        }


@dataclass(frozen=True)
class SignatureBlock:
    manifest_digest: bytes
    signature: bytes
    chain: tuple[Certificate, ...]

    @property
    def leaf(self) -> Certificate:
        return self.chain[0]


def _pairs(files: Files) -> list[tuple[str, bytes]]:
    items = list(files.items()) if isinstance(files, Mapping) else list(files)
    return [(str(p), bytes(b)) for p, b in items]


def build_manifest(package_name: str, version_code: int, files: Files) -> PackageManifest:
    pairs = _pairs(files)
    if not pairs:
        raise EmptyPackage("a package needs at least one file")
    if not package_name:
        raise ValueError("package_name must be non-empty")
    if version_code <= 0:
        raise ValueError("version_code must be positive")
    seen: set[str] = set()
    for path, _ in pairs:
        if path in seen:
            raise DuplicatePath(path)
        if path.startswith(META_DIR) or path.startswith("/") or not path:
            raise ValueError(f"illegal content path {path!r}")
        seen.add(path)
    entries = tuple(FileEntry(p, digest(data), len(data)) for p, data in sorted(pairs))
    return PackageManifest(package_name, version_code, entries)


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.create_system = 3
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def sign_package(
    files: Files,
    manifest: PackageManifest,
    developer_secret: Ed25519PrivateKey,
    chain: Sequence[Certificate],
) -> bytes:
    """Return the signed archive bytes."""
    chain = tuple(chain)
    if not chain or chain[0].role is not CertificateRole.DEVELOPER:
        raise NotADeveloperCert("chain leaf must be a Developer certificate")
    if public_key_bytes(developer_secret) != chain[0].public_key:
        raise KeyMismatch("secret key does not match the leaf certificate")
    pairs = dict(_pairs(files))
    if build_manifest(manifest.package_name, manifest.version_code, pairs) != manifest:
        raise ManifestMismatch("manifest does not describe the given files")

    manifest_bytes = manifest.encode()
    manifest_digest = digest(manifest_bytes)
    sig = Writer().fixed(manifest_digest, DIGEST_SIZE)
    sig.fixed(sign_bytes(developer_secret, manifest_digest), SIGNATURE_SIZE)

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for entry in manifest.files:
            _zip_entry(zf, entry.path, pairs[entry.path])
        _zip_entry(zf, MANIFEST_PATH, manifest_bytes)
        _zip_entry(zf, SIGNATURE_PATH, sig.getvalue())
        _zip_entry(zf, CHAIN_PATH, encode_chain(chain))
    return buf.getvalue()


def _open(archive: bytes) -> zipfile.ZipFile:
    try:
        return zipfile.ZipFile(io.BytesIO(archive))
    except (zipfile.BadZipFile, ValueError) as exc:
        raise MalformedMetadata(f"not a package archive: {exc}") from exc


def _read(zf: zipfile.ZipFile, archive: bytes, name: str) -> bytes:
    """Entry bytes without the zip CRC check; integrity is the manifest's job."""
    info = zf.getinfo(name)
    if info.compress_type != zipfile.ZIP_STORED:
        return zf.read(name)
    header = archive[info.header_offset:info.header_offset + 30]
    if len(header) < 30 or header[:4] != b"PK\x03\x04":
        raise MalformedMetadata(f"bad local header for {name}")
    start = info.header_offset + 30 + int.from_bytes(header[26:28], "little") + int.from_bytes(header[28:30], "little")
    data = archive[start:start + info.compress_size]
    if len(data) != info.compress_size:
        raise MalformedMetadata(f"truncated entry {name}")
    return data


def extract_metadata(archive: bytes) -> tuple[PackageManifest, SignatureBlock]:
    """Parse the metadata entries. Content is not checked here."""
    with _open(archive) as zf:
        names = set(zf.namelist())
        for required in (MANIFEST_PATH, SIGNATURE_PATH, CHAIN_PATH):
            if required not in names:
                raise MissingMetadata(required)
        try:
            manifest = PackageManifest.decode(_read(zf, archive, MANIFEST_PATH))
            r = Reader(_read(zf, archive, SIGNATURE_PATH))
            manifest_digest, signature = r.fixed(DIGEST_SIZE), r.fixed(SIGNATURE_SIZE)
            r.done()
            chain = tuple(decode_chain(_read(zf, archive, CHAIN_PATH)))
        except (DecodeError, zipfile.BadZipFile) as exc:
            raise MalformedMetadata(str(exc)) from exc
    if not chain:
        raise MalformedMetadata("empty certificate chain")
    return manifest, SignatureBlock(manifest_digest, signature, chain)


def read_contents(archive: bytes) -> dict[str, bytes]:
    """Content files only (everything outside DCM-META/)."""
    with _open(archive) as zf:
        try:
            return {n: _read(zf, archive, n) for n in zf.namelist() if not n.startswith(META_DIR)}
        except zipfile.BadZipFile as exc:
            raise MalformedMetadata(str(exc)) from exc


def read_manifest_bytes(archive: bytes) -> bytes:
    with _open(archive) as zf:
        return _read(zf, archive, MANIFEST_PATH)


def package_digest(archive: bytes) -> bytes:
    return digest(archive)
