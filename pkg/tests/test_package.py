import io
import zipfile

import pytest
from hypothesis import given, settings, strategies as st

from dcm.errors import DuplicatePath, EmptyPackage, KeyMismatch, MalformedMetadata, ManifestMismatch, MissingMetadata, NotADeveloperCert
from dcm.package import (
    CHAIN_PATH,
    MANIFEST_PATH,
    SIGNATURE_PATH,
    PackageManifest,
    build_manifest,
    extract_metadata,
    read_contents,
    sign_package,
)
from dcm.trust import digest, generate_signing_key
from pki import FILES, make_world


def rezip(archive: bytes, drop=(), replace=None) -> bytes:
    replace = replace or {}
    src = zipfile.ZipFile(io.BytesIO(archive))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as out:
        for info in src.infolist():
            if info.filename in drop:
                continue
            out.writestr(info, replace.get(info.filename, src.read(info.filename)))
    return buf.getvalue()


def test_manifest_sorted_with_digests():
    m = build_manifest("p", 1, {"b": b"2", "a": b"1"})
    assert [f.path for f in m.files] == ["a", "b"]
    assert m.files[0].digest == digest(b"1") and m.files[1].size == 1


def test_empty_file_digest_vector():
    m = build_manifest("p", 1, {"empty": b""})
    assert m.files[0].digest.hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_manifest_errors():
    with pytest.raises(DuplicatePath):
        build_manifest("p", 1, [("a", b"1"), ("a", b"2")])
    with pytest.raises(EmptyPackage):
        build_manifest("p", 1, {})
    with pytest.raises(ValueError):
        build_manifest("p", 1, {"DCM-META/x": b""})


@given(st.dictionaries(st.text("abcxyz/._", min_size=1, max_size=8).filter(lambda p: not p.startswith("/")), st.binary(max_size=16), min_size=1, max_size=6))
def test_manifest_codec(files):
    m = build_manifest("pkg", 3, files)
    assert PackageManifest.decode(m.encode()) == m


def test_sign_and_extract_round_trip():
    w = make_world()
    archive = w.package()
    manifest, block = extract_metadata(archive)
    assert manifest == build_manifest("com.example.app", 1, FILES)
    assert block.chain == tuple(w.chain)
    assert read_contents(archive) == FILES


def test_entries_stored_in_fixed_order():
    w = make_world()
    names = zipfile.ZipFile(io.BytesIO(w.package())).namelist()
    assert names == sorted(FILES) + [MANIFEST_PATH, SIGNATURE_PATH, CHAIN_PATH]


@pytest.mark.parametrize("index", [1, 2])
def test_non_developer_leaf_rejected(index):
    w = make_world()
    chain = [w.chain[index]] + w.chain[index + 1:]
    with pytest.raises(NotADeveloperCert):
        w.package(chain=chain)


def test_key_mismatch():
    w = make_world()
    with pytest.raises(KeyMismatch):
        w.package(key=generate_signing_key())


def test_manifest_mismatch():
    w = make_world()
    with pytest.raises(ManifestMismatch):
        sign_package({"a": b"1"}, build_manifest("x", 1, {"a": b"2"}), w.dev_key, w.chain)


def test_missing_signature_entry():
    archive = rezip(make_world().package(), drop={SIGNATURE_PATH})
    with pytest.raises(MissingMetadata):
        extract_metadata(archive)


def test_truncated_manifest():
    w = make_world()
    archive = w.package()
    raw = zipfile.ZipFile(io.BytesIO(archive)).read(MANIFEST_PATH)
    with pytest.raises(MalformedMetadata):
        extract_metadata(rezip(archive, replace={MANIFEST_PATH: raw[:-3]}))


def test_not_a_zip():
    with pytest.raises(MalformedMetadata):
        extract_metadata(b"not a zip")
