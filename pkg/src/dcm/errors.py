"""Exception hierarchy shared by every dcm module."""


class DcmError(Exception):
    """Base class for all dcm errors."""


class DecodeError(DcmError, ValueError):
    """Bytes do not parse under the canonical encoding."""


# trust-core
class InvalidBody(DcmError, ValueError):
    pass


class SignatureInvalid(DcmError):
    pass


class InvalidIdentity(DcmError, ValueError):
    pass


# authority
class NotARoot(DcmError):
    pass


class NotAnIntermediate(DcmError):
    pass


class CtLogUnreachable(DcmError):
    pass


class UnknownSerial(DcmError, KeyError):
    pass


class AlreadyRevoked(DcmError):
    pass


class NoActiveCertificate(DcmError):
    pass


class ActiveCertificateExists(DcmError):
    """The CA already holds an unrevoked certificate for this developer key."""


class JournalCorrupted(DcmError):
    pass


# package
class DuplicatePath(DcmError, ValueError):
    pass


class EmptyPackage(DcmError, ValueError):
    pass


class KeyMismatch(DcmError):
    pass


class NotADeveloperCert(DcmError):
    pass


class ManifestMismatch(DcmError, ValueError):
    pass


class MissingMetadata(DcmError):
    pass


class MalformedMetadata(DcmError):
    pass


# revocation
class Unreachable(DcmError):
    pass


class BadResponderSignature(DcmError):
    pass


class StaleResponse(DcmError):
    pass


# ctlog
class SizeOutOfRange(DcmError, ValueError):
    pass


class IndexOutOfRange(DcmError, ValueError):
    pass


class LogCorrupted(DcmError):
    pass


# threatx
class DuplicateEventId(DcmError):
    pass


class BadCursor(DcmError, ValueError):
    pass


class UnregisteredPublisher(DcmError):
    pass


# simharness
class ConfigInvalid(DcmError, ValueError):
    pass
