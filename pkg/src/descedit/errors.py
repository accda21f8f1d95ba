"""Exceptions for on-disk formats. Each carries a stable ``code`` string."""


class FormatError(Exception):
    code = "format_error"


class BadMagicError(FormatError):
    code = "bad_magic"


class UnsupportedVersionError(FormatError):
    code = "bad_version"


class TruncatedFileError(FormatError):
    code = "truncated"


class ChecksumError(FormatError):
    code = "checksum"


class HeaderError(FormatError):
    code = "bad_header"
