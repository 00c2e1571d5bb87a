"""Length-prefixed binary encoding used for everything that gets signed or stored.

All integers are big-endian and unsigned. Variable-length values carry a
4-byte length prefix; optional values carry a 1-byte presence flag.
"""

from __future__ import annotations

import struct
from typing import Optional

from .errors import DecodeError

_MAX_BLOB = 1 << 30


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(_pack(">B", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(_pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(_pack(">Q", value))
        return self

    def u128(self, value: int) -> "Writer":
        if not 0 <= value < 1 << 128:
            raise ValueError(f"{value} does not fit in 128 bits")
        self._parts.append(value.to_bytes(16, "big"))
        return self

    def fixed(self, data: bytes, size: int) -> "Writer":
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def blob(self, data: bytes) -> "Writer":
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def opt_text(self, value: Optional[str]) -> "Writer":
        if value is None:
            return self.u8(0)
        return self.u8(1).text(value)

    def opt_u64(self, value: Optional[int]) -> "Writer":
        if value is None:
            return self.u8(0)
        return self.u8(1).u64(value)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


def _pack(fmt: str, value: int) -> bytes:
    try:
        return struct.pack(fmt, value)
    except struct.error as exc:
        raise ValueError(f"{value!r} out of range for {fmt}") from exc


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if n < 0 or end > len(self._data):
            raise DecodeError(f"truncated input at offset {self._pos} (wanted {n} bytes)")
        chunk = self._data[self._pos:end].tobytes()
        self._pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def u128(self) -> int:
        return int.from_bytes(self._take(16), "big")

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def blob(self) -> bytes:
        n = self.u32()
        if n > _MAX_BLOB:
            raise DecodeError(f"blob length {n} exceeds limit")
        return self._take(n)

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8 in text field") from exc

    def flag(self) -> bool:
        b = self.u8()
        if b not in (0, 1):
            raise DecodeError(f"invalid presence flag {b}")
        return b == 1

    def opt_text(self) -> Optional[str]:
        return self.text() if self.flag() else None

    def opt_u64(self) -> Optional[int]:
        return self.u64() if self.flag() else None

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def done(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")
