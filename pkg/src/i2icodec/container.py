"""Versioned bitstream container.

Byte layout (little-endian), see ``docs/FORMAT.md``::

    off  size  field
    0    4     magic b"I2IC"
    4    1     version (1)
    5    1     flags: bit0 mode (0 = A, 1 = T), bit1 style present, bits 2-7 zero
    6    2     image width
    8    2     image height
    10   6     latent dims C_z, h, w       (3 x u16)
    16   6     hyper dims C_h, h', w'      (3 x u16)
    22   1     target domain label (0 in mode A)
    23   2     style length D (0 when no style is carried)
    25   4*D   style values, f32
    ..   4+n   hyper payload (u32 length + bytes)
    ..   4+n   main payload  (u32 length + bytes)
    ..   4     CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .networks import Mode

MAGIC = b"I2IC"
VERSION = 1
_HEAD = struct.Struct("<4sBBHH3H3HBH")
FLAG_MODE = 0x01
FLAG_STYLE = 0x02


class ContainerError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


@dataclass
class Header:
    mode: Mode
    width: int
    height: int
    latent_dims: tuple[int, int, int]
    hyper_dims: tuple[int, int, int]
    target: int = 0


@dataclass
class Container:
    header: Header
    hyper_payload: bytes
    main_payload: bytes
    style: np.ndarray | None = field(default=None)

    @property
    def has_style(self) -> bool:
        return self.style is not None


def fixed_overhead_bytes(style_dim: int = 0) -> int:
    """Bytes of a container that are not entropy-coded payload."""
    return _HEAD.size + 4 * style_dim + 4 + 4 + 4


def pack(c: Container) -> bytes:
    h = c.header
    flags = (FLAG_MODE if Mode.parse(h.mode) == Mode.T else 0) | (FLAG_STYLE if c.has_style else 0)
    style = b""
    n_style = 0
    if c.has_style:
        vals = np.asarray(c.style, dtype=np.float32).reshape(-1)
        n_style = vals.size
        style = vals.astype("<f4").tobytes()
    body = b"".join([
        _HEAD.pack(MAGIC, VERSION, flags, h.width, h.height, *h.latent_dims, *h.hyper_dims,
                   h.target, n_style),
        style,
        struct.pack("<I", len(c.hyper_payload)), c.hyper_payload,
        struct.pack("<I", len(c.main_payload)), c.main_payload,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(blob: bytes) -> Container:
    if len(blob) < _HEAD.size + 12:
        raise ContainerError("container too short", len(blob))
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic", 0)
    if blob[4] != VERSION:
        raise ContainerError(f"unsupported version {blob[4]}", 4)
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ContainerError("checksum mismatch", len(blob) - 4)
    (_, _, flags, width, height, cz, lh, lw, ch, hh, hw, target, n_style) = _HEAD.unpack_from(blob, 0)
    if flags & ~(FLAG_MODE | FLAG_STYLE):
        raise ContainerError("reserved flag bits set", 5)
    has_style = bool(flags & FLAG_STYLE)
    if has_style != (n_style > 0):
        raise ContainerError("style flag disagrees with style length", 23)
    pos = _HEAD.size
    style = None
    if has_style:
        style = np.frombuffer(blob, dtype="<f4", count=n_style, offset=pos).astype(np.float32)
        pos += 4 * n_style
    payloads = []
    for _ in range(2):
        if pos + 4 > len(blob) - 4:
            raise ContainerError("payload length field truncated", pos)
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n > len(blob) - 4:
            raise ContainerError("payload runs past end of container", pos)
        payloads.append(bytes(blob[pos:pos + n]))
        pos += n
    if pos != len(blob) - 4:
        raise ContainerError("unexpected bytes before checksum", pos)
    header = Header(Mode.T if flags & FLAG_MODE else Mode.A, width, height,
                    (cz, lh, lw), (ch, hh, hw), target)
    return Container(header, payloads[0], payloads[1], style)


def bits_per_pixel(blob: bytes, width: int, height: int) -> float:
    return 8.0 * len(blob) / (width * height)
