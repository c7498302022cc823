import numpy as np
import pytest

from i2icodec.container import (Container, ContainerError, Header, bits_per_pixel,
                                fixed_overhead_bytes, pack, unpack)
from i2icodec.networks import Mode


def make(mode=Mode.T, style=None, size=64, target=1):
    header = Header(mode, size, size, (8, 4, 4), (8, 1, 1), target if mode == Mode.T else 0)
    return Container(header, b"\x01\x02\x03", bytes(range(40)), style)


def test_round_trip_preserves_every_field():
    style = np.linspace(-1, 1, 16, dtype=np.float32)
    c = make(style=style)
    back = unpack(pack(c))
    assert back.header == c.header
    assert back.hyper_payload == c.hyper_payload and back.main_payload == c.main_payload
    np.testing.assert_array_equal(back.style, style)


@pytest.mark.parametrize("mode", list(Mode))
def test_mode_bit_round_trips(mode):
    assert unpack(pack(make(mode))).header.mode == mode


def test_absent_style_adds_no_bytes():
    blob = pack(make(style=None))
    assert not unpack(blob).has_style
    assert len(blob) == fixed_overhead_bytes(0) + 3 + 40


def test_style_payload_overhead_at_256():
    style = np.zeros(64, np.float32)
    with_style = pack(make(style=style, size=256))
    without = pack(make(style=None, size=256))
    extra_bits = 8 * (len(with_style) - len(without))
    assert extra_bits == 64 * 32 == 2048
    assert extra_bits / (256 * 256) == 0.03125
    assert bits_per_pixel(with_style, 256, 256) - bits_per_pixel(without, 256, 256) == 0.03125


def test_every_single_byte_corruption_is_detected():
    blob = pack(make(style=np.ones(4, np.float32)))
    rng = np.random.default_rng(0)
    for pos in range(len(blob)):
        for _ in range(3):
            bad = bytearray(blob)
            bad[pos] ^= int(rng.integers(1, 256))
            with pytest.raises(ContainerError):
                unpack(bytes(bad))


def test_truncation_and_trailing_bytes_are_detected():
    blob = pack(make())
    for cut in (0, 10, len(blob) - 1):
        with pytest.raises(ContainerError):
            unpack(blob[:cut])
    with pytest.raises(ContainerError):
        unpack(blob + b"\0")


def test_error_reports_position():
    blob = bytearray(pack(make()))
    blob[0] = ord("X")
    with pytest.raises(ContainerError) as info:
        unpack(bytes(blob))
    assert info.value.position == 0


def test_bpp_arithmetic():
    assert bits_per_pixel(bytes(200), 64, 64) == pytest.approx(1600 / 4096)
    assert bits_per_pixel(bytes(200), 64, 64) == pytest.approx(0.3906, abs=1e-4)
