#!/usr/bin/env python3
"""
Tests for address assembly, window sizing, CRCs and the randomizer
"""

import random

import pytest
from pydantic import ValidationError

from metachannel.address_codec import (
    ChannelConfig,
    assemble_address,
    candidate_configs,
    crc_bytes,
    crc_packet,
    extract_packet,
    pair_crc,
    scramble,
    unscramble,
    window_size,
)
from metachannel.channel_mappings import CRC_PARAMETERS, DEFAULT_RANDOMIZER_KEYS
from metachannel.errors import AlignmentError, InvalidConfigError, PacketRangeError

BASE = 0x1_0000_0000


def test_window_sizes():
    assert window_size(16) == 4 * 1024 * 1024
    assert window_size(8) == 16 * 1024
    assert window_size(32) == 256 * 1024 ** 3
    assert ChannelConfig(packet_bits=24).window_bytes == 1 << 30


def test_unsupported_width_is_invalid_config():
    with pytest.raises(InvalidConfigError):
        window_size(12)
    with pytest.raises(ValidationError):
        ChannelConfig(packet_bits=12)


def test_config_defaults_follow_width():
    cfg = ChannelConfig(packet_bits=24)
    assert cfg.crc_bits == 24
    assert cfg.randomizer_key == DEFAULT_RANDOMIZER_KEYS[24]
    with pytest.raises(ValidationError):
        ChannelConfig(packet_bits=16, crc_bits=8)
    with pytest.raises(ValidationError):
        ChannelConfig(randomizer_key=0x1000)
    assert len(candidate_configs()) == 8


def test_assemble_address_examples():
    cfg = ChannelConfig()
    assert assemble_address(BASE, 0x0000, cfg) == 0x1_0000_0000
    assert assemble_address(BASE, 0x1234, cfg) == 0x1_0004_8D00


def test_assemble_with_randomizer_matches_modular_product():
    cfg = ChannelConfig(randomizer_enabled=True)
    expected = BASE + (((0x1234 * cfg.randomizer_key) % (1 << 16)) << 6)
    assert assemble_address(BASE, 0x1234, cfg) == expected
    assert extract_packet(expected, BASE, cfg) == 0x1234


def test_assemble_rejects_bad_inputs():
    cfg = ChannelConfig()
    with pytest.raises(AlignmentError):
        assemble_address(BASE + 0x40, 1, cfg)
    with pytest.raises(PacketRangeError):
        assemble_address(BASE, 1 << 16, cfg)


def test_extract_packet():
    cfg = ChannelConfig()
    assert extract_packet(BASE, BASE, cfg) == 0
    assert extract_packet(BASE + 0x48D00, BASE, cfg) == 0x1234
    assert extract_packet(BASE - 64, BASE, cfg) is None
    assert extract_packet(BASE + cfg.window_bytes, BASE, cfg) is None
    with pytest.raises(AlignmentError):
        extract_packet(BASE + 0x48D01, BASE, cfg)


@pytest.mark.parametrize('bits', [8, 16, 24, 32])
def test_round_trip_every_width(bits):
    for enabled in (False, True):
        cfg = ChannelConfig(packet_bits=bits, randomizer_enabled=enabled)
        base = 3 * cfg.window_bytes
        for p in (0, 1, 0x5A & cfg.packet_mask, cfg.packet_mask):
            assert extract_packet(assemble_address(base, p, cfg), base, cfg) == p


@pytest.mark.parametrize('bits', sorted(CRC_PARAMETERS))
def test_crc_check_values(bits):
    assert crc_bytes(b'123456789', bits) == CRC_PARAMETERS[bits]['check']


def test_crc16_check_value():
    assert crc_bytes(b'123456789', 16) == 0x29B1


def test_crc_packet_is_order_sensitive_and_deterministic():
    cfg = ChannelConfig()
    assert crc_packet([0x0400, 0x0007], cfg) == crc_packet([0x0400, 0x0007], cfg)
    assert crc_packet([0x0400, 0x0007], cfg) != crc_packet([0x0007, 0x0400], cfg)
    assert pair_crc(0x0400, 0x0007, 16) == crc_packet([0x0400, 0x0007], cfg)
    with pytest.raises(ValueError):
        crc_packet([], cfg)


def test_randomizer_off_is_identity():
    cfg = ChannelConfig()
    assert all(scramble(p, cfg) == p for p in range(0, 1 << 16, 257))


@pytest.mark.parametrize('bits', [8, 16])
def test_randomizer_is_a_bijection(bits):
    cfg = ChannelConfig(packet_bits=bits, randomizer_enabled=True)
    image = [scramble(p, cfg) for p in range(1 << bits)]
    assert len(set(image)) == 1 << bits
    assert all(unscramble(s, cfg) == p for p, s in enumerate(image))


def test_randomizer_spreads_consecutive_packets():
    cfg = ChannelConfig(randomizer_enabled=True)
    lines = [scramble(p, cfg) for p in range(1, 4)]
    # consecutive packets land more than a page (64 lines) apart
    assert all(abs(x - y) > 64 for x, y in zip(lines, lines[1:]))


@pytest.mark.parametrize('bits', [8, 16, 24, 32])
def test_random_packets_survive_assemble_and_extract(bits):
    rng = random.Random(bits)
    for enabled in (False, True):
        cfg = ChannelConfig(packet_bits=bits, randomizer_enabled=enabled)
        base = 5 * cfg.window_bytes
        for _ in range(1000):
            p = rng.randrange(1 << bits)
            assert extract_packet(assemble_address(base, p, cfg), base, cfg) == p


@pytest.mark.parametrize('bits', [16, 24, 32])
def test_pair_crc_depends_on_order(bits):
    rng = random.Random(bits)
    trials = 10 ** 4
    differ = 0
    for _ in range(trials):
        a, b = rng.randrange(1 << bits), rng.randrange(1 << bits)
        while b == a:
            b = rng.randrange(1 << bits)
        differ += pair_crc(a, b, bits) != pair_crc(b, a, bits)
    assert differ >= 0.99 * trials


@pytest.mark.parametrize('bits', [24, 32])
def test_randomizer_is_injective_on_wide_samples(bits):
    cfg = ChannelConfig(packet_bits=bits, randomizer_enabled=True)
    sample = random.Random(bits).sample(range(1 << bits), 10 ** 6)
    image = {scramble(p, cfg) for p in sample}
    assert len(image) == len(sample)
    assert all(unscramble(scramble(p, cfg), cfg) == p for p in sample[:1000])


if __name__ == "__main__":
    print("🧪 Running address codec tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
