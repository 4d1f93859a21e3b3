"""
Bit-exact primitives shared by encoder and decoder.

A packet is carried by one line-aligned read inside a naturally aligned
mailbox window:

    address = base + (scramble(packet) << 6)

The window therefore spans 2^(packet_bits + 6) bytes. Every message is
protected by a CRC packet of the same width as its data packets.
"""

import binascii
import zlib
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .channel_mappings import (
    CRC_PARAMETERS,
    DEFAULT_RANDOMIZER_KEYS,
    OFFSET_BITS,
    SUPPORTED_PACKET_BITS,
)
from .errors import AlignmentError, InvalidConfigError, PacketRangeError


class ChannelConfig(BaseModel):
    """Packet width, CRC width and randomizer setting of one mailbox session"""

    model_config = ConfigDict(frozen=True)

    packet_bits: int = 16
    crc_bits: int = 16
    offset_bits: int = OFFSET_BITS
    randomizer_enabled: bool = False
    randomizer_key: int = DEFAULT_RANDOMIZER_KEYS[16]

    @model_validator(mode='before')
    @classmethod
    def _fill_width_defaults(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            bits = data.get('packet_bits', 16)
            if bits in DEFAULT_RANDOMIZER_KEYS:
                data.setdefault('crc_bits', bits)
                data.setdefault('randomizer_key', DEFAULT_RANDOMIZER_KEYS[bits])
        return data

    @field_validator('packet_bits')
    @classmethod
    def _check_packet_bits(cls, v: int) -> int:
        if v not in SUPPORTED_PACKET_BITS:
            raise ValueError(f"packet_bits must be one of {SUPPORTED_PACKET_BITS}, got {v}")
        return v

    @field_validator('offset_bits')
    @classmethod
    def _check_offset_bits(cls, v: int) -> int:
        if v != OFFSET_BITS:
            raise ValueError(f"only {1 << OFFSET_BITS}-byte lines are supported")
        return v

    @model_validator(mode='after')
    def _check_consistency(self) -> 'ChannelConfig':
        if self.crc_bits != self.packet_bits:
            raise ValueError("crc_bits must equal packet_bits")
        if self.randomizer_key % 2 == 0 or not 0 < self.randomizer_key < (1 << self.packet_bits):
            raise ValueError("randomizer_key must be an odd packet-width integer")
        return self

    @property
    def window_bytes(self) -> int:
        return window_size(self.packet_bits)

    @property
    def packet_mask(self) -> int:
        return (1 << self.packet_bits) - 1

    @property
    def label(self) -> str:
        return f"{self.packet_bits}b/{'rand' if self.randomizer_enabled else 'plain'}"


def candidate_configs(widths: Iterable[int] = SUPPORTED_PACKET_BITS) -> List[ChannelConfig]:
    """Every supported width with the randomizer off and on"""
    return [ChannelConfig(packet_bits=bits, randomizer_enabled=enabled)
            for bits in widths for enabled in (False, True)]


def window_size(packet_bits: int) -> int:
    """Mailbox window size in bytes for a packet width"""
    if packet_bits not in SUPPORTED_PACKET_BITS:
        raise InvalidConfigError(f"unsupported packet width {packet_bits}; expected one of {SUPPORTED_PACKET_BITS}")
    return 1 << (packet_bits + OFFSET_BITS)


@lru_cache(maxsize=None)
def _inverse_key(key: int, packet_bits: int) -> int:
    return pow(key, -1, 1 << packet_bits)


def scramble(p: int, cfg: ChannelConfig) -> int:
    if not cfg.randomizer_enabled:
        return p
    return (p * cfg.randomizer_key) & cfg.packet_mask


def unscramble(p: int, cfg: ChannelConfig) -> int:
    if not cfg.randomizer_enabled:
        return p
    return (p * _inverse_key(cfg.randomizer_key, cfg.packet_bits)) & cfg.packet_mask


def check_base(base: int, cfg: ChannelConfig) -> None:
    if base < 0 or base % cfg.window_bytes:
        raise AlignmentError(f"mailbox base 0x{base:x} is not aligned to its {cfg.window_bytes}-byte window")


def assemble_address(base: int, p: int, cfg: ChannelConfig) -> int:
    """Read address that carries packet p in the mailbox at base"""
    check_base(base, cfg)
    if not 0 <= p <= cfg.packet_mask:
        raise PacketRangeError(f"packet 0x{p:x} does not fit in {cfg.packet_bits} bits")
    return base + (scramble(p, cfg) << OFFSET_BITS)


def extract_packet(addr: int, base: int, cfg: ChannelConfig) -> Optional[int]:
    """Packet carried by addr, or None when addr lies outside the mailbox"""
    offset = addr - base
    if offset < 0 or offset >= cfg.window_bytes:
        return None
    if offset & ((1 << OFFSET_BITS) - 1):
        raise AlignmentError(f"address 0x{addr:x} is not line aligned")
    return unscramble(offset >> OFFSET_BITS, cfg)


@lru_cache(maxsize=None)
def _crc_table(width: int, poly: int) -> Tuple[int, ...]:
    top = 1 << (width - 1)
    mask = (1 << width) - 1
    table = []
    for byte in range(256):
        reg = byte << (width - 8)
        for _ in range(8):
            reg = ((reg << 1) ^ poly) if reg & top else (reg << 1)
        table.append(reg & mask)
    return tuple(table)


def _crc_msb_first(data: bytes, width: int, poly: int, init: int) -> int:
    table = _crc_table(width, poly)
    mask = (1 << width) - 1
    shift = width - 8
    crc = init
    for byte in data:
        crc = ((crc << 8) & mask) ^ table[((crc >> shift) ^ byte) & 0xFF]
    return crc


def crc_bytes(data: bytes, crc_bits: int) -> int:
    """CRC of raw bytes at one of the supported widths"""
    if crc_bits == 16:
        return binascii.crc_hqx(data, 0xFFFF)
    if crc_bits == 32:
        return zlib.crc32(data) & 0xFFFFFFFF
    params: Optional[Dict[str, int]] = CRC_PARAMETERS.get(crc_bits)
    if params is None:
        raise InvalidConfigError(f"unsupported CRC width {crc_bits}")
    return _crc_msb_first(data, crc_bits, params['poly'], params['init'])


def crc_packet(data: Sequence[int], cfg: ChannelConfig) -> int:
    """CRC over packets serialized big-endian in transmit order"""
    if not data:
        raise ValueError("crc_packet needs at least one packet")
    width = cfg.packet_bits // 8
    raw = b''.join(p.to_bytes(width, 'big') for p in data)
    return crc_bytes(raw, cfg.crc_bits)


@lru_cache(maxsize=1 << 18)
def pair_crc(a: int, b: int, packet_bits: int) -> int:
    """crc_packet([a, b]) keyed by width, cached for the decoder's hot loop"""
    width = packet_bits // 8
    return crc_bytes(a.to_bytes(width, 'big') + b.to_bytes(width, 'big'), packet_bits)
