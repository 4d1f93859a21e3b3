# Channel constants: address layout, CRC parameters, message tags and presets

from enum import Enum

# Address layout
OFFSET_BITS = 6
LINE_BYTES = 1 << OFFSET_BITS
PAGE_BYTES = 4096
SUPPORTED_PACKET_BITS = (8, 16, 24, 32)

# CRC parameters per width. Non-reflected MSB-first engines except CRC-32,
# which is the standard reflected CRC (zlib). 'check' is the CRC of b"123456789".
CRC_PARAMETERS = {
    8: {'name': 'CRC-8', 'poly': 0x07, 'init': 0x00, 'check': 0xF4},
    16: {'name': 'CRC-16/CCITT-FALSE', 'poly': 0x1021, 'init': 0xFFFF, 'check': 0x29B1},
    24: {'name': 'CRC-24/OPENPGP', 'poly': 0x864CFB, 'init': 0xB704CE, 'check': 0x21CF02},
    32: {'name': 'CRC-32', 'poly': 0x04C11DB7, 'init': 0xFFFFFFFF, 'check': 0xCBF43926},
}

# Odd multipliers; packets 1, 2, 3 land more than one page apart
DEFAULT_RANDOMIZER_KEYS = {
    8: 0x55,
    16: 0x9E37,
    24: 0x9E3779,
    32: 0x9E3779B9,
}

# Message type tags carried in the high half of packet A
TAG_MAILBOX_INFO = 1
TAG_MARKER = 2
TAG_OBJECT_ALLOC = 3
TAG_OBJECT_FREE = 4

KIND_TO_TAG = {
    'mailbox_info': TAG_MAILBOX_INFO,
    'marker': TAG_MARKER,
    'object_alloc': TAG_OBJECT_ALLOC,
    'object_free': TAG_OBJECT_FREE,
}
TAG_TO_KIND = {tag: kind for kind, tag in KIND_TO_TAG.items()}
KNOWN_TAGS = frozenset(TAG_TO_KIND)

# Field widths in bits
VIRTUAL_ADDR_BITS = 64
PID_BITS = 32
OBJECT_ID_BITS = 16
OBJECT_SIZE_BITS = 64
CALL_COUNT_BITS = 32
MAX_MARKER_ID_BYTES = 8

# Function entry and exit markers are the function name plus a suffix
ENTRY_SUFFIX = '>'
EXIT_SUFFIX = '<'

# Preamble
PREAMBLE_MESSAGES = 50
PREAMBLE_SEED = 0x4D424F58  # "MBOX"

# Decoder
PACKET_WINDOW_SIZE = 8
DETECTION_THRESHOLD = 5
CANDIDATE_TABLE_CAP = 1 << 20
# Ordered (x, y, z) position triples containing the newest of 8 entries
TRIPLE_CHECKS_PER_PUSH = 126
HELD_CHUNK_LIMIT = 256
# An in-order triple spanning at most this many window slots counts as a
# firm sighting when none of its packets backs an earlier firm sighting
TIGHT_TRIPLE_SPAN = 4

# Encoder
DEFAULT_REPETITIONS = 4
DEFAULT_VP_DELTA = 0x7F5A_0000_0000
PHYS_MEMORY_BASE = 0x1_0000_0000
PHYS_MEMORY_BYTES = 1 << 30

# Channel timing
TICK_NS = 10
MAX_JITTER_NS = 5


class RequestOp(str, Enum):
    FLUSH_LINE = 'FlushLine'
    READ_LINE = 'ReadLine'


class Origin(str, Enum):
    METADATA = 'metadata'
    PAYLOAD = 'payload'
    BACKGROUND = 'background'
    PREFETCH = 'prefetch'


class Command(str, Enum):
    MEM_RD = 'MemRd'
    MEM_RD_DATA = 'MemRdData'
    MEM_WR = 'MemWr'


READ_COMMANDS = frozenset({Command.MEM_RD, Command.MEM_RD_DATA})


class WindowChoice(str, Enum):
    DEDICATED = 'dedicated'
    OVERLAY = 'overlay'


# Channel presets; values are ChannelParams fields
CHANNEL_PRESETS = {
    'identity': {
        'reorder_depth': 0,
        'dup_suppress_prob': 0.0,
        'prefetcher': {'kind': 'none'},
        'background': {'ratio': 0.0},
    },
    'quiet': {
        'reorder_depth': 0,
        'dup_suppress_prob': 0.0,
        'prefetcher': {'kind': 'none'},
        'background': {'ratio': 10.0, 'write_fraction': 0.2, 'sequential_fraction': 0.0},
    },
    'adversarial': {
        'reorder_depth': 32,
        'dup_suppress_prob': 0.5,
        'prefetcher': {'kind': 'stride', 'table_size': 64, 'degree': 4},
        'background': {'ratio': 100.0, 'address_space_bytes': 1 << 30,
                       'write_fraction': 0.2, 'sequential_fraction': 0.3},
    },
}
