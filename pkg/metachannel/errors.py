"""
Exceptions raised by the metadata channel.

Library code raises these; the decoder downgrades ambiguity and malformed
chunks to warnings so that a noisy trace never aborts a decode.
"""

from typing import Any, List, Optional


class MailboxError(Exception):
    """Base class for every channel error"""


class InvalidConfigError(MailboxError, ValueError):
    """Unsupported packet width, CRC width or randomizer key"""


class PacketRangeError(MailboxError, ValueError):
    """Packet value does not fit the configured packet width"""


class AlignmentError(MailboxError, ValueError):
    """Mailbox base not naturally aligned, or address not line aligned"""


class PayloadTooLargeError(MailboxError, ValueError):
    """Event does not fit the chunk layout of the configured width"""


class MalformedChunkError(MailboxError, ValueError):
    """Chunks reassembled into an event that violates the schema"""


class AmbiguityError(MailboxError):
    """Two different payloads were seen for the same (type, seq)"""

    def __init__(self, msg_type: int, seq: int, candidates: List[Any]):
        self.msg_type = msg_type
        self.seq = seq
        self.candidates = list(candidates)
        shown = ", ".join(f"0x{c:x}" if isinstance(c, int) else repr(c) for c in self.candidates)
        super().__init__(f"ambiguous chunk type={msg_type} seq={seq}: candidates [{shown}]")


class OrderingError(MailboxError):
    """Session traffic emitted out of the required order"""


class AllocationError(MailboxError):
    """Physical memory cannot satisfy a window or object placement"""


class TraceFormatError(MailboxError, ValueError):
    """Malformed line in a trace, request or ground-truth file"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
