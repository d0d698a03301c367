"""Event data model, event-file persistence, and the grouped wire format.

Two binary formats live here:

"EVS1" event file (little-endian):
    header:  magic "EVS1" (4) | version u8 | width u16 | height u16 | count u64
    record:  t u32 (microseconds) | x u16 | y u16 | p u8 (0=NEG, 1=POS) | pad u8[3]
    Records are 12 bytes each, sorted by non-decreasing t.

Grouped wire word (32 bits, bit 31 is the header flag):
    header word (flag=1):  [31]=1 | [30:22] y row (9b) | [21:0] delta_us (22b)
    event word  (flag=0):  [31]=0 | [30:22] x col (9b) | [21:20] polarity (2b)
                           | [19:0] reserved (zero on encode, ignored on decode)

    The polarity field is 01 for NEG and 10 for POS; 00 and 11 are invalid.
    A header word opens a (timestamp, row) group; every following event word
    belongs to that group until the next header. The delta is relative to the
    previous header (the stream origin t=0 for the first one). Deltas that do
    not fit 22 bits are split across extra header words carrying the same row.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EVS_MAGIC = b"EVS1"
EVS_VERSION = 1
_HEADER = struct.Struct("<4sBHHQ")
_RECORD_SIZE = 12

# Canonical in-memory representation of an event stream. Bulk operations in
# this package take and return arrays of this dtype rather than Event objects.
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

_FILE_RECORD_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p"],
        "formats": ["<u4", "<u2", "<u2", "u1"],
        "offsets": [0, 4, 6, 8],
        "itemsize": _RECORD_SIZE,
    }
)

# Grouped word field layout
WORD_FLAG_BIT = 31
GROUP_DELTA_BITS = 22
GROUP_MAX_DELTA = (1 << GROUP_DELTA_BITS) - 1
_POL_FIELD_NEG = 0b01
_POL_FIELD_POS = 0b10


class Polarity(enum.IntEnum):
    NEG = 0
    POS = 1


@dataclass(frozen=True)
class SensorGeometry:
    """Pixel array dimensions of the sensor."""

    width: int = 480
    height: int = 320

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"geometry must be positive, got {self.width}x{self.height}")

    @property
    def npixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class Event:
    """A single sensor event: (t, x, y, p) with t in microseconds."""

    t: int
    x: int
    y: int
    p: Polarity


class EventFileError(Exception):
    """Raised on malformed event files; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class GroupedFormatError(ValueError):
    pass


def events_array(events: Iterable[Event] | np.ndarray) -> np.ndarray:
    """Coerce Event objects or an existing array to the canonical dtype."""
    if isinstance(events, np.ndarray):
        if events.dtype != EVENT_DTYPE:
            return events.astype(EVENT_DTYPE)
        return events
    rows = [(e.t, e.x, e.y, int(e.p)) for e in events]
    return np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, dtype=EVENT_DTYPE)


def events_list(arr: np.ndarray) -> list[Event]:
    return [Event(int(r["t"]), int(r["x"]), int(r["y"]), Polarity(int(r["p"]))) for r in arr]


def validate_events(arr: np.ndarray, geometry: SensorGeometry) -> None:
    """Reject out-of-range coordinates or non-monotone timestamps."""
    if arr.size == 0:
        return
    bad = np.flatnonzero((arr["x"] >= geometry.width) | (arr["y"] >= geometry.height))
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"event {i} at ({arr['x'][i]}, {arr['y'][i]}) outside "
            f"{geometry.width}x{geometry.height}"
        )
    if arr.size > 1 and np.any(np.diff(arr["t"].astype(np.int64)) < 0):
        i = int(np.flatnonzero(np.diff(arr["t"].astype(np.int64)) < 0)[0]) + 1
        raise ValueError(f"timestamps decrease at event {i}")
    if np.any(arr["p"] > 1):
        i = int(np.flatnonzero(arr["p"] > 1)[0])
        raise ValueError(f"event {i} has invalid polarity {arr['p'][i]}")


def write_event_file(
    path, geometry: SensorGeometry, events: Iterable[Event] | np.ndarray
) -> None:
    """Write an "EVS1" file. Events must be time-sorted and within geometry."""
    arr = events_array(events)
    validate_events(arr, geometry)
    if arr.size and int(arr["t"].max()) > 0xFFFFFFFF:
        raise ValueError("timestamps exceed u32 microseconds; split the stream")
    records = np.zeros(arr.size, dtype=_FILE_RECORD_DTYPE)
    records["t"] = arr["t"]
    records["x"] = arr["x"]
    records["y"] = arr["y"]
    records["p"] = arr["p"]
    header = _HEADER.pack(EVS_MAGIC, EVS_VERSION, geometry.width, geometry.height, arr.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_event_file(path) -> tuple[SensorGeometry, np.ndarray]:
    """Read an "EVS1" file back; exact inverse of write_event_file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != EVS_MAGIC:
        raise EventFileError(f"bad magic {data[:4]!r}, expected {EVS_MAGIC!r}", offset=0)
    if len(data) < _HEADER.size:
        raise EventFileError("truncated header", offset=len(data))
    magic, version, width, height, count = _HEADER.unpack_from(data, 0)
    if version != EVS_VERSION:
        raise EventFileError(f"unsupported version {version}", offset=4)
    geometry = SensorGeometry(width, height)
    body = data[_HEADER.size :]
    if len(body) % _RECORD_SIZE:
        raise EventFileError(
            f"truncated record {len(body) // _RECORD_SIZE}",
            offset=_HEADER.size + (len(body) // _RECORD_SIZE) * _RECORD_SIZE,
        )
    records = np.frombuffer(body, dtype=_FILE_RECORD_DTYPE)
    if count and records.size != count:
        raise EventFileError(
            f"header promises {count} records, file holds {records.size}",
            offset=_HEADER.size + len(body),
        )
    arr = np.empty(records.size, dtype=EVENT_DTYPE)
    arr["t"] = records["t"]
    arr["x"] = records["x"]
    arr["y"] = records["y"]
    arr["p"] = records["p"]
    bad = np.flatnonzero(
        (arr["x"] >= geometry.width) | (arr["y"] >= geometry.height) | (arr["p"] > 1)
    )
    if bad.size:
        i = int(bad[0])
        raise EventFileError(f"record {i} outside geometry", offset=_HEADER.size + i * _RECORD_SIZE)
    return geometry, arr


# ---------------------------------------------------------------------------
# Grouped wire format
# ---------------------------------------------------------------------------


def encode_grouped(events: Iterable[Event] | np.ndarray) -> np.ndarray:
    """Encode time-sorted events into grouped 32-bit words.

    Events must be sorted by (t, y); events sharing a (t, y) pair are folded
    under a single header word. Returns a uint32 array.
    """
    arr = events_array(events)
    if arr.size == 0:
        return np.empty(0, dtype=np.uint32)
    t = arr["t"].astype(np.int64)
    y = arr["y"].astype(np.int64)
    order = np.lexsort((y, t))
    if not np.array_equal(order, np.arange(arr.size)):
        raise GroupedFormatError("events not sorted by (t, y)")
    if np.any(arr["x"] >= 512) or np.any(y >= 512):
        raise GroupedFormatError("coordinates exceed the 9-bit field")

    new_group = np.empty(arr.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = (np.diff(t) != 0) | (np.diff(y) != 0)
    starts = np.flatnonzero(new_group)
    group_t = t[starts]
    group_y = y[starts]
    deltas = np.diff(group_t, prepend=np.int64(0))

    # Split over-wide deltas into extra header words carrying the same row.
    extra = deltas // GROUP_MAX_DELTA
    # A delta that is an exact multiple of the max still fits after splitting
    # off (extra - 1) full headers.
    exact = (extra > 0) & (deltas % GROUP_MAX_DELTA == 0)
    extra[exact] -= 1
    total_words = int(arr.size + starts.size + extra.sum())

    words = np.empty(total_words, dtype=np.uint32)
    # Layout groups sequentially: extra headers, one real header, event words.
    sizes = np.ones(starts.size, dtype=np.int64) + extra
    counts = np.diff(np.append(starts, arr.size))
    out_starts = np.zeros(starts.size, dtype=np.int64)
    np.cumsum(sizes[:-1] + counts[:-1], out=out_starts[1:])

    header_base = (np.uint32(1) << WORD_FLAG_BIT) | (group_y.astype(np.uint32) << GROUP_DELTA_BITS)
    if extra.any():
        for gi in np.flatnonzero(extra):
            pos = out_starts[gi]
            rem = int(deltas[gi])
            for _ in range(int(extra[gi])):
                words[pos] = header_base[gi] | np.uint32(GROUP_MAX_DELTA)
                rem -= GROUP_MAX_DELTA
                pos += 1
            words[pos] = header_base[gi] | np.uint32(rem)
    final_header_pos = out_starts + extra
    if not extra.any():
        words[final_header_pos] = header_base | deltas.astype(np.uint32)
    else:
        plain = np.flatnonzero(extra == 0)
        words[final_header_pos[plain]] = header_base[plain] | deltas[plain].astype(np.uint32)

    event_pos = np.arange(arr.size, dtype=np.int64)
    event_pos += np.repeat(final_header_pos + 1 - starts, counts)
    pol_field = np.where(arr["p"] == Polarity.POS, _POL_FIELD_POS, _POL_FIELD_NEG)
    words[event_pos] = (arr["x"].astype(np.uint32) << GROUP_DELTA_BITS) | (
        pol_field.astype(np.uint32) << 20
    )
    return words


@dataclass
class ParserStats:
    """Counters accumulated while decoding a grouped word stream."""

    overflow_dropped: int = 0
    malformed_words: int = 0
    discarded_before_header: int = 0


class GroupedParser:
    """Grouped-word decoder fronted by a bounded word FIFO.

    feed() is the producer side: words beyond `fifo_capacity` unconsumed
    entries are dropped (newest first) and counted, never blocking. drain()
    is the consumer side: it decodes and empties the FIFO. Decoder state
    (accumulated timestamp, current row) survives across drains, so a stream
    may be fed in arbitrary chunks. Words before the first header word are
    discarded and counted.
    """

    def __init__(self, fifo_capacity: int = 256):
        if fifo_capacity < 1:
            raise ValueError("fifo_capacity must be >= 1")
        self.fifo_capacity = fifo_capacity
        self.stats = ParserStats()
        self._fifo: list[np.ndarray] = []
        self._buffered = 0
        self._t = 0
        self._y = 0
        self._synced = False

    def feed(self, words: np.ndarray | Sequence[int]) -> None:
        words = np.asarray(words, dtype=np.uint32)
        room = self.fifo_capacity - self._buffered
        if words.size > room:
            self.stats.overflow_dropped += int(words.size - room)
            words = words[:room]
        if words.size:
            self._fifo.append(words)
            self._buffered += int(words.size)

    def drain(self) -> np.ndarray:
        """Decode every buffered word, returning the recovered events."""
        if not self._fifo:
            return np.empty(0, dtype=EVENT_DTYPE)
        words = np.concatenate(self._fifo) if len(self._fifo) > 1 else self._fifo[0]
        self._fifo.clear()
        self._buffered = 0
        return self._decode(words)

    def _decode(self, words: np.ndarray) -> np.ndarray:
        is_header = (words >> WORD_FLAG_BIT).astype(bool)
        if not self._synced:
            first = np.flatnonzero(is_header)
            if first.size == 0:
                self.stats.discarded_before_header += int(words.size)
                return np.empty(0, dtype=EVENT_DTYPE)
            self.stats.discarded_before_header += int(first[0])
            words = words[first[0] :]
            is_header = is_header[first[0] :]
            self._synced = True

        header_idx = np.flatnonzero(is_header)
        deltas = (words[header_idx] & GROUP_MAX_DELTA).astype(np.int64)
        header_t = self._t + np.cumsum(deltas)
        header_y = (words[header_idx] >> GROUP_DELTA_BITS) & 0x1FF

        event_idx = np.flatnonzero(~is_header)
        pol_field = (words[event_idx] >> 20) & 0b11
        ok = (pol_field == _POL_FIELD_NEG) | (pol_field == _POL_FIELD_POS)
        self.stats.malformed_words += int(event_idx.size - np.count_nonzero(ok))
        event_idx = event_idx[ok]
        pol_field = pol_field[ok]

        # Attach each event word to the most recent header at or before it.
        # Index 0 of the prepended arrays is the group carried over from the
        # previous drain, so chunk boundaries may fall mid-group.
        owner = np.searchsorted(header_idx, event_idx)
        all_t = np.concatenate(([self._t], header_t))
        all_y = np.concatenate(([self._y], header_y.astype(np.int64)))
        out = np.empty(event_idx.size, dtype=EVENT_DTYPE)
        out["t"] = all_t[owner]
        out["y"] = all_y[owner].astype(np.uint16)
        out["x"] = ((words[event_idx] >> GROUP_DELTA_BITS) & 0x1FF).astype(np.uint16)
        out["p"] = (pol_field >> 1).astype(np.uint8)

        if header_idx.size:
            self._t = int(header_t[-1])
            self._y = int(header_y[-1])
        return out


def parse_grouped(
    words: np.ndarray | Sequence[int], fifo_capacity: int = 256
) -> tuple[np.ndarray, ParserStats]:
    """Decode a grouped word stream with an unstalled consumer.

    The consumer keeps up with the producer, so the FIFO never overflows;
    use GroupedParser directly to model stall schedules.
    """
    parser = GroupedParser(fifo_capacity)
    words = np.asarray(words, dtype=np.uint32)
    chunks = []
    for start in range(0, words.size, fifo_capacity):
        parser.feed(words[start : start + fifo_capacity])
        chunks.append(parser.drain())
    events = (
        np.concatenate(chunks) if chunks else np.empty(0, dtype=EVENT_DTYPE)
    )
    return events, parser.stats
