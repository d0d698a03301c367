"""Payload entropy coding and packet framing.

Frames travel as packets laid out as:

    preamble   4 bytes, constant 0x55AAC0DE (big-endian)
    payload    Huffman code bits for the frame's serialized bytes,
               zero-padded up to a byte boundary
    checksum   4 bytes, Fletcher-32 over the padded payload bytes,
               big-endian

There is no length field: the code is prefix-free and the symbol count per
packet is a protocol constant, so the decoder stops by itself. The Huffman
dictionary covers all 256 byte values (add-one smoothing guarantees a code
for symbols absent from the training corpus) and is canonical, so shipping
the 256 code lengths reconstructs it exactly.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .filter import FilteredFrame

PREAMBLE = 0x55AAC0DE
PREAMBLE_BYTES = PREAMBLE.to_bytes(4, "big")
MAX_CODE_LEN = 32
DICT_MAGIC = b"HUF1"
DEFAULT_SHAPE = (40, 60)
_LUT_BITS = 12


class CodecError(Exception):
    pass


class TruncationError(CodecError):
    """Bit supply ran out before the full symbol count was decoded."""


def fletcher32(data: bytes) -> int:
    """Fletcher-32 over little-endian 16-bit words.

    Odd-length input is zero-padded; both running sums start at 0 and are
    taken modulo 65535; the result packs sum2 into the high half.
    """
    if len(data) % 2:
        data = data + b"\x00"
    words = np.frombuffer(data, dtype="<u2")
    if words.size == 0:
        return 0
    cum = np.cumsum(words, dtype=np.uint64)
    sum1 = int(cum[-1]) % 65535
    sum2 = int(cum.sum()) % 65535
    return (sum2 << 16) | sum1


def huffman_code_lengths(counts: np.ndarray) -> np.ndarray:
    """Optimal prefix-code lengths for positive symbol counts.

    Ties in the merge queue break by insertion order, so leaves (pushed in
    symbol order) beat equal-weight packages and the result is deterministic.
    """
    n = len(counts)
    if n == 0:
        raise CodecError("no symbols")
    lengths = np.zeros(n, dtype=np.uint8)
    if n == 1:
        lengths[0] = 1
        return lengths
    heap = [(int(counts[s]), s, (s,)) for s in range(n)]
    heapq.heapify(heap)
    seq = n
    while len(heap) > 1:
        wa, _, syms_a = heapq.heappop(heap)
        wb, _, syms_b = heapq.heappop(heap)
        merged = syms_a + syms_b
        for s in merged:
            lengths[s] += 1
        heapq.heappush(heap, (wa + wb, seq, merged))
        seq += 1
    return lengths


def package_merge_lengths(counts: np.ndarray, limit: int) -> np.ndarray:
    """Optimal prefix-code lengths under a maximum-length constraint.

    Items carry per-symbol multiplicities rather than membership sets: a
    single package can absorb the same symbol's leaf from several levels,
    and each absorption adds one bit to that symbol's length.
    """
    n = len(counts)
    if n < 2:
        return huffman_code_lengths(counts)
    if (1 << limit) < n:
        raise CodecError(f"cannot fit {n} symbols in {limit}-bit codes")
    order = np.argsort(np.asarray(counts, dtype=np.int64), kind="stable")
    leaf_w = np.asarray(counts, dtype=np.int64)[order]
    leaf_c = np.zeros((n, n), dtype=np.int32)
    leaf_c[np.arange(n), order] = 1
    w, c = leaf_w, leaf_c
    for _ in range(limit - 1):
        m = len(w) & ~1  # an odd item out cannot be packaged
        pw = w[0:m:2] + w[1:m:2]
        pc = c[0:m:2] + c[1:m:2]
        # leaves listed first so an equal-weight leaf outranks a package
        w = np.concatenate([leaf_w, pw])
        c = np.concatenate([leaf_c, pc])
        sel = np.argsort(w, kind="stable")
        w, c = w[sel], c[sel]
    lengths = c[: 2 * n - 2].sum(axis=0)
    return lengths.astype(np.uint8)


class HuffmanDictionary:
    """Canonical prefix code over the 256 byte values."""

    def __init__(self, lengths: np.ndarray):
        lengths = np.asarray(lengths, dtype=np.uint8)
        if lengths.shape != (256,):
            raise CodecError(f"need 256 code lengths, got shape {lengths.shape}")
        if lengths.min() < 1 or lengths.max() > MAX_CODE_LEN:
            raise CodecError("code lengths must be in 1..32")
        kraft = sum(1 << (MAX_CODE_LEN - int(l)) for l in lengths)
        if kraft != 1 << MAX_CODE_LEN:
            raise CodecError("code lengths do not form a complete prefix code")
        self.lengths = lengths
        self._build_codes()

    def _build_codes(self) -> None:
        order = np.lexsort((np.arange(256), self.lengths))
        codes = np.zeros(256, dtype=np.uint64)
        code = 0
        prev_len = int(self.lengths[order[0]])
        for sym in order:
            length = int(self.lengths[sym])
            code <<= length - prev_len
            codes[sym] = code
            code += 1
            prev_len = length
        self.codes = codes
        self._canonical_order = order
        self._code_strs = [
            format(int(codes[s]), f"0{int(self.lengths[s])}b") for s in range(256)
        ]

        # First-level decode LUT: a 12-bit window resolves any code of
        # length <= 12 directly; longer codes escape to the canonical walk.
        lut_sym = [0] * (1 << _LUT_BITS)
        lut_len = [0] * (1 << _LUT_BITS)
        max_len = int(self.lengths.max())
        first_code = [0] * (max_len + 2)
        count_at = [0] * (max_len + 2)
        offset_at = [0] * (max_len + 2)
        idx = 0
        for length in range(1, max_len + 1):
            members = order[self.lengths[order] == length]
            count_at[length] = len(members)
            offset_at[length] = idx
            if len(members):
                first_code[length] = int(codes[members[0]])
            idx += len(members)
        for sym in range(256):
            length = int(self.lengths[sym])
            if length <= _LUT_BITS:
                base = int(codes[sym]) << (_LUT_BITS - length)
                for v in range(base, base + (1 << (_LUT_BITS - length))):
                    lut_sym[v] = sym
                    lut_len[v] = length
        self._lut_sym = lut_sym
        self._lut_len = lut_len
        self._first_code = first_code
        self._count_at = count_at
        self._offset_at = offset_at
        self._max_len = max_len

    def __eq__(self, other) -> bool:
        return isinstance(other, HuffmanDictionary) and np.array_equal(
            self.lengths, other.lengths
        )

    def serialize(self) -> bytes:
        return DICT_MAGIC + self.lengths.tobytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "HuffmanDictionary":
        if len(data) != 260 or data[:4] != DICT_MAGIC:
            raise CodecError("not a dictionary blob (HUF1 + 256 length bytes)")
        return cls(np.frombuffer(data[4:], dtype=np.uint8))

    def encode_symbols(self, data: bytes) -> "Bitstream":
        strs = self._code_strs
        bits = "".join(map(strs.__getitem__, data))
        nbits = len(bits)
        pad = -nbits % 8
        if pad:
            bits += "0" * pad
        packed = int(bits, 2).to_bytes(len(bits) // 8, "big") if bits else b""
        return Bitstream(data=packed, nbits=nbits)

    def decode_symbols(
        self, data: bytes, n_symbols: int, start_bit: int = 0
    ) -> tuple[bytes, int]:
        """Decode exactly n_symbols, returning (symbols, end bit position)."""
        total_bits = len(data) * 8
        padded = data + b"\x00\x00\x00\x00\x00"
        lut_sym, lut_len = self._lut_sym, self._lut_len
        out = bytearray(n_symbols)
        pos = start_bit
        for i in range(n_symbols):
            byte = pos >> 3
            off = pos & 7
            window = int.from_bytes(padded[byte : byte + 5], "big")
            val = (window >> (28 - off)) & 0xFFF
            length = lut_len[val]
            if length:
                out[i] = lut_sym[val]
            else:
                length, out[i] = self._decode_long((window >> (8 - off)) & 0xFFFFFFFF)
            pos += length
            if pos > total_bits:
                raise TruncationError(
                    f"bits ran out after {i} of {n_symbols} symbols"
                )
        return bytes(out), pos

    def _decode_long(self, val32: int) -> tuple[int, int]:
        for length in range(_LUT_BITS + 1, self._max_len + 1):
            code = val32 >> (32 - length)
            rel = code - self._first_code[length]
            if 0 <= rel < self._count_at[length]:
                return length, int(self._canonical_order[self._offset_at[length] + rel])
        raise CodecError("unreachable: complete code failed to decode")  # pragma: no cover

    def mean_code_length(self, counts: np.ndarray) -> float:
        counts = np.asarray(counts, dtype=np.float64)
        return float((counts * self.lengths).sum() / counts.sum())


@dataclass(frozen=True)
class Bitstream:
    """MSB-first bit string: nbits valid bits, zero-padded into data."""

    data: bytes
    nbits: int


def byte_histogram(corpus) -> np.ndarray:
    counts = np.zeros(256, dtype=np.int64)
    n = 0
    for item in corpus:
        blob = item.to_bytes() if isinstance(item, FilteredFrame) else bytes(item)
        counts += np.bincount(np.frombuffer(blob, dtype=np.uint8), minlength=256)
        n += 1
    if n == 0:
        raise CodecError("empty training corpus")
    return counts


def build_dictionary(corpus) -> HuffmanDictionary:
    """Train a canonical dictionary on frames (or raw byte strings).

    Add-one smoothing keeps every byte value codable; lengths that would
    exceed 32 bits are reshaped with the package-merge construction.
    """
    counts = byte_histogram(corpus) + 1
    lengths = huffman_code_lengths(counts)
    if lengths.max() > MAX_CODE_LEN:
        lengths = package_merge_lengths(counts, MAX_CODE_LEN)
    return HuffmanDictionary(lengths)


def huffman_encode(frame: FilteredFrame, dictionary: HuffmanDictionary) -> Bitstream:
    return dictionary.encode_symbols(frame.to_bytes())


def huffman_decode(
    bits: Bitstream,
    dictionary: HuffmanDictionary,
    shape: tuple[int, int] = DEFAULT_SHAPE,
) -> FilteredFrame:
    n_symbols = 2 * shape[0] * shape[1] // 8
    symbols, end = dictionary.decode_symbols(bits.data, n_symbols)
    if end > bits.nbits:
        raise TruncationError(f"code stream ends at bit {bits.nbits}, needed {end}")
    return FilteredFrame.from_bytes(symbols, shape)


def frame_packet(frame: FilteredFrame, dictionary: HuffmanDictionary) -> bytes:
    """preamble | padded payload | Fletcher-32 of the padded payload."""
    payload = huffman_encode(frame, dictionary).data
    return PREAMBLE_BYTES + payload + fletcher32(payload).to_bytes(4, "big")


@dataclass
class DeframerStats:
    packets_ok: int = 0
    checksum_failures: int = 0
    resyncs: int = 0
    bytes_discarded: int = 0


class Deframer:
    """Packet scanner over a byte stream that may start dirty or be corrupted.

    Packets are byte-aligned, so scanning is byte-aligned too. A parse
    failure (bad checksum, or a code stream that cannot supply the full
    symbol count) drops the packet and resumes scanning one byte past its
    preamble. Frames recovered off the wire carry no timing, so emit_time
    is the packet ordinal.
    """

    def __init__(
        self, dictionary: HuffmanDictionary, shape: tuple[int, int] = DEFAULT_SHAPE
    ):
        self.dictionary = dictionary
        self.shape = shape
        self.n_symbols = 2 * shape[0] * shape[1] // 8
        self.stats = DeframerStats()
        self._buf = b""
        # longest possible packet: all symbols at the 32-bit cap, plus framing
        self._max_packet = 4 + (self.n_symbols * MAX_CODE_LEN + 7) // 8 + 4

    def feed(self, data: bytes) -> list[FilteredFrame]:
        self._buf += data
        return self._scan(final=False)

    def flush(self) -> list[FilteredFrame]:
        frames = self._scan(final=True)
        if self._buf:
            self.stats.bytes_discarded += len(self._buf)
            self._buf = b""
        return frames

    def _scan(self, final: bool) -> list[FilteredFrame]:
        frames: list[FilteredFrame] = []
        buf = self._buf
        while True:
            idx = buf.find(PREAMBLE_BYTES)
            if idx < 0:
                # keep a tail that could be a preamble cut across feeds
                keep = 0 if final else min(len(buf), 3)
                self.stats.bytes_discarded += len(buf) - keep
                buf = buf[len(buf) - keep :]
                break
            if idx > 0:
                self.stats.bytes_discarded += idx
                buf = buf[idx:]
            outcome = self._try_packet(buf, final)
            if outcome is None:
                break  # incomplete; wait for more bytes
            ok, consumed, frame = outcome
            if ok:
                frames.append(frame)
                buf = buf[consumed:]
            else:
                self.stats.checksum_failures += 1
                self.stats.resyncs += 1
                self.stats.bytes_discarded += 1
                buf = buf[1:]
        self._buf = buf
        return frames

    def _try_packet(self, buf: bytes, final: bool):
        """Parse one packet at offset 0 (the preamble is verified already).

        Returns (ok, consumed, frame), or None to wait for more input.
        """
        try:
            symbols, end_bit = self.dictionary.decode_symbols(
                buf, self.n_symbols, start_bit=32
            )
        except TruncationError:
            if not final and len(buf) < self._max_packet:
                return None
            return False, 0, None
        payload_end = (end_bit + 7) // 8
        if payload_end + 4 > len(buf):
            if not final and len(buf) < self._max_packet:
                return None
            return False, 0, None
        expected = int.from_bytes(buf[payload_end : payload_end + 4], "big")
        if fletcher32(buf[4:payload_end]) != expected:
            return False, 0, None
        frame = FilteredFrame.from_bytes(
            symbols, self.shape, emit_time=self.stats.packets_ok
        )
        self.stats.packets_ok += 1
        return True, payload_end + 4, frame


def deframe_stream(
    data: bytes,
    dictionary: HuffmanDictionary,
    shape: tuple[int, int] = DEFAULT_SHAPE,
) -> tuple[list[FilteredFrame], DeframerStats]:
    deframer = Deframer(dictionary, shape)
    frames = deframer.feed(data)
    frames.extend(deframer.flush())
    return frames, deframer.stats


def save_dictionary(path, dictionary: HuffmanDictionary) -> None:
    with open(path, "wb") as fh:
        fh.write(dictionary.serialize())


def load_dictionary(path) -> HuffmanDictionary:
    with open(path, "rb") as fh:
        return HuffmanDictionary.deserialize(fh.read())
