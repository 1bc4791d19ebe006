"""Bit-exact serialization of quantization indices.

Fixed-width two's-complement packing for the no-frills baseline, plus a
32-bit-register adaptive/static arithmetic coder for entropy compression,
with rate accounting helpers and the on-the-wire feedback record format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

STATE_SIZE = 32
_MASK = (1 << STATE_SIZE) - 1
_TOP = 1 << (STATE_SIZE - 1)
_SECOND = _TOP >> 1
MAX_TOTAL = 1 << 16  # frequency tables rescale beyond this

FEEDBACK_MAGIC = b"CSIQFB1\0"
_FEEDBACK_HEADER = struct.Struct("<BBxx4IQ")  # variant, coder mode, M, bits, bits_eff, count, payload bits

CODER_FIXED = 0
CODER_ARITH_ADAPTIVE = 1


class DecodeError(ValueError):
    """Raised when a bitstream cannot be decoded; carries the bit position."""

    def __init__(self, message: str, bit_position: int):
        super().__init__(f"{message} (at bit {bit_position})")
        self.bit_position = bit_position


@dataclass(frozen=True)
class BitBuffer:
    """Packed bits, MSB-first within each byte; padding bits are zero."""

    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise ValueError("bit_length exceeds byte storage")


class BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._current = 0
        self._filled = 0
        self.bit_count = 0

    def write_bit(self, bit: int) -> None:
        self._current = (self._current << 1) | (bit & 1)
        self._filled += 1
        self.bit_count += 1
        if self._filled == 8:
            self._bytes.append(self._current)
            self._current = 0
            self._filled = 0

    def write_bits(self, value: int, width: int) -> None:
        for shift in range(width - 1, -1, -1):
            self.write_bit((value >> shift) & 1)

    def finish(self) -> BitBuffer:
        bit_count = self.bit_count
        if self._filled:
            self._bytes.append(self._current << (8 - self._filled))
            self._current = 0
            self._filled = 0
        return BitBuffer(bytes(self._bytes), bit_count)


class BitReader:
    """Reads a BitBuffer; reads past the end return 0 and are counted.

    The arithmetic decoder legitimately looks ahead up to STATE_SIZE bits,
    so only larger overruns indicate a truncated stream.
    """

    def __init__(self, buffer: BitBuffer):
        self._data = buffer.data
        self._limit = buffer.bit_length
        self.position = 0
        self.overrun = 0

    def read_bit(self) -> int:
        if self.position >= self._limit:
            self.overrun += 1
            self.position += 1
            return 0
        byte = self._data[self.position >> 3]
        bit = (byte >> (7 - (self.position & 7))) & 1
        self.position += 1
        return bit

    def read_bits(self, width: int) -> int:
        value = 0
        for _ in range(width):
            value = (value << 1) | self.read_bit()
        return value


# ---------------------------------------------------------------------------
# fixed-width packing


def pack_fixed(indices, bits: int) -> BitBuffer:
    """Each index as a ``bits``-wide two's-complement field, MSB-first."""
    indices = np.asarray(indices)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if indices.size and (indices.min() < lo or indices.max() > hi):
        raise ValueError(f"index outside two's-complement range [{lo}, {hi}] for {bits} bits")
    writer = BitWriter()
    mask = (1 << bits) - 1
    for k in indices.ravel():
        writer.write_bits(int(k) & mask, bits)
    return writer.finish()


def unpack_fixed(buffer: BitBuffer, count: int, bits: int) -> np.ndarray:
    if count * bits > buffer.bit_length:
        raise DecodeError(f"buffer holds {buffer.bit_length} bits, need {count * bits}", buffer.bit_length)
    reader = BitReader(buffer)
    sign = 1 << (bits - 1)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        raw = reader.read_bits(bits)
        out[i] = raw - (1 << bits) if raw & sign else raw
    return out


# ---------------------------------------------------------------------------
# arithmetic coding


class SymbolModel:
    """Order-0 frequency model over a fixed alphabet.

    Adaptive mode increments the observed symbol's count after coding it,
    identically on the encoder and decoder sides; totals rescale (halving,
    floor 1) when they exceed MAX_TOTAL.
    """

    def __init__(self, alphabet_size: int, frequencies=None, adaptive: bool = True):
        if alphabet_size < 1:
            raise ValueError("alphabet_size must be >= 1")
        if frequencies is None:
            frequencies = np.ones(alphabet_size, dtype=np.int64)
        self.frequencies = np.asarray(frequencies, dtype=np.int64).copy()
        if self.frequencies.shape != (alphabet_size,):
            raise ValueError(f"frequency table shape {self.frequencies.shape} != ({alphabet_size},)")
        if np.any(self.frequencies < 1):
            raise ValueError("every symbol needs frequency >= 1")
        self.alphabet_size = alphabet_size
        self.adaptive = adaptive
        while int(self.frequencies.sum()) > MAX_TOTAL:
            self.frequencies = (self.frequencies + 1) // 2
        self._refresh()

    @classmethod
    def from_counts(cls, counts, adaptive: bool = False) -> "SymbolModel":
        """Static table from empirical counts, add-1 smoothed."""
        counts = np.asarray(counts, dtype=np.int64)
        return cls(counts.shape[0], counts + 1, adaptive=adaptive)

    def copy(self) -> "SymbolModel":
        return SymbolModel(self.alphabet_size, self.frequencies, self.adaptive)

    def _refresh(self):
        self._cumulative = np.concatenate(([0], np.cumsum(self.frequencies)))
        self.total = int(self._cumulative[-1])

    def interval(self, symbol: int) -> tuple[int, int, int]:
        return int(self._cumulative[symbol]), int(self._cumulative[symbol + 1]), self.total

    def locate(self, value: int) -> int:
        """Largest symbol whose cumulative start is <= value."""
        return int(np.searchsorted(self._cumulative, value, side="right")) - 1

    def observe(self, symbol: int) -> None:
        if not self.adaptive:
            return
        self.frequencies[symbol] += 1
        if int(self.frequencies.sum()) > MAX_TOTAL:
            self.frequencies = (self.frequencies + 1) // 2
        self._refresh()

    def cross_entropy_bits(self, symbols) -> float:
        """Ideal code length of `symbols` under the current (static) table."""
        probs = self.frequencies / self.total
        return float(-np.log2(probs[np.asarray(symbols)]).sum())


class ArithmeticEncoder:
    def __init__(self, writer: BitWriter):
        self._writer = writer
        self._low = 0
        self._high = _MASK
        self._pending = 0

    def encode(self, model: SymbolModel, symbol: int) -> None:
        if not 0 <= symbol < model.alphabet_size:
            raise ValueError(f"symbol {symbol} outside alphabet of {model.alphabet_size}")
        c_lo, c_hi, total = model.interval(symbol)
        span = self._high - self._low + 1
        self._high = self._low + span * c_hi // total - 1
        self._low = self._low + span * c_lo // total
        while True:
            if (self._low ^ self._high) & _TOP == 0:
                self._emit(self._low >> (STATE_SIZE - 1))
                self._low = (self._low << 1) & _MASK
                self._high = ((self._high << 1) & _MASK) | 1
            elif self._low & ~self._high & _SECOND:
                self._pending += 1
                self._low = (self._low << 1) & (_MASK >> 1)
                self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1
            else:
                break

    def _emit(self, bit: int) -> None:
        self._writer.write_bit(bit)
        for _ in range(self._pending):
            self._writer.write_bit(bit ^ 1)
        self._pending = 0

    def finish(self) -> None:
        # The final interval always straddles the window midpoint, and the
        # midpoint is invariant under the underflow unfolding, so a single 1
        # followed by the decoder's implicit zero padding lands inside it.
        self._writer.write_bit(1)


class ArithmeticDecoder:
    def __init__(self, reader: BitReader):
        self._reader = reader
        self._low = 0
        self._high = _MASK
        self._code = reader.read_bits(STATE_SIZE)

    def decode(self, model: SymbolModel) -> int:
        total = model.total
        span = self._high - self._low + 1
        value = ((self._code - self._low + 1) * total - 1) // span
        # Corrupt input can push the estimate outside the table; clamp so the
        # decode stays well-defined (the result is garbage either way).
        symbol = model.locate(min(max(value, 0), total - 1))
        c_lo, c_hi, total = model.interval(symbol)
        self._high = self._low + span * c_hi // total - 1
        self._low = self._low + span * c_lo // total
        while True:
            if (self._low ^ self._high) & _TOP == 0:
                self._low = (self._low << 1) & _MASK
                self._high = ((self._high << 1) & _MASK) | 1
                self._code = ((self._code << 1) & _MASK) | self._reader.read_bit()
            elif self._low & ~self._high & _SECOND:
                self._low = (self._low << 1) & (_MASK >> 1)
                self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1
                self._code = (self._code & _TOP) | ((self._code << 1) & (_MASK >> 1)) | self._reader.read_bit()
            else:
                break
        return symbol


def arith_encode(symbols, model: SymbolModel) -> BitBuffer:
    """Encode a symbol sequence; the caller's model object is left untouched."""
    model = model.copy()
    writer = BitWriter()
    encoder = ArithmeticEncoder(writer)
    for s in np.asarray(symbols).ravel():
        encoder.encode(model, int(s))
        model.observe(int(s))
    encoder.finish()
    return writer.finish()


def arith_decode(buffer: BitBuffer, model: SymbolModel, count: int) -> np.ndarray:
    """Decode ``count`` symbols; raises DecodeError on a truncated buffer."""
    model = model.copy()
    reader = BitReader(buffer)
    decoder = ArithmeticDecoder(reader)
    # The register priming plus end-of-stream lookahead legitimately read a
    # few tens of bits past the payload; anything beyond that is truncation.
    allowance = 2 * STATE_SIZE + 16
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = decoder.decode(model)
        model.observe(int(out[i]))
        if reader.overrun > allowance:
            raise DecodeError(f"stream truncated after {i + 1} of {count} symbols", buffer.bit_length)
    return out


# ---------------------------------------------------------------------------
# rate measurement


def measure_rate(symbol_vectors, alphabet_size: int, mode: str = "static") -> float:
    """Average encoded bits per value over a set of per-sample symbol vectors.

    Modes: ``fixed`` (log2 of the alphabet), ``static`` (one add-1-smoothed
    table from the whole set, samples encoded independently), ``adaptive``
    (fresh adaptive model per sample), ``adaptive-stream`` (one adaptive
    model across the concatenated set; explicit cross-sample state).
    """
    vectors = [np.asarray(v).ravel() for v in symbol_vectors]
    if not vectors:
        raise ValueError("need at least one symbol vector")
    total_values = sum(v.size for v in vectors)
    if mode == "fixed":
        return float(np.ceil(np.log2(alphabet_size)))
    if mode == "static":
        counts = np.zeros(alphabet_size, dtype=np.int64)
        for v in vectors:
            counts += np.bincount(v, minlength=alphabet_size)
        model = SymbolModel.from_counts(counts, adaptive=False)
        total_bits = sum(arith_encode(v, model).bit_length for v in vectors)
    elif mode == "adaptive":
        model = SymbolModel(alphabet_size, adaptive=True)
        total_bits = sum(arith_encode(v, model).bit_length for v in vectors)
    elif mode == "adaptive-stream":
        model = SymbolModel(alphabet_size, adaptive=True)
        total_bits = arith_encode(np.concatenate(vectors), model).bit_length
    else:
        raise ValueError(f"unknown rate mode {mode!r}")
    return total_bits / total_values


# ---------------------------------------------------------------------------
# feedback record container


@dataclass
class FeedbackRecord:
    """The on-the-wire unit: quantized codeword indices for a batch of samples."""

    variant: int  # 0 = full complex CSI, 1 = magnitude + side info
    coder_mode: int  # CODER_FIXED or CODER_ARITH_ADAPTIVE
    m: int
    bits: int  # quantizer bit width the model was trained at
    bits_eff: int  # transmitted bit width (< bits when bandwidth-limited)
    sample_count: int
    payload: BitBuffer


def write_feedback_record(record: FeedbackRecord) -> bytes:
    header = _FEEDBACK_HEADER.pack(
        record.variant, record.coder_mode, record.m, record.bits,
        record.bits_eff, record.sample_count, record.payload.bit_length)
    return FEEDBACK_MAGIC + header + record.payload.data


def read_feedback_record(blob: bytes) -> FeedbackRecord:
    if blob[:len(FEEDBACK_MAGIC)] != FEEDBACK_MAGIC:
        raise ValueError(f"not a feedback record (magic {blob[:8]!r})")
    offset = len(FEEDBACK_MAGIC)
    variant, coder_mode, m, bits, bits_eff, count, payload_bits = _FEEDBACK_HEADER.unpack_from(blob, offset)
    payload = blob[offset + _FEEDBACK_HEADER.size:]
    if len(payload) * 8 < payload_bits:
        raise DecodeError("feedback payload shorter than declared", len(payload) * 8)
    return FeedbackRecord(variant, coder_mode, m, bits, bits_eff, count,
                          BitBuffer(payload, payload_bits))
