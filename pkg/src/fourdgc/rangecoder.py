"""Integer range coder over 16-bit frequency tables.

64-bit ``low`` with carry propagation through a cached byte, 32-bit
``range``, byte-wise renormalisation. The decoder is the exact inverse and
rejects streams that are truncated, carry trailing bytes, or are not the
canonical encoding of the symbols they decode to.
"""

from __future__ import annotations

import numpy as np
from numba import njit

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class RangeCoderError(ValueError):
    pass


@njit(cache=True)
def _encode(symbols, cum, freq, out):
    low = np.uint64(0)
    rng = np.uint64(0xFFFFFFFF)
    cache = np.uint64(0)
    cache_size = 1
    n_out = 0
    top = np.uint64(1 << 24)
    mask32 = np.uint64(0xFFFFFFFF)
    for i in range(symbols.shape[0] + 5):
        if i < symbols.shape[0]:
            s = symbols[i]
            r = rng >> np.uint64(16)
            low += r * np.uint64(cum[s])
            rng = r * np.uint64(freq[s])
            shifts = 0
            while rng < top:
                rng = (rng << np.uint64(8)) & mask32
                shifts += 1
        else:
            shifts = 1
        for _ in range(shifts):
            # shift_low
            if (low & mask32) < np.uint64(0xFF000000) or (low >> np.uint64(32)) != np.uint64(0):
                carry = low >> np.uint64(32)
                temp = cache
                while True:
                    out[n_out] = np.uint8((temp + carry) & np.uint64(0xFF))
                    n_out += 1
                    temp = np.uint64(0xFF)
                    cache_size -= 1
                    if cache_size == 0:
                        break
                cache = (low >> np.uint64(24)) & np.uint64(0xFF)
            cache_size += 1
            low = (low & np.uint64(0x00FFFFFF)) << np.uint64(8)
    return n_out


@njit(cache=True)
def _decode(data, cum, freq, lookup, count, out):
    """Returns bytes consumed, or -1 on truncation / -2 on an invalid code."""
    n = data.shape[0]
    pos = 0
    if n < 5:
        return -1
    code = np.uint64(0)
    for _ in range(5):
        code = ((code << np.uint64(8)) | np.uint64(data[pos])) & np.uint64(0xFFFFFFFF)
        pos += 1
    rng = np.uint64(0xFFFFFFFF)
    top = np.uint64(1 << 24)
    mask32 = np.uint64(0xFFFFFFFF)
    for i in range(count):
        r = rng >> np.uint64(16)
        v = code // r
        if v >= np.uint64(65536):
            return -2
        s = lookup[v]
        out[i] = s
        code -= r * np.uint64(cum[s])
        rng = r * np.uint64(freq[s])
        while rng < top:
            if pos >= n:
                return -1
            code = ((code << np.uint64(8)) | np.uint64(data[pos])) & mask32
            rng = (rng << np.uint64(8)) & mask32
            pos += 1
    return pos


def _tables(frequencies):
    freq = np.asarray(frequencies, dtype=np.int64)
    if freq.ndim != 1 or len(freq) == 0:
        raise RangeCoderError("empty frequency table")
    if freq.min() < 1 or int(freq.sum()) != TOTAL:
        raise RangeCoderError("frequencies must be >= 1 and sum to 2^16")
    cum = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cum[1:])
    return cum, freq


def encode_symbols(symbols, frequencies) -> bytes:
    """Range-code ``symbols`` (indices into ``frequencies``)."""
    cum, freq = _tables(frequencies)
    sym = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
    if len(sym) and (sym.min() < 0 or sym.max() >= len(freq)):
        raise RangeCoderError("symbol outside the table span")
    # each symbol can emit at most 3 bytes (range never drops below 2^8 before renormalising)
    out = np.empty(3 * len(sym) + 16, dtype=np.uint8)
    n = _encode(sym, cum, freq, out)
    return out[:n].tobytes()


def decode_symbols(data: bytes, frequencies, count: int, verify: bool = True) -> np.ndarray:
    cum, freq = _tables(frequencies)
    lookup = np.repeat(np.arange(len(freq), dtype=np.int64), freq)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(int(count), dtype=np.int64)
    used = _decode(buf, cum, freq, lookup, int(count), out)
    if used == -1:
        raise RangeCoderError("truncated range-coded stream")
    if used == -2:
        raise RangeCoderError("corrupt range-coded stream")
    if verify:
        if used != len(buf) or encode_symbols(out, freq) != bytes(data):
            raise RangeCoderError("range-coded stream is not a valid encoding")
    return out
