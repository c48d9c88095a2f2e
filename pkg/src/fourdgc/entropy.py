"""Quantisation, the factorised entropy model, symbol tables and tensor coding."""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import rangecoder

LIKELIHOOD_FLOOR = 1e-9
MAX_SPAN = 1 << 15
TABLE_TOTAL = rangecoder.TOTAL
INT32_LIMIT = 2**31 - 1


def as_f32(q: float) -> float:
    """Quantisation steps travel as f32; both coder sides use the rounded value."""
    return float(np.float32(q))


# ---------------------------------------------------------------------------
# Quantisation
# ---------------------------------------------------------------------------


def quantize_sim(x: torch.Tensor, q: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """q*x plus U(-1/2, 1/2) noise; the noise is a constant for autograd."""
    if not q > 0:
        raise ValueError("q must be positive")
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5
    return q * x + noise


def quantize_ste(x: torch.Tensor, q: float) -> torch.Tensor:
    """floor(q*x + 1/2) in the forward pass, identity (times q) in the backward pass."""
    y = q * x
    return y + (torch.floor(y + 0.5) - y).detach()


@dataclass
class QuantizedTensor:
    symbols: np.ndarray  # int64, shape of the source tensor
    q: float
    offset: int

    @property
    def shifted(self) -> np.ndarray:
        return self.symbols - self.offset

    def dequantize(self) -> np.ndarray:
        return (self.shifted + self.offset) / self.q


def quantize_hard(x, q: float) -> QuantizedTensor:
    if not q > 0:
        raise ValueError("q must be positive")
    q = as_f32(q)
    x = np.asarray(x.detach().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)
    y = q * x
    if x.size and (not np.isfinite(y).all() or np.abs(y).max() + 0.5 > INT32_LIMIT):
        raise OverflowError("q*x exceeds the signed 32-bit symbol range")
    sym = np.floor(y + 0.5).astype(np.int64)
    offset = int(sym.min()) if sym.size else 0
    return QuantizedTensor(sym, q, offset)


# ---------------------------------------------------------------------------
# Entropy model
# ---------------------------------------------------------------------------


class FactorizedEntropyModel:
    """Per-channel monotone cumulative-logit network with (1,3,3,3,1) widths.

    Effective weights are softplus(H_k) >= 0 and each hidden layer adds a
    tanh(a_k) * tanh(x) gate, so the logit is non-decreasing in its input.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0, seed: int = 0):
        self.channels = int(channels)
        self.widths = (1, *filters, 1)
        gen = torch.Generator().manual_seed(int(seed))
        scale = init_scale ** (1.0 / (len(self.widths) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(self.widths) - 1):
            out_w, in_w = self.widths[i + 1], self.widths[i]
            init = math.log(math.expm1(1.0 / scale / out_w))
            self.matrices.append(torch.full((self.channels, out_w, in_w), init, dtype=torch.float64))
            b = torch.rand(self.channels, out_w, 1, generator=gen, dtype=torch.float64) - 0.5
            self.biases.append(b)
            if i < len(self.widths) - 2:
                self.factors.append(torch.zeros(self.channels, out_w, 1, dtype=torch.float64))
        for t in self.parameters():
            t.requires_grad_(True)

    def parameters(self) -> list:
        return [*self.matrices, *self.biases, *self.factors]

    def named_parameters(self) -> dict:
        out = {}
        for i, t in enumerate(self.matrices):
            out[f"H{i}"] = t
        for i, t in enumerate(self.biases):
            out[f"b{i}"] = t
        for i, t in enumerate(self.factors):
            out[f"a{i}"] = t
        return out

    def _select(self, channels):
        if channels is None:
            channels = slice(0, self.channels)
        return channels

    def logits_cumulative(self, y: torch.Tensor, channels=None) -> torch.Tensor:
        """y: (C_sel, M) -> cumulative logits of the same shape."""
        sel = self._select(channels)
        x = y.unsqueeze(1)
        last = len(self.matrices) - 1
        for i in range(len(self.matrices)):
            x = F.softplus(self.matrices[i][sel]) @ x + self.biases[i][sel]
            if i < last:
                x = x + torch.tanh(self.factors[i][sel]) * torch.tanh(x)
        return x.squeeze(1)

    def likelihood(self, y: torch.Tensor, channels=None, floor: float | None = None) -> torch.Tensor:
        lower = self.logits_cumulative(y - 0.5, channels)
        upper = self.logits_cumulative(y + 0.5, channels)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        if floor is not None:
            p = torch.clamp(p, min=floor)
        return p

    def expected_noisy_bits_at_zero(self, channels=None, nodes: int = 16) -> torch.Tensor:
        """Per-channel E_u[-log2 pmf(u)], u ~ U(-1/2, 1/2), by Gauss-Legendre quadrature.

        Used for grid entries pinned at exactly zero during training.
        """
        x, w = _legendre(nodes)
        u = torch.as_tensor(0.5 * x)
        sel = self._select(channels)
        c = self.matrices[0][sel].shape[0]
        p = self.likelihood(u.expand(c, -1), sel, LIKELIHOOD_FLOOR)
        return -(torch.log2(p) * torch.as_tensor(0.5 * w)).sum(-1)


@functools.lru_cache(maxsize=8)
def _legendre(nodes: int):
    return np.polynomial.legendre.leggauss(nodes)


def pmf_of(model: FactorizedEntropyModel, y, channel: int = 0, floor: float | None = None):
    """CDF(y + 1/2) - CDF(y - 1/2) for one channel; ``floor`` applies the loss-time clamp."""
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float64)) if not isinstance(y, torch.Tensor) else y
    shape = y_t.shape
    p = model.likelihood(y_t.reshape(1, -1), slice(channel, channel + 1), floor)
    return p.reshape(shape)


def rate_bits(values: torch.Tensor, model, channels=None):
    """(total bits, mean bits per element) of ``values`` under ``model``.

    ``values`` is (C, M) for an entropy model (one row per model channel in
    ``channels``) or any integer array for a :class:`SymbolTable`.
    """
    if isinstance(model, SymbolTable):
        sym = np.asarray(values.detach().numpy() if isinstance(values, torch.Tensor) else values)
        sym = sym.astype(np.int64).reshape(-1)
        idx = sym - model.min_symbol
        if len(idx) and (idx.min() < 0 or idx.max() >= model.span):
            raise ValueError("symbol outside the table span")
        total = float(-np.log2(model.frequencies[idx] / TABLE_TOTAL).sum())
        return total, total / max(1, len(sym))
    p = model.likelihood(values, channels, LIKELIHOOD_FLOOR)
    total = -torch.log2(p).sum()
    return total, total / values.numel()


# ---------------------------------------------------------------------------
# Symbol tables
# ---------------------------------------------------------------------------


@dataclass
class SymbolTable:
    min_symbol: int
    frequencies: np.ndarray  # int64, each >= 1, sum 2^16

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.int64)
        if self.frequencies.ndim != 1 or len(self.frequencies) == 0:
            raise ValueError("symbol table needs at least one entry")
        if len(self.frequencies) > MAX_SPAN:
            raise ValueError(f"symbol span {len(self.frequencies)} exceeds {MAX_SPAN}")
        if self.frequencies.min() < 1 or int(self.frequencies.sum()) != TABLE_TOTAL:
            raise ValueError("table frequencies must be >= 1 and sum to 2^16")

    @property
    def span(self) -> int:
        return len(self.frequencies)

    @property
    def max_symbol(self) -> int:
        return self.min_symbol + self.span - 1

    def probabilities(self) -> np.ndarray:
        return self.frequencies / TABLE_TOTAL

    def cross_entropy_bits(self, symbols) -> float:
        return rate_bits(np.asarray(symbols), self)[0]

    def to_bytes(self) -> bytes:
        # frequencies are stored minus one so a full 2^16 entry fits a u16
        return struct.pack("<iH", self.min_symbol, self.span) + (self.frequencies - 1).astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, pos: int = 0) -> tuple["SymbolTable", int]:
        if len(data) < pos + 6:
            raise ValueError("truncated symbol table header")
        min_symbol, span = struct.unpack_from("<iH", data, pos)
        pos += 6
        if span == 0:
            raise ValueError("empty symbol table")
        end = pos + 2 * span
        if len(data) < end:
            raise ValueError("truncated symbol table")
        freq = np.frombuffer(data[pos:end], dtype="<u2").astype(np.int64) + 1
        return cls(min_symbol, freq), end


def _largest_remainder(weights, total: int) -> np.ndarray:
    """Integer frequencies >= 1 summing to ``total``, proportional to integer ``weights``."""
    weights = [int(w) for w in weights]
    n = len(weights)
    spare = total - n
    wsum = sum(weights)
    if wsum == 0:
        weights = [1] * n
        wsum = n
    base, rem = [], []
    for w in weights:
        qv, r = divmod(spare * w, wsum)
        base.append(qv)
        rem.append(r)
    left = spare - sum(base)
    order = sorted(range(n), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return np.array(base, dtype=np.int64) + 1


def empirical_table(qt) -> SymbolTable:
    """Histogram table over [min, max] of the coded (offset-removed) symbols."""
    values = qt.shifted if isinstance(qt, QuantizedTensor) else np.asarray(qt, dtype=np.int64)
    values = values.reshape(-1)
    if len(values) == 0:
        return SymbolTable(0, np.array([TABLE_TOTAL]))
    lo, hi = int(values.min()), int(values.max())
    span = hi - lo + 1
    if span > MAX_SPAN:
        raise ValueError(f"symbol span {span} exceeds {MAX_SPAN}")
    counts = np.bincount(values - lo, minlength=span)
    return SymbolTable(lo, _largest_remainder(counts, TABLE_TOTAL))


def table_from_model(model: FactorizedEntropyModel, lo: int, hi: int, channel: int = 0,
                     offset: int = 0) -> SymbolTable:
    """Discretise one model channel over raw symbols [lo, hi]; table indexes ``symbol - offset``."""
    if hi - lo + 1 > MAX_SPAN:
        raise ValueError("symbol span too large")
    with torch.no_grad():
        p = pmf_of(model, np.arange(lo, hi + 1, dtype=np.float64), channel).numpy()
    weights = np.floor(p * 2.0**40).astype(np.int64)
    return SymbolTable(lo - offset, _largest_remainder(weights, TABLE_TOTAL))


# ---------------------------------------------------------------------------
# Tensor coding
# ---------------------------------------------------------------------------


@dataclass
class TensorHeader:
    q: float
    offset: int
    count: int


def encode_symbols_with_table(shifted: np.ndarray, table: SymbolTable) -> bytes:
    idx = np.asarray(shifted, dtype=np.int64).reshape(-1) - table.min_symbol
    if len(idx) and (idx.min() < 0 or idx.max() >= table.span):
        raise ValueError("symbol outside the table span")
    return rangecoder.encode_symbols(idx, table.frequencies)


def range_encode(symbols, table: SymbolTable) -> bytes:
    return encode_symbols_with_table(np.asarray(symbols), table)


def range_decode(data: bytes, table: SymbolTable, count: int) -> np.ndarray:
    return rangecoder.decode_symbols(data, table.frequencies, count) + table.min_symbol


def encode_tensor(x, q: float, model_or_table=None):
    """Quantise and range-code ``x``.

    Returns (payload, table, header, dequantised tensor). The table is the
    empirical one unless a table or an entropy model is supplied.
    """
    qt = quantize_hard(x, q)
    if model_or_table is None:
        table = empirical_table(qt)
    elif isinstance(model_or_table, SymbolTable):
        table = model_or_table
    else:
        table = table_from_model(model_or_table, int(qt.symbols.min()), int(qt.symbols.max()),
                                 offset=qt.offset)
    payload = range_encode(qt.shifted, table)
    header = TensorHeader(qt.q, qt.offset, int(qt.symbols.size))
    return payload, table, header, qt.dequantize()


def decode_tensor(payload: bytes, table: SymbolTable, header: TensorHeader, shape=None) -> np.ndarray:
    if header.count < 0:
        raise ValueError("negative symbol count")
    if not header.q > 0:
        raise ValueError("header q must be positive")
    shifted = range_decode(payload, table, header.count)
    x = (shifted + header.offset) / header.q
    return x.reshape(shape) if shape is not None else x
