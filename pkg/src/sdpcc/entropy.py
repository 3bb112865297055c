"""Range coding of occupancy bits and latent symbols.

The coder keeps a 64-bit ``low`` and a 32-bit ``range`` and shifts out one
byte whenever ``range`` drops below 2**24. Carries out of ``low`` are resolved
with a pending-byte cache, so every emitted byte is final. Probabilities and
frequencies live on a fixed 16-bit scale (total 65536).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    pass


class CoderUnderflowError(DecodeError):
    pass


def quantize_prob(p) -> np.ndarray | int:
    """Map P(bit=1) to an integer in ``[1, 65535]`` (over 65536)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise ValueError("probability is NaN")
    q = np.clip(np.floor(arr * PROB_ONE + 0.5), 1, PROB_ONE - 1).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def rate_estimate(probs, bits, quantized: bool = False) -> float:
    """Ideal code length in bits, ``sum -log2 q(bit)`` on the 16-bit scale."""
    q = np.asarray(probs, dtype=np.int64) if quantized else quantize_prob(np.asarray(probs, dtype=np.float64))
    q = np.atleast_1d(q)
    b = np.atleast_1d(np.asarray(bits)).astype(bool)
    p_bit = np.where(b, q, PROB_ONE - q) / PROB_ONE
    return float(-np.log2(p_bit).sum())


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._cache = 0
        self._pending = 1
        self._out = bytearray()
        self._closed = False

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self._cache
            out = self._out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._pending -= 1
                if self._pending == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._pending += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode_bit(self, q: int, bit) -> None:
        """Code ``bit`` where ``q/65536`` is the probability of a one."""
        bound = (self.range >> PROB_BITS) * q
        if bit:
            self.range = bound
        else:
            self.low += bound
            self.range -= bound
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, qs, bits) -> None:
        qs = np.asarray(qs, dtype=np.int64).tolist()
        bits = np.asarray(bits).astype(bool).tolist()
        low, rng = self.low, self.range
        shift = self._shift_low
        for q, b in zip(qs, bits):
            bound = (rng >> PROB_BITS) * q
            if b:
                rng = bound
            else:
                low += bound
                rng -= bound
            while rng < TOP:
                rng <<= 8
                self.low = low
                shift()
                low = self.low
        self.low, self.range = low, rng

    def encode_freq(self, cum: int, freq: int) -> None:
        r = self.range >> PROB_BITS
        self.low += r * cum
        if cum + freq == PROB_ONE:
            self.range -= r * cum
        else:
            self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int, nbits: int) -> None:
        for i in range(nbits - 1, -1, -1):
            self.encode_bit(PROB_ONE // 2, (value >> i) & 1)

    def finish(self) -> bytes:
        if not self._closed:
            for _ in range(5):
                self._shift_low()
            self._closed = True
        # the first byte out of the cache is always zero
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise CoderUnderflowError("read past end of coded payload")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def consumed(self) -> int:
        return self._pos

    def decode_bit(self, q: int) -> int:
        bound = (self.range >> PROB_BITS) * q
        if self.code < bound:
            self.range = bound
            bit = 1
        else:
            self.code -= bound
            self.range -= bound
            bit = 0
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & MASK32
        return bit

    def decode_bits(self, qs) -> np.ndarray:
        qs = np.asarray(qs, dtype=np.int64).tolist()
        out = bytearray(len(qs))
        code, rng = self.code, self.range
        data, pos, n = self._data, self._pos, len(self._data)
        for i, q in enumerate(qs):
            bound = (rng >> PROB_BITS) * q
            if code < bound:
                rng = bound
                out[i] = 1
            else:
                code -= bound
                rng -= bound
            while rng < TOP:
                if pos >= n:
                    raise CoderUnderflowError("read past end of coded payload")
                rng <<= 8
                code = ((code << 8) | data[pos]) & MASK32
                pos += 1
        self.code, self.range, self._pos = code, rng, pos
        return np.frombuffer(bytes(out), dtype=np.uint8).astype(bool)

    def decode_freq(self, cum_table) -> int:
        """Decode one symbol index from a cumulative table ``[0, ..., 65536]``."""
        r = self.range >> PROB_BITS
        v = min(self.code // r, PROB_ONE - 1)
        sym = bisect_right(cum_table, v) - 1
        cum, nxt = cum_table[sym], cum_table[sym + 1]
        self.code -= r * cum
        if nxt == PROB_ONE:
            self.range -= r * cum
        else:
            self.range = r * (nxt - cum)
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & MASK32
        return sym

    def decode_raw(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.decode_bit(PROB_ONE // 2)
        return v


# -- escape coding -------------------------------------------------------------


def encode_exp_golomb(enc: RangeEncoder, n: int) -> None:
    x = int(n) + 1
    nbits = x.bit_length()
    for _ in range(nbits - 1):
        enc.encode_bit(PROB_ONE // 2, 0)
    enc.encode_raw(x, nbits)


def decode_exp_golomb(dec: RangeDecoder) -> int:
    zeros = 0
    while dec.decode_bit(PROB_ONE // 2) == 0:
        zeros += 1
        if zeros > 40:
            raise DecodeError("malformed escape code")
    return ((1 << zeros) | dec.decode_raw(zeros)) - 1


def exp_golomb_bits(n: int) -> int:
    return 2 * (int(n) + 1).bit_length() - 1


# -- factorized latent model ----------------------------------------------------


def freeze_table(logits: np.ndarray) -> np.ndarray:
    """Integer cumulative frequencies (one row per channel) from pmf logits.

    Every symbol keeps a frequency of at least one and each row sums to 65536.
    """
    lg = np.asarray(logits, dtype=np.float64)
    pmf = np.exp(lg - lg.max(axis=1, keepdims=True))
    pmf /= pmf.sum(axis=1, keepdims=True)
    n = lg.shape[1]
    freq = 1 + np.floor(pmf * (PROB_ONE - n)).astype(np.int64)
    short = PROB_ONE - freq.sum(axis=1)
    freq[np.arange(len(freq)), np.argmax(pmf, axis=1)] += short
    return np.concatenate([np.zeros((len(freq), 1), np.int64), np.cumsum(freq, axis=1)], axis=1)


@dataclass
class FactorizedModel:
    """Per-channel distribution over integer symbols in ``[-support, support]``."""

    logits: np.ndarray
    support: int
    cdf: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.shape[1] != 2 * self.support + 1:
            raise ValueError("logit table width must be 2*support+1")
        if self.cdf is None:
            self.cdf = freeze_table(self.logits)
        self.cdf = np.asarray(self.cdf, dtype=np.int64)
        if np.any(np.diff(self.cdf, axis=1) <= 0) or np.any(self.cdf[:, -1] != PROB_ONE):
            raise ValueError("cumulative table must be strictly increasing and total 65536")
        self._rows = [row.tolist() for row in self.cdf]

    @classmethod
    def uniform(cls, channels: int, support: int = 32) -> "FactorizedModel":
        return cls(np.zeros((channels, 2 * support + 1), np.float32), support)

    @property
    def channels(self) -> int:
        return self.logits.shape[0]

    def bits(self, symbols) -> float:
        """Exact cross-entropy of ``symbols`` under the frozen tables, escapes included."""
        s = np.asarray(symbols, dtype=np.int64).reshape(-1, self.channels)
        L = self.support
        idx = np.clip(s, -L, L) + L
        ch = np.broadcast_to(np.arange(self.channels), s.shape)
        freq = self.cdf[ch, idx + 1] - self.cdf[ch, idx]
        total = float(-np.log2(freq / PROB_ONE).sum())
        over = np.abs(s[np.abs(s) >= L]) - L
        total += sum(exp_golomb_bits(int(o)) for o in over)
        return total


def encode_latents(enc: RangeEncoder, symbols, model: FactorizedModel) -> None:
    s = np.asarray(symbols, dtype=np.int64)
    if s.ndim != 2 or s.shape[1] != model.channels:
        raise ValueError("symbol matrix must be (rows, model.channels)")
    L = model.support
    rows = model._rows
    for r in s.tolist():
        for c, v in enumerate(r):
            i = min(max(v, -L), L) + L
            tab = rows[c]
            enc.encode_freq(tab[i], tab[i + 1] - tab[i])
            if v >= L or v <= -L:
                encode_exp_golomb(enc, abs(v) - L)


def decode_latents(dec: RangeDecoder, rows: int, model: FactorizedModel) -> np.ndarray:
    L = model.support
    tabs = model._rows
    out = np.zeros((rows, model.channels), dtype=np.int64)
    for r in range(rows):
        for c in range(model.channels):
            v = dec.decode_freq(tabs[c]) - L
            if v == L:
                v += decode_exp_golomb(dec)
            elif v == -L:
                v -= decode_exp_golomb(dec)
            out[r, c] = v
    return out


def shannon_bits(p1: float, bits) -> float:
    b = np.asarray(bits).astype(bool)
    return float(-(np.log2(p1) * b.sum() + np.log2(1 - p1) * (~b).sum()))


def payload_bound(ideal_bits: float, slack_bytes: int) -> float:
    """Allowed coded size in bytes: ideal + 0.5% + slack."""
    return math.ceil(ideal_bits / 8 * 1.005) + slack_bytes
