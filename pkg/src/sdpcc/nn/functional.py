"""Differentiable array ops used by the sparse networks.

Convolutions are expressed through a :class:`KernelMap`: for every weight
index ``k`` a pair of index arrays ``(in_idx, out_idx)`` such that
``out[out_idx] += x[in_idx] @ W[k]``. Within one ``k`` the output indices are
unique, so the scatter needs no atomic accumulation, and iterating ``k`` in
ascending order fixes the floating-point summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sparse_tensor import morton_decode
from .tape import Var, as_var, record

LN2 = np.log(2.0)


@dataclass(frozen=True)
class KernelMap:
    pairs: tuple  # per weight index: (in_idx, out_idx) int64 arrays
    n_in: int
    n_out: int
    identity: bool = False  # single offset mapping row i -> row i
    table: np.ndarray | None = None  # (n_out, volume) input row per tap, n_in where absent

    @property
    def volume(self) -> int:
        return len(self.pairs)


GATHER_MAX_VOLUME = 27


def _with_table(pairs, n_in, n_out) -> KernelMap:
    table = None
    if len(pairs) <= GATHER_MAX_VOLUME:
        table = np.full((n_out, len(pairs)), n_in, dtype=np.int64)
        for k, (ii, oo) in enumerate(pairs):
            table[oo, k] = ii
    return KernelMap(tuple(pairs), n_in, n_out, table=table)


def offsets(kernel_size: int) -> np.ndarray:
    """Offsets in lexicographic (dx, dy, dz) order.

    Odd sizes are centred (``-r..r``); size 2 enumerates ``{0,1}^3`` so the
    index equals the octant index.
    """
    if kernel_size == 2:
        r = np.arange(2)
    elif kernel_size % 2 == 1:
        h = kernel_size // 2
        r = np.arange(-h, h + 1)
    else:
        raise ValueError(f"unsupported kernel size {kernel_size}")
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


def identity_map(n: int) -> KernelMap:
    idx = np.arange(n, dtype=np.int64)
    return KernelMap(((idx, idx),), n, n, identity=True)


DENSE_TABLE_LIMIT = 1 << 25


def neighbor_map(in_keys: np.ndarray, out_coords: np.ndarray, kernel_size: int,
                 in_coords: np.ndarray | None = None) -> KernelMap:
    """Same-stride map: output u gathers input u+k for k in the centred cube.

    Coordinates are flattened to linear indices over the bounding box padded
    by the kernel radius, so shifting by an offset is one integer add. Small
    boxes use a dense index table, larger ones a sorted search.
    """
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    n_in, n_out = len(in_keys), len(out_coords)
    offs = offsets(kernel_size)
    empty = np.zeros(0, dtype=np.int64)
    if n_in == 0 or n_out == 0:
        return KernelMap(tuple((empty, empty) for _ in offs), n_in, n_out)
    if in_coords is None:
        in_coords = morton_decode(in_keys)
    if kernel_size == 1 and n_in == n_out and np.array_equal(in_coords, out_coords):
        return identity_map(n_out)
    r = kernel_size // 2
    lo = np.minimum(in_coords.min(axis=0), out_coords.min(axis=0)) - r
    ext = np.maximum(in_coords.max(axis=0), out_coords.max(axis=0)) + r - lo + 1
    stride = np.array([ext[1] * ext[2], ext[2], 1], dtype=np.int64)
    in_lin = (in_coords - lo) @ stride
    out_lin = (out_coords - lo) @ stride
    off_lin = offs @ stride
    volume = int(ext.prod())
    pairs = []
    if volume <= DENSE_TABLE_LIMIT:
        table = np.full(volume, -1, dtype=np.int32)
        table[in_lin] = np.arange(n_in, dtype=np.int32)
        for d in off_lin:
            hit = np.take(table, out_lin + d)
            sel = np.nonzero(hit >= 0)[0]
            pairs.append((hit[sel].astype(np.int64), sel))
    else:
        order = np.argsort(in_lin, kind="stable")
        sorted_lin = in_lin[order]
        for d in off_lin:
            q = out_lin + d
            pos = np.minimum(np.searchsorted(sorted_lin, q), n_in - 1)
            sel = np.nonzero(sorted_lin[pos] == q)[0]
            pairs.append((order[pos[sel]], sel))
    return _with_table(pairs, n_in, n_out)


def down_map(child_keys: np.ndarray, parent_keys: np.ndarray) -> KernelMap:
    """Stride-2, size-2 map: child 2u+d feeds parent u through weight d."""
    parent = np.searchsorted(parent_keys, child_keys >> np.uint64(3))
    octant = (child_keys & np.uint64(7)).astype(np.int64)
    pairs = []
    for d in range(8):
        sel = np.nonzero(octant == d)[0]
        pairs.append((sel, parent[sel]))
    return KernelMap(tuple(pairs), len(child_keys), len(parent_keys))


def up_map(n_parents: int) -> KernelMap:
    """Transposed stride-2 map onto ``child_candidates`` order (8p + d)."""
    p = np.arange(n_parents, dtype=np.int64)
    return KernelMap(tuple((p, p * 8 + d) for d in range(8)), n_parents, 8 * n_parents)


# -- ops ---------------------------------------------------------------------


def conv(x: Var, weight: Var, bias: Var | None, kmap: KernelMap) -> Var:
    """``out[u] = sum_k x[in(k,u)] @ W[k] (+ b)`` over the map's pairs."""
    x, weight = as_var(x), as_var(weight)
    xv, w = x.value, weight.value
    if xv.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {xv.shape[1]}, kernel expects {w.shape[1]}")
    if w.shape[0] != kmap.volume:
        raise ValueError(f"kernel volume {w.shape[0]} does not match map volume {kmap.volume}")
    if xv.shape[0] != kmap.n_in:
        raise ValueError("input rows do not match kernel map")
    dtype = np.result_type(xv.dtype, w.dtype)
    if kmap.identity:
        out = xv @ w[0]
    elif kmap.table is not None:
        # gather every tap of every output row (absent taps hit a zero row), one matmul
        padded = np.concatenate([xv, np.zeros((1, xv.shape[1]), dtype=xv.dtype)])
        cols = np.take(padded, kmap.table, axis=0).reshape(kmap.n_out, -1)
        out = cols @ w.reshape(-1, w.shape[2])
    else:
        out = np.zeros((kmap.n_out, w.shape[2]), dtype=dtype)
        for k, (ii, oo) in enumerate(kmap.pairs):
            if len(ii):
                out[oo] += np.take(xv, ii, axis=0) @ w[k]
    if bias is not None:
        out = out + bias.value
    res = Var(out.astype(dtype, copy=False))
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def _backward(g):
        if x.requires_grad:
            if kmap.identity:
                x.accumulate(g @ w[0].T)
            elif kmap.table is not None:
                gcols = (g @ w.reshape(-1, w.shape[2]).T).reshape(kmap.n_out, kmap.volume, -1)
                gx = np.zeros_like(xv)
                for k, (ii, oo) in enumerate(kmap.pairs):
                    if len(ii):
                        gx[ii] += gcols[oo, k]
                x.accumulate(gx)
            else:
                gx = np.zeros_like(xv)
                for k, (ii, oo) in enumerate(kmap.pairs):
                    if len(ii):
                        gx[ii] += np.take(g, oo, axis=0) @ w[k].T
                x.accumulate(gx)
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for k, (ii, oo) in enumerate(kmap.pairs):
                if len(ii):
                    gw[k] = np.take(xv, ii, axis=0).T @ np.take(g, oo, axis=0)
            weight.accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))

    return record(res, inputs, _backward)


def relu(x: Var) -> Var:
    x = as_var(x)
    res = Var(np.maximum(x.value, 0))

    def _backward(g):
        x.accumulate(g * (res.value > 0))

    return record(res, [x], _backward)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Var) -> Var:
    x = as_var(x)
    s = _sigmoid(x.value)
    res = Var(s)

    def _backward(g):
        x.accumulate(g * s * (1 - s))

    return record(res, [x], _backward)


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    res = Var(a.value + b.value)

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return record(res, [a, b], _backward)


def scale(a: Var, c: float) -> Var:
    a = as_var(a)
    res = Var(a.value * c)

    def _backward(g):
        a.accumulate(g * c)

    return record(res, [a], _backward)


def concat(parts, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    res = Var(np.concatenate([p.value for p in parts], axis=axis))
    bounds = np.cumsum([0] + [p.value.shape[axis] for p in parts])

    def _backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return record(res, parts, _backward)


def rows(x: Var, idx: np.ndarray) -> Var:
    """Row gather ``x[idx]`` (``idx`` unique)."""
    x = as_var(x)
    idx = np.asarray(idx, dtype=np.int64)
    res = Var(x.value[idx])

    def _backward(g):
        gx = np.zeros_like(x.value)
        gx[idx] = g
        x.accumulate(gx)

    return record(res, [x], _backward)


def total(x: Var) -> Var:
    x = as_var(x)
    res = Var(np.asarray(x.value.sum(), dtype=x.value.dtype))

    def _backward(g):
        x.accumulate(np.broadcast_to(g, x.value.shape))

    return record(res, [x], _backward)


def add_noise(x: Var, noise: np.ndarray) -> Var:
    x = as_var(x)
    res = Var(x.value + noise.astype(x.value.dtype))

    def _backward(g):
        x.accumulate(g)

    return record(res, [x], _backward)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def bce_logits_bits(logits: Var, bits: np.ndarray) -> Var:
    """Binary cross-entropy in bits, summed, from pre-sigmoid logits."""
    logits = as_var(logits)
    z = logits.value.reshape(-1)
    b = np.asarray(bits, dtype=z.dtype).reshape(-1)
    # -log p(b) = softplus(-z) if b else softplus(z)
    val = np.sum(np.where(b > 0, softplus(-z), softplus(z))) / LN2
    res = Var(np.asarray(val, dtype=z.dtype))

    def _backward(g):
        s = _sigmoid(z)
        logits.accumulate((g * (s - b) / LN2).reshape(logits.value.shape))

    return record(res, [logits], _backward)


def factorized_bits(latent: Var, logits: Var, support: int) -> Var:
    """Bits of continuous latent values under a per-channel pmf over ``[-L, L]``.

    The pmf ``softmax(logits[c])`` is linearly interpolated between integer
    symbols, so the likelihood is continuous in the latent value and equals
    the pmf exactly at integers. Values beyond the support are clamped.
    """
    latent, logits = as_var(latent), as_var(logits)
    L = support
    lg = logits.value
    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    pmf = e / e.sum(axis=1, keepdims=True)
    v = latent.value
    inside = (v > -L) & (v < L)
    vc = np.clip(v, -L, L)
    lo = np.minimum(np.floor(vc), L - 1).astype(np.int64)
    t = vc - lo
    ch = np.broadcast_to(np.arange(v.shape[1]), v.shape)
    p_lo = pmf[ch, lo + L]
    p_hi = pmf[ch, lo + L + 1]
    p = (1 - t) * p_lo + t * p_hi
    val = -np.sum(np.log(p)) / LN2
    res = Var(np.asarray(val, dtype=v.dtype))

    def _backward(g):
        dp = -g / (p * LN2)
        if latent.requires_grad:
            latent.accumulate(dp * (p_hi - p_lo) * inside)
        if logits.requires_grad:
            gpmf = np.zeros_like(pmf)
            np.add.at(gpmf, (ch, lo + L), dp * (1 - t))
            np.add.at(gpmf, (ch, lo + L + 1), dp * t)
            inner = (gpmf * pmf).sum(axis=1, keepdims=True)
            logits.accumulate(pmf * (gpmf - inner))

    return record(res, [latent, logits], _backward)
