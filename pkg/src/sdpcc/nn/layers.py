"""Sparse convolution layers on :class:`SparseTensor3`.

Two levels are exposed. The tensor-level functions (``sparse_conv``,
``down_conv_s2``, ``up_conv_s2``, ``irn_forward``, ``relu``, ``sigmoid``) take
and return :class:`SparseTensor3` with plain kernels and are what callers
outside the networks use. Networks are written against :class:`Graph`,
which carries a coordinate set together with a differentiable feature
:class:`Var` and reuses kernel maps between layers on the same coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..sparse_tensor import SparseTensor3, child_candidate_keys, morton_decode, morton_encode
from . import functional as F
from .tape import Var
from .weights import ConvKernel, ParamSet


def _kernel_vars(kernel: ConvKernel, dtype):
    w = Var(kernel.weights.astype(dtype, copy=False))
    b = Var(kernel.bias.astype(dtype, copy=False)) if kernel.bias is not None else None
    return w, b


def sparse_conv(input: SparseTensor3, kernel: ConvKernel, out_coords) -> SparseTensor3:
    """Convolution on target coordinates with a centred odd-sized kernel.

    Every output coordinate gets a row, even with no input neighbour (the row
    is then the bias).
    """
    if kernel.in_channels != input.channels:
        raise ValueError(f"channel mismatch: tensor has {input.channels}, kernel expects {kernel.in_channels}")
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    kmap = F.neighbor_map(input.keys, out_coords, kernel.kernel_size, input.coords)
    w, b = _kernel_vars(kernel, input.feats.dtype)
    out = F.conv(Var(input.feats), w, b, kmap)
    return SparseTensor3.from_sorted(out_coords, out.value, input.bit_depth)


def down_conv_s2(input: SparseTensor3, kernel: ConvKernel) -> SparseTensor3:
    if kernel.kernel_size != 2:
        raise ValueError("down_conv_s2 needs a size-2 kernel")
    if kernel.in_channels != input.channels:
        raise ValueError("channel mismatch")
    parent_keys = np.unique(input.keys >> np.uint64(3))
    kmap = F.down_map(input.keys, parent_keys)
    w, b = _kernel_vars(kernel, input.feats.dtype)
    out = F.conv(Var(input.feats), w, b, kmap)
    return SparseTensor3(morton_decode(parent_keys), out.value, max(input.bit_depth - 1, 1), parent_keys)


def up_conv_s2(input: SparseTensor3, kernel: ConvKernel) -> SparseTensor3:
    if kernel.kernel_size != 2:
        raise ValueError("up_conv_s2 needs a size-2 kernel")
    if kernel.in_channels != input.channels:
        raise ValueError("channel mismatch")
    child_keys = child_candidate_keys(input.keys)
    w, b = _kernel_vars(kernel, input.feats.dtype)
    out = F.conv(Var(input.feats), w, b, F.up_map(len(input)))
    return SparseTensor3(morton_decode(child_keys), out.value, input.bit_depth + 1, child_keys)


def relu(input: SparseTensor3) -> SparseTensor3:
    return input.with_feats(np.maximum(input.feats, 0))


def sigmoid(input: SparseTensor3) -> SparseTensor3:
    return input.with_feats(F.sigmoid(Var(input.feats)).value)


# Branch layout of an Inception-ResNet block of width C:
#   a: 1^3 C->C/4
#   b: 1^3 C->C/4, relu, 3^3 C/4->C/4
#   c: 1^3 C->C/4, relu, 3^3 C/4->C/4, relu, 3^3 C/4->C/2
# out = x + concat(a, b, c)
IRN_LAYERS = (("a", 1, 1, 4), ("b1", 1, 1, 4), ("b2", 3, 4, 4), ("c1", 1, 1, 4), ("c2", 3, 4, 4), ("c3", 3, 4, 2))


def irn_kernels(rng: np.random.Generator, width: int, prefix: str) -> dict[str, ConvKernel]:
    if width % 4:
        raise ValueError("IRN width must be divisible by 4")
    out = {}
    for name, k, cin_div, cout_div in IRN_LAYERS:
        cin = width // cin_div
        cout = width // cout_div
        out[f"{prefix}.{name}"] = ConvKernel.init(rng, k, cin, cout)
    return out


def irn_forward(input: SparseTensor3, kernels: dict[str, ConvKernel]) -> SparseTensor3:
    """One residual Inception block; ``kernels`` keyed by branch name (a, b1, ...)."""
    width = kernels["a"].in_channels
    if input.channels != width:
        raise ValueError(f"IRN block width {width} does not match input channels {input.channels}")
    params = ParamSet({}, {})
    for name, k in kernels.items():
        w, b = _kernel_vars(k, input.feats.dtype)
        params.vars[f"blk.{name}.weight"] = w
        if b is not None:
            params.vars[f"blk.{name}.bias"] = b
    g = Graph.from_tensor(input, params)
    return g.irn("blk").to_tensor()


@dataclass
class Coords:
    """A sorted coordinate set with a cache of the kernel maps built on it."""

    keys: np.ndarray
    bit_depth: int
    _coords: np.ndarray | None = None
    _maps: dict = field(default_factory=dict)

    @classmethod
    def from_coords(cls, coords, bit_depth):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return cls(morton_encode(coords), bit_depth, coords)

    @property
    def coords(self) -> np.ndarray:
        if self._coords is None:
            self._coords = morton_decode(self.keys)
        return self._coords

    def __len__(self):
        return len(self.keys)

    def same_map(self, kernel_size: int) -> F.KernelMap:
        if kernel_size not in self._maps:
            if kernel_size == 1:
                self._maps[1] = F.identity_map(len(self))
            else:
                self._maps[kernel_size] = F.neighbor_map(self.keys, self.coords, kernel_size, self.coords)
        return self._maps[kernel_size]

    def children(self) -> "Coords":
        return Coords(child_candidate_keys(self.keys), self.bit_depth + 1)

    def parents(self) -> "Coords":
        return Coords(np.unique(self.keys >> np.uint64(3)), self.bit_depth - 1)

    def subset(self, idx) -> "Coords":
        return Coords(self.keys[idx], self.bit_depth)


@dataclass
class Graph:
    """Features (a Var) living on a :class:`Coords`, plus the parameters to apply."""

    at: Coords
    x: Var
    params: ParamSet

    @classmethod
    def from_tensor(cls, t: SparseTensor3, params: ParamSet):
        return cls(Coords(t.keys, t.bit_depth, t.coords), Var(t.feats), params)

    def to_tensor(self) -> SparseTensor3:
        return SparseTensor3(self.at.coords, self.x.value, self.at.bit_depth, self.at.keys)

    def _with(self, at, x):
        return Graph(at, x, self.params)

    def conv(self, path: str, kernel_size: int | None = None) -> "Graph":
        w, b = self.params.conv(path)
        k = kernel_size or {1: 1, 27: 3, 125: 5, 343: 7, 729: 9}[w.shape[0]]
        return self._with(self.at, F.conv(self.x, w, b, self.at.same_map(k)))

    def conv_to(self, path: str, target: Coords) -> "Graph":
        """Convolution evaluated on a caller-chosen output coordinate set."""
        w, b = self.params.conv(path)
        k = {1: 1, 27: 3, 125: 5, 343: 7, 729: 9}[w.shape[0]]
        kmap = F.neighbor_map(self.at.keys, target.coords, k, self.at.coords)
        return self._with(target, F.conv(self.x, w, b, kmap))

    def down(self, path: str) -> "Graph":
        w, b = self.params.conv(path)
        parents = self.at.parents()
        return self._with(parents, F.conv(self.x, w, b, F.down_map(self.at.keys, parents.keys)))

    def up(self, path: str) -> "Graph":
        w, b = self.params.conv(path)
        return self._with(self.at.children(), F.conv(self.x, w, b, F.up_map(len(self.at))))

    def relu(self) -> "Graph":
        return self._with(self.at, F.relu(self.x))

    def irn(self, prefix: str) -> "Graph":
        a = self.conv(f"{prefix}.a")
        b = self.conv(f"{prefix}.b1").relu().conv(f"{prefix}.b2")
        c = self.conv(f"{prefix}.c1").relu().conv(f"{prefix}.c2").relu().conv(f"{prefix}.c3")
        branches = F.concat([a.x, b.x, c.x])
        return self._with(self.at, F.add(self.x, branches))

    def irn_stack(self, prefix: str, count: int) -> "Graph":
        g = self
        for i in range(count):
            g = g.irn(f"{prefix}.irn{i}")
        return g
