"""Parameter containers and the binary weight-file format.

File layout (all little-endian)::

    b"SDPC"  u32 version  u32 record_count
    record_count x { u16 path_len, path (utf-8), u8 ndim, ndim x u32 dim, float32 data }
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tape import Var

MAGIC = b"SDPC"
FORMAT_VERSION = 1
_KERNEL_SIZES = {1: 1, 8: 2, 27: 3, 125: 5, 343: 7, 729: 9}


class WeightFormatError(ValueError):
    pass


class WeightVersionError(WeightFormatError):
    pass


class MissingLayerError(KeyError):
    pass


@dataclass
class ConvKernel:
    """Weights ``[offset, in, out]`` with offsets in lexicographic order, optional bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[0] not in _KERNEL_SIZES:
            raise ValueError(f"bad kernel shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("kernel weights must be finite")

    @property
    def kernel_size(self) -> int:
        return _KERNEL_SIZES[self.weights.shape[0]]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, kernel_size: int, cin: int, cout: int, gain: float = 1.0):
        fan_in = kernel_size**3 * cin
        a = gain * np.sqrt(6.0 / fan_in)
        w = rng.uniform(-a, a, size=(kernel_size**3, cin, cout)).astype(np.float32)
        return cls(w, np.zeros(cout, dtype=np.float32))

    @classmethod
    def zeros(cls, kernel_size: int, cin: int, cout: int):
        return cls(np.zeros((kernel_size**3, cin, cout), np.float32), np.zeros(cout, np.float32))


@dataclass
class ModelWeights:
    kernels: dict[str, ConvKernel] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict[str, float] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def kernel(self, path: str) -> ConvKernel:
        try:
            return self.kernels[path]
        except KeyError:
            raise MissingLayerError(path) from None

    def tensor(self, path: str) -> np.ndarray:
        try:
            return self.tensors[path]
        except KeyError:
            raise MissingLayerError(path) from None

    def require(self, paths) -> None:
        missing = [p for p in paths if p not in self.kernels and p not in self.tensors]
        if missing:
            raise MissingLayerError(", ".join(missing))

    def to_bytes(self) -> bytes:
        records = [("meta." + k, np.array([self.config[k]], np.float32)) for k in sorted(self.config)]
        for path in sorted(self.kernels):
            k = self.kernels[path]
            records.append((path + ".weight", k.weights))
            if k.bias is not None:
                records.append((path + ".bias", k.bias))
        for path in sorted(self.tensors):
            records.append((path, self.tensors[path]))
        buf = bytearray(MAGIC)
        buf += struct.pack("<II", self.version, len(records))
        for path, arr in records:
            name = path.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf += struct.pack("<H", len(name)) + name
            buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
        buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if len(data) < 16 or data[:4] != MAGIC:
            raise WeightFormatError("not a weight file (bad magic)")
        body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise WeightVersionError(f"unsupported weight format version {version}")
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise WeightFormatError("checksum mismatch (truncated or corrupted weight file)")
        pos = 12
        raw: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", body, pos)
                pos += 2
                path = body[pos:pos + n].decode()
                pos += n
                (ndim,) = struct.unpack_from("<B", body, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", body, pos)
                pos += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                if pos + 4 * size > len(body):
                    raise WeightFormatError("truncated record")
                raw[path] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
                pos += 4 * size
        except struct.error as e:
            raise WeightFormatError(f"truncated weight file: {e}") from None
        if pos != len(body):
            raise WeightFormatError("trailing bytes after last record")
        config = {p[5:]: float(raw.pop(p)[0]) for p in [q for q in raw if q.startswith("meta.")]}
        w = cls(config=config, version=version)
        for path, arr in raw.items():
            if path.endswith(".weight"):
                base = path[:-7]
                w.kernels[base] = ConvKernel(arr, raw.get(base + ".bias"))
            elif path.endswith(".bias") and path[:-5] + ".weight" in raw:
                continue
            else:
                w.tensors[path] = arr
        return w

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()[:16]

    def params(self, trainable: bool = False, dtype=np.float32) -> "ParamSet":
        return ParamSet.from_weights(self, trainable, dtype)


def save_weights(w: ModelWeights, path) -> None:
    Path(path).write_bytes(w.to_bytes())


def load_weights(path) -> ModelWeights:
    return ModelWeights.from_bytes(Path(path).read_bytes())


class ParamSet:
    """Vars for every kernel/tensor of a :class:`ModelWeights`, looked up by path."""

    def __init__(self, vars_: dict[str, Var], config: dict[str, float]):
        self.vars = vars_
        self.config = config

    @classmethod
    def from_weights(cls, w: ModelWeights, trainable: bool, dtype=np.float32) -> "ParamSet":
        vs = {}
        for path, k in w.kernels.items():
            vs[path + ".weight"] = Var(k.weights.astype(dtype), trainable, path + ".weight")
            if k.bias is not None:
                vs[path + ".bias"] = Var(k.bias.astype(dtype), trainable, path + ".bias")
        for path, t in w.tensors.items():
            vs[path] = Var(t.astype(dtype), trainable, path)
        return cls(vs, dict(w.config))

    def conv(self, path: str) -> tuple[Var, Var | None]:
        try:
            return self.vars[path + ".weight"], self.vars.get(path + ".bias")
        except KeyError:
            raise MissingLayerError(path) from None

    def tensor(self, path: str) -> Var:
        try:
            return self.vars[path]
        except KeyError:
            raise MissingLayerError(path) from None

    def trainable(self) -> list[Var]:
        return [self.vars[k] for k in sorted(self.vars) if self.vars[k].requires_grad]

    def zero_grad(self) -> None:
        for v in self.vars.values():
            v.grad = None

    def write_back(self, w: ModelWeights) -> None:
        for path, k in w.kernels.items():
            k.weights = self.vars[path + ".weight"].value.astype(np.float32)
            if k.bias is not None:
                k.bias = self.vars[path + ".bias"].value.astype(np.float32)
        for path in w.tensors:
            w.tensors[path] = self.vars[path].value.astype(np.float32)
