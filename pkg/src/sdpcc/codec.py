"""Frame and sequence coding.

Lossless frames: the coarsest scale is sent as a raw occupancy grid, then
every scale up to ``N`` is coded with the 8-stage head. Lossy frames: the
geometry is coded losslessly up to scale ``m``, a quantized latent from the
encoder network is sent next to it, and the remaining ``N - m`` scales are
reconstructed with the 1-stage head keeping the ``k`` most probable children
(``k`` transmitted per scale).

P-frames condition every head on temporal priors extracted from the previous
reconstruction. The residual variant instead codes the latent minus a
prediction from the reference and runs all heads without temporal priors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import sopa
from .entropy import (
    PROB_ONE,
    DecodeError,
    FactorizedModel,
    RangeDecoder,
    RangeEncoder,
    decode_latents,
    encode_latents,
    quantize_prob,
)
from .nn import functional as F
from .nn.layers import Coords, Graph
from .nn.tape import Var
from .nn.weights import ModelWeights, ParamSet
from .sparse_tensor import SparseTensor3, morton_decode, scale_pyramid

STREAM_MAGIC = b"SDPB"
STREAM_VERSION = 1
BASE_SCALE = 3

LOSSLESS, LOSSY = "lossless", "lossy"
CONDITIONAL, RESIDUAL = "conditional", "residual"
FRAME_I, FRAME_P = "I", "P"

# model slots: 0 is the lossless model, 1..5 the lossy ones (default m, rate weight)
MODEL_PRESETS = {
    0: {"m": None, "lam": 0.0},
    1: {"m": 3, "lam": 0.1},
    2: {"m": 3, "lam": 1.0},
    3: {"m": 2, "lam": 0.1},
    4: {"m": 2, "lam": 1.0},
    5: {"m": 1, "lam": 1.0},
}


class StreamFormatError(DecodeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class EncodeConfig:
    mode: str = LOSSLESS
    m: int = 0
    model_id: int = 0
    inter_enabled: bool = True
    bit_depth: int = 10
    variant: str = CONDITIONAL

    def validate(self) -> None:
        if self.mode not in (LOSSLESS, LOSSY):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 1 <= self.bit_depth <= 16:
            raise ConfigError("bit depth must be in 1..16")
        if self.mode == LOSSY and not 1 <= self.m < self.bit_depth:
            raise ConfigError(f"lossy mode needs 1 <= m < N (got m={self.m}, N={self.bit_depth})")
        if self.variant not in (CONDITIONAL, RESIDUAL):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == RESIDUAL and self.mode != LOSSY:
            raise ConfigError("the residual variant exists only in lossy mode")
        if not 0 <= self.model_id <= 255:
            raise ConfigError("model id must fit in one byte")

    @property
    def base_scale(self) -> int:
        top = self.m if self.mode == LOSSY else self.bit_depth
        return min(BASE_SCALE, top)


@dataclass
class FrameHeader:
    frame_index: int
    frame_type: str
    point_count: int
    counts: list[int] = field(default_factory=list)  # occupied voxels per lossy scale m+1..N
    payload_lengths: list[int] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        b = struct.pack("<IBI", self.frame_index, 0 if self.frame_type == FRAME_I else 1, self.point_count)
        b += struct.pack("<B", len(self.counts)) + struct.pack(f"<{len(self.counts)}I", *self.counts)
        b += struct.pack("<B", len(self.payload_lengths))
        b += struct.pack(f"<{len(self.payload_lengths)}I", *self.payload_lengths)
        return b

    @classmethod
    def read(cls, buf: bytes, pos: int) -> tuple["FrameHeader", int]:
        try:
            idx, ftype, count = struct.unpack_from("<IBI", buf, pos)
            pos += 9
            (nc,) = struct.unpack_from("<B", buf, pos)
            counts = list(struct.unpack_from(f"<{nc}I", buf, pos + 1))
            pos += 1 + 4 * nc
            (npl,) = struct.unpack_from("<B", buf, pos)
            lengths = list(struct.unpack_from(f"<{npl}I", buf, pos + 1))
            pos += 1 + 4 * npl
        except struct.error:
            raise StreamFormatError("truncated frame header") from None
        if ftype not in (0, 1):
            raise StreamFormatError(f"bad frame type {ftype}")
        return cls(idx, FRAME_I if ftype == 0 else FRAME_P, count, counts, lengths), pos


@dataclass
class EncodedFrame:
    header: FrameHeader
    payloads: list[bytes]
    recon: SparseTensor3


@dataclass
class Bitstream:
    config: EncodeConfig
    weight_digest: bytes
    frames: list[tuple[FrameHeader, list[bytes]]] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        c = self.config
        buf = bytearray(STREAM_MAGIC)
        buf += struct.pack(
            "<BBBBBBB",
            STREAM_VERSION,
            0 if c.mode == LOSSLESS else 1,
            c.m,
            c.model_id,
            int(c.inter_enabled),
            0 if c.variant == CONDITIONAL else 1,
            c.bit_depth,
        )
        buf += self.weight_digest.ljust(16, b"\0")[:16]
        buf += struct.pack("<I", len(self.frames))
        for header, payloads in self.frames:
            header.payload_lengths = [len(p) for p in payloads]
            buf += header.to_bytes()
            for p in payloads:
                buf += p
        buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < 35 or data[:4] != STREAM_MAGIC:
            raise StreamFormatError("not a point-cloud stream (bad magic)")
        body = data[:-4]
        if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", data[-4:])[0]:
            raise StreamFormatError("stream checksum mismatch")
        version, mode, m, model_id, inter, variant, depth = struct.unpack_from("<BBBBBBB", body, 4)
        if version != STREAM_VERSION:
            raise StreamFormatError(f"unsupported stream version {version}")
        if mode > 1 or variant > 1:
            raise StreamFormatError("bad config block")
        config = EncodeConfig(
            mode=LOSSLESS if mode == 0 else LOSSY,
            m=m,
            model_id=model_id,
            inter_enabled=bool(inter),
            bit_depth=depth,
            variant=CONDITIONAL if variant == 0 else RESIDUAL,
        )
        digest = bytes(body[11:27])
        (n_frames,) = struct.unpack_from("<I", body, 27)
        pos = 31
        frames = []
        for _ in range(n_frames):
            header, pos = FrameHeader.read(body, pos)
            payloads = []
            for n in header.payload_lengths:
                if pos + n > len(body):
                    raise StreamFormatError("truncated payload")
                payloads.append(bytes(body[pos:pos + n]))
                pos += n
            frames.append((header, payloads))
        if pos != len(body):
            raise StreamFormatError("trailing bytes in stream")
        return cls(config, digest, frames)

    def header_bytes(self) -> int:
        return len(self.to_bytes()) - sum(len(p) for _, ps in self.frames for p in ps)


# -- shared pieces ---------------------------------------------------------------


def _params(weights) -> ParamSet:
    return weights if isinstance(weights, ParamSet) else sopa.as_params(weights)


def _encode_base(enc: RangeEncoder, keys: np.ndarray, scale: int) -> None:
    grid = np.zeros(1 << (3 * scale), dtype=bool)
    grid[keys.astype(np.int64)] = True
    enc.encode_bits(np.full(len(grid), PROB_ONE // 2), grid)


def _decode_base(dec: RangeDecoder, scale: int) -> np.ndarray:
    grid = dec.decode_bits(np.full(1 << (3 * scale), PROB_ONE // 2))
    return np.nonzero(grid)[0].astype(np.uint64)


class _StageEncoder:
    def __init__(self, enc: RangeEncoder, truth: dict[int, np.ndarray], trace):
        self.enc, self.truth, self.trace = enc, truth, trace

    def __call__(self, scale, stage, pred):
        q = quantize_prob(pred.probs)
        bits = _member(pred.keys, self.truth[scale + 1])
        self.enc.encode_bits(q, bits)
        if self.trace is not None:
            self.trace.append((scale, stage, q))
        return bits


class _StageDecoder:
    def __init__(self, dec: RangeDecoder, trace):
        self.dec, self.trace = dec, trace

    def __call__(self, scale, stage, pred):
        q = quantize_prob(pred.probs)
        if self.trace is not None:
            self.trace.append((scale, stage, q))
        return self.dec.decode_bits(q)


def _member(keys: np.ndarray, sorted_truth: np.ndarray) -> np.ndarray:
    if len(sorted_truth) == 0:
        return np.zeros(len(keys), dtype=bool)
    pos = np.minimum(np.searchsorted(sorted_truth, keys), len(sorted_truth) - 1)
    return sorted_truth[pos] == keys


def _code_lossless_scales(params, keys, lo, hi, ctx, stage_io) -> np.ndarray:
    """Run the 8-stage head from scale ``lo`` up to ``hi``; returns keys at ``hi``."""
    for s in range(lo, hi):
        at = Coords(keys, s)
        bundle = sopa.bundle_for(params, sopa.spatial_prior(params, at), ctx)
        occupied = []

        def cb(g, pred, s=s):
            mask = np.asarray(stage_io(s, g, pred), dtype=bool)
            occupied.append(pred.keys[mask])
            return mask

        sopa.sopa_8stage_graph(params, bundle, cb)
        keys = np.sort(np.concatenate(occupied))
    return keys


def _check_frame(frame: SparseTensor3, depth: int) -> None:
    if frame.bit_depth != depth:
        raise ConfigError(f"frame bit depth {frame.bit_depth} does not match configured {depth}")


# -- lossless --------------------------------------------------------------------


def encode_frame_lossless(frame: SparseTensor3, ref, weights, coder: RangeEncoder | None = None,
                          frame_index: int = 0, trace=None) -> EncodedFrame:
    """Code ``frame`` exactly. ``ref`` is a :class:`~sdpcc.sopa.FrameContext` for P-frames."""
    params = _params(weights)
    N = frame.bit_depth
    lo = min(BASE_SCALE, N)
    enc = coder or RangeEncoder()
    header = FrameHeader(frame_index, FRAME_P if ref is not None else FRAME_I, len(frame))
    if len(frame):
        pyr = {s: np.sort(np.unique(frame.keys >> np.uint64(3 * (N - s)))) for s in range(lo, N + 1)}
        _encode_base(enc, pyr[lo], lo)
        _code_lossless_scales(params, pyr[lo], lo, N, ref, _StageEncoder(enc, pyr, trace))
    payload = enc.finish() if len(frame) else b""
    header.payload_lengths = [len(payload)]
    return EncodedFrame(header, [payload], frame)


def decode_frame_lossless(header: FrameHeader, payload: bytes, ref, weights, bit_depth: int,
                          trace=None) -> SparseTensor3:
    params = _params(weights)
    N = bit_depth
    lo = min(BASE_SCALE, N)
    if header.point_count == 0:
        return SparseTensor3.occupancy(np.zeros((0, 3), np.int64), N)
    dec = RangeDecoder(payload)
    keys = _decode_base(dec, lo)
    keys = _code_lossless_scales(params, keys, lo, N, ref, _StageDecoder(dec, trace))
    if len(keys) != header.point_count:
        raise DecodeError(f"decoded {len(keys)} points, header declares {header.point_count}")
    return SparseTensor3.occupancy(morton_decode(keys), N)


# -- lossy -----------------------------------------------------------------------


def _latent_model(params: ParamSet, variant: str) -> FactorizedModel:
    name = "residual.logits" if variant == RESIDUAL else "entropy.logits"
    return FactorizedModel(params.tensor(name).value, int(params.config["support"]))


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(x.astype(np.float64) + 0.5).astype(np.int64)


def residual_prediction(params: ParamSet, ref_recon: SparseTensor3, target: Coords) -> np.ndarray:
    """Reference latent carried onto the current scale-m coordinates, rounded."""
    ref_at = Coords(ref_recon.keys, ref_recon.bit_depth, ref_recon.coords)
    ref_lat = sopa.encode_latent_graph(params, ref_at, target.bit_depth)
    return _round(ref_lat.conv_to("residual.predictor", target).x.value)


def lossy_reconstruct(params: ParamSet, keys_m: np.ndarray, m: int, latent, ctx, counts) -> np.ndarray:
    """Decoder-side upsampling from scale ``m``; returns the full-scale keys."""
    at = Coords(keys_m, m)
    sp = sopa.spatial_prior(params, at)
    lat = Graph(at, Var(np.asarray(latent, dtype=np.float32)), params).conv("sopa1.latent")
    spatial = Graph(at, F.add(sp.x, lat.x), params)
    for i, k in enumerate(counts):
        bundle = sopa.bundle_for(params, spatial, ctx)
        pred, trunk = sopa.sopa_1stage_graph(params, bundle)
        keep = top_k(pred, k)
        spatial = Graph(trunk.at.subset(keep), F.rows(trunk.x, keep), params)
    return spatial.at.keys


def top_k(pred: sopa.OccupancyPrediction, k: int) -> np.ndarray:
    """Indices (ascending, so Morton ordered) of the ``k`` most probable children.

    Ranked by logit, which orders like the unclamped probability; equal
    scores go to the lower Morton key.
    """
    if k > len(pred):
        raise DecodeError(f"cannot keep {k} of {len(pred)} candidates")
    score = pred.logits.value.reshape(-1).astype(np.float64)
    order = np.lexsort((pred.keys, -score))
    return np.sort(order[:k])


def encode_frame_lossy(frame: SparseTensor3, ref, weights, config: EncodeConfig, coder=None,
                       frame_index: int = 0, ref_recon: SparseTensor3 | None = None,
                       trace=None) -> EncodedFrame:
    """Lossy frame. ``ref`` (context) drives conditional coding; ``ref_recon``
    is needed only by the residual variant."""
    config.validate()
    params = _params(weights)
    N, m = config.bit_depth, config.m
    _check_frame(frame, N)
    lo = config.base_scale
    residual = config.variant == RESIDUAL
    is_p = (ref_recon if residual else ref) is not None
    header = FrameHeader(frame_index, FRAME_P if is_p else FRAME_I, len(frame))
    if len(frame) == 0:
        header.payload_lengths = [0, 0]
        return EncodedFrame(header, [b"", b""], frame)
    ctx = None if residual else ref
    pyr = {s: np.unique(frame.keys >> np.uint64(3 * (N - s))) for s in range(lo, N + 1)}
    header.counts = [len(pyr[s]) for s in range(m + 1, N + 1)]

    genc = coder or RangeEncoder()
    _encode_base(genc, pyr[lo], lo)
    _code_lossless_scales(params, pyr[lo], lo, m, ctx, _StageEncoder(genc, pyr, trace))

    at_m = Coords(pyr[m], m)
    full = Coords(frame.keys, N, frame.coords)
    latent = sopa.encode_latent_graph(params, full, m).x.value
    symbols = _round(latent)
    latent_hat = symbols
    if residual and ref_recon is not None:
        pred = residual_prediction(params, ref_recon, at_m)
        symbols = symbols - pred
    lenc = RangeEncoder()
    encode_latents(lenc, symbols, _latent_model(params, config.variant))

    keys = lossy_reconstruct(params, pyr[m], m, latent_hat, ctx, header.counts)
    recon = SparseTensor3.occupancy(morton_decode(keys), N)
    payloads = [genc.finish(), lenc.finish()]
    header.payload_lengths = [len(p) for p in payloads]
    return EncodedFrame(header, payloads, recon)


def decode_frame_lossy(header: FrameHeader, payloads: list[bytes], ref, weights, config: EncodeConfig,
                       ref_recon: SparseTensor3 | None = None, trace=None) -> SparseTensor3:
    params = _params(weights)
    N, m = config.bit_depth, config.m
    lo = config.base_scale
    residual = config.variant == RESIDUAL
    if header.point_count == 0:
        return SparseTensor3.occupancy(np.zeros((0, 3), np.int64), N)
    if len(payloads) != 2 or len(header.counts) != N - m:
        raise StreamFormatError("lossy frame needs geometry and latent payloads and N-m counts")
    ctx = None if residual else ref
    gdec = RangeDecoder(payloads[0])
    keys = _decode_base(gdec, lo)
    keys_m = _code_lossless_scales(params, keys, lo, m, ctx, _StageDecoder(gdec, trace))
    ldec = RangeDecoder(payloads[1])
    symbols = decode_latents(ldec, len(keys_m), _latent_model(params, config.variant))
    if residual and header.frame_type == FRAME_P:
        if ref_recon is None:
            raise DecodeError("residual P-frame needs the reference reconstruction")
        symbols = symbols + residual_prediction(params, ref_recon, Coords(keys_m, m))
    keys = lossy_reconstruct(params, keys_m, m, symbols, ctx, header.counts)
    if header.counts and len(keys) != header.counts[-1]:
        raise DecodeError("reconstructed point count mismatch")
    return SparseTensor3.occupancy(morton_decode(keys), N)


def encode_frame_residual_baseline(frame, ref_recon, weights, config: EncodeConfig, frame_index: int = 0):
    """Lossy coding of the latent residual against the reference (no temporal priors)."""
    cfg = EncodeConfig(**{**config.__dict__, "variant": RESIDUAL})
    return encode_frame_lossy(frame, None, weights, cfg, frame_index=frame_index, ref_recon=ref_recon)


# -- sequences --------------------------------------------------------------------


def _context(params, recon: SparseTensor3, lowest: int):
    return sopa.extract_pyramid_graph(params, Coords(recon.keys, recon.bit_depth, recon.coords), lowest)


def encode_sequence(frames, weights: ModelWeights, config: EncodeConfig, trace=None) -> Bitstream:
    """First frame intra, later frames predicted from the previous reconstruction."""
    config.validate()
    if not frames:
        raise ConfigError("need at least one frame")
    params = _params(weights)
    stream = Bitstream(config, weights.digest() if isinstance(weights, ModelWeights) else b"")
    prev: SparseTensor3 | None = None
    for t, frame in enumerate(frames):
        _check_frame(frame, config.bit_depth)
        use_ref = config.inter_enabled and prev is not None and len(prev) > 0
        if config.mode == LOSSLESS:
            ctx = _context(params, prev, config.base_scale) if use_ref else None
            ef = encode_frame_lossless(frame, ctx, params, frame_index=t, trace=trace)
        elif config.variant == RESIDUAL:
            ef = encode_frame_lossy(frame, None, params, config, frame_index=t,
                                    ref_recon=prev if use_ref else None, trace=trace)
        else:
            ctx = _context(params, prev, config.base_scale) if use_ref else None
            ef = encode_frame_lossy(frame, ctx, params, config, frame_index=t, trace=trace)
        stream.frames.append((ef.header, ef.payloads))
        prev = ef.recon
    return stream


def decode_sequence(stream: Bitstream | bytes, weights: ModelWeights, trace=None,
                    check_digest: bool = True) -> list[SparseTensor3]:
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.from_bytes(stream)
    config = stream.config
    if check_digest and isinstance(weights, ModelWeights) and stream.weight_digest != weights.digest():
        raise StreamFormatError("stream was encoded with different weights (digest mismatch)")
    params = _params(weights)
    out = []
    prev = None
    for t, (header, payloads) in enumerate(stream.frames):
        if header.frame_index != t:
            raise StreamFormatError(f"frame {t} carries index {header.frame_index}")
        is_p = header.frame_type == FRAME_P
        if is_p and (prev is None or not config.inter_enabled):
            raise StreamFormatError(f"P-frame {t} without a usable reference")
        if config.mode == LOSSLESS:
            ctx = _context(params, prev, config.base_scale) if is_p else None
            if len(payloads) != 1:
                raise StreamFormatError("lossless frame needs exactly one payload")
            frame = decode_frame_lossless(header, payloads[0], ctx, params, config.bit_depth, trace=trace)
        elif config.variant == RESIDUAL:
            frame = decode_frame_lossy(header, payloads, None, params, config,
                                       ref_recon=prev if is_p else None, trace=trace)
        else:
            ctx = _context(params, prev, config.base_scale) if is_p else None
            frame = decode_frame_lossy(header, payloads, ctx, params, config, trace=trace)
        out.append(frame)
        prev = frame
    return out
