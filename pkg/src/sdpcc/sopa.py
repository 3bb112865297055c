"""Occupancy-probability networks.

* Extractor: reference reconstruction -> per-scale temporal feature pyramid.
* Predictor: one 9^3 convolution evaluated on the current frame's coordinates.
* 1-stage head: probabilities for all 8 children of every voxel at once.
* 8-stage head: children split by octant parity and predicted group by group,
  each group seeing the occupancy already decided in earlier groups.

Network code works on :class:`~sdpcc.nn.Graph` so the same functions serve
inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import functional as F
from .nn.layers import Coords, Graph, irn_kernels
from .nn.tape import Var
from .nn.weights import ConvKernel, ModelWeights, ParamSet
from .sparse_tensor import SparseTensor3, morton_encode

P_MIN = 2.0**-15
LAYOUT_VERSION = 1


class ProtocolError(RuntimeError):
    pass


class PriorAlignmentError(ValueError):
    pass


# -- model definition ----------------------------------------------------------


def init_weights(
    width: int = 32,
    latent_channels: int = 8,
    support: int = 32,
    irn_blocks: int = 3,
    seed: int = 0,
) -> ModelWeights:
    """Seeded He-uniform initialisation of every network the codec uses."""
    rng = np.random.default_rng(seed)
    C, Cl = width, latent_channels
    k: dict[str, ConvKernel] = {}

    def irns(prefix):
        for i in range(irn_blocks):
            k.update(irn_kernels(rng, C, f"{prefix}.irn{i}"))

    k["spatial.lift"] = ConvKernel.init(rng, 3, 1, C)
    for net in ("extractor", "encoder"):
        k[f"{net}.down0"] = ConvKernel.init(rng, 2, 1, C)
        k[f"{net}.down"] = ConvKernel.init(rng, 2, C, C)
        irns(net)
    k["encoder.latent"] = ConvKernel.init(rng, 3, C, Cl)
    k["predictor"] = ConvKernel.init(rng, 9, C, C, gain=0.5)
    for head in ("sopa8", "sopa1"):
        k[f"{head}.fuse"] = ConvKernel.init(rng, 3, 2 * C, C)
        irns(f"{head}.pre")
        k[f"{head}.up"] = ConvKernel.init(rng, 2, C, C)
        irns(f"{head}.post")
        k[f"{head}.head1"] = ConvKernel.init(rng, 1, C, C)
        k[f"{head}.head2"] = ConvKernel.init(rng, 1, C, 1)
    k["sopa8.stage"] = ConvKernel.init(rng, 3, 1, C)
    k["sopa1.latent"] = ConvKernel.init(rng, 1, Cl, C)
    # residual baseline predictor starts as the identity (centre tap)
    res = ConvKernel.zeros(9, Cl, Cl)
    res.weights[364] = np.eye(Cl, dtype=np.float32)
    k["residual.predictor"] = res
    tensors = {
        "entropy.logits": np.zeros((Cl, 2 * support + 1), np.float32),
        "residual.logits": np.zeros((Cl, 2 * support + 1), np.float32),
    }
    config = {
        "layout": float(LAYOUT_VERSION),
        "width": float(C),
        "latent_channels": float(Cl),
        "support": float(support),
        "irn_blocks": float(irn_blocks),
    }
    return ModelWeights(k, tensors, config)


def as_params(weights) -> ParamSet:
    if isinstance(weights, ParamSet):
        return weights
    return ParamSet.from_weights(weights, trainable=False)


def _cfg(params: ParamSet, key: str) -> int:
    return int(params.config[key])


def ones(coords: Coords, dtype=np.float32) -> Var:
    return Var(np.ones((len(coords), 1), dtype=dtype))


def zeros_like_width(coords: Coords, width: int, dtype=np.float32) -> Var:
    return Var(np.zeros((len(coords), width), dtype=dtype))


# -- data carriers -------------------------------------------------------------


@dataclass
class FrameContext:
    """Temporal features of a reference frame, one level per scale."""

    levels: dict[int, Graph]

    def scales(self) -> list[int]:
        return sorted(self.levels, reverse=True)

    def tensor(self, scale: int) -> SparseTensor3:
        return self.levels[scale].to_tensor()


@dataclass
class PriorBundle:
    spatial: Graph
    temporal: Graph | None = None

    def __post_init__(self):
        if self.temporal is not None and not np.array_equal(self.spatial.at.keys, self.temporal.at.keys):
            raise PriorAlignmentError("temporal prior must live on the spatial prior's coordinates")

    def merged(self) -> Graph:
        width = self.spatial.x.shape[1]
        if self.temporal is None:
            t = zeros_like_width(self.spatial.at, width, self.spatial.x.value.dtype)
        else:
            t = self.temporal.x
        return Graph(self.spatial.at, F.concat([self.spatial.x, t]), self.spatial.params)


@dataclass
class OccupancyPrediction:
    keys: np.ndarray
    probs: np.ndarray
    bit_depth: int
    logits: Var | None = None

    @property
    def coords(self) -> np.ndarray:
        from .sparse_tensor import morton_decode

        return morton_decode(self.keys)

    def __len__(self):
        return len(self.keys)


def _probabilities(logits: Var) -> np.ndarray:
    p = F.sigmoid(Var(logits.value)).value.reshape(-1)
    return np.clip(p, P_MIN, 1 - P_MIN)


# -- feature networks ------------------------------------------------------------


def _downscale_chain(params: ParamSet, net: str, coords: Coords, steps: int, dtype=np.float32) -> dict[int, Graph]:
    """``steps`` (down_conv + relu + IRN stack) applications from occupancy."""
    n_irn = _cfg(params, "irn_blocks")
    g = Graph(coords, ones(coords, dtype), params)
    out = {}
    for i in range(steps):
        g = g.down(f"{net}.down0" if i == 0 else f"{net}.down").relu().irn_stack(net, n_irn)
        out[g.at.bit_depth] = g
    return out


def extract_pyramid_graph(params: ParamSet, recon: Coords, lowest: int, dtype=np.float32) -> FrameContext:
    steps = max(recon.bit_depth - lowest, 0)
    return FrameContext(_downscale_chain(params, "extractor", recon, steps, dtype))


def extract_pyramid(recon: SparseTensor3, weights, lowest: int = 3) -> FrameContext:
    """Temporal priors for scales ``N-1`` down to ``lowest`` from a reconstruction."""
    params = as_params(weights)
    at = Coords(recon.keys, recon.bit_depth, recon.coords)
    return extract_pyramid_graph(params, at, lowest, recon.feats.dtype)


def predictor_graph(params: ParamSet, ref: Graph, target: Coords) -> Graph:
    return ref.conv_to("predictor", target)


def predictor_transfer(ref_feats: SparseTensor3, target_coords, weights) -> SparseTensor3:
    """Map reference features onto current-frame coordinates with a 9^3 kernel."""
    params = as_params(weights)
    target = Coords.from_coords(target_coords, ref_feats.bit_depth)
    keys = target.keys
    if len(keys) > 1 and np.any(keys[1:] <= keys[:-1]):
        raise ValueError("target coordinates must be Morton sorted and unique")
    ref = Graph(Coords(ref_feats.keys, ref_feats.bit_depth, ref_feats.coords), Var(ref_feats.feats), params)
    return predictor_graph(params, ref, target).to_tensor()


def spatial_prior(params: ParamSet, coords: Coords, dtype=np.float32) -> Graph:
    return Graph(coords, ones(coords, dtype), params).conv("spatial.lift").relu()


def bundle_for(params: ParamSet, spatial: Graph, context: FrameContext | None) -> PriorBundle:
    if context is None:
        return PriorBundle(spatial)
    s = spatial.at.bit_depth
    ref = context.levels.get(s)
    if ref is None:
        raise KeyError(f"reference context has no scale {s}")
    return PriorBundle(spatial, predictor_graph(params, ref, spatial.at))


def encode_latent_graph(params: ParamSet, coords: Coords, target_scale: int, dtype=np.float32) -> Graph:
    """Encoder: full-resolution occupancy -> latent features at ``target_scale``."""
    steps = coords.bit_depth - target_scale
    if steps < 1:
        raise ValueError("encoder needs at least one downscaling step")
    chain = _downscale_chain(params, "encoder", coords, steps, dtype)
    return chain[target_scale].conv("encoder.latent")


# -- SOPA heads ------------------------------------------------------------------


def _trunk(params: ParamSet, head: str, bundle: PriorBundle) -> Graph:
    n_irn = _cfg(params, "irn_blocks")
    g = bundle.merged().conv(f"{head}.fuse").relu().irn_stack(f"{head}.pre", n_irn)
    return g.up(f"{head}.up").relu().irn_stack(f"{head}.post", n_irn)


def _head(params: ParamSet, head: str, g: Graph) -> Var:
    return g.relu().conv(f"{head}.head1").relu().conv(f"{head}.head2").x


def sopa_1stage_graph(params: ParamSet, bundle: PriorBundle) -> tuple[OccupancyPrediction, Graph]:
    """Probabilities for all children plus the child features they came from."""
    trunk = _trunk(params, "sopa1", bundle)
    logits = _head(params, "sopa1", trunk)
    pred = OccupancyPrediction(trunk.at.keys, _probabilities(logits), trunk.at.bit_depth, logits)
    return pred, trunk


def sopa_1stage(prior: PriorBundle, weights) -> OccupancyPrediction:
    return sopa_1stage_graph(as_params(weights) if not isinstance(weights, ParamSet) else weights, prior)[0]


StageCallback = Callable[[int, OccupancyPrediction], np.ndarray]


def sopa_8stage_graph(params: ParamSet, bundle: PriorBundle, callback: StageCallback) -> list[OccupancyPrediction]:
    """Stage ``g`` predicts the children with octant index ``g``.

    ``callback(g, prediction)`` must return the occupied coordinates among that
    stage's candidates; they become known context for later stages.
    """
    trunk = _trunk(params, "sopa8", bundle)
    n_par = len(bundle.spatial.at)
    child_bits = trunk.at.bit_depth
    dtype = trunk.x.value.dtype
    decided: list[np.ndarray] = []
    out = []
    for g in range(8):
        idx = np.arange(n_par, dtype=np.int64) * 8 + g
        stage_at = trunk.at.subset(idx)
        feats = F.rows(trunk.x, idx)
        known_keys = np.sort(np.concatenate(decided)) if decided else np.zeros(0, np.uint64)
        known = Coords(known_keys, child_bits)
        lift = Graph(known, ones(known, dtype), params).conv_to("sopa8.stage", stage_at)
        logits = _head(params, "sopa8", Graph(stage_at, F.add(feats, lift.x), params))
        pred = OccupancyPrediction(stage_at.keys, _probabilities(logits), child_bits, logits)
        out.append(pred)
        occ = callback(g, pred)
        occ_keys = _validate_stage_answer(occ, pred)
        decided.append(occ_keys)
    return out


def _validate_stage_answer(occ, pred: OccupancyPrediction) -> np.ndarray:
    occ = np.asarray(occ)
    if occ.dtype == bool:
        if occ.shape != (len(pred),):
            raise ProtocolError("occupancy mask length does not match stage candidates")
        return pred.keys[occ]
    occ = occ.reshape(-1, 3).astype(np.int64)
    keys = np.sort(morton_encode(occ)) if len(occ) else np.zeros(0, np.uint64)
    pos = np.searchsorted(pred.keys, keys)
    pos_c = np.minimum(pos, max(len(pred.keys) - 1, 0))
    if len(keys) and (len(pred.keys) == 0 or not np.all(pred.keys[pos_c] == keys)):
        raise ProtocolError(f"stage answer contains coordinates outside the stage's candidate set")
    if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
        raise ProtocolError("stage answer repeats a coordinate")
    return keys


def sopa_8stage(prior: PriorBundle, weights, per_stage_truth_or_decode: StageCallback) -> list[OccupancyPrediction]:
    params = weights if isinstance(weights, ParamSet) else as_params(weights)
    return sopa_8stage_graph(params, prior, per_stage_truth_or_decode)


def make_bundle(spatial: SparseTensor3, temporal: SparseTensor3 | None, weights) -> PriorBundle:
    """Bundle from plain tensors (public entry point for the SOPA heads)."""
    params = weights if isinstance(weights, ParamSet) else as_params(weights)
    at = Coords(spatial.keys, spatial.bit_depth, spatial.coords)
    sg = Graph(at, Var(spatial.feats), params)
    tg = None
    if temporal is not None:
        if not spatial.same_coords(temporal):
            raise PriorAlignmentError("temporal prior must live on the spatial prior's coordinates")
        tg = Graph(at, Var(temporal.feats), params)
    return PriorBundle(sg, tg)


def truth_callback(truth_keys: np.ndarray) -> StageCallback:
    """Stage callback answering from a known set of occupied child keys."""
    truth_keys = np.asarray(truth_keys, dtype=np.uint64)

    def _cb(g, pred):
        return np.isin(pred.keys, truth_keys, assume_unique=True)

    return _cb
