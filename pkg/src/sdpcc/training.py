"""Desk-scale training of every learned component, plus gradient checking.

The objective for one (reference, current) pair is

    BCE of the lossless 8-stage scales
  + BCE of the lossy 1-stage scales (teacher forced)
  + lam * R_F of the noisy latent
  + lam * R of the residual-baseline latent (baseline parameters only)

expressed in bits per current-frame point. Lossless training keeps only the
first term over every scale above the base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import sopa
from .codec import BASE_SCALE
from .nn import functional as F
from .nn.layers import IRN_LAYERS, Coords, Graph
from .nn.tape import GradientTape, Var, record
from .nn.weights import ModelWeights, ParamSet
from .sparse_tensor import SparseTensor3, canonicalize
from .synthetic import moving_sequence, static_cube


class TrainingDivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step


class ConfigKeyError(KeyError):
    def __init__(self, key: str, reason: str = "unknown config key"):
        super().__init__(f"{reason}: {key!r}")
        self.key = key

    def __str__(self):
        return self.args[0]


@dataclass
class TrainConfig:
    lam: float = 0.0
    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    mode: str = "lossless"
    m: int = 3
    # comma-separated m values drawn per step so one lossy model serves them all
    m_values: str = ""
    bit_depth: int = 6
    # batch description: generated toy data unless ``batch`` is given explicitly;
    # sequences = 0 draws a fresh moving-shape sequence for every step
    data: str = "moving"
    sequences: int = 0
    frames: int = 3
    spin: float = 0.15
    inter_fraction: float = 0.5
    residual_weight: float = 1.0
    width: int = 16
    latent_channels: int = 4
    support: int = 32
    irn_blocks: int = 1
    batch: list | None = field(default=None, repr=False)

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")
        if self.mode not in ("lossless", "lossy"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0 and lr > 0")
        if self.mode == "lossy" and not all(1 <= m < self.bit_depth for m in self.m_choices()):
            raise ValueError("lossy training needs 1 <= m < bit_depth")
        if self.data not in ("moving", "cube"):
            raise ValueError(f"unknown data kind {self.data!r}")

    def m_choices(self) -> list[int]:
        if not self.m_values.strip():
            return [self.m]
        try:
            return [int(v) for v in self.m_values.split(",")]
        except ValueError:
            raise ValueError(f"bad m_values {self.m_values!r}") from None

    def sequences_data(self) -> list[list[SparseTensor3]]:
        if self.batch is not None:
            return [list(s) if isinstance(s, (list, tuple)) else [s] for s in self.batch]
        if self.data == "cube":
            return [[static_cube(self.bit_depth)] * max(self.frames, 1)]
        rng = np.random.default_rng([self.seed, 1])
        n = self.sequences or 4
        return [moving_sequence(rng, self.frames, self.bit_depth, spin=self.spin) for _ in range(n)]

    @property
    def streaming(self) -> bool:
        return self.batch is None and self.data == "moving" and self.sequences == 0


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig) if f.name != "batch"}


def parse_config(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    cfg = TrainConfig()
    casts = {"float": float, "int": int, "str": str}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(line, "expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigKeyError(key)
        try:
            setattr(cfg, key, casts[_CONFIG_TYPES[key]](value))
        except ValueError:
            raise ConfigKeyError(key, f"bad value {value!r} for") from None
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# -- losses -------------------------------------------------------------------


def bce_loss(pred: sopa.OccupancyPrediction, truth) -> Var:
    """Bits to code ``truth`` (one bit per candidate) under ``pred``.

    Computed from the clamped probabilities when ``pred`` carries no logits.
    """
    truth = np.asarray(truth)
    if pred.logits is not None:
        if truth.shape[0] != len(pred):
            raise ValueError("truth bits are not aligned with the candidates")
        return F.bce_logits_bits(pred.logits, truth)
    p = np.clip(pred.probs, sopa.P_MIN, 1 - sopa.P_MIN)
    b = truth.astype(bool)
    return Var(np.asarray(-(np.log2(p[b]).sum() + np.log2(1 - p[~b]).sum())))


def rate_loss(latent: Var, logits: Var, support: int, noise: np.ndarray | None = None) -> Var:
    """R_F: bits of the latent with additive uniform noise under the factorized model."""
    x = F.add_noise(latent, noise) if noise is not None else latent
    return F.factorized_bits(x, logits, support)


def total_loss(bce, r_f, lam: float):
    if lam == 0:
        return bce
    if isinstance(bce, Var) or isinstance(r_f, Var):
        return F.add(bce, F.scale(r_f, lam))
    return bce + lam * r_f


# -- training graphs -----------------------------------------------------------


@dataclass
class StepTerms:
    loss: Var
    bce: float
    rate: float
    residual_rate: float
    points: int


def _pyramid(frame: SparseTensor3, lo: int) -> dict[int, np.ndarray]:
    N = frame.bit_depth
    return {s: np.unique(frame.keys >> np.uint64(3 * (N - s))) for s in range(lo, N + 1)}


def lossless_bce(params: ParamSet, pyr, lo: int, hi: int, ctx, dtype) -> list[Var]:
    terms = []
    for s in range(lo, hi):
        at = Coords(pyr[s], s)
        bundle = sopa.bundle_for(params, sopa.spatial_prior(params, at, dtype), ctx)
        truth = pyr[s + 1]
        for pred in sopa.sopa_8stage_graph(params, bundle, sopa.truth_callback(truth)):
            terms.append(F.bce_logits_bits(pred.logits, np.isin(pred.keys, truth)))
    return terms


def sample_terms(params: ParamSet, cur: SparseTensor3, ref: SparseTensor3 | None, cfg: TrainConfig,
                 rng: np.random.Generator, dtype=np.float32, m: int | None = None) -> StepTerms:
    """Loss for one frame given an optional reference (teacher-forced throughout)."""
    N = cur.bit_depth
    lossy = cfg.mode == "lossy"
    m = cfg.m if m is None else m
    hi = m if lossy else N
    lo = min(BASE_SCALE, hi)
    pyr = _pyramid(cur, lo)
    ctx = None
    if ref is not None:
        ctx = sopa.extract_pyramid_graph(params, Coords(ref.keys, N, ref.coords), lo, dtype)
    bce_terms = lossless_bce(params, pyr, lo, hi, ctx, dtype)
    rate = Var(np.asarray(0.0, dtype))
    res_rate = 0.0
    extra = []
    if lossy:
        support = int(params.config["support"])
        full = Coords(cur.keys, N, cur.coords)
        latent = sopa.encode_latent_graph(params, full, m, dtype)
        noise = rng.uniform(-0.5, 0.5, size=latent.x.shape).astype(dtype)
        rate = rate_loss(latent.x, params.tensor("entropy.logits"), support, noise)
        noisy = F.add_noise(latent.x, noise)
        at = latent.at
        lifted = Graph(at, noisy, params).conv("sopa1.latent")
        spatial = Graph(at, F.add(sopa.spatial_prior(params, at, dtype).x, lifted.x), params)
        for s in range(m, N):
            pred, trunk = sopa.sopa_1stage_graph(params, sopa.bundle_for(params, spatial, ctx))
            bits = np.isin(pred.keys, pyr[s + 1])
            bce_terms.append(F.bce_logits_bits(pred.logits, bits))
            keep = np.flatnonzero(bits)
            spatial = Graph(trunk.at.subset(keep), F.rows(trunk.x, keep), params)
        if ref is not None and cfg.residual_weight > 0:
            # baseline parameters learn on detached latents so they never steer
            # the shared encoder
            ref_at = Coords(ref.keys, N, ref.coords)
            ref_lat = sopa.encode_latent_graph(params, ref_at, m, dtype)
            pred_lat = Graph(ref_lat.at, Var(ref_lat.x.value), params).conv_to("residual.predictor", at)
            diff = F.add(Var(noisy.value), F.scale(pred_lat.x, -1.0))
            r = F.factorized_bits(diff, params.tensor("residual.logits"), support)
            res_rate = float(r.value)
            extra.append(F.scale(r, cfg.lam * cfg.residual_weight))
    bce = _sum(bce_terms, dtype)
    loss = total_loss(bce, rate, cfg.lam) if lossy else bce
    for e in extra:
        loss = F.add(loss, e)
    n = max(len(cur), 1)
    loss = F.scale(loss, 1.0 / n)
    return StepTerms(loss, float(bce.value) / n, float(rate.value) / n, res_rate / n, n)


def _sum(terms: list[Var], dtype) -> Var:
    if not terms:
        return Var(np.asarray(0.0, dtype))
    acc = terms[0]
    for t in terms[1:]:
        acc = F.add(acc, t)
    return acc


# -- optimizer -------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Var], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.value.shape, np.float64) for p in params]
        self.v = [np.zeros(p.value.shape, np.float64) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - upd).astype(p.value.dtype)


# -- training loop -------------------------------------------------------------------


def _samples(seqs) -> list[tuple[int, int]]:
    return [(i, t) for i, s in enumerate(seqs) for t in range(len(s))]


def initial_weights(cfg: TrainConfig) -> ModelWeights:
    return sopa.init_weights(cfg.width, cfg.latent_channels, cfg.support, cfg.irn_blocks, seed=cfg.seed)


def train_toy(config: TrainConfig, weights: ModelWeights | None = None, history: list | None = None) -> ModelWeights:
    """Seeded Adam training on toy sequences; returns the trained weights.

    Each step draws one frame (from the batch, or from a freshly generated
    two-frame sequence when streaming); a frame with a predecessor is coded
    inter with probability ``inter_fraction`` (the original predecessor serves
    as the reference), otherwise intra.
    """
    config.validate()
    seqs = None if config.streaming else config.sequences_data()
    data_rng = np.random.default_rng([config.seed, 3])
    rng = np.random.default_rng([config.seed, 2])
    w = initial_weights(config) if weights is None else ModelWeights.from_bytes(weights.to_bytes())
    params = ParamSet.from_weights(w, trainable=True)
    opt = Adam(params.trainable(), lr=config.lr)
    samples = _samples(seqs) if seqs is not None else None
    m_choices = config.m_choices()
    for step in range(config.steps):
        if samples is None:
            seq = moving_sequence(data_rng, 2, config.bit_depth, spin=config.spin)
            t = 1
        else:
            i, t = samples[rng.integers(len(samples))]
            seq = seqs[i]
        inter = t > 0 and rng.random() < config.inter_fraction
        cur, ref = seq[t], (seq[t - 1] if inter else None)
        m = m_choices[rng.integers(len(m_choices))] if len(m_choices) > 1 else config.m
        params.zero_grad()
        with GradientTape() as tape:
            terms = sample_terms(params, cur, ref, config, rng, m=m)
        value = float(terms.loss.value)
        if not math.isfinite(value):
            raise TrainingDivergenceError(step, value)
        tape.backward(terms.loss)
        opt.step()
        if history is not None:
            history.append({"step": step, "loss": value, "bce": terms.bce, "rate": terms.rate,
                            "residual_rate": terms.residual_rate, "inter": inter})
    params.write_back(w)
    return w


def evaluate(weights: ModelWeights, config: TrainConfig, seqs=None, seed: int = 0) -> dict[str, float]:
    """Mean per-point loss terms over every frame of the batch (intra and inter where possible)."""
    seqs = config.sequences_data() if seqs is None else seqs
    params = ParamSet.from_weights(weights, trainable=False)
    rng = np.random.default_rng(seed)
    acc = {"loss": 0.0, "bce": 0.0, "rate": 0.0, "residual_rate": 0.0}
    count = 0
    for s in seqs:
        for t, cur in enumerate(s):
            for ref in ([None, s[t - 1]] if t > 0 else [None]):
                terms = sample_terms(params, cur, ref, config, rng)
                acc["loss"] += float(terms.loss.value)
                acc["bce"] += terms.bce
                acc["rate"] += terms.rate
                acc["residual_rate"] += terms.residual_rate
                count += 1
    return {k: v / max(count, 1) for k, v in acc.items()}


# -- gradient checking -----------------------------------------------------------------

LAYER_KINDS = ("conv1", "conv3", "conv9", "conv_target", "down_s2", "up_s2", "relu", "sigmoid", "irn", "bce", "rate")


def _random_coords(rng, n, bits) -> Coords:
    side = 1 << bits
    flat = rng.choice(side**3, size=min(n, side**3), replace=False)
    c = np.stack(np.unravel_index(flat, (side,) * 3), axis=1)
    t = canonicalize(c, None, bits)
    return Coords(t.keys, bits, t.coords)


def _instance(kind: str, rng: np.random.Generator):
    """A scalar function of a list of float64 arrays, plus those arrays."""
    cin, cout = 3, 4
    at = _random_coords(rng, 12, 3)

    def arr(*shape, away=0.0):
        a = rng.standard_normal(shape).astype(np.float32).astype(np.float64)
        if away:
            a = np.where(np.abs(a) < away, np.sign(a + 1e-12) * away, a)
        return a

    proj = None

    def project(out: Var) -> Var:
        nonlocal proj
        if proj is None:
            proj = arr(*out.shape)
        return F.total(_dot(out, proj))

    if kind in ("conv1", "conv3", "conv9"):
        k = int(kind[-1])
        inputs = [arr(len(at), cin), arr(k**3, cin, cout) * 0.3, arr(cout)]

        def fn(x, w, b):
            return project(F.conv(x, w, b, at.same_map(k)))
    elif kind == "conv_target":
        tgt = _random_coords(rng, 9, 3)
        kmap = F.neighbor_map(at.keys, tgt.coords, 3, at.coords)
        inputs = [arr(len(at), cin), arr(27, cin, cout) * 0.3, arr(cout)]

        def fn(x, w, b):
            return project(F.conv(x, w, b, kmap))
    elif kind == "down_s2":
        par = at.parents()
        kmap = F.down_map(at.keys, par.keys)
        inputs = [arr(len(at), cin), arr(8, cin, cout), arr(cout)]

        def fn(x, w, b):
            return project(F.conv(x, w, b, kmap))
    elif kind == "up_s2":
        kmap = F.up_map(len(at))
        inputs = [arr(len(at), cin), arr(8, cin, cout), arr(cout)]

        def fn(x, w, b):
            return project(F.conv(x, w, b, kmap))
    elif kind == "relu":
        inputs = [arr(len(at), cin, away=0.05)]

        def fn(x):
            return project(F.relu(x))
    elif kind == "sigmoid":
        inputs = [arr(len(at), cin)]

        def fn(x):
            return project(F.sigmoid(x))
    elif kind == "irn":
        width = 8
        names = [n for n, *_ in IRN_LAYERS]
        shapes = [(k**3, width // ci, width // co) for _, k, ci, co in IRN_LAYERS]
        inputs = [arr(len(at), width)]
        for shp in shapes:
            inputs += [arr(*shp) * (1.0 / math.sqrt(shp[0] * shp[1])), arr(shp[2]) * 0.5]

        def fn(x, *ws):
            vs = {}
            for j, n in enumerate(names):
                vs[f"blk.{n}.weight"] = ws[2 * j]
                vs[f"blk.{n}.bias"] = ws[2 * j + 1]
            return project(Graph(at, x, ParamSet(vs, {})).irn("blk").x)
    elif kind == "bce":
        inputs = [arr(20, 1) * 2]
        bits = rng.random(20) < 0.4

        def fn(z):
            return F.bce_logits_bits(z, bits)
    elif kind == "rate":
        L = 4
        # keep latents away from integer knots, where the interpolated pmf has kinks
        lat = rng.uniform(-L + 0.6, L - 0.6, size=(10, 3))
        lat = np.floor(lat) + np.clip(lat - np.floor(lat), 0.05, 0.95)
        inputs = [lat, arr(3, 2 * L + 1)]

        def fn(x, lg):
            return F.factorized_bits(x, lg, L)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return fn, inputs


def _dot(out: Var, proj: np.ndarray) -> Var:
    res = Var(out.value * proj)

    def _backward(g):
        out.accumulate(g * proj)

    return record(res, [out], _backward)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# relu networks are piecewise multilinear, so the second difference along one
# coordinate vanishes unless the stencil straddles a kink
_PIECEWISE = ("relu", "irn")


def grad_check(kinds=LAYER_KINDS, seed: int = 0, h: float = 1e-3, max_entries: int = 400) -> dict[str, float]:
    """Worst relative error (norm-wise per tensor) of analytic vs central-difference gradients.

    Tensors larger than ``max_entries`` are checked on a seeded random subset.
    For relu networks, entries whose difference stencil crosses an activation
    kink are excluded.
    """
    if isinstance(kinds, str):
        kinds = (kinds,)
    report = {}
    for kind in kinds:
        rng = np.random.default_rng([seed, LAYER_KINDS.index(kind) if kind in LAYER_KINDS else 99])
        fn, arrays = _instance(kind, rng)
        vars_ = [Var(a.copy(), True) for a in arrays]
        with GradientTape() as tape:
            loss = fn(*vars_)
        tape.backward(loss)
        f0 = float(loss.value)
        worst = 0.0
        for j, a in enumerate(arrays):
            flat = a.reshape(-1)
            g = vars_[j].grad if vars_[j].grad is not None else np.zeros_like(a)
            entries = np.arange(flat.size)
            if flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
            ana, num = [], []
            for e in entries:
                saved = flat[e]
                flat[e] = saved + h
                up = float(fn(*[Var(x) for x in arrays]).value)
                flat[e] = saved - h
                down = float(fn(*[Var(x) for x in arrays]).value)
                flat[e] = saved
                if kind in _PIECEWISE and abs(up - 2 * f0 + down) > 1e-9 * max(1.0, abs(f0)):
                    continue
                ana.append(g.reshape(-1)[e])
                num.append((up - down) / (2 * h))
            worst = max(worst, _rel_err(np.array(ana), np.array(num)))
        report[kind] = worst
    return report
