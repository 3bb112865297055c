import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdpcc.entropy import RangeEncoder, quantize_prob
from sdpcc.nn import GradientTape, Var
from sdpcc.nn.weights import ParamSet
from sdpcc.sopa import P_MIN, OccupancyPrediction
from sdpcc.synthetic import moving_sequence, static_cube
from sdpcc.training import (
    ConfigKeyError,
    TrainConfig,
    TrainingDivergenceError,
    bce_loss,
    evaluate,
    initial_weights,
    parse_config,
    rate_loss,
    sample_terms,
    total_loss,
    train_toy,
)

SMALL = dict(width=8, latent_channels=2, support=8, bit_depth=5)


def _pred(probs, logits=None):
    keys = np.arange(len(probs), dtype=np.uint64)
    lg = None if logits is None else Var(np.asarray(logits, np.float64)[:, None])
    return OccupancyPrediction(keys, np.asarray(probs, np.float64), 4, lg)


def test_bce_half_is_one_bit():
    truth = np.array([1, 0, 1, 1, 0])
    assert float(bce_loss(_pred(np.full(5, 0.5)), truth).value) == pytest.approx(5.0)
    assert float(bce_loss(_pred(np.full(5, 0.5), np.zeros(5)), truth).value) == pytest.approx(5.0)


def test_bce_confident_and_right_is_nearly_free():
    bits = float(bce_loss(_pred([1.0, 1.0]), [1, 1]).value)
    assert bits == pytest.approx(-2 * math.log2(1 - P_MIN))
    assert bits < 1e-4


def test_bce_from_logits_matches_probabilities():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(50) * 3
    p = 1 / (1 + np.exp(-z))
    truth = rng.random(50) < 0.5
    want = -(np.log2(p[truth]).sum() + np.log2(1 - p[~truth]).sum())
    assert float(bce_loss(_pred(p, z), truth).value) == pytest.approx(want, rel=1e-9)


def test_bce_predicts_coded_length():
    rng = np.random.default_rng(1)
    p = np.clip(rng.beta(0.5, 0.5, 20_000), P_MIN, 1 - P_MIN)
    truth = rng.random(20_000) < p
    enc = RangeEncoder()
    enc.encode_bits(quantize_prob(p), truth)
    coded = len(enc.finish())
    est = float(bce_loss(_pred(p), truth).value) / 8
    assert abs(coded - est) <= est * 0.005 + 32


def test_bce_rejects_misaligned_truth():
    with pytest.raises(ValueError):
        bce_loss(_pred([0.5, 0.5], [0.0, 0.0]), [1, 0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 5), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_uniform_model_rate(L, channels, rows, seed):
    rng = np.random.default_rng(seed)
    latent = Var(rng.uniform(-L, L, size=(rows, channels)))
    noise = rng.uniform(-0.5, 0.5, size=(rows, channels))
    bits = float(rate_loss(latent, Var(np.zeros((channels, 2 * L + 1))), L, noise).value)
    assert bits == pytest.approx(rows * channels * math.log2(2 * L + 1), rel=1e-9)


@pytest.mark.parametrize("bce,rf,lam,want", [(3.0, 2.0, 0.5, 4.0), (3.0, 2.0, 0.0, 3.0), (0.0, 5.0, 2.0, 10.0)])
def test_total_loss_arithmetic(bce, rf, lam, want):
    assert total_loss(bce, rf, lam) == want


def test_total_loss_lam_zero_is_bce():
    b = Var(np.asarray(7.25))
    assert total_loss(b, Var(np.asarray(99.0)), 0.0) is b


def test_cube_training_lowers_bce(cube_model):
    cfg = TrainConfig(data="cube", **SMALL)
    before = evaluate(initial_weights(cfg), cfg)
    after = evaluate(cube_model, cfg)
    assert after["bce"] < before["bce"]


def test_training_is_deterministic():
    cfg = TrainConfig(steps=4, seed=5, **SMALL)
    a, b = train_toy(cfg), train_toy(cfg)
    assert a.to_bytes() == b.to_bytes()
    c = train_toy(TrainConfig(steps=4, seed=6, **SMALL))
    assert c.to_bytes() != a.to_bytes()


def test_rate_weight_lowers_latent_rate():
    seqs = [[static_cube()] * 2]
    common = dict(mode="lossy", m=3, data="cube", steps=60, lr=3e-3, **SMALL)
    rates = {}
    for lam in (0.0, 1.0):
        w = train_toy(TrainConfig(lam=lam, **common))
        rates[lam] = evaluate(w, TrainConfig(lam=lam, **common), seqs)["rate"]
    assert rates[1.0] <= rates[0.0]


def test_every_parameter_gets_a_gradient():
    cfg = TrainConfig(mode="lossy", m=4, lam=1.0, width=8, latent_channels=2, support=8, bit_depth=6)
    w = initial_weights(cfg)
    rng = np.random.default_rng(2)
    # uniform rate tables are flat in the latent, so start from skewed ones
    for name in ("entropy.logits", "residual.logits"):
        w.tensors[name] = rng.standard_normal(w.tensors[name].shape).astype(np.float32)
    params = ParamSet.from_weights(w, trainable=True)
    seq = moving_sequence(np.random.default_rng(3), 2, 6)
    with GradientTape() as tape:
        terms = sample_terms(params, seq[1], seq[0], cfg, np.random.default_rng(0))
    tape.backward(terms.loss)
    missing = [p for p in params.trainable() if p.grad is None or not np.any(p.grad)]
    assert not missing


def test_parse_config_roundtrip():
    cfg = parse_config("""
        # toy run
        lam = 0.5
        steps=12   # short
        mode = lossy
        m = 2
    """)
    assert (cfg.lam, cfg.steps, cfg.mode, cfg.m) == (0.5, 12, "lossy", 2)


@pytest.mark.parametrize("text,key", [("colour = red", "colour"), ("steps = many", "steps"), ("lam 0.1", "lam 0.1")])
def test_parse_config_errors(text, key):
    with pytest.raises(ConfigKeyError) as e:
        parse_config(text)
    assert e.value.key == key


@pytest.mark.parametrize("text", ["lam = -1", "mode = lossy\nm = 9", "data = video", "lr = 0"])
def test_config_validation(text):
    with pytest.raises(ValueError):
        parse_config(text)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    cfg = TrainConfig(steps=10, lr=1e30, **SMALL)
    with pytest.raises(TrainingDivergenceError) as e:
        train_toy(cfg)
    assert 1 <= e.value.step < 10


def test_m_values_parsing_and_validation():
    cfg = parse_config("mode = lossy\nm = 2\nm_values = 1, 3\nbit_depth = 5")
    assert cfg.m_choices() == [1, 3]
    assert TrainConfig(mode="lossy", m=2).m_choices() == [2]
    with pytest.raises(ValueError):
        parse_config("mode = lossy\nm_values = 1,5\nbit_depth = 5")
    with pytest.raises(ValueError):
        parse_config("mode = lossy\nm_values = 1,x")
