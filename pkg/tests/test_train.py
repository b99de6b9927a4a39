import numpy as np
import pytest

from helpers import GC_CONFIG, finite_difference, gradcheck_setup, max_relative_error
from saesteer.sae import ARCHITECTURES, SaeConfig, SaeParams, encode, init_params
from saesteer.toylm import build_corpus
from saesteer.train import (
    ADAM_EPS,
    AdamState,
    TrainConfig,
    adam_step,
    aux_k_loss,
    grad,
    lambda_eff_at,
    lr_at,
    train,
)

@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_gradients_match_finite_differences(arch):
    p, X, ctx = gradcheck_setup(arch)
    g = grad(p, X, 0.3, ctx, GC_CONFIG)
    assert set(g) == set(p.trainable())
    for name in p.trainable():
        assert max_relative_error(g[name], finite_difference(p, X, 0.3, ctx, name)) < 1e-4, name


def test_zero_batch_zero_decoder_gradient():
    p = init_params(SaeConfig("ReLU", 8, 16, lam=0.1))
    g = grad(p, np.zeros((4, 8)), 0.1)
    assert np.array_equal(g["W_dec"], np.zeros_like(p.W_dec))


def test_sparsity_gradient_linear_in_lambda():
    p, X, _ = gradcheck_setup("ReLU")
    g0 = grad(p, X, 0.0)
    g1 = grad(p, X, 0.25)
    g2 = grad(p, X, 0.5)
    for name in ("W_enc", "b_enc"):
        assert np.allclose(g2[name] - g0[name], 2 * (g1[name] - g0[name]), rtol=1e-12, atol=1e-14)


def test_lr_schedule():
    cfg = TrainConfig(total_steps=10_000, batch=1, lr=3e-4, lr_warmup_steps=1000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1000, cfg) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(5000, cfg) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(9000, cfg) == pytest.approx(1.5e-4, rel=1e-12)
    assert lr_at(10_000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(10_001, cfg)


def test_default_learning_rate():
    assert TrainConfig(total_steps=10, batch=1, lr_warmup_steps=1, sparsity_warmup_steps=1).lr == 3e-4


def test_step_defaults_scale_with_run_length():
    c = TrainConfig(total_steps=10_000, batch=1)
    assert (c.lr_warmup_steps, c.sparsity_warmup_steps, c.dead_window, c.threshold_start) == (1000, 5000, 1000, 1000)
    c = TrainConfig(total_steps=600, batch=1)
    assert (c.lr_warmup_steps, c.sparsity_warmup_steps) == (60, 300)
    assert TrainConfig(total_steps=600, batch=1, lr_warmup_steps=7).lr_warmup_steps == 7


def test_lambda_warmup():
    cfg = TrainConfig(total_steps=10_000, batch=1)
    assert lambda_eff_at(0, cfg, 2.0) == 0.0
    assert lambda_eff_at(2500, cfg, 2.0) == pytest.approx(1.0)
    assert lambda_eff_at(5000, cfg, 2.0) == 2.0
    assert lambda_eff_at(9000, cfg, 2.0) == 2.0


def test_adam_zero_gradient():
    p = init_params(SaeConfig("ReLU", 4, 4, lam=0.1))
    before = p.copy()
    adam_step(AdamState(), p, {"W_enc": np.zeros_like(p.W_enc)}, 1e-3)
    assert np.array_equal(p.W_enc, before.W_enc)


def test_adam_first_step_closed_form():
    p = init_params(SaeConfig("ReLU", 4, 4, lam=0.1))
    g = np.random.default_rng(0).normal(size=p.W_enc.shape)
    before = p.W_enc.copy()
    adam_step(AdamState(), p, {"W_enc": g}, 1e-2)
    # bias-corrected moments after one step are g and g^2
    expected = before - 1e-2 * g / (np.abs(g) + ADAM_EPS)
    assert np.allclose(p.W_enc, expected, rtol=1e-12, atol=1e-15)


def _aux_params():
    return SaeParams("TopK", np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), k=1)


def test_aux_no_dead_latents():
    p = _aux_params()
    x = np.array([[1.0, 2.0, 3.0]])
    h = encode(p, x)
    assert aux_k_loss(p, x, h, 2, np.zeros(3, bool)) == 0.0


def test_aux_zero_residual():
    p = _aux_params()
    # the dead latent has a non-positive preactivation, so it reconstructs nothing
    x = np.array([[0.0, 0.0, 4.0]])
    h = encode(p, x)
    assert np.allclose(h @ p.W_dec.T, x)
    assert aux_k_loss(p, x, h, 2, np.array([True, False, False])) == 0.0


def test_aux_single_dead_latent_formula():
    p = _aux_params()
    p.W_dec = np.array([[0.6, 0.0, 0.0], [0.8, 0.0, 0.0], [0.0, 0.0, 1.0]])
    x = np.array([[0.5, 0.2, 3.0]])
    h = encode(p, x)  # keeps latent 2 only
    dead = np.array([True, False, False])
    a = float(x[0] @ p.W_enc[0])
    v = p.W_dec[:, 0]
    e = x[0] - h[0] @ p.W_dec.T
    assert aux_k_loss(p, x, h, 1, dead) == pytest.approx(float(np.sum((e - a * v) ** 2)), rel=1e-12)


def test_aux_rejects_other_architectures():
    p = init_params(SaeConfig("ReLU", 3, 3, lam=0.1))
    with pytest.raises(ValueError):
        aux_k_loss(p, np.zeros((1, 3)), np.zeros((1, 3)), 1, np.ones(3, bool))


@pytest.fixture(scope="module")
def sweep_data(lm_config, lm):
    return build_corpus(lm_config, 8192, seed=3, lm=lm)


SHORT = TrainConfig(total_steps=600, batch=128, lr=3e-3, lr_warmup_steps=50,
                    sparsity_warmup_steps=200, dead_window=200, threshold_start=200)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_decoder_norms_after_every_step(sweep_data, arch):
    errs = []

    def check(step, params, terms):
        errs.append(np.abs(np.linalg.norm(params.W_dec, axis=0) - 1).max())

    cfg = TrainConfig(total_steps=60, batch=64, lr=3e-3, lr_warmup_steps=5, sparsity_warmup_steps=20,
                      dead_window=10, threshold_start=20)
    knob = {"ReLU": {"lam": 0.02}, "Gated": {"lam": 0.02}, "TopK": {"k": 8}, "BatchTopK": {"k": 8},
            "JumpReLU": {"target_l0": 8.0}}[arch]
    train(sweep_data, SaeConfig(arch, 64, 128, **knob), cfg, on_step=check)
    assert len(errs) == 60
    assert max(errs) <= 1e-6


def test_relu_l0_decreases_with_lambda(sweep_data):
    l0s = [train(sweep_data, SaeConfig("ReLU", 64, 128, lam=lam), SHORT)[1].final_l0
           for lam in (0.012, 0.02, 0.04)]
    assert l0s[0] > l0s[1] > l0s[2]


@pytest.mark.parametrize("arch", ["TopK", "BatchTopK"])
def test_topk_l0(sweep_data, arch):
    _, m = train(sweep_data, SaeConfig(arch, 64, 128, k=8), SHORT)
    assert abs(m.final_l0 - 8) <= 0.1


def test_batch_topk_threshold_set(sweep_data):
    p, _ = train(sweep_data, SaeConfig("BatchTopK", 64, 128, k=8), SHORT)
    assert p.inference_threshold is not None and p.inference_threshold > 0


def test_training_deterministic(sweep_data):
    cfg = TrainConfig(total_steps=50, batch=64, lr_warmup_steps=5, sparsity_warmup_steps=10, seed=4)
    a, _ = train(sweep_data, SaeConfig("TopK", 64, 128, k=4), cfg)
    b, _ = train(sweep_data, SaeConfig("TopK", 64, 128, k=4), cfg)
    for name in a.trainable():
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_width_mismatch(sweep_data):
    with pytest.raises(ValueError):
        train(sweep_data, SaeConfig("TopK", 32, 64, k=4), SHORT)
