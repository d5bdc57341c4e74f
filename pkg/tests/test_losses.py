import math

import numpy as np
import pytest

from pgalab import tensor as T
from pgalab.errors import ConfigError
from pgalab.gradcheck import check_gradients, frozen_surrogate
from pgalab.logdet import exact_logabsdet
from pgalab.losses import (TERMS, LossWeights, assemble, kl_standard_normal, latent_recon_aggregate,
                           latent_recon_prior, log_volume_ratio, nll_decoder, nll_encoder,
                           probe_noise, recon_loss, sample_probe, unified_vr, vae_losses)
from pgalab.nets import Autoencoder, build_autoencoder
from pgalab.verification import EXCLUDED_GROUP, kl_identity_gap, pin_logvar_to_floor, routing_gradients

from conftest import linear_autoencoder, linear_net


def identity_model(dim=2, variational=False, eps=None):
    model = build_autoencoder(dim, dim, (), variational=variational, logvar_epsilon=eps)
    model.encoder.weights[0].data[...] = np.eye(dim)
    model.decoder.weights[0].data[...] = np.eye(dim)
    return model


def scaled_decoder_model(c, dim=2):
    return linear_autoencoder(np.eye(dim), c * np.eye(dim))


@pytest.fixture
def batch(rng):
    return rng.normal(size=(6, 3)), rng.normal(size=(6, 2))


# ---- hand-computed values ----------------------------------------------

def test_recon_identity_is_zero_and_zero_decoder_half():
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert recon_loss(identity_model(), x).item() == 0.0
    zero_dec = linear_autoencoder(np.eye(2), np.zeros((2, 2)))
    assert recon_loss(zero_dec, np.array([[1.0, 0.0]])).item() == 0.5


def test_recon_matches_straight_line(rng):
    model = build_autoencoder(3, 2, (4,), seed=2)
    x = rng.normal(size=(5, 3))
    W = [p.data for p in model.parameters()]
    z = np.tanh(x @ W[0] + W[1]) @ W[2] + W[3]
    xr = np.tanh(z @ W[4] + W[5]) @ W[6] + W[7]
    assert recon_loss(model, x).item() == pytest.approx(0.5 * np.mean(np.sum((xr - x) ** 2, axis=1)), rel=1e-14)


def test_latent_recon_prior_examples():
    z = np.array([[1.0, 0.0]])
    assert latent_recon_prior(identity_model(), z).item() == 0.0
    model = linear_autoencoder(2 * np.eye(2), np.eye(2))
    assert latent_recon_prior(model, z).item() == 0.5


def test_latent_recon_aggregate_matches_prior_routine(rng):
    model = build_autoencoder(3, 2, (4,), seed=3)
    x = rng.normal(size=(7, 3))
    z = model.encode(x).data
    assert latent_recon_aggregate(model, x).item() == latent_recon_prior(model, z).item()


def test_nll_encoder_examples(rng):
    model = linear_autoencoder(np.zeros((2, 2)), np.eye(2))
    model.encoder.biases[0].data[...] = [3.0, 4.0]
    assert nll_encoder(model, rng.normal(size=(4, 2))).item() == 12.5
    model = build_autoencoder(3, 2, (4,), seed=4)
    x = rng.normal(size=(8, 3))
    z = model.encode(x).data
    log_density = -0.5 * np.sum(z * z, axis=1) - math.log(2 * math.pi)   # H=2
    assert nll_encoder(model, x).item() == pytest.approx(-np.mean(log_density) - math.log(2 * math.pi), rel=1e-13)


@pytest.mark.parametrize("probe", ["sphere", "gaussian"])
def test_nll_decoder_scaling(probe):
    x = np.random.default_rng(1).normal(size=(9, 2))
    w = LossWeights(probe=probe)
    val, _ = nll_decoder(scaled_decoder_model(2.0), x, w, seed=3)
    assert val.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    val, _ = nll_decoder(identity_model(), x, w, seed=3)
    assert abs(val.item()) < 1e-12


def test_nll_decoder_shift_law(rng):
    model = build_autoencoder(3, 2, (4,), seed=6)
    x = rng.normal(size=(5, 3))
    w = LossWeights(epsilon=1e-4)
    base, _ = nll_decoder(model, x, w, 2)
    # replacing h by c*h at the same codes shifts the value by H log|c|
    z = T.stop_gradient(model.encode(x))
    delta = sample_probe(2, 1e-4, "sphere", 2, n=5)
    a, _ = log_volume_ratio(lambda u: model.composite_h(u), z, delta)
    b, _ = log_volume_ratio(lambda u: T.scale(model.composite_h(u), -3.0), z, delta)
    assert b.item() - a.item() == pytest.approx(2 * math.log(3), abs=1e-9)
    assert base.item() == a.item()


def test_nll_decoder_linear_upper_bounds_exact():
    A = np.random.default_rng(8).normal(size=(4, 4)) + 3 * np.eye(4)
    model = linear_autoencoder(np.eye(4), A)
    x = np.zeros((10_000, 4))
    val, _ = nll_decoder(model, x, LossWeights(epsilon=1e-4), seed=1)
    exact = exact_logabsdet(A.T)
    delta = sample_probe(4, 1e-4, "sphere", 1, n=10_000)
    per = 2 * np.log(np.sum((delta @ A) ** 2, axis=1) / np.sum(delta ** 2, axis=1))
    se = per.std(ddof=1) / 100
    assert val.item() == pytest.approx(per.mean(), rel=1e-9)
    assert val.item() + 3 * se >= exact


def test_sample_probe_properties():
    d = sample_probe(5, 1e-3, "sphere", seed=4, n=200)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1e-3, rtol=1e-12)
    assert d.tobytes() == sample_probe(5, 1e-3, "sphere", seed=4, n=200).tobytes()
    assert sample_probe(3, 1.0, seed=1).shape == (3,)
    g = sample_probe(3, 0.01, "gaussian", seed=2, n=100_000)
    assert np.mean(np.sum(g * g, axis=1)) == pytest.approx(3 * 1e-4, rel=0.01)
    with pytest.raises(ConfigError):
        sample_probe(3, 0.1, "cube")


def test_kl_examples():
    assert kl_standard_normal(T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros((3, 2)))).item() == 0.0
    mu = np.array([[1.0, 0.0, 0.0]])
    assert kl_standard_normal(T.Tensor(mu), T.Tensor(np.zeros((1, 3)))).item() == 0.5


def test_vae_recon_hand_formula():
    model = identity_model(2, variational=True, eps=1e-3)
    model.logvar_head[1].data[...] = 2 * math.log(0.3)   # sigma_phi = 0.3 everywhere
    x = np.random.default_rng(3).normal(size=(6, 2))
    code = model.encode_stochastic(x, 11)
    z, zp = code.mean.data, code.sample.data
    sq = np.sum((zp - z) ** 2, axis=1)
    norms = np.sum(z * z, axis=1)
    per_row, _ = vae_losses(model, x, LossWeights(sigma_coeff=1.0, sigma_norm="sample"), seed=11)
    assert per_row.item() == pytest.approx(np.mean(sq * 2 / (2 * norms)), rel=1e-12)
    pooled, _ = vae_losses(model, x, LossWeights(sigma_coeff=1.0), seed=11)
    assert pooled.item() == pytest.approx(np.mean(sq) * 2 / (2 * np.mean(norms)), rel=1e-12)


@pytest.mark.parametrize("norm", ["batch", "sample"])
def test_vae_recon_inverse_square_in_code_norm(norm):
    # fixed sigma_phi and h = id: the residual is unchanged, sigma^2 grows 9x
    model = identity_model(2, variational=True, eps=1e-3)
    model.logvar_head[0].data[...] = 0.0
    x = np.random.default_rng(4).normal(size=(8, 2))
    w = LossWeights(sigma_coeff=0.5, sigma_norm=norm)
    a, _ = vae_losses(model, x, w, seed=2)
    b, _ = vae_losses(model, 3.0 * x, w, seed=2)
    assert b.item() == pytest.approx(a.item() / 9.0, rel=1e-12)


def test_vae_requires_head():
    with pytest.raises(ConfigError):
        vae_losses(build_autoencoder(2, 2, (3,)), np.ones((2, 2)), LossWeights(), 0)
    with pytest.raises(ConfigError):
        assemble("VPGA", build_autoencoder(2, 2, (3,)), np.ones((2, 2)), np.ones((2, 2)), LossWeights(), 0)


def test_unified_vr_scaling_and_identity():
    x = np.random.default_rng(4).normal(size=(5, 2))
    model = identity_model(2, variational=True, eps=1e-3)
    model.logvar_head[0].data[...] = np.random.default_rng(5).normal(size=(2, 2))
    w = LossWeights(epsilon=1e-3)
    assert abs(unified_vr(model, x, w, 0)[0].item()) < 1e-12
    model.decoder.weights[0].data[...] = 3 * np.eye(2)
    assert unified_vr(model, x, w, 0)[0].item() == pytest.approx(2 * math.log(3), abs=1e-12)


def test_unified_equals_decoder_nll_at_floor(rng):
    model = build_autoencoder(3, 2, (4,), variational=True, logvar_epsilon=1e-3, seed=9)
    pin_logvar_to_floor(model)
    x = rng.normal(size=(7, 3))
    w = LossWeights(epsilon=1e-3, probe="gaussian")
    a = unified_vr(model, x, w, 21)[0].item()
    b = nll_decoder(model, x, w, 21)[0].item()
    assert abs(a - b) < 1e-12


# ---- assembly -----------------------------------------------------------

def test_all_weights_zero_total_is_recon(batch):
    x, zp = batch
    model = build_autoencoder(3, 2, (4,), seed=1)
    w = LossWeights(alpha=0, beta=0, gamma=0)
    b = assemble("LPGA", model, x, zp, w, 0)
    assert b.total.item() == b["L_r"].item()
    assert set(b.terms) == set(TERMS)
    assert math.isnan(b["L_vr"].item())


@pytest.mark.parametrize("objective", ["LPGA", "VPGA", "LVPGA"])
def test_total_is_weighted_sum(objective, batch):
    x, zp = batch
    model = build_autoencoder(3, 2, (4,), variational=objective != "LPGA",
                              logvar_epsilon=1e-3 if objective == "LVPGA" else None, seed=2)
    w = LossWeights(alpha=0.4, beta=0.6, gamma=0.3, gamma_prime=0.7, eta=1.5)
    b = assemble(objective, model, x, zp, w, 5)
    v = b.values()
    pga = v["L_r"] + w.alpha * v["L_lr_N"] + w.beta * v["L_lr_H"]
    extra = {"LPGA": w.gamma * (v["L_nll_phi"] + v["L_nll_theta"]),
             "VPGA": w.eta * (v["L_vr"] + v["L_vkl"]),
             "LVPGA": w.gamma_prime * v["L_vr"] + w.gamma * v["L_nll_phi"] + w.eta * v["L_vkl"]}[objective]
    assert v["total"] == pytest.approx(pga + extra, rel=1e-14, abs=1e-14)


def test_negative_weight_rejected(batch):
    x, zp = batch
    for bad in (dict(alpha=-1.0), dict(epsilon=0.0), dict(gamma=float("nan")), dict(prior_routing="x")):
        with pytest.raises(ConfigError):
            assemble("LPGA", build_autoencoder(3, 2, (4,)), x, zp, LossWeights(**bad), 0)
    with pytest.raises(ConfigError):
        assemble("GAN", build_autoencoder(3, 2, (4,)), x, zp, LossWeights(), 0)


def test_totals_finite_at_init(rng):
    for seed in range(5):
        model = build_autoencoder(3, 2, (16, 16), variational=True, logvar_epsilon=1e-3, seed=seed)
        x, zp = rng.normal(size=(32, 3)), rng.normal(size=(32, 2))
        for objective in ("LPGA", "VPGA", "LVPGA"):
            assert math.isfinite(assemble(objective, model, x, zp, LossWeights(), seed).total.item())


def test_degenerate_decoder_is_floored_and_counted():
    model = linear_autoencoder(np.eye(2), np.zeros((2, 2)))
    val, floored = nll_decoder(model, np.ones((3, 2)), LossWeights(), 0)
    assert floored == 3
    assert math.isfinite(val.item())


# ---- routing ------------------------------------------------------------

@pytest.mark.parametrize("term,group", sorted(EXCLUDED_GROUP.items()))
def test_routing_exact_zero(term, group, batch):
    x, zp = batch
    model = build_autoencoder(3, 2, (4,), variational=True, seed=3)
    b = assemble("VPGA", model, x, zp, LossWeights(beta=1.0), 7)
    grads = routing_gradients(model, b[term])
    assert all(not np.any(g) for g in grads[group])
    other = "phi" if group == "theta" else "theta"
    assert any(np.any(g) for g in grads[other])


def test_lvpga_nll_phi_and_kl_routing(batch):
    x, zp = batch
    model = build_autoencoder(3, 2, (4,), variational=True, logvar_epsilon=1e-3, seed=3)
    b = assemble("LVPGA", model, x, zp, LossWeights(), 7)
    for name in ("L_nll_phi", "L_vkl"):
        assert all(not np.any(g) for g in routing_gradients(model, b[name])["theta"])
    g = routing_gradients(model, b["L_vr"])
    assert any(np.any(a) for a in g["theta"])
    # phi enters only through sigma_phi: the mean head's last layer gets nothing
    mean_w = model.encoder.weights[-1]
    assert not np.any(g["phi"][[id(p) for p in model.phi].index(id(mean_w))])


def test_vae_recon_target_is_frozen_but_sample_path_live(batch):
    x, zp = batch
    model = build_autoencoder(3, 2, (4,), variational=True, seed=3)
    l_vr, _ = vae_losses(model, x, LossWeights(), 3)
    g = routing_gradients(model, l_vr)
    assert any(np.any(a) for a in g["phi"]) and any(np.any(a) for a in g["theta"])


def test_joint_prior_routing_reaches_theta(batch):
    _, zp = batch
    model = build_autoencoder(3, 2, (4,), seed=3)
    g = routing_gradients(model, latent_recon_prior(model, zp, "joint"))
    assert any(np.any(a) for a in g["theta"])


# ---- gradients ----------------------------------------------------------

def _term_fn(objective, name, model, x, zp, w, seed):
    return lambda: assemble(objective, model, x, zp, w, seed)[name] if name != "total" \
        else assemble(objective, model, x, zp, w, seed).total


CASES = [("LPGA", t) for t in ("L_r", "L_lr_N", "L_lr_H", "L_nll_phi", "L_nll_theta", "total")] + \
        [("VPGA", t) for t in ("L_vr", "L_vkl", "total")] + [("LVPGA", t) for t in ("L_vr", "L_vkl", "total")]


@pytest.mark.parametrize("objective,name", CASES)
def test_loss_gradients_match_finite_differences(objective, name):
    rng = np.random.default_rng(hash((objective, name)) % 2 ** 32)
    D, H = 5, 3
    model = build_autoencoder(D, H, (6,), variational=objective != "LPGA",
                              logvar_epsilon=1e-2 if objective == "LVPGA" else None, seed=4)
    x, zp = rng.normal(size=(4, D)), rng.normal(size=(4, H))
    w = LossWeights(alpha=0.5, beta=0.5, gamma=0.7, gamma_prime=0.9, eta=0.8, epsilon=1e-2)
    fn = _term_fn(objective, name, model, x, zp, w, 13)
    assert check_gradients(fn, model.parameters()) < 1e-4


def test_kl_identity_on_random_batches(rng):
    for b in range(100):
        model = build_autoencoder(4, 3, (5,), variational=True, seed=b)
        model.logvar_head[0].data *= 3.0
        assert kl_identity_gap(model, rng.normal(size=(8, 4)) * 2) < 1e-10


def test_frozen_surrogate_pins_targets(batch):
    x, _ = batch
    model = build_autoencoder(3, 2, (4,), seed=5)
    fn = lambda: latent_recon_aggregate(model, x)
    sur = frozen_surrogate(fn)
    assert sur().item() == fn().item()
    before = sur().item()
    model.decoder.weights[0].data += 0.1      # theta is frozen in this term
    assert sur().item() == before
    assert fn().item() != before
