"""Loss terms of the perceptual generative autoencoder objectives.

Each term routes its gradient to a specific parameter group. Routing is done
structurally: a frozen group's parameters enter the graph through
``stop_gradient``, so the excluded group receives an exact zero.

    term          value                                         updates
    L_r           1/2 E||g(f(x)) - x||^2                        phi, theta
    L_lr_N        1/2 E||h(z) - z||^2, z ~ N(0, I)             phi
    L_lr_H        1/2 E||h(f(x)) - sg(f(x))||^2                phi
    L_nll_phi     1/2 E||f(x)||^2                               phi
    L_nll_theta   H/2 E log(||h(z+d) - h(z)||^2 / ||d||^2)     theta
    L_vr (VPGA)   E||sg(h(f(x))) - h(z')||^2 / (2 sigma^2)      phi, theta
    L_vr (LVPGA)  L_nll_theta with d ~ N(0, diag sigma_phi^2)   phi (via sigma_phi), theta
    L_vkl         E 1/2 sum(mu^2 + s^2 - log s^2 - 1)           phi
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nets import Autoencoder
from .rng import stream
from .tensor import Tensor

OBJECTIVES = ("LPGA", "VPGA", "LVPGA")
PROBES = ("sphere", "gaussian")
ROUTINGS = ("encoder", "joint")
TERMS = ("L_r", "L_lr_N", "L_lr_H", "L_nll_phi", "L_nll_theta", "L_vr", "L_vkl")
_NORM_FLOOR = 1e-20
SIGMA_NORMS = ("batch", "sample")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    gamma_prime: float = 1.0
    eta: float = 0.1
    sigma_coeff: float = 0.1
    epsilon: float = 1e-3
    probe: str = "sphere"
    probes_per_sample: int = 1
    prior_routing: str = "encoder"
    sigma_norm: str = "batch"

    def validate(self) -> "LossWeights":
        for name in ("alpha", "beta", "gamma", "gamma_prime", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        for name in ("sigma_coeff", "epsilon"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be finite and > 0, got {v}")
        if self.probe not in PROBES:
            raise ConfigError(f"probe must be one of {PROBES}, got {self.probe!r}")
        if self.sigma_norm not in SIGMA_NORMS:
            raise ConfigError(f"sigma_norm must be one of {SIGMA_NORMS}, got {self.sigma_norm!r}")
        if int(self.probes_per_sample) < 1:
            raise ConfigError("probes_per_sample must be >= 1")
        if self.prior_routing not in ROUTINGS:
            raise ConfigError(f"prior_routing must be one of {ROUTINGS}, got {self.prior_routing!r}")
        return self


@dataclass
class LossBundle:
    objective: str
    terms: dict[str, Tensor]
    total: Tensor
    weights: LossWeights
    floored: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.terms[name]

    def values(self) -> dict[str, float]:
        out = {k: self.terms[k].item() for k in TERMS}
        out["total"] = self.total.item()
        return out


def _half_mean_sq(diff: Tensor) -> Tensor:
    return T.scale(T.mean(T.sum_sq_rows(diff)), 0.5)


def recon_loss(model: Autoencoder, x) -> Tensor:
    return _half_mean_sq(model.decode(model.encode(x)) - x)


def latent_recon_prior(model: Autoencoder, z_prior, routing: str = "encoder") -> Tensor:
    """Latent reconstruction on prior draws; the decoder is frozen unless ``routing='joint'``."""
    z = T.constant(z_prior)
    freeze = ("theta",) if routing == "encoder" else ()
    return _half_mean_sq(model.composite_h(z, freeze) - z)


def latent_recon_aggregate(model: Autoencoder, x) -> Tensor:
    z = model.encode(x)
    return _half_mean_sq(model.composite_h(z, ("theta",)) - T.stop_gradient(z))


def nll_encoder(model: Autoencoder, x) -> Tensor:
    return T.scale(T.mean(T.sum_sq_rows(model.encode(x))), 0.5)


def probe_noise(seed: int, n: int, dim: int) -> np.ndarray:
    """Standard-normal noise shared by the fixed and learned-variance probes."""
    return stream(seed, "probe").standard_normal((n, dim))


def sample_probe(dim: int, epsilon: float, kind: str = "sphere", seed: int = 0, n: int | None = None) -> np.ndarray:
    """Probe vectors: radius-``epsilon`` sphere or N(0, epsilon^2 I).

    Returns shape ``(dim,)`` when ``n`` is None, else ``(n, dim)``.
    """
    if kind not in PROBES:
        raise ConfigError(f"probe must be one of {PROBES}, got {kind!r}")
    rows = 1 if n is None else n
    noise = probe_noise(seed, rows, dim)
    if kind == "sphere":
        norms = np.linalg.norm(noise, axis=1)
        bad = norms == 0.0
        redraw = 0
        while np.any(bad):  # measure-zero event
            redraw += 1
            fresh = stream(seed, f"probe/redraw/{redraw}").standard_normal((int(bad.sum()), dim))
            noise[bad] = fresh
            norms = np.linalg.norm(noise, axis=1)
            bad = norms == 0.0
        noise = noise * (epsilon / norms)[:, None]
    else:
        noise = noise * epsilon
    return noise[0] if n is None else noise


def log_volume_ratio(h, z: Tensor, delta) -> tuple[Tensor, int]:
    """H/2 * mean log(||h(z+d) - h(z)||^2 / ||d||^2), plus the count of floored numerators.

    ``h`` maps a (n, H) tensor to (n, H); both evaluations share one batched call.
    """
    delta = T.as_tensor(delta)
    n, dim = z.shape
    out = h(T.concat([z, z + delta]))
    base, moved = T.split_rows(out, n)
    num = T.sum_sq_rows(moved - base)
    floored = int(np.count_nonzero(num.data < T.LOG_FLOOR))
    ratio = T.log(num) - T.log(T.sum_sq_rows(delta))
    return T.scale(T.mean(ratio), 0.5 * dim), floored


def nll_decoder(model: Autoencoder, x, weights: LossWeights, seed: int) -> tuple[Tensor, int]:
    k = int(weights.probes_per_sample)
    z = T.stop_gradient(model.encode(x))
    if k > 1:
        z = T.tile_rows(z, k)
    delta = sample_probe(model.latent_dim, weights.epsilon, weights.probe, seed, n=z.shape[0])
    return log_volume_ratio(lambda u: model.composite_h(u, ("phi",)), z, T.constant(delta))


def kl_standard_normal(mean: Tensor, log_var: Tensor) -> Tensor:
    inner = T.square(mean) + T.exp(log_var) - log_var - 1.0
    return T.scale(T.mean(T.sum(inner, axis=1)), 0.5)


def vae_losses(model: Autoencoder, x, weights: LossWeights, seed: int) -> tuple[Tensor, Tensor]:
    """(L_vr, L_vkl).

    The decoder-side scale is sigma^2 = c^2 ||f(x)||^2 / H. With
    ``sigma_norm="batch"`` the squared norm is averaged over the batch first;
    ``"sample"`` keeps one sigma per row. Gradients flow through sigma in both
    cases, which is what makes the loss indifferent to a global rescaling of
    the latent codes. The per-row form diverges for codes near the origin at
    small H, hence the batch default.
    """
    code = model.encode_stochastic(x, seed)
    target = T.stop_gradient(model.composite_h(code.mean))
    resid = T.sum_sq_rows(target - model.composite_h(code.sample))
    c2 = weights.sigma_coeff ** 2 / model.latent_dim
    norm_sq = T.sum_sq_rows(code.mean)
    if weights.sigma_norm == "batch":
        l_vr = T.mean(resid) / T.scale(T.mean(norm_sq) + _NORM_FLOOR, 2.0 * c2)
    else:
        l_vr = T.mean(resid / T.scale(norm_sq + _NORM_FLOOR, 2.0 * c2))
    return l_vr, kl_standard_normal(code.mean, code.log_var)


def unified_vr(model: Autoencoder, x, weights: LossWeights, seed: int) -> tuple[Tensor, int]:
    """Volume-ratio reconstruction with probes scaled by the encoder's sigma_phi."""
    mean, log_var = model.encode_mean_logvar(x)
    k = int(weights.probes_per_sample)
    z = T.stop_gradient(mean)
    std = T.exp(T.scale(log_var, 0.5))
    if k > 1:
        z, std = T.tile_rows(z, k), T.tile_rows(std, k)
    delta = std * probe_noise(seed, z.shape[0], model.latent_dim)
    return log_volume_ratio(lambda u: model.composite_h(u, ("phi",)), z, delta)


def _nan() -> Tensor:
    return T.constant(np.float64("nan"))


def assemble(objective: str, model: Autoencoder, x, z_prior, weights: LossWeights, seed: int) -> LossBundle:
    """All loss terms and the objective's weighted total.

    Terms with zero weight are still evaluated for reporting but are left out
    of the graph of ``total``. Terms that need a log-variance head are NaN
    when the model has none.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    weights.validate()
    x = T.constant(x)
    terms = {
        "L_r": recon_loss(model, x),
        "L_lr_N": latent_recon_prior(model, z_prior, weights.prior_routing),
        "L_lr_H": latent_recon_aggregate(model, x),
        "L_nll_phi": nll_encoder(model, x),
    }
    terms["L_nll_theta"], floored = nll_decoder(model, x, weights, seed)
    if model.variational:
        if objective == "LVPGA":
            terms["L_vr"], extra = unified_vr(model, x, weights, seed)
            floored += extra
            terms["L_vkl"] = kl_standard_normal(*model.encode_mean_logvar(x))
        else:
            terms["L_vr"], terms["L_vkl"] = vae_losses(model, x, weights, seed)
    elif objective == "LPGA":
        terms["L_vr"], terms["L_vkl"] = _nan(), _nan()
    else:
        raise ConfigError(f"{objective} needs a model with a variational head")

    w = weights
    if objective == "LPGA":
        plan = [("L_nll_phi", w.gamma), ("L_nll_theta", w.gamma)]
    elif objective == "VPGA":
        plan = [("L_vr", w.eta), ("L_vkl", w.eta)]
    else:
        plan = [("L_vr", w.gamma_prime), ("L_nll_phi", w.gamma), ("L_vkl", w.eta)]
    plan = [("L_r", 1.0), ("L_lr_N", w.alpha), ("L_lr_H", w.beta)] + plan

    total = None
    for name, weight in plan:
        if weight == 0:
            continue
        term = terms[name] if weight == 1.0 else T.scale(terms[name], weight)
        total = term if total is None else total + term
    return LossBundle(objective, terms, total, weights, floored)
