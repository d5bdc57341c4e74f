"""Self-checks run by ``pgalab verify``.

Every check returns :class:`CheckRecord` rows so callers can print a table,
write CSV, or assert on them in tests.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .logdet import Certification, certify_prop1
from .losses import LossWeights, assemble, kl_standard_normal, nll_encoder, unified_vr
from .nets import Autoencoder, MlpNet, build_autoencoder, init_params
from .rng import derive_seed, stream

CERT_DIMS = (2, 4, 8)
CERT_EPSILONS = (1e-3, 1e-4)
IDENTITY_SCALES = (0.5, 1.0, 5.0)
MLP_HIDDEN = 16

# Parameter group that must receive an exact-zero gradient from each term.
EXCLUDED_GROUP = {
    "L_lr_N": "theta",
    "L_lr_H": "theta",
    "L_nll_phi": "theta",
    "L_vkl": "theta",
    "L_nll_theta": "phi",
}


@dataclass
class CheckRecord:
    check: str
    case: str
    value: float
    tolerance: float
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict in ("PASS", "SINGULAR")


# ---- latent maps used by the certification matrix -------------------------

def linear_map(matrix):
    a = T.constant(np.asarray(matrix, dtype=np.float64))
    return lambda z: z @ a


def random_linear(dim: int, seed: int):
    rng = stream(seed, f"verify/linear/{dim}")
    return linear_map(rng.standard_normal((dim, dim)) / math.sqrt(dim))


def random_mlp(dim: int, seed: int, hidden: int = MLP_HIDDEN) -> MlpNet:
    return init_params([dim, hidden, hidden, dim], derive_seed(seed, "verify/mlp", dim), "tanh", "theta")


def scaled_identity(c: float):
    return lambda z: T.scale(z, c)


def cert_points(dim: int, n: int, seed: int) -> np.ndarray:
    return stream(seed, f"verify/points/{dim}").standard_normal((n, dim))


def certification_matrix(seed: int = 0, n_points: int = 20, n_probes: int = 10_000,
                         dims=CERT_DIMS, epsilons=CERT_EPSILONS) -> list[Certification]:
    certs = []
    for dim in dims:
        maps = {"linear": random_linear(dim, seed), "mlp": random_mlp(dim, seed)}
        pts = cert_points(dim, n_points, seed)
        for family, h in maps.items():
            for i, z in enumerate(pts):
                certs.append(certify_prop1(h, z, epsilons, "sphere", n_probes,
                                           derive_seed(seed, f"verify/{family}/{dim}", i),
                                           label=f"{family} H={dim} z#{i}"))
    return certs


def identity_certifications(seed: int = 0, n_probes: int = 10_000, dims=CERT_DIMS,
                            scales=IDENTITY_SCALES, epsilons=CERT_EPSILONS) -> list[Certification]:
    certs = []
    for dim in dims:
        z = cert_points(dim, 1, seed)[0]
        for c in scales:
            certs.append(certify_prop1(scaled_identity(c), z, epsilons, "sphere", n_probes,
                                       derive_seed(seed, "verify/identity", dim),
                                       label=f"{c}*I H={dim}"))
    return certs


def singular_certification(seed: int = 0, n_probes: int = 1000) -> Certification:
    """Decoder whose last layer drops a latent direction: det J = 0 exactly."""
    h = linear_map(np.diag([1.0, 0.0]))
    return certify_prop1(h, np.array([0.3, -0.7]), CERT_EPSILONS, "sphere", n_probes, seed,
                         label="singular diag(1,0)")


def certification_records(certs: Iterable[Certification]) -> list[CheckRecord]:
    out = []
    for c in certs:
        last = c.rows[-1]
        out.append(CheckRecord("prop1", c.label, last.gap, 3.0 * last.est_se, c.verdict))
    return out


def identity_records(certs: Iterable[Certification], gap_tol: float = 1e-9,
                     var_tol: float = 1e-18) -> list[CheckRecord]:
    out = []
    for c in certs:
        worst_gap = max(abs(r.gap) for r in c.rows)
        worst_var = max(r.per_probe_var for r in c.rows)
        ok = worst_gap <= gap_tol and worst_var < var_tol
        out.append(CheckRecord("tight", c.label, worst_gap, gap_tol, "PASS" if ok else "FAIL"))
    return out


# ---- loss identities ------------------------------------------------------

def _random_variational(seed: int, D: int = 4, H: int = 2, epsilon=None) -> Autoencoder:
    return build_autoencoder(D, H, (8, 8), variational=True, logvar_epsilon=epsilon, seed=seed)


def kl_identity_gap(model: Autoencoder, x) -> float:
    """|(KL - L_nll_phi) - 1/2 mean sum(s^2 - log s^2 - 1)| for one batch."""
    mean, log_var = model.encode_mean_logvar(T.constant(x))
    lhs = kl_standard_normal(mean, log_var).item() - nll_encoder(model, T.constant(x)).item()
    lv = log_var.data
    closed = 0.5 * float(np.mean(np.sum(np.exp(lv) - lv - 1.0, axis=1)))
    return abs(lhs - closed)


def kl_identity_records(seed: int = 0, batches: int = 100, tol: float = 1e-10) -> list[CheckRecord]:
    worst = 0.0
    for b in range(batches):
        model = _random_variational(derive_seed(seed, "verify/kl", b))
        # widen the head so sigma^2 spans several orders of magnitude
        model.logvar_head[0].data *= 3.0
        x = stream(seed, "verify/kl/x", b).standard_normal((16, model.data_dim)) * 2.0
        worst = max(worst, kl_identity_gap(model, x))
    return [CheckRecord("kl_identity", f"{batches} batches", worst, tol, "PASS" if worst < tol else "FAIL")]


def pin_logvar_to_floor(model: Autoencoder) -> None:
    """Drive the log-variance head far below its floor so sigma^2 == eps^2."""
    w, b = model.logvar_head
    w.data[...] = 0.0
    b.data[...] = -1e3


def reduction_gaps(model: Autoencoder, x, z_prior, gamma: float, seed: int) -> tuple[float, float]:
    """(LVPGA-vs-LPGA gap under the pinned-floor setting, gamma=0 recomposition gap)."""
    eps = model.logvar_epsilon
    lp_model = Autoencoder(model.encoder, model.decoder)
    lv_w = LossWeights(gamma=gamma, gamma_prime=gamma, eta=0.0, epsilon=eps, probe="gaussian")
    lp_w = LossWeights(gamma=gamma, epsilon=eps, probe="gaussian")
    lv = assemble("LVPGA", model, x, z_prior, lv_w, seed).total.item()
    lp = assemble("LPGA", lp_model, x, z_prior, lp_w, seed).total.item()

    w0 = LossWeights(alpha=0.7, beta=0.3, gamma=0.0, gamma_prime=0.8, eta=1.3, epsilon=eps)
    b = assemble("LVPGA", model, x, z_prior, w0, seed)
    xt = T.constant(x)
    recomposed = (b["L_r"].item() + w0.alpha * b["L_lr_N"].item() + w0.beta * b["L_lr_H"].item()
                  + w0.gamma_prime * unified_vr(model, xt, w0, seed)[0].item()
                  + w0.eta * kl_standard_normal(*model.encode_mean_logvar(xt)).item())
    return abs(lv - lp), abs(b.total.item() - recomposed)


def reduction_records(seed: int = 0, batches: int = 20, tol: float = 1e-10) -> list[CheckRecord]:
    worst_a = worst_b = 0.0
    for i in range(batches):
        model = _random_variational(derive_seed(seed, "verify/reduce", i), epsilon=1e-3)
        pin_logvar_to_floor(model)
        rng = stream(seed, "verify/reduce/x", i)
        x = rng.standard_normal((16, model.data_dim))
        zp = rng.standard_normal((16, model.latent_dim))
        a, b = reduction_gaps(model, x, zp, gamma=0.5, seed=derive_seed(seed, "verify/reduce/loss", i))
        worst_a, worst_b = max(worst_a, a), max(worst_b, b)
    return [CheckRecord("lvpga_reduction", "gamma'=gamma, eta=0, sigma=eps", worst_a, tol,
                        "PASS" if worst_a < tol else "FAIL"),
            CheckRecord("lvpga_reduction", "gamma=0 recomposition", worst_b, tol,
                        "PASS" if worst_b < tol else "FAIL")]


def routing_gradients(model: Autoencoder, term: T.Tensor) -> dict[str, list[np.ndarray]]:
    grads = T.backward(term, model.phi + model.theta)
    n = len(model.phi)
    return {"phi": grads[:n], "theta": grads[n:]}


def routing_records(seed: int = 0) -> list[CheckRecord]:
    model = _random_variational(derive_seed(seed, "verify/routing", 0))
    rng = stream(seed, "verify/routing/x")
    x = rng.standard_normal((8, model.data_dim))
    zp = rng.standard_normal((8, model.latent_dim))
    bundle = assemble("VPGA", model, x, zp, LossWeights(beta=1.0), seed)
    out = []
    for name, group in EXCLUDED_GROUP.items():
        g = routing_gradients(model, bundle[name])
        leaked = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in g[group])
        out.append(CheckRecord("routing", f"{name} -> {group}", leaked, 0.0,
                               "PASS" if leaked == 0.0 else "FAIL"))
    return out


# ---- checkpoint-driven certification ----------------------------------------

def checkpoint_certifications(model: Autoencoder, seed: int = 0, n_points: int = 20,
                              n_probes: int = 10_000) -> list[Certification]:
    h = lambda z: model.composite_h(z)
    pts = stream(seed, "verify/checkpoint").standard_normal((n_points, model.latent_dim))
    return [certify_prop1(h, z, CERT_EPSILONS, "sphere", n_probes,
                          derive_seed(seed, "verify/checkpoint", i), label=f"checkpoint z#{i}")
            for i, z in enumerate(pts)]


def write_records_csv(records: Iterable[CheckRecord], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "case", "value", "tolerance", "verdict"])
        for r in records:
            w.writerow([r.check, r.case, repr(r.value), repr(r.tolerance), r.verdict])
