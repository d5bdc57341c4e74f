"""Exact change-of-variables quantities for small latent dimensions.

Used to certify the stochastic log-volume estimator against the exact
``log|det dh/dz|`` and to compute exact latent negative log-likelihoods for
evaluation. Nothing here feeds training gradients.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ContractError
from .losses import sample_probe
from .rng import derive_seed

MAX_EXACT_DIM = 32
PIVOT_TOL = 1e-12
_PROBE_CHUNK = 4096

LatentMap = Callable[[T.Tensor], T.Tensor]


def _guard_dim(dim: int):
    if dim > MAX_EXACT_DIM:
        raise ContractError(f"exact Jacobians are limited to H <= {MAX_EXACT_DIM}, got {dim}")


def batch_jacobian(h: LatentMap, z) -> np.ndarray:
    """Jacobians ``J[n, i, j] = d h_i / d z_j`` at each row of ``z``; one backward pass per output."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, dim = z.shape
    _guard_dim(dim)
    zt = T.Tensor(z.copy(), requires_grad=True)
    out = h(zt)
    if out.shape != (n, dim):
        raise ContractError(f"latent map must return shape {(n, dim)}, got {out.shape}")
    jac = np.empty((n, dim, dim))
    for i in range(dim):
        e = np.zeros((dim, 1))
        e[i, 0] = 1.0
        (g,) = T.backward(T.sum(out @ e), [zt])
        jac[:, i, :] = g
    return jac


def exact_jacobian(h: LatentMap, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return batch_jacobian(h, z)[0]


def finite_difference_jacobian(h: LatentMap, z, step: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dim = z.size
    rows = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = step
        rows.append(z + e)
        rows.append(z - e)
    out = h(T.constant(np.array(rows))).data
    return ((out[0::2] - out[1::2]) / (2.0 * step)).T


def exact_logabsdet(jac, tol: float = PIVOT_TOL) -> float:
    """log|det J| from partial-pivot LU; ``-inf`` when a pivot falls below ``tol * max|J|``."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise ContractError(f"exact_logabsdet needs a square matrix, got shape {jac.shape}")
    vals, _ = kernels.lu_logabsdet(jac[None], tol)
    return float(vals[0])


def batch_logabsdet(jacs, tol: float = PIVOT_TOL) -> np.ndarray:
    vals, _ = kernels.lu_logabsdet(np.asarray(jacs, dtype=np.float64), tol)
    return vals


@dataclass
class JacobianReport:
    z: np.ndarray
    jacobian: np.ndarray
    exact_logabsdet: float
    estimator_mean: float
    estimator_std: float
    probes_used: int
    epsilon: float
    probe_kind: str = "sphere"
    floored: int = 0
    samples: np.ndarray = field(default=None, repr=False)

    @property
    def estimator_se(self) -> float:
        return self.estimator_std / math.sqrt(self.probes_used)

    @property
    def singular(self) -> bool:
        return self.exact_logabsdet == -math.inf

    @property
    def gap(self) -> float:
        return self.estimator_mean - self.exact_logabsdet


def probe_estimates(h: LatentMap, z, epsilon: float, probe_kind: str, n_probes: int, seed: int):
    """Per-probe values of H/2 * log(||h(z+d) - h(z)||^2 / ||d||^2) and the floored count."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dim = z.size
    deltas = sample_probe(dim, epsilon, probe_kind, seed, n=n_probes)
    out = np.empty(n_probes)
    floored = 0
    for s in range(0, n_probes, _PROBE_CHUNK):
        d = deltas[s:s + _PROBE_CHUNK]
        hz = h(T.constant(np.vstack([z[None], z + d]))).data
        num = np.sum((hz[1:] - hz[:1]) ** 2, axis=1)
        floored += int(np.count_nonzero(num < T.LOG_FLOOR))
        num = np.maximum(num, T.LOG_FLOOR)
        out[s:s + len(d)] = 0.5 * dim * (np.log(num) - np.log(np.sum(d * d, axis=1)))
    return out, floored


def estimator_stats(h: LatentMap, z, epsilon: float = 1e-4, probe_kind: str = "sphere",
                    n_probes: int = 10_000, seed: int = 0) -> JacobianReport:
    if n_probes < 1:
        raise ContractError("n_probes must be >= 1")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    jac = exact_jacobian(h, z)
    samples, floored = probe_estimates(h, z, epsilon, probe_kind, n_probes, seed)
    std = float(np.std(samples, ddof=1)) if n_probes > 1 else 0.0
    return JacobianReport(z, jac, exact_logabsdet(jac), float(np.mean(samples)), std,
                          n_probes, epsilon, probe_kind, floored, samples)


@dataclass
class NllReport:
    mean: float
    per_sample: np.ndarray
    excluded: int

    def __float__(self):
        return self.mean


def exact_nll(model, x, chunk: int = 1024) -> NllReport:
    """Mean of 1/2||z||^2 + H/2 log(2 pi) + log|det dh/dz| at z = f(x).

    Samples with a singular Jacobian are excluded and counted.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dim = model.latent_dim
    _guard_dim(dim)
    per = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        z = model.encode(T.constant(x[s:s + chunk])).data
        lad = batch_logabsdet(batch_jacobian(model.composite_h, z))
        per[s:s + chunk] = 0.5 * np.sum(z * z, axis=1) + 0.5 * dim * math.log(2 * math.pi) + lad
    ok = np.isfinite(per)
    mean = float(np.mean(per[ok])) if np.any(ok) else math.nan
    return NllReport(mean, per, int(np.count_nonzero(~ok)))


# ---- certification ------------------------------------------------------

CERT_COLUMNS = ("H", "epsilon", "probes", "exact", "est_mean", "est_se", "gap", "verdict")


@dataclass
class CertRow:
    H: int
    epsilon: float
    probes: int
    exact: float
    est_mean: float
    est_se: float
    gap: float
    verdict: str
    per_probe_var: float = 0.0


@dataclass
class Certification:
    rows: list[CertRow]
    verdict: str
    label: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict in ("PASS", "SINGULAR")


def _row_verdict(rep: JacobianReport, n_se: float) -> str:
    if rep.singular:
        return "SINGULAR" if math.isfinite(rep.estimator_mean) else "FAIL"
    return "PASS" if rep.gap >= -n_se * rep.estimator_se else "FAIL"


def certify_prop1(h: LatentMap, z, epsilons: Sequence[float] = (1e-3, 1e-4), probe_kind: str = "sphere",
                  n_probes: int = 10_000, seed: int = 0, n_se: float = 3.0, label: str = "") -> Certification:
    """Check the estimator upper-bounds the exact log-determinant at ``z``.

    PASS iff, at the smallest epsilon, ``gap >= -n_se * SE`` and the gap does
    not blow up as epsilon shrinks (each step at most doubles in magnitude,
    allowing for Monte-Carlo noise). A singular exact Jacobian with a finite
    estimate is reported as SINGULAR instead of FAIL.
    """
    eps_sorted = sorted(epsilons, reverse=True)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    rows, reports = [], []
    for i, eps in enumerate(eps_sorted):
        rep = estimator_stats(h, z, eps, probe_kind, n_probes, derive_seed(seed, "cert", i))
        reports.append(rep)
        rows.append(CertRow(z.size, eps, n_probes, rep.exact_logabsdet, rep.estimator_mean,
                            rep.estimator_se, rep.gap, _row_verdict(rep, n_se),
                            float(np.var(rep.samples, ddof=1)) if n_probes > 1 else 0.0))
    last = rows[-1]
    if last.verdict == "SINGULAR":
        verdict = "SINGULAR"
    elif last.verdict == "FAIL":
        verdict = "FAIL"
    else:
        verdict = "PASS"
        for a, b in zip(rows[:-1], rows[1:]):
            slack = n_se * (a.est_se + b.est_se) + 1e-9
            if abs(b.gap) > 2.0 * abs(a.gap) + slack:
                verdict = "FAIL"
    return Certification(rows, verdict, label)


def write_certification_csv(certs: Sequence[Certification], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CERT_COLUMNS)
        for cert in certs:
            for r in cert.rows:
                w.writerow([r.H, repr(r.epsilon), r.probes, repr(r.exact), repr(r.est_mean),
                            repr(r.est_se), repr(r.gap), r.verdict])
