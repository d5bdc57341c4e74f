"""Datasets, the PGAD container, sample generation and quality metrics.

PGAD layout (little-endian)::

    offset  type       field
    0       4s         magic b"PGAD"
    4       u32        N, number of samples
    8       u32        D, values per sample
    12      f32[N*D]   row-major samples

Synthetic recipes (``make_synthetic``):

* ``gauss2d`` -- zero-mean Gaussian, covariance with eigenvalues sqrt(10)
  and 1/sqrt(10) (condition number 10, determinant 1) rotated by 30 degrees.
* ``ring8`` -- eight clusters at radius 2; per-cluster isotropic Gaussian
  offsets with std 0.25, resampled until within 3 std of the centre.
* ``checkerboard`` -- uniform on the 8 dark cells of a 4x4 board on [-2, 2]^2.
* ``manifold(D,d)`` -- u ~ N(0, I_d) pushed through the fixed smooth map
  x = A u + 0.25 tanh(B u), with A (orthonormal columns) and B drawn once
  from a seed depending only on (D, d).
"""
from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, FormatError
from .rng import stream

GAUSS2D_ANGLE = math.pi / 6
GAUSS2D_EIGS = (math.sqrt(10.0), 1.0 / math.sqrt(10.0))
RING8_RADIUS = 2.0
RING8_STD = 0.25

TRAIN, EVAL = 0, 1


@dataclass
class Dataset:
    name: str
    samples: np.ndarray
    image: bool = False
    split: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ConfigError(f"dataset samples must be 2-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError(f"dataset {self.name!r} contains non-finite values")
        if self.split is None:
            self.split = np.zeros(len(self.samples), dtype=np.int8)

    @property
    def D(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    @property
    def train(self) -> np.ndarray:
        return self.samples[self.split == TRAIN]

    @property
    def eval(self) -> np.ndarray:
        return self.samples[self.split == EVAL]


@dataclass
class SampleSet:
    values: np.ndarray
    origin: str
    latent: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.values)


def gauss2d_covariance() -> np.ndarray:
    c, s = math.cos(GAUSS2D_ANGLE), math.sin(GAUSS2D_ANGLE)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag(GAUSS2D_EIGS) @ rot.T


def ring8_centers() -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return RING8_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _gauss2d(n, rng):
    chol = np.linalg.cholesky(gauss2d_covariance())
    return rng.standard_normal((n, 2)) @ chol.T


def _ring8(n, rng):
    labels = rng.integers(0, 8, size=n)
    offsets = rng.standard_normal((n, 2))
    bad = np.linalg.norm(offsets, axis=1) > 3.0
    while np.any(bad):
        offsets[bad] = rng.standard_normal((int(bad.sum()), 2))
        bad = np.linalg.norm(offsets, axis=1) > 3.0
    return ring8_centers()[labels] + RING8_STD * offsets


def _checkerboard(n, rng):
    dark = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    cells = np.array(dark, dtype=np.float64)[rng.integers(0, len(dark), size=n)]
    return -2.0 + cells + rng.uniform(size=(n, 2))


def manifold_map(D: int, d: int):
    """The fixed (A, B) pair used by ``manifold(D, d)``."""
    rng = stream(1000 * D + d, "manifold-map")
    a, _ = np.linalg.qr(rng.standard_normal((D, d)))
    b = rng.standard_normal((d, D))
    return a, b


def _manifold(n, rng, D, d):
    if d > D:
        raise ConfigError(f"intrinsic dimension {d} exceeds ambient dimension {D}")
    if d < 1:
        raise ConfigError("intrinsic dimension must be >= 1")
    a, b = manifold_map(D, d)
    u = rng.standard_normal((n, d))
    return u @ a.T + 0.25 * np.tanh(u @ b)


_MANIFOLD = re.compile(r"^manifold\(\s*(\d+)\s*,\s*(\d+)\s*\)$")
SYNTHETIC_KINDS = ("gauss2d", "ring8", "checkerboard", "manifold(D,d)")


def parse_kind(kind: str):
    kind = kind.strip()
    m = _MANIFOLD.match(kind)
    if m:
        return "manifold", (int(m.group(1)), int(m.group(2)))
    if kind in ("gauss2d", "ring8", "checkerboard"):
        return kind, ()
    raise ConfigError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTHETIC_KINDS}")


def make_synthetic(kind: str, n: int, seed: int, n_eval: int = 0) -> Dataset:
    """Draw ``n`` samples; the last ``n_eval`` of them are tagged as the eval split."""
    if n <= 0:
        raise ConfigError("n must be positive")
    if not 0 <= n_eval <= n:
        raise ConfigError("n_eval must lie in [0, n]")
    name, args = parse_kind(kind)
    rng = stream(seed, f"data/{kind}")
    if name == "gauss2d":
        x = _gauss2d(n, rng)
    elif name == "ring8":
        x = _ring8(n, rng)
    elif name == "checkerboard":
        x = _checkerboard(n, rng)
    else:
        x = _manifold(n, rng, *args)
    split = np.zeros(n, dtype=np.int8)
    split[n - n_eval:] = EVAL
    return Dataset(kind, x, False, split)


# ---- PGAD ---------------------------------------------------------------

PGAD_MAGIC = b"PGAD"
_PGAD_HEAD = struct.Struct("<4sII")


def pgad_bytes(samples) -> bytes:
    x = np.atleast_2d(np.asarray(samples))
    n, d = x.shape
    return _PGAD_HEAD.pack(PGAD_MAGIC, n, d) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def write_pgad(path, samples) -> None:
    Path(path).write_bytes(pgad_bytes(samples))


def parse_pgad(buf: bytes) -> np.ndarray:
    if len(buf) < _PGAD_HEAD.size:
        raise FormatError("PGAD header truncated", offset=len(buf))
    magic, n, d = _PGAD_HEAD.unpack_from(buf, 0)
    if magic != PGAD_MAGIC:
        raise FormatError(f"bad PGAD magic {magic!r}", offset=0)
    need = _PGAD_HEAD.size + 4 * n * d
    if len(buf) < need:
        raise FormatError(f"PGAD payload truncated: need {need} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after PGAD payload", offset=need)
    payload = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_PGAD_HEAD.size)
    return payload.astype(np.float64).reshape(n, d)


def load_raster(path, image: bool = False, name: str | None = None) -> Dataset:
    """Read a PGAD file; image-typed data outside [0, 1] is min-max rescaled."""
    x = parse_pgad(Path(path).read_bytes())
    if not np.all(np.isfinite(x)):
        raise FormatError("PGAD payload contains non-finite values")
    if image and x.size and (x.min() < 0.0 or x.max() > 1.0):
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(name or Path(path).stem, x, image)


# ---- sampling -----------------------------------------------------------

def generate_samples(model, n: int, seed: int) -> SampleSet:
    z = stream(seed, "generate").standard_normal((n, model.latent_dim))
    return SampleSet(model.decode(T.constant(z)).data, "generated", z)


def interpolate(model, x_a, x_b, steps: int) -> SampleSet:
    """Decode straight-line latent paths between f(x_a) and f(x_b).

    Rows are encoded/decoded one at a time so each output matches a
    single-sample pass exactly.
    """
    if steps < 2:
        raise ConfigError("interpolate needs steps >= 2")
    za = model.encode(T.constant(np.reshape(x_a, (1, -1)))).data[0]
    zb = model.encode(T.constant(np.reshape(x_b, (1, -1)))).data[0]
    ts = np.linspace(0.0, 1.0, steps)
    latent = np.array([(1.0 - t) * za + t * zb for t in ts])
    out = np.vstack([model.decode(T.constant(z[None])).data for z in latent])
    return SampleSet(out, "interpolation", latent)


# ---- MMD ----------------------------------------------------------------

@dataclass
class MmdReport:
    statistic: float
    bandwidths: list[float]
    n_x: int
    n_y: int
    threshold: float = math.nan
    verdict: str = "n/a"
    null: np.ndarray | None = field(default=None, repr=False)


def _values(s) -> np.ndarray:
    return np.atleast_2d(np.asarray(s.values if isinstance(s, SampleSet) else s, dtype=np.float64))


def median_bandwidths(pooled_sq_dists: np.ndarray, multipliers=(0.5, 1.0, 2.0)) -> list[float]:
    iu = np.triu_indices(pooled_sq_dists.shape[0], k=1)
    med = float(np.median(np.sqrt(pooled_sq_dists[iu])))
    if med == 0.0:
        med = 1.0
    return [m * med for m in multipliers]


def _kernel_from_sq(d2: np.ndarray, bandwidths) -> np.ndarray:
    k = np.zeros_like(d2)
    for bw in bandwidths:
        k += np.exp((-0.5 / (bw * bw)) * d2)
    return k


def _unbiased(k: np.ndarray, n: int, m: int) -> float:
    kxx = k[:n, :n]
    kyy = k[n:, n:]
    kxy = k[:n, n:]
    sxx = kxx.sum() - np.trace(kxx)
    syy = kyy.sum() - np.trace(kyy)
    return float(sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2.0 * kxy.sum() / (n * m))


def mmd_unbiased(x, y, bandwidths: Sequence[float] | None = None) -> MmdReport:
    """Unbiased squared MMD with a sum of Gaussian kernels exp(-d^2 / (2 bw^2)).

    Default bandwidths are the pooled median pairwise distance times 0.5, 1, 2.
    """
    xv, yv = _values(x), _values(y)
    n, m = len(xv), len(yv)
    if n < 2 or m < 2:
        raise ConfigError("mmd_unbiased needs at least 2 samples on each side")
    pooled = np.vstack([xv, yv])
    if bandwidths is None:
        d2 = kernels.pairwise_sq_dists(pooled, pooled)
        bandwidths = median_bandwidths(d2)
        k = _kernel_from_sq(d2, bandwidths)
    else:
        k = kernels.gaussian_kernel(pooled, pooled, np.asarray(bandwidths, dtype=np.float64))
    return MmdReport(_unbiased(k, n, m), list(map(float, bandwidths)), n, m)


def mmd_permutation_test(x, y, n_permutations: int = 200, seed: int = 0, level: float = 0.95,
                         bandwidths: Sequence[float] | None = None) -> MmdReport:
    """MMD statistic plus the ``level`` quantile of a label-permutation null."""
    xv, yv = _values(x), _values(y)
    n, m = len(xv), len(yv)
    pooled = np.vstack([xv, yv])
    d2 = kernels.pairwise_sq_dists(pooled, pooled)
    if bandwidths is None:
        bandwidths = median_bandwidths(d2)
    k = _kernel_from_sq(d2, bandwidths)
    del d2
    stat = _unbiased(k, n, m)
    np.fill_diagonal(k, 0.0)
    total = n + m
    rng = stream(seed, "mmd-permutation")
    masks = np.zeros((total, n_permutations))
    for p in range(n_permutations):
        masks[rng.permutation(total)[:n], p] = 1.0
    row = k.sum(axis=1)
    ka = k @ masks
    sxx = np.einsum("ip,ip->p", masks, ka)
    a_row = masks.T @ row
    sxy = a_row - sxx
    syy = row.sum() - 2.0 * a_row + sxx
    null = sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2.0 * sxy / (n * m)
    threshold = float(np.quantile(null, level))
    verdict = "PASS" if stat < threshold else "FAIL"
    return MmdReport(stat, list(map(float, bandwidths)), n, m, threshold, verdict, null)


def write_mmd_csv(reports: dict[str, MmdReport], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "statistic", "threshold", "verdict", "n_x", "n_y", "bandwidths"])
        for label, r in reports.items():
            w.writerow([label, repr(r.statistic), repr(r.threshold), r.verdict, r.n_x, r.n_y,
                        " ".join(repr(b) for b in r.bandwidths)])


# ---- image grids --------------------------------------------------------

def _tile_geometry(dim: int):
    side = math.isqrt(dim)
    if side * side == dim:
        return side, 1
    if dim % 3 == 0:
        side = math.isqrt(dim // 3)
        if 3 * side * side == dim:
            return side, 3
    raise ConfigError(f"sample width {dim} is neither s*s (grey) nor 3*s*s (RGB)")


def grid_image(samples, rows: int, cols: int) -> np.ndarray:
    """uint8 canvas (H, W) or (H, W, 3) with 1-pixel black separators."""
    x = _values(samples)
    side, ch = _tile_geometry(x.shape[1])
    tiles = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    h = rows * side + rows - 1
    w = cols * side + cols - 1
    canvas = np.zeros((h, w, ch), dtype=np.uint8)
    for idx in range(min(len(tiles), rows * cols)):
        r, c = divmod(idx, cols)
        y0, x0 = r * (side + 1), c * (side + 1)
        canvas[y0:y0 + side, x0:x0 + side] = tiles[idx].reshape(side, side, ch)
    return canvas[:, :, 0] if ch == 1 else canvas


def emit_grid(samples, rows: int, cols: int, path) -> Path:
    """Write a binary PGM (P5) or PPM (P6) tiling of image-typed samples."""
    if isinstance(samples, Dataset) and not samples.image:
        raise ConfigError("emit_grid needs image-typed samples")
    canvas = grid_image(samples.samples if isinstance(samples, Dataset) else samples, rows, cols)
    magic = b"P5" if canvas.ndim == 2 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (canvas.shape[1], canvas.shape[0])
    path = Path(path)
    path.write_bytes(header + canvas.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Parse a binary P5/P6 file written by :func:`emit_grid`."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PNM header truncated", offset=pos)
        fields.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"unsupported PNM variant {magic!r} maxval {maxval}", offset=0)
    ch = 1 if magic == b"P5" else 3
    need = pos + w * h * ch
    if len(buf) < need:
        raise FormatError("PNM pixel data truncated", offset=len(buf))
    img = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    return img.reshape(h, w) if ch == 1 else img.reshape(h, w, 3)
