"""Training loop, config files, momentum SGD and resumable checkpoints.

Config files are flat UTF-8 ``key = value`` lines; ``#`` starts a comment and
unknown keys are rejected. Randomness per step comes from counter streams
``(seed, purpose, step)`` so a run resumed from a checkpoint at step k
replays exactly what an uninterrupted run would have done.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .data import Dataset, generate_samples, load_raster, make_synthetic, mmd_unbiased, parse_kind
from .errors import ConfigError, ContractError, NumericAbort
from .logdet import MAX_EXACT_DIM, exact_nll
from .losses import OBJECTIVES, TERMS, LossWeights, assemble
from .nets import Autoencoder, build_autoencoder, load_checkpoint, save_checkpoint
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step",) + TERMS + ("total", "exact_nll", "mmd")
TRACE_COLUMNS = ("step",) + TERMS + ("total",)
CHECKPOINT_NAME = "checkpoint.pga"


@dataclass
class TrainConfig:
    objective: str = "LPGA"
    hidden: tuple = (256, 256)
    latent_dim: int = 2
    activation: str = "tanh"
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.01
    gamma_prime: float = 0.01
    eta: float = 0.1
    sigma_coeff: float = 0.1
    epsilon: float = 1e-3
    probe: str = "sphere"
    probes_per_sample: int = 1
    prior_routing: str = "encoder"
    sigma_norm: str = "batch"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 128
    steps: int = 5000
    seed: int = 0
    dataset: str = "gauss2d"
    image: bool = False
    n_train: int = 10000
    n_eval: int = 2000
    eval_every: int = 500
    eval_samples: int = 1000
    n_samples: int = 5000
    checkpoint: str = CHECKPOINT_NAME
    trace: bool = True

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.gamma_prime, self.eta,
                           self.sigma_coeff, self.epsilon, self.probe, self.probes_per_sample,
                           self.prior_routing, self.sigma_norm)

    @property
    def variational(self) -> bool:
        return self.objective in ("VPGA", "LVPGA")

    def validate(self) -> "TrainConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective: must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("latent_dim", "batch_size", "eval_every", "eval_samples", "n_train", "n_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if self.steps < 0:
            raise ConfigError("steps: must be >= 0")
        if self.n_eval < 2:
            raise ConfigError("n_eval: must be >= 2")
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate: must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum: must lie in [0, 1)")
        if any(w <= 0 for w in self.hidden):
            raise ConfigError("hidden: widths must be positive")
        self.weights.validate()
        return self


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}


def apply_overrides(config: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    updates = {}
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config key")
        updates[key] = _convert(key, _FIELD_TYPES[key], raw)
    return dataclasses.replace(config, **updates)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{key}: given twice (line {lineno})")
        pairs[key] = value
    return apply_overrides(base or TrainConfig(), pairs)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_config(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(config, f.name))}\n" for f in fields(config))


# ---- optimizer ----------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[T.Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_momentum_step(params: Sequence[T.Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
                      lr: float, momentum: float) -> None:
    """Classical momentum, in place: v = momentum*v + g; p = p - lr*v."""
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ContractError(f"got {len(params)} params, {len(grads)} grads, {len(state.velocity)} velocities")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, velocity {v.shape}")
        kernels.momentum_update(p.data, v, g, lr, momentum)


# ---- training -----------------------------------------------------------

def load_dataset(config: TrainConfig) -> Dataset:
    try:
        parse_kind(config.dataset)
        synthetic = True
    except ConfigError:
        synthetic = False
    if synthetic:
        return make_synthetic(config.dataset, config.n_train + config.n_eval, config.seed, config.n_eval)
    path = Path(config.dataset)
    if not path.exists():
        raise ConfigError(f"dataset: {config.dataset!r} is neither a synthetic kind nor an existing file")
    ds = load_raster(path, config.image)
    if len(ds) <= config.n_eval:
        raise ConfigError(f"dataset: {len(ds)} samples cannot hold n_eval = {config.n_eval}")
    ds.split[len(ds) - config.n_eval:] = 1
    return ds


def build_model(config: TrainConfig, data_dim: int) -> Autoencoder:
    return build_autoencoder(data_dim, config.latent_dim, config.hidden, config.activation,
                             variational=config.variational,
                             logvar_epsilon=config.epsilon if config.objective == "LVPGA" else None,
                             seed=config.seed)


def evaluate(model: Autoencoder, eval_x: np.ndarray, n: int, seed: int, step: int) -> tuple[float, float]:
    """(exact NLL or nan, MMD between generated and held-out samples)."""
    nll = exact_nll(model, eval_x).mean if model.latent_dim <= MAX_EXACT_DIM else math.nan
    held = eval_x[:n]
    gen = generate_samples(model, len(held), derive_seed(seed, "eval", step))
    return nll, mmd_unbiased(gen, held).statistic


@dataclass
class TrainResult:
    model: Autoencoder
    state: OptimizerState
    step: int
    metrics: list[dict]
    trace: list[dict]
    out_dir: Path


def _csv_value(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, columns, rows, append: bool):
    exists = append and path.exists()
    with open(path, "a" if exists else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(columns)
        for r in rows:
            w.writerow([_csv_value(r[c]) for c in columns])


def _offending_term(bundle) -> str:
    for name, term in bundle.terms.items():
        if not np.all(np.isfinite(term.data)):
            w = _term_weight(bundle.objective, name, bundle.weights)
            if w != 0:
                return name
    return "total"


def _term_weight(objective, name, w: LossWeights) -> float:
    base = {"L_r": 1.0, "L_lr_N": w.alpha, "L_lr_H": w.beta}
    if objective == "LPGA":
        base.update(L_nll_phi=w.gamma, L_nll_theta=w.gamma)
    elif objective == "VPGA":
        base.update(L_vr=w.eta, L_vkl=w.eta)
    else:
        base.update(L_vr=w.gamma_prime, L_nll_phi=w.gamma, L_vkl=w.eta)
    return base.get(name, 0.0)


def train(config: TrainConfig, out_dir, resume: bool = False,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run (or resume) training, writing metrics.csv, trace.csv and checkpoints to ``out_dir``.

    A metrics row is written after every ``eval_every`` completed steps; its
    loss columns average the per-step values since the previous row.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config)
    train_x, eval_x = ds.train, ds.eval
    ckpt_path = out / config.checkpoint
    metrics_path, trace_path = out / "metrics.csv", out / "trace.csv"

    if resume:
        model, velocity, start = load_checkpoint(ckpt_path)
        if model.data_dim != ds.D or model.latent_dim != config.latent_dim:
            raise ConfigError("checkpoint architecture does not match the config")
        state = OptimizerState(velocity) if velocity is not None else OptimizerState.zeros(model.parameters())
    else:
        model = build_model(config, ds.D)
        state = OptimizerState.zeros(model.parameters())
        start = 0
        (out / "effective.cfg").write_text(emit_config(config), encoding="utf-8")
    params = model.parameters()
    weights = config.weights
    seed = config.seed

    metrics, trace, window = [], [], []
    if not resume:
        _write_rows(metrics_path, METRIC_COLUMNS, [], append=False)
        if config.trace:
            _write_rows(trace_path, TRACE_COLUMNS, [], append=False)

    for step in range(start, config.steps):
        idx = stream(seed, "batch", step).integers(0, len(train_x), size=config.batch_size)
        z_prior = stream(seed, "prior", step).standard_normal((config.batch_size, config.latent_dim))
        bundle = assemble(config.objective, model, train_x[idx], z_prior, weights, derive_seed(seed, "loss", step))
        values = bundle.values()
        if not math.isfinite(values["total"]):
            term = _offending_term(bundle)
            raise NumericAbort(f"non-finite loss at step {step} (term {term}); "
                               f"last good checkpoint kept at {ckpt_path}", step=step, term=term)
        grads = T.backward(bundle.total, params)
        sgd_momentum_step(params, grads, state, config.learning_rate, config.momentum)
        row = {"step": step + 1, **values}
        window.append(row)
        trace.append(row)
        if on_step is not None:
            on_step(step + 1, values)
        done = step + 1
        if done % config.eval_every == 0:
            nll, mmd = evaluate(model, eval_x, config.eval_samples, seed, done)
            mrow = {"step": done}
            for k in TERMS + ("total",):
                mrow[k] = float(np.mean([r[k] for r in window]))
            mrow["exact_nll"], mrow["mmd"] = nll, mmd
            metrics.append(mrow)
            _write_rows(metrics_path, METRIC_COLUMNS, [mrow], append=True)
            if config.trace:
                _write_rows(trace_path, TRACE_COLUMNS, window, append=True)
            window = []
            save_checkpoint(ckpt_path, model, state.velocity, done)
            log.info("step %d total %.5g exact_nll %.5g mmd %.4g", done, mrow["total"], nll, mmd)

    if config.trace and window:
        _write_rows(trace_path, TRACE_COLUMNS, window, append=True)
    final = max(start, config.steps)
    save_checkpoint(ckpt_path, model, state.velocity, final)
    return TrainResult(model, state, final, metrics, trace, out)


__all__ = ["TrainConfig", "OptimizerState", "sgd_momentum_step", "train", "load_checkpoint",
           "parse_config_text", "emit_config", "load_config", "apply_overrides", "build_model", "evaluate"]
