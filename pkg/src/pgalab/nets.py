"""Encoder/decoder MLPs, the composite latent map, and checkpoint I/O.

Checkpoint layout (all little-endian)::

    offset  type        field
    0       4s          magic b"PGA1"
    4       u32         format version (1)
    8       u64         completed optimizer steps
    16      u8          activation (0 = tanh, 1 = relu)
    17      u8          flags: bit0 log-variance head, bit1 variance floor,
                        bit2 optimizer velocities present
    18      u16         reserved, 0
    20      f64         variance-floor epsilon (0.0 when no floor)
    28      u32 n, u32[n]   encoder widths
            u32 m, u32[m]   decoder widths
            f64[...]    parameters: encoder (W0, b0, W1, b1, ...), then the
                        log-variance head (W, b) if present, then the decoder
            f64[...]    velocities, same order and count (if flag bit2)
            u32         CRC-32 of every preceding byte

Weights are stored row-major with shape (fan_in, fan_out).
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, IntegrityError
from .rng import stream
from .tensor import Tensor

ACTIVATIONS = ("tanh", "relu")
LOGVAR_MAX = 4.0


class MlpNet:
    """Fully connected network; hidden layers use ``activation``, output is linear."""

    def __init__(self, widths: Sequence[int], weights, biases, activation="tanh", group="phi"):
        self.widths = tuple(int(w) for w in widths)
        self.weights: list[Tensor] = list(weights)
        self.biases: list[Tensor] = list(biases)
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.activation = activation
        self.group = group

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return count_params(self.widths)

    def _act(self, a):
        return T.tanh(a) if self.activation == "tanh" else T.relu(a)

    def hidden(self, x, frozen: bool = False) -> Tensor:
        """Activations of the last hidden layer (the input itself for a single-layer net)."""
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(f"net expects input width {self.widths[0]}, got shape {x.shape}")
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            if frozen:
                w, b = T.stop_gradient(w), T.stop_gradient(b)
            a = self._act(a @ w + b)
        return a

    def output(self, a, frozen: bool = False) -> Tensor:
        w, b = self.weights[-1], self.biases[-1]
        if frozen:
            w, b = T.stop_gradient(w), T.stop_gradient(b)
        return a @ w + b

    def __call__(self, x, frozen: bool = False) -> Tensor:
        return self.output(self.hidden(x, frozen), frozen)


def count_params(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _check_widths(widths):
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError(f"need at least input and output widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"layer widths must be positive, got {widths}")
    return widths


def init_params(widths: Sequence[int], seed: int, activation: str = "tanh", group: str = "phi") -> MlpNet:
    """Uniform fan-in init, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    widths = _check_widths(widths)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = math.sqrt(6.0 / fan_in)
        w = stream(seed, f"init/{group}/{i}").uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(T.parameter(w, name=f"{group}.W{i}"))
        biases.append(T.parameter(np.zeros(fan_out), name=f"{group}.b{i}"))
    return MlpNet(widths, weights, biases, activation, group)


@dataclass
class StochasticCode:
    mean: Tensor
    log_var: Tensor
    sample: Tensor


class Autoencoder:
    """Encoder f (phi), decoder g (theta), and h = f o g sharing their parameters.

    With ``logvar_head`` the encoder gets a second output projection from its
    last hidden layer producing log sigma^2; the mean path is f itself. When
    ``logvar_epsilon`` is set, log sigma^2 is held in [2 log eps, 4] with a
    softplus lower clamp, so sigma^2 >= eps^2. Without a floor log sigma^2 is
    only capped smoothly from above at 4.
    """

    def __init__(self, encoder: MlpNet, decoder: MlpNet, logvar_head=None, logvar_epsilon=None):
        if encoder.widths[-1] != decoder.widths[0] or encoder.widths[0] != decoder.widths[-1]:
            raise DimensionError(f"encoder widths {encoder.widths} incompatible with decoder {decoder.widths}")
        self.encoder = encoder
        self.decoder = decoder
        self.logvar_head: tuple[Tensor, Tensor] | None = logvar_head
        if logvar_epsilon is not None and logvar_epsilon <= 0:
            raise ConfigError("logvar_epsilon must be positive")
        self.logvar_epsilon = logvar_epsilon

    @property
    def data_dim(self) -> int:
        return self.encoder.widths[0]

    @property
    def latent_dim(self) -> int:
        return self.encoder.widths[-1]

    @property
    def variational(self) -> bool:
        return self.logvar_head is not None

    @property
    def encoder_output_width(self) -> int:
        return 2 * self.latent_dim if self.variational else self.latent_dim

    @property
    def phi(self) -> list[Tensor]:
        params = self.encoder.parameters()
        if self.logvar_head is not None:
            params += list(self.logvar_head)
        return params

    @property
    def theta(self) -> list[Tensor]:
        return self.decoder.parameters()

    def parameters(self) -> list[Tensor]:
        return self.phi + self.theta

    def encode(self, x, frozen: bool = False) -> Tensor:
        return self.encoder(x, frozen)

    def decode(self, z, frozen: bool = False) -> Tensor:
        return self.decoder(z, frozen)

    def composite_h(self, z, freeze: Sequence[str] = ()) -> Tensor:
        """h(z) = f(g(z)); ``freeze`` names parameter groups to cut from the gradient."""
        return self.encode(self.decode(z, "theta" in freeze), "phi" in freeze)

    def encode_mean_logvar(self, x, frozen: bool = False) -> tuple[Tensor, Tensor]:
        if self.logvar_head is None:
            raise ConfigError("model has no variational head")
        a = self.encoder.hidden(x, frozen)
        mean = self.encoder.output(a, frozen)
        w, b = self.logvar_head
        if frozen:
            w, b = T.stop_gradient(w), T.stop_gradient(b)
        raw = a @ w + b
        if self.logvar_epsilon is None:
            # smooth cap only: a hard clip would strand the head where its gradient is zero
            log_var = T.scale(T.softplus(T.scale(raw, -1.0) + LOGVAR_MAX), -1.0) + LOGVAR_MAX
        else:
            lo = 2.0 * math.log(self.logvar_epsilon)
            log_var = T.clip(T.softplus(raw - lo) + lo, lo, LOGVAR_MAX)
        return mean, log_var

    def encode_stochastic(self, x, seed: int) -> StochasticCode:
        mean, log_var = self.encode_mean_logvar(x)
        noise = stream(seed, "posterior").standard_normal(mean.shape)
        sample = mean + T.exp(T.scale(log_var, 0.5)) * noise
        return StochasticCode(mean, log_var, sample)

    def copy(self) -> "Autoencoder":
        return _unflatten(self._spec(), [p.data.copy() for p in self.parameters()])

    def _spec(self):
        return (self.encoder.widths, self.decoder.widths, self.encoder.activation,
                self.variational, self.logvar_epsilon)


def build_autoencoder(data_dim: int, latent_dim: int, hidden: Sequence[int] = (256, 256),
                      activation: str = "tanh", variational: bool = False,
                      logvar_epsilon: float | None = None, seed: int = 0) -> Autoencoder:
    hidden = list(hidden)
    enc = init_params([data_dim, *hidden, latent_dim], seed, activation, "phi")
    dec = init_params([latent_dim, *reversed(hidden), data_dim], seed, activation, "theta")
    head = None
    if variational:
        fan_in = enc.widths[-2]
        limit = math.sqrt(6.0 / fan_in)
        w = stream(seed, "init/phi/logvar").uniform(-limit, limit, size=(fan_in, latent_dim))
        head = (T.parameter(w, name="phi.Wlogvar"), T.parameter(np.zeros(latent_dim), name="phi.blogvar"))
    return Autoencoder(enc, dec, head, logvar_epsilon)


# ---- checkpoint I/O -----------------------------------------------------

MAGIC = b"PGA1"
VERSION = 1
_HEAD = struct.Struct("<4sIQBBHd")


def _param_shapes(enc_widths, dec_widths, variational):
    shapes = []
    for a, b in zip(enc_widths[:-1], enc_widths[1:]):
        shapes += [(a, b), (b,)]
    if variational:
        shapes += [(enc_widths[-2], enc_widths[-1]), (enc_widths[-1],)]
    for a, b in zip(dec_widths[:-1], dec_widths[1:]):
        shapes += [(a, b), (b,)]
    return shapes


def _unflatten(spec, arrays) -> Autoencoder:
    enc_w, dec_w, activation, variational, eps = spec
    arrays = list(arrays)

    def take_net(widths, group):
        ws, bs = [], []
        for i in range(len(widths) - 1):
            ws.append(T.parameter(arrays.pop(0), name=f"{group}.W{i}"))
            bs.append(T.parameter(arrays.pop(0), name=f"{group}.b{i}"))
        return ws, bs

    ews, ebs = take_net(enc_w, "phi")
    head = None
    if variational:
        head = (T.parameter(arrays.pop(0), name="phi.Wlogvar"), T.parameter(arrays.pop(0), name="phi.blogvar"))
    dws, dbs = take_net(dec_w, "theta")
    enc = MlpNet(enc_w, ews, ebs, activation, "phi")
    dec = MlpNet(dec_w, dws, dbs, activation, "theta")
    return Autoencoder(enc, dec, head, eps)


def checkpoint_bytes(model: Autoencoder, velocities=None, step: int = 0) -> bytes:
    flags = (1 if model.variational else 0) | (2 if model.logvar_epsilon is not None else 0)
    if velocities is not None:
        flags |= 4
    act = ACTIVATIONS.index(model.encoder.activation)
    parts = [_HEAD.pack(MAGIC, VERSION, step, act, flags, 0, float(model.logvar_epsilon or 0.0))]
    for widths in (model.encoder.widths, model.decoder.widths):
        parts.append(struct.pack(f"<I{len(widths)}I", len(widths), *widths))
    parts += [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.parameters()]
    if velocities is not None:
        parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in velocities]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: Autoencoder, velocities=None, step: int = 0) -> None:
    data = checkpoint_bytes(model, velocities, step)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated while reading {what}", offset=len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def parse_checkpoint(buf: bytes):
    """Decode checkpoint bytes into ``(model, velocities or None, step)``."""
    r = _Reader(buf)
    magic, version, step, act, flags, _, eps = r.unpack(_HEAD.format, "header")
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}", offset=4)
    if act >= len(ACTIVATIONS):
        raise IntegrityError(f"unknown activation code {act}", offset=16)
    widths = []
    for name in ("encoder", "decoder"):
        at = r.pos
        (n,) = r.unpack("<I", f"{name} width count")
        if n < 2 or n > 64:
            raise IntegrityError(f"implausible {name} width count {n}", offset=at)
        widths.append(tuple(r.unpack(f"<{n}I", f"{name} widths")))
    variational = bool(flags & 1)
    shapes = _param_shapes(widths[0], widths[1], variational)
    arrays = []
    for i, shape in enumerate(shapes):
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(r.take(8 * count, f"parameter block {i}"), dtype="<f8").reshape(shape).astype(np.float64))
    velocities = None
    if flags & 4:
        velocities = []
        for i, shape in enumerate(shapes):
            count = int(np.prod(shape))
            velocities.append(np.frombuffer(r.take(8 * count, f"velocity block {i}"), dtype="<f8").reshape(shape).astype(np.float64))
    crc_at = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise IntegrityError("trailing bytes after checksum", offset=r.pos)
    if zlib.crc32(buf[:crc_at]) != crc:
        raise IntegrityError("checksum mismatch", offset=crc_at)
    spec = (widths[0], widths[1], ACTIVATIONS[act], variational, eps if flags & 2 else None)
    return _unflatten(spec, arrays), velocities, step


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
