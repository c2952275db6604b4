"""Minibatch SGD with an identity-relevance warm-up, gradient checks and checkpoints."""

import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import model as M
from . import rng as rngmod
from .baselines import BaselineKind, MultiHeadParams, build_baseline, model_kind
from .errors import (
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DimensionMismatchError,
    InvalidInputError,
    NumericalError,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 4
    warmup_epochs: Optional[int] = None  # None -> epochs // 2
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    lr_decay_at_warmup: bool = False
    # model section
    kind: str = "latent"
    hidden_sizes: tuple = ()
    nonlinearity: str = "relu"
    heads: int = 5

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)
        if self.warmup_epochs is None:
            self.warmup_epochs = self.epochs // 2
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        BaselineKind(self.kind)

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)

    def to_dict(self, timing=False):
        d = {"epoch_loss": self.epoch_loss, "phase": self.phase, "step_loss": self.step_loss}
        if timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d


def epoch_order(n, seed, epoch):
    """Deterministic permutation of ``range(n)`` for one epoch."""
    return rngmod.stream(seed, rngmod.SHUFFLE, epoch).permutation(n)


def initial_params(config, n_concepts, input_dim, bag_mode):
    return build_baseline(config.kind, n_concepts, input_dim, config.hidden_sizes,
                          config.nonlinearity, seed=config.seed, bag_mode=bag_mode,
                          heads=config.heads)


def train(features, labels, config=None, params=None, callback=None):
    """Fit a model by minibatch SGD with classical momentum.

    Parameters
    ----------
    features : array (N, R, d)
    labels : array (N, W) of 0/1 human-centric labels
    config : TrainConfig
    params : optional initial parameters; built from ``config`` when omitted.
        They are copied, never mutated.
    callback : optional ``callback(epoch, params)`` invoked after every epoch.

    During the first ``warmup_epochs`` epochs the relevance is forced to the
    identity and its parameters are frozen; afterwards everything updates.

    Returns
    -------
    (params, TrainLog)
    """
    config = config or TrainConfig()
    x = M.as_batch(features)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise InvalidInputError(f"labels shape {y.shape} does not match {x.shape[0]} examples")
    if params is None:
        params = initial_params(config, y.shape[1], x.shape[-1], x.shape[1] > 1)
    else:
        params = params.copy()
    if params.n_concepts != y.shape[1] or params.input_dim != x.shape[-1]:
        raise ConfigError("dataset dimensions do not match the model")

    latent = not isinstance(params, MultiHeadParams) and not params.identity_relevance
    arrays = params.named_arrays()
    velocity = {n: np.zeros_like(a) for n, a in arrays.items()}
    trainlog = TrainLog()
    n = x.shape[0]
    lr = config.learning_rate

    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        if epoch == config.warmup_epochs and config.lr_decay_at_warmup and epoch > 0:
            lr *= 0.1
        view = replace(params, identity_relevance=True) if (latent and warm) else params
        # the view shares arrays with params, so updates below land in params
        active = view.active_names()
        order = epoch_order(n, config.seed, epoch)
        start = time.perf_counter()
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            value, grads = M.loss_and_grad(view, x[idx], y[idx], config.weight_decay)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            trainlog.step_loss.append(value)
            total += value * len(idx)
            for name in active:
                v = velocity[name]
                v *= config.momentum
                v -= lr * grads[name]
                arrays[name] += v
        trainlog.epoch_loss.append(total / n)
        trainlog.epoch_seconds.append(time.perf_counter() - start)
        trainlog.phase.append("warmup" if warm else "joint")
        log.info("epoch %d (%s): loss %.6f", epoch, trainlog.phase[-1], trainlog.epoch_loss[-1])
        if callback is not None:
            callback(epoch, params)
    return params, trainlog


# ---------------------------------------------------------------------------
# finite-difference check


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))


def numeric_gradient(params, features, labels, weight_decay, step=1e-5):
    """Central differences of the forward objective for every parameter."""
    out = {}
    for name, arr in params.named_arrays().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = M.objective(params, features, labels, weight_decay)
            flat[i] = orig - step
            fm = M.objective(params, features, labels, weight_decay)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def gradient_check(params, features, labels, weight_decay=1e-4, step=1e-5, grad_fn=None):
    """Largest elementwise relative error between analytic and numeric gradients.

    Absolute error is used where both magnitudes are below 1e-8. ``grad_fn``
    replaces :func:`model.loss_and_grad` (for testing the checker itself).
    """
    if not step > 0:
        raise InvalidInputError("step must be positive")
    params = params.copy()
    grad_fn = grad_fn or M.loss_and_grad
    _, analytic = grad_fn(params, features, labels, weight_decay)
    numeric = numeric_gradient(params, features, labels, weight_decay, step)
    worst = 0.0
    for name in numeric:
        if numeric[name].size:
            worst = max(worst, float(relative_error(analytic[name], numeric[name]).max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"RBCKPT" + version byte, u32 header length, JSON header (utf-8),
# u32 CRC32 of the array payload, then every array as little-endian float64
# in header order.

MAGIC = b"RBCKPT"
VERSION = b"1"


def _header(params):
    arrays = params.named_arrays()
    kind = model_kind(params)
    hdr = {
        "kind": kind.value,
        "W": params.n_concepts,
        "d": params.input_dim,
        "d_phi": params.feature_dim,
        "L": params.trunk.depth,
        "nonlinearity": params.trunk.nonlinearity,
        "bag_mode": bool(params.bag_mode),
        "arrays": [[n, list(a.shape)] for n, a in arrays.items()],
    }
    if isinstance(params, MultiHeadParams):
        hdr["heads"] = len(params.heads)
    else:
        hdr["relevance_conditioned"] = bool(params.relevance_conditioned)
        hdr["identity_relevance"] = bool(params.identity_relevance)
    return hdr


def checkpoint_bytes(params):
    hdr = json.dumps(_header(params), sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in params.named_arrays().values())
    return (MAGIC + VERSION + struct.pack("<I", len(hdr)) + hdr
            + struct.pack("<I", zlib.crc32(payload)) + payload)


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def _rebuild(hdr, arrays):
    W, d, dphi, L = hdr["W"], hdr["d"], hdr["d_phi"], hdr["L"]
    try:
        layers = [(arrays[f"trunk.{k}.weight"], arrays[f"trunk.{k}.bias"]) for k in range(L)]
    except KeyError as exc:
        raise DimensionMismatchError(f"missing trunk array {exc}") from None
    fan_in = d
    for k, (w, b) in enumerate(layers):
        if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
            raise DimensionMismatchError(f"trunk layer {k} shape does not compose")
        fan_in = w.shape[0]
    if fan_in != dphi:
        raise DimensionMismatchError(f"trunk output {fan_in} != declared d_phi {dphi}")
    trunk = M.TrunkParams(layers, hdr["nonlinearity"])

    def head(prefix):
        w, b = arrays.get(prefix + ".weight"), arrays.get(prefix + ".bias")
        if w is None or b is None or w.shape != (W, dphi) or b.shape != (W,):
            raise DimensionMismatchError(f"{prefix} arrays do not match W={W}, d_phi={dphi}")
        return M.PresenceHeadParams(w, b)

    if hdr["kind"] == BaselineKind.MULTIHEAD.value:
        heads = [head(f"heads.{e}") for e in range(hdr["heads"])]
        return MultiHeadParams(trunk, heads, hdr["bag_mode"])
    rw, rb = arrays.get("relevance.weight"), arrays.get("relevance.bias")
    if rw is None or rb is None or rw.shape != (W, 4, dphi) or rb.shape != (W, 4):
        raise DimensionMismatchError("relevance arrays do not match declared dimensions")
    return M.ModelParams(trunk, head("presence"), M.RelevanceHeadParams(rw, rb),
                         bag_mode=hdr["bag_mode"],
                         relevance_conditioned=hdr["relevance_conditioned"],
                         identity_relevance=hdr["identity_relevance"])


def parse_checkpoint(blob):
    if len(blob) < len(MAGIC) + 1 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version = blob[pos:pos + 1]
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version.decode(errors='replace')!r}, "
            f"expected {VERSION.decode()!r}")
    pos += 1
    try:
        (hlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        hdr = json.loads(blob[pos:pos + hlen].decode())
        pos += hlen
        (crc,) = struct.unpack_from("<I", blob, pos)
        pos += 4
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    payload = blob[pos:]
    expected = sum(int(np.prod(shape)) for _, shape in hdr["arrays"]) * 8
    if len(payload) != expected:
        raise CorruptCheckpointError(
            f"checkpoint payload has {len(payload)} bytes, header declares {expected}")
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError("checkpoint payload checksum mismatch")
    arrays = {}
    off = 0
    for name, shape in hdr["arrays"]:
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=off) \
            .astype(np.float64).reshape(shape)
        off += size * 8
    return _rebuild(hdr, arrays)


def load_checkpoint(path, n_concepts=None, input_dim=None):
    """Read a checkpoint; optionally verify it against corpus dimensions."""
    with open(path, "rb") as fh:
        params = parse_checkpoint(fh.read())
    if n_concepts is not None and params.n_concepts != n_concepts:
        raise DimensionMismatchError(
            f"checkpoint has W={params.n_concepts}, corpus has W={n_concepts}")
    if input_dim is not None and params.input_dim != input_dim:
        raise DimensionMismatchError(
            f"checkpoint expects d={params.input_dim}, corpus has d={input_dim}")
    return params
