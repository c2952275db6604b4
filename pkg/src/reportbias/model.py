"""Factored visual-presence / relevance model.

The human-centric prediction for concept ``w`` is the marginal

    h(y=1|x) = r(y=1|z=1,x) v(z=1|x) + r(y=1|z=0,x) (1 - v(z=1|x))

where ``v`` is a logistic presence head (optionally noisy-OR pooled over a
bag of regions) and ``r`` is obtained from a softmax over four linear scores
``s_ij`` (``i`` indexes the label ``y``, ``j`` the latent presence ``z``)
followed by normalization of each ``z`` column.

Arrays are batched: features have shape ``(N, R, d)`` with ``R == 1`` in
single-vector mode. Relevance tensors store the four joint entries in the
flat order ``(00, 01, 10, 11)``.
"""

from dataclasses import dataclass, field, replace
from functools import singledispatch
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InvalidInputError
from . import rng as rngmod

LOG_EPS = 1e-7
# (b00, b01, b10, b11): near-identity r at the end of warm-up
RELEVANCE_INIT_BIAS = (2.0, -2.0, -2.0, 2.0)


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a):
    return (a > 0.0).astype(a.dtype)


def _tanh_grad(a):
    t = np.tanh(a)
    return 1.0 - t * t


NONLINEARITIES = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (lambda a: a, np.ones_like),
}


@dataclass
class ConceptVocabulary:
    names: list
    merge_groups: Optional[dict] = None

    def __post_init__(self):
        if not self.names or any(not n for n in self.names):
            raise ConfigError("concept names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("concept names must be unique")
        seen = set()
        for group, members in (self.merge_groups or {}).items():
            for m in members:
                if not 0 <= m < len(self.names):
                    raise ConfigError(f"merge group {group!r}: index {m} out of range")
                if m in seen:
                    raise ConfigError(f"concept {m} appears in more than one merge group")
                seen.add(m)

    @property
    def count(self):
        return len(self.names)


@dataclass
class TrunkParams:
    layers: list = field(default_factory=list)  # [(weight (out, in), bias (out,)), ...]
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        for k in range(1, len(self.layers)):
            if self.layers[k][0].shape[1] != self.layers[k - 1][0].shape[0]:
                raise ConfigError(f"trunk layer {k} input does not match layer {k - 1} output")

    @property
    def depth(self):
        return len(self.layers)

    def output_dim(self, input_dim):
        return self.layers[-1][0].shape[0] if self.layers else input_dim


@dataclass
class PresenceHeadParams:
    weight: np.ndarray  # (W, d_phi)
    bias: np.ndarray  # (W,)


@dataclass
class RelevanceHeadParams:
    weight: np.ndarray  # (W, 4, d_phi)
    bias: np.ndarray  # (W, 4)


@dataclass
class ModelParams:
    trunk: TrunkParams
    presence: PresenceHeadParams
    relevance: RelevanceHeadParams
    bag_mode: bool = False
    relevance_conditioned: bool = True
    identity_relevance: bool = False

    def __post_init__(self):
        W, dphi = self.presence.weight.shape
        if self.presence.bias.shape != (W,):
            raise ConfigError("presence bias must have one entry per concept")
        if self.relevance.weight.shape != (W, 4, dphi):
            raise ConfigError(
                f"relevance weight shape {self.relevance.weight.shape} != {(W, 4, dphi)}")
        if self.relevance.bias.shape != (W, 4):
            raise ConfigError("relevance bias must have shape (W, 4)")
        if self.trunk.layers and self.trunk.layers[-1][0].shape[0] != dphi:
            raise ConfigError("trunk output dimension does not match head input")

    @property
    def n_concepts(self):
        return self.presence.weight.shape[0]

    @property
    def input_dim(self):
        if self.trunk.layers:
            return self.trunk.layers[0][0].shape[1]
        return self.presence.weight.shape[1]

    @property
    def feature_dim(self):
        return self.presence.weight.shape[1]

    def named_arrays(self):
        """Parameter arrays by name, in checkpoint order. Values are live views."""
        out = {}
        for k, (w, b) in enumerate(self.trunk.layers):
            out[f"trunk.{k}.weight"] = w
            out[f"trunk.{k}.bias"] = b
        out["presence.weight"] = self.presence.weight
        out["presence.bias"] = self.presence.bias
        out["relevance.weight"] = self.relevance.weight
        out["relevance.bias"] = self.relevance.bias
        return out

    def active_names(self):
        """Names of arrays that influence the output under the current flags."""
        names = list(self.named_arrays())
        if self.identity_relevance:
            return [n for n in names if not n.startswith("relevance.")]
        if not self.relevance_conditioned:
            return [n for n in names if n != "relevance.weight"]
        return names

    def copy(self):
        return replace(
            self,
            trunk=TrunkParams([(w.copy(), b.copy()) for w, b in self.trunk.layers],
                              self.trunk.nonlinearity),
            presence=PresenceHeadParams(self.presence.weight.copy(), self.presence.bias.copy()),
            relevance=RelevanceHeadParams(self.relevance.weight.copy(),
                                          self.relevance.bias.copy()),
        )


@dataclass
class Prediction:
    """Batched predictions; leading axis indexes examples."""

    v1: np.ndarray  # (N, W)
    h1: np.ndarray  # (N, W)
    r: np.ndarray  # (N, W, 2, 2), r[..., i, j] = r(y=i | z=j)
    rtilde: np.ndarray  # (N, W, 2, 2)
    region_probs: Optional[np.ndarray] = None  # (N, R, W) in bag mode


def glorot(gen, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-a, a, size=(fan_out, fan_in))


def init_trunk(gen, input_dim, hidden_sizes=(), nonlinearity="relu"):
    layers = []
    fan_in = input_dim
    for size in hidden_sizes:
        layers.append((glorot(gen, size, fan_in), np.zeros(size)))
        fan_in = size
    return TrunkParams(layers, nonlinearity)


def init_params(n_concepts, input_dim, hidden_sizes=(), nonlinearity="relu", *,
                seed=0, bag_mode=False, relevance_conditioned=True,
                identity_relevance=False):
    """Seeded initial parameters.

    Trunk and presence weights are Glorot-uniform with zero biases. The
    relevance head starts with zero weights and biases ``(2, -2, -2, 2)`` so
    that ``r`` is close to the identity. The draws depend only on ``seed`` and
    the shapes, so models differing only in their flags start identically.
    """
    if n_concepts < 1 or input_dim < 1:
        raise ConfigError("n_concepts and input_dim must be positive")
    gen = rngmod.stream(seed, rngmod.INIT)
    trunk = init_trunk(gen, input_dim, hidden_sizes, nonlinearity)
    dphi = trunk.output_dim(input_dim)
    presence = PresenceHeadParams(glorot(gen, n_concepts, dphi), np.zeros(n_concepts))
    relevance = RelevanceHeadParams(
        np.zeros((n_concepts, 4, dphi)),
        np.tile(np.array(RELEVANCE_INIT_BIAS), (n_concepts, 1)),
    )
    return ModelParams(trunk, presence, relevance, bag_mode=bag_mode,
                       relevance_conditioned=relevance_conditioned,
                       identity_relevance=identity_relevance)


def as_batch(features):
    """Coerce ``(d,)``, ``(R, d)`` or ``(N, R, d)`` features to a 3-D batch."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, None, :]
    elif x.ndim == 2:
        x = x[None]
    elif x.ndim != 3:
        raise InvalidInputError(f"features must be 1-, 2- or 3-D, got shape {x.shape}")
    if x.shape[1] < 1:
        raise InvalidInputError("an example needs at least one region")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features contain non-finite entries")
    return x


# ---------------------------------------------------------------------------
# forward pieces


def trunk_forward(features, trunk, _cache=None):
    """Map every region through the MLP trunk; depth 0 is the identity."""
    h = np.asarray(features, dtype=np.float64)
    act, _ = NONLINEARITIES[trunk.nonlinearity]
    for k, (w, b) in enumerate(trunk.layers):
        if h.shape[-1] != w.shape[1]:
            raise ConfigError(
                f"trunk layer {k} expects inputs of size {w.shape[1]}, got {h.shape[-1]}")
        a = h @ w.T + b
        if _cache is not None:
            _cache.append((h, a))
        h = act(a)
    return h


def noisy_or(probs):
    """``1 - prod(1 - p)`` over a non-empty sequence of probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise InvalidInputError("noisy_or needs at least one probability")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidInputError("noisy_or probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - p))


def presence_forward(phi, head, bag_mode):
    """Presence probabilities.

    Returns ``(v1, region_probs)`` where ``v1`` has shape ``(N, W)`` and
    ``region_probs`` shape ``(N, R, W)``. Without bag mode every example must
    have exactly one region.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 2:
        phi = phi[None]
    if phi.shape[-1] != head.weight.shape[1]:
        raise ConfigError(
            f"presence head expects {head.weight.shape[1]} features, got {phi.shape[-1]}")
    p = expit(phi @ head.weight.T + head.bias)
    if bag_mode:
        v1 = 1.0 - np.prod(1.0 - p, axis=1)
    else:
        if phi.shape[1] != 1:
            raise InvalidInputError(
                f"bag mode is off but an example has {phi.shape[1]} regions")
        v1 = p[:, 0, :]
    return v1, p


def relevance_scores(phi_pooled, head, conditioned):
    phi_pooled = np.atleast_2d(np.asarray(phi_pooled, dtype=np.float64))
    W, _, dphi = head.weight.shape
    if phi_pooled.shape[-1] != dphi:
        raise ConfigError(f"relevance head expects {dphi} features, got {phi_pooled.shape[-1]}")
    n = phi_pooled.shape[0]
    if not conditioned:
        return np.broadcast_to(head.bias, (n, W, 4)).copy()
    s = phi_pooled @ head.weight.reshape(W * 4, dphi).T
    return s.reshape(n, W, 4) + head.bias


def joint_from_scores(scores):
    """Softmax over the last axis of length 4, stabilized by max-subtraction."""
    s = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def conditional_from_joint(rt):
    """``r[i, j] = rt[i, j] / (rt[0, j] + rt[1, j])`` from flat ``(.., 4)`` joints."""
    rt = rt.reshape(rt.shape[:-1] + (2, 2))
    return rt / rt.sum(axis=-2, keepdims=True)


def identity_relevance(batch_shape):
    rt = np.zeros(batch_shape + (2, 2))
    rt[..., 0, 0] = rt[..., 1, 1] = 0.5
    r = np.zeros(batch_shape + (2, 2))
    r[..., 0, 0] = r[..., 1, 1] = 1.0
    return rt, r


def relevance_forward(phi_pooled, head, conditioned=True, identity_override=False):
    """Joint ``r~`` and conditional ``r``, each shaped ``(N, W, 2, 2)``."""
    phi_pooled = np.atleast_2d(np.asarray(phi_pooled, dtype=np.float64))
    if identity_override:
        return identity_relevance((phi_pooled.shape[0], head.weight.shape[0]))
    rt = joint_from_scores(relevance_scores(phi_pooled, head, conditioned))
    return rt.reshape(rt.shape[:-1] + (2, 2)), conditional_from_joint(rt)


def marginalize(v1, r):
    """``h1 = r[1,1] v1 + r[1,0] (1 - v1)``; broadcasts over leading axes."""
    v1 = np.asarray(v1, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return r[..., 1, 1] * v1 + r[..., 1, 0] * (1.0 - v1)


def _forward(params, features):
    x = as_batch(features)
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"model expects {params.input_dim} input features, got {x.shape[-1]}")
    layers = []
    phi = trunk_forward(x, params.trunk, layers)
    v1, p = presence_forward(phi, params.presence, params.bag_mode)
    pooled = phi.mean(axis=1)
    rt, r = relevance_forward(pooled, params.relevance, params.relevance_conditioned,
                              params.identity_relevance)
    h1 = marginalize(v1, r)
    pred = Prediction(v1=v1, h1=h1, r=r, rtilde=rt,
                      region_probs=p if params.bag_mode else None)
    cache = dict(x=x, layers=layers, phi=phi, pooled=pooled, p=p)
    return pred, cache


def model_forward(params, features):
    """Predictions for a batch (or a single example, see :func:`as_batch`)."""
    return _forward(params, features)[0]


# ---------------------------------------------------------------------------
# loss and gradients


def weight_penalty(params, names=None):
    arrays = params.named_arrays()
    names = params.active_names() if names is None else names
    return sum(float(np.sum(arrays[n] ** 2)) for n in names if n.endswith(".weight"))


def log_loss(h1, labels):
    """Summed-over-concepts binary log loss, averaged over examples."""
    h = np.clip(np.atleast_2d(h1), LOG_EPS, 1.0 - LOG_EPS)
    y = np.atleast_2d(labels).astype(np.float64)
    ll = y * np.log(h) + (1.0 - y) * np.log1p(-h)
    return float(-ll.sum() / h.shape[0])


def loss(h1, labels, params, weight_decay=1e-4):
    """Regularized objective: mean per-example log loss + (λ/2)·Σ weights²."""
    return log_loss(h1, labels) + 0.5 * weight_decay * weight_penalty(params)


def _dloss_dh(h1, y):
    n = h1.shape[0]
    inside = (h1 > LOG_EPS) & (h1 < 1.0 - LOG_EPS)
    h = np.clip(h1, LOG_EPS, 1.0 - LOG_EPS)
    return np.where(inside, (h - y) / (h * (1.0 - h)), 0.0) / n


def backprop_trunk(trunk, layers, dphi, grads):
    """Accumulate trunk gradients given the gradient w.r.t. its output."""
    _, dact = NONLINEARITIES[trunk.nonlinearity]
    g = dphi
    for k in range(len(trunk.layers) - 1, -1, -1):
        w, _ = trunk.layers[k]
        h_in, a = layers[k]
        g = g * dact(a)
        grads[f"trunk.{k}.weight"] = np.einsum("nro,nri->oi", g, h_in)
        grads[f"trunk.{k}.bias"] = g.sum(axis=(0, 1))
        if k:
            g = g @ w


def presence_backward(dv, p, v1, phi, head, bag_mode):
    """Gradients of a presence head given ``dL/dv1``; returns (dW, db, dphi)."""
    if bag_mode:
        # d(noisy-OR)/ds_k = p_k * prod_l (1 - p_l)
        ds = dv[:, None, :] * p * (1.0 - v1)[:, None, :]
    else:
        ds = (dv * v1 * (1.0 - v1))[:, None, :]
    dW = np.einsum("nrw,nrd->wd", ds, phi)
    db = ds.sum(axis=(0, 1))
    return dW, db, ds @ head.weight


def relevance_score_grad(dr11, dr10, r):
    """Gradient w.r.t. the four scores given ``dL/dr11`` and ``dL/dr10``.

    Each column of ``r`` is a logistic function of a score difference:
    ``r11 = σ(s11 - s01)`` and ``r10 = σ(s10 - s00)``.
    """
    a = dr11 * r[..., 1, 1] * r[..., 0, 1]
    b = dr10 * r[..., 1, 0] * r[..., 0, 0]
    return np.stack([-b, -a, b, a], axis=-1)


@singledispatch
def loss_and_grad(params, features, labels, weight_decay=1e-4):
    """Objective value and gradients keyed like ``params.named_arrays()``."""
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


@loss_and_grad.register
def _(params: ModelParams, features, labels, weight_decay=1e-4):
    pred, cache = _forward(params, features)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if y.shape != pred.h1.shape:
        raise InvalidInputError(f"labels shape {y.shape} != predictions {pred.h1.shape}")
    value = loss(pred.h1, y, params, weight_decay)

    arrays = params.named_arrays()
    grads = {n: np.zeros_like(a) for n, a in arrays.items()}
    dh = _dloss_dh(pred.h1, y)
    r = pred.r
    phi, pooled, p = cache["phi"], cache["pooled"], cache["p"]

    dv = dh * (r[..., 1, 1] - r[..., 1, 0])
    dW, db, dphi = presence_backward(dv, p, pred.v1, phi, params.presence, params.bag_mode)
    grads["presence.weight"] = dW
    grads["presence.bias"] = db

    if not params.identity_relevance:
        ds = relevance_score_grad(dh * pred.v1, dh * (1.0 - pred.v1), r)
        grads["relevance.bias"] = ds.sum(axis=0)
        if params.relevance_conditioned:
            W, _, d = params.relevance.weight.shape
            grads["relevance.weight"] = np.einsum("nwk,nd->wkd", ds, pooled)
            dpooled = ds.reshape(ds.shape[0], W * 4) @ params.relevance.weight.reshape(W * 4, d)
            dphi = dphi + dpooled[:, None, :] / phi.shape[1]

    backprop_trunk(params.trunk, cache["layers"], dphi, grads)

    for n in params.active_names():
        if n.endswith(".weight"):
            grads[n] = grads[n] + weight_decay * arrays[n]
    return value, grads


@singledispatch
def predict(params, features):
    """Return ``(v, h)`` arrays of shape ``(N, W)``."""
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


@predict.register
def _(params: ModelParams, features):
    pred = model_forward(params, features)
    return pred.v1, pred.h1


@singledispatch
def objective(params, features, labels, weight_decay=1e-4):
    """Forward-only objective value (used by finite-difference checks)."""
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


@objective.register
def _(params: ModelParams, features, labels, weight_decay=1e-4):
    return loss(model_forward(params, features).h1, labels, params, weight_decay)
