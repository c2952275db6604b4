"""Comparison models: naive classifier, bias-only relevance, multi-head control."""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import model as M
from . import rng as rngmod
from .errors import ConfigError


class BaselineKind(str, Enum):
    LATENT = "latent"
    NAIVE = "naive"
    UNCONDITIONED = "unconditioned"
    MULTIHEAD = "multihead"


@dataclass
class MultiHeadParams:
    """Shared trunk with ``E`` independent presence heads, each trained on its own loss."""

    trunk: M.TrunkParams
    heads: list
    bag_mode: bool = False

    def __post_init__(self):
        if len(self.heads) < 2:
            raise ConfigError("a multi-head model needs at least two heads")
        shape = self.heads[0].weight.shape
        if any(h.weight.shape != shape for h in self.heads):
            raise ConfigError("all heads must share one shape")

    @property
    def n_concepts(self):
        return self.heads[0].weight.shape[0]

    @property
    def input_dim(self):
        if self.trunk.layers:
            return self.trunk.layers[0][0].shape[1]
        return self.heads[0].weight.shape[1]

    @property
    def feature_dim(self):
        return self.heads[0].weight.shape[1]

    def named_arrays(self):
        out = {}
        for k, (w, b) in enumerate(self.trunk.layers):
            out[f"trunk.{k}.weight"] = w
            out[f"trunk.{k}.bias"] = b
        for e, h in enumerate(self.heads):
            out[f"heads.{e}.weight"] = h.weight
            out[f"heads.{e}.bias"] = h.bias
        return out

    def active_names(self):
        return list(self.named_arrays())

    def copy(self):
        return MultiHeadParams(
            M.TrunkParams([(w.copy(), b.copy()) for w, b in self.trunk.layers],
                          self.trunk.nonlinearity),
            [M.PresenceHeadParams(h.weight.copy(), h.bias.copy()) for h in self.heads],
            self.bag_mode,
        )


def parameter_count(params):
    return sum(a.size for a in params.named_arrays().values())


def build_baseline(kind, n_concepts, input_dim, hidden_sizes=(), nonlinearity="relu", *,
                   seed=0, bag_mode=False, heads=5):
    """Initial parameters for a model kind.

    ``naive`` is the latent model with the relevance permanently forced to
    the identity, ``unconditioned`` drops the image-dependent relevance
    weights, and ``multihead`` has ``heads`` presence heads on one trunk.
    """
    kind = BaselineKind(kind)
    if kind is BaselineKind.MULTIHEAD:
        if heads < 2:
            raise ConfigError("multihead baseline needs heads >= 2")
        gen = rngmod.stream(seed, rngmod.INIT)
        trunk = M.init_trunk(gen, input_dim, hidden_sizes, nonlinearity)
        dphi = trunk.output_dim(input_dim)
        hs = [M.PresenceHeadParams(M.glorot(gen, n_concepts, dphi), np.zeros(n_concepts))
              for _ in range(heads)]
        return MultiHeadParams(trunk, hs, bag_mode)
    params = M.init_params(n_concepts, input_dim, hidden_sizes, nonlinearity,
                           seed=seed, bag_mode=bag_mode)
    if kind is BaselineKind.NAIVE:
        params = replace(params, identity_relevance=True)
    elif kind is BaselineKind.UNCONDITIONED:
        params = replace(params, relevance_conditioned=False)
    return params


def model_kind(params):
    if isinstance(params, MultiHeadParams):
        return BaselineKind.MULTIHEAD
    if params.identity_relevance:
        return BaselineKind.NAIVE
    if not params.relevance_conditioned:
        return BaselineKind.UNCONDITIONED
    return BaselineKind.LATENT


def _head_probs(params, features):
    x = M.as_batch(features)
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"model expects {params.input_dim} input features, got {x.shape[-1]}")
    layers = []
    phi = M.trunk_forward(x, params.trunk, layers)
    outs = [M.presence_forward(phi, h, params.bag_mode) for h in params.heads]
    return outs, phi, layers


def multihead_predict(params, features):
    """Mean of the per-head presence probabilities, shape ``(N, W)``."""
    outs, _, _ = _head_probs(params, features)
    return np.mean([v for v, _ in outs], axis=0)


@M.predict.register
def _(params: MultiHeadParams, features):
    p = multihead_predict(params, features)
    return p, p


@M.objective.register
def _(params: MultiHeadParams, features, labels, weight_decay=1e-4):
    outs, _, _ = _head_probs(params, features)
    data = sum(M.log_loss(v, labels) for v, _ in outs)
    return data + 0.5 * weight_decay * M.weight_penalty(params)


@M.loss_and_grad.register
def _(params: MultiHeadParams, features, labels, weight_decay=1e-4):
    outs, phi, layers = _head_probs(params, features)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    value = sum(M.log_loss(v, y) for v, _ in outs)
    value += 0.5 * weight_decay * M.weight_penalty(params)

    arrays = params.named_arrays()
    grads = {}
    dphi = np.zeros_like(phi)
    for e, (head, (v1, p)) in enumerate(zip(params.heads, outs)):
        dW, db, dp = M.presence_backward(M._dloss_dh(v1, y), p, v1, phi, head, params.bag_mode)
        grads[f"heads.{e}.weight"] = dW
        grads[f"heads.{e}.bias"] = db
        dphi += dp
    M.backprop_trunk(params.trunk, layers, dphi, grads)
    for n in arrays:
        if n.endswith(".weight"):
            grads[n] = grads[n] + weight_decay * arrays[n]
    return value, grads
