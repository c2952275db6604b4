"""Synthetic corpora with known visual presence and a controllable reporting process.

Each image has standard-normal features ``x``. Concept ``w`` is present with
probability ``σ(u_w·x + c_w)``. Each of ``k`` annotators mentions a present
concept with probability ``m_w(x)`` and an absent one with probability
``false_mention``; training labels are the union over annotators.

``m_w`` is either a per-concept constant ``q_w`` or ``σ(a_w·x + e_w)``. The
weights (the "world") are drawn from a stream keyed by the master seed, and
every image draws from its own stream keyed by ``(seed, image index)``, so
any image can be regenerated in isolation.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from . import rng as rngmod
from .corpus import Corpus
from .errors import ConfigError

log = logging.getLogger(__name__)

_CALIBRATION_SAMPLES = 20000


@dataclass
class GeneratorConfig:
    n_concepts: int = 20
    dim: int = 32
    n_train: int = 10000
    n_test: int = 2000
    k: int = 5
    omission: str = "image_dependent"  # or "constant"
    mention_range: tuple = (0.3, 0.95)
    mention_probs: Optional[list] = None  # per-concept override of the mention level
    presence_range: tuple = (0.1, 0.5)
    presence_scale: float = 3.0
    mention_scale: float = 2.0
    false_mention: float = 0.0
    regions: int = 1
    inject_prob: float = 0.25
    inject_scale: float = 2.0
    typical_pairs: int = 0
    concept_names: Optional[list] = None
    seed: int = 0

    def __post_init__(self):
        self.mention_range = tuple(self.mention_range)
        self.presence_range = tuple(self.presence_range)
        if self.n_concepts < 1 or self.dim < 1:
            raise ConfigError("n_concepts and dim must be positive")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test < 1:
            raise ConfigError("corpus must contain at least one image")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.omission not in ("constant", "image_dependent"):
            raise ConfigError(f"unknown omission mode {self.omission!r}")
        lo, hi = self.mention_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("mention_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.presence_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("presence_range must satisfy 0 < lo <= hi < 1")
        if self.mention_probs is not None:
            if len(self.mention_probs) != self.n_concepts:
                raise ConfigError("mention_probs needs one entry per concept")
            if any(not 0 <= q <= 1 for q in self.mention_probs):
                raise ConfigError("mention_probs must lie in [0, 1]")
        if not 0 <= self.false_mention <= 0.05:
            raise ConfigError("false_mention must lie in [0, 0.05]")
        if self.regions < 1:
            raise ConfigError("regions must be at least 1")
        if not 0 <= self.inject_prob <= 1:
            raise ConfigError("inject_prob must lie in [0, 1]")
        if not 0 <= self.typical_pairs <= self.n_concepts // 2:
            raise ConfigError("typical_pairs must be at most n_concepts // 2")
        if self.concept_names is not None and len(self.concept_names) != self.n_concepts:
            raise ConfigError("concept_names needs one entry per concept")
        for name in ("presence_scale", "mention_scale", "inject_scale"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @property
    def n(self):
        return self.n_train + self.n_test

    def names(self):
        if self.concept_names is not None:
            return list(self.concept_names)
        names = [f"c{w:02d}" for w in range(self.n_concepts)]
        for j in range(self.typical_pairs):
            names[self.n_concepts - 1 - j] = f"typical{j:02d}"
        return names

    def to_dict(self):
        d = asdict(self)
        d["mention_range"] = list(self.mention_range)
        d["presence_range"] = list(self.presence_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "coco-like": {},
    "constant": {"omission": "constant"},
    "typicality": {"typical_pairs": 5},
    "bag": {"regions": 4},
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GeneratorConfig(**{**PRESETS[name], **overrides})


@dataclass
class World:
    """Ground-truth generator weights."""

    presence_weight: np.ndarray  # (W, d)
    presence_bias: np.ndarray  # (W,)
    mention_weight: np.ndarray  # (W, d); zero in constant mode
    mention_bias: np.ndarray  # (W,); logit of q_w in constant mode
    mention_const: Optional[np.ndarray] = None  # (W,) q_w in constant mode
    warnings: list = field(default_factory=list)

    def presence_logits(self, features):
        """Presence logits ``(N, W)``; bag corpora use the region maximum."""
        x = np.asarray(features, dtype=np.float64)
        s = x @ self.presence_weight.T + self.presence_bias
        return s.max(axis=1) if x.ndim == 3 else s

    def mention_prob(self, features):
        """Per-annotator mention probability of present concepts, ``(N, W)``."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 3:
            x = x.mean(axis=1)
        if self.mention_const is not None:
            return np.broadcast_to(self.mention_const, (x.shape[0], self.mention_const.size))
        return expit(x @ self.mention_weight.T + self.mention_bias)


def _unit_rows(gen, n, d):
    v = gen.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _solve_offset(scores, target, weights=None):
    """Offset ``c`` with weighted mean of ``σ(scores + c)`` equal to ``target``."""
    w = np.ones_like(scores) if weights is None else weights
    f = lambda c: float(np.average(expit(scores + c), weights=w)) - target
    return brentq(f, -60.0, 60.0, xtol=1e-12)


def _draw_features(gen, cfg, directions):
    R, d = cfg.regions, cfg.dim
    x = gen.standard_normal((R, d))
    if R > 1:
        inject = gen.random(R) < cfg.inject_prob
        which = gen.integers(cfg.n_concepts, size=R)
        x[inject] += cfg.inject_scale * directions[which[inject]]
    return x


def build_world(cfg):
    gen = rngmod.stream(cfg.seed, rngmod.WORLD)
    W, d = cfg.n_concepts, cfg.dim
    u_dir = _unit_rows(gen, W, d)
    a_dir = _unit_rows(gen, W, d)
    for j in range(cfg.typical_pairs):
        # attribute omitted exactly when its typical context is present
        a_dir[W - 1 - j] = -u_dir[j]
    u = cfg.presence_scale * u_dir

    calib = np.stack([_draw_features(gen, cfg, u_dir) for _ in range(_CALIBRATION_SAMPLES)])
    scores = calib @ u.T
    scores = scores.max(axis=1) if cfg.regions > 1 else scores[:, 0]
    prior = np.linspace(*cfg.presence_range, W)
    c = np.array([_solve_offset(scores[:, w], prior[w]) for w in range(W)])
    present = expit(scores + c)

    levels = (np.asarray(cfg.mention_probs, dtype=np.float64) if cfg.mention_probs is not None
              else np.linspace(cfg.mention_range[1], cfg.mention_range[0], W))
    warnings = [f"concept {w} ({cfg.names()[w]}) has mention probability 0 and is never mentioned"
                for w in range(W) if levels[w] == 0.0]
    for msg in warnings:
        log.warning(msg)

    if cfg.omission == "constant":
        with np.errstate(divide="ignore"):
            bias = np.log(levels) - np.log1p(-levels)
        return World(u, c, np.zeros((W, d)), bias, levels.copy(), warnings)

    a = cfg.mention_scale * a_dir
    pooled = calib.mean(axis=1) @ a.T
    e = np.empty(W)
    for w in range(W):
        if levels[w] <= 0.0:
            e[w] = -np.inf
        elif levels[w] >= 1.0:
            e[w] = np.inf
        else:
            e[w] = _solve_offset(pooled[:, w], levels[w], present[:, w])
    return World(u, c, a, e, None, warnings)


def _image_draws(cfg, directions, index):
    gen = rngmod.stream(cfg.seed, rngmod.IMAGE, index)
    x = _draw_features(gen, cfg, directions)
    uz = gen.random(cfg.n_concepts)
    # references are drawn last and in order, so a larger k extends a shared prefix
    uref = gen.random((cfg.k, cfg.n_concepts))
    return x, uz, uref


def sample_corpus(cfg, seed=None):
    """Generate the full corpus (train images first, then test images).

    Returns ``(corpus, world)``. ``seed`` overrides ``cfg.seed``.
    """
    if seed is not None:
        cfg = GeneratorConfig(**{**cfg.to_dict(), "seed": seed})
    world = build_world(cfg)
    directions = world.presence_weight / np.linalg.norm(world.presence_weight, axis=1,
                                                          keepdims=True)
    draws = [_image_draws(cfg, directions, i) for i in range(cfg.n)]
    x = np.stack([d[0] for d in draws])
    uz = np.stack([d[1] for d in draws])
    uref = np.stack([d[2] for d in draws])

    z = (uz < expit(world.presence_logits(x if cfg.regions > 1 else x[:, 0]))).astype(np.uint8)
    m = world.mention_prob(x if cfg.regions > 1 else x[:, 0])
    p_ref = np.where(z == 1, m, cfg.false_mention)
    refs = (uref < p_ref[:, None, :]).astype(np.uint8)

    meta = {"generator": cfg.to_dict(), "warnings": list(world.warnings)}
    corpus = Corpus(x, refs, cfg.names(), z, np.arange(cfg.n), "all", cfg.regions > 1, meta)
    return corpus, world


def split(corpus, n_train):
    """Split a generated corpus into (train, test) by image index."""
    idx = np.arange(corpus.n)
    return corpus.subset(idx[:n_train], "train"), corpus.subset(idx[n_train:], "test")


def true_bias(corpus):
    """Empirical omission rates among present concepts.

    Returns a dict with per-concept ``union`` = P(union y = 0 | z = 1),
    ``per_reference`` = P(reference omits | z = 1) pooled over references,
    and ``support`` = number of present instances. Concepts with zero support
    get ``nan`` and are listed in ``undefined``.
    """
    if corpus.z is None:
        raise ConfigError("corpus has no 'z' field; omission rates need true presence")
    z = corpus.z.astype(bool)
    support = z.sum(axis=0)
    missed_union = (z & (corpus.y == 0)).sum(axis=0)
    missed_ref = (z[:, None, :] & (corpus.refs == 0)).sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        union = np.where(support > 0, missed_union / support, np.nan)
        per_ref = np.where(support > 0, missed_ref / (support * corpus.k), np.nan)
    return {"union": union, "per_reference": per_ref, "support": support,
            "undefined": [int(w) for w in np.flatnonzero(support == 0)]}


def oracle_params(world, cfg):
    """Bayes presence predictor as a depth-0 latent model.

    ``v`` reproduces the generator's presence probability exactly. The
    relevance encodes the single-annotator mention probability (``r11``) and
    the false-mention rate (``r10``), which approximates the union process
    for ``k > 1``.
    """
    from .model import ModelParams, PresenceHeadParams, RelevanceHeadParams, TrunkParams

    if cfg.regions > 1:
        raise ConfigError("the analytic oracle exists only for single-vector corpora")
    W, d = cfg.n_concepts, cfg.dim
    rw = np.zeros((W, 4, d))
    rb = np.zeros((W, 4))
    rw[:, 3] = world.mention_weight
    rb[:, 3] = np.clip(world.mention_bias, -40.0, 40.0)
    rho = min(max(cfg.false_mention, 1e-12), 1 - 1e-12)
    rb[:, 2] = np.log(rho) - np.log1p(-rho)
    return ModelParams(TrunkParams([]), PresenceHeadParams(world.presence_weight.copy(),
                                                           world.presence_bias.copy()),
                       RelevanceHeadParams(rw, rb))
