"""Evaluate trained models on a corpus and run seeded model comparisons."""

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import metrics, synthgen
from .baselines import BaselineKind, model_kind
from .errors import ConfigError, InvalidInputError
from .model import predict
from .trainer import TrainConfig, train

METRICS = ("h_vs_y", "v_vs_y", "v_vs_z", "h_vs_z", "phr", "bias", "merged")
NEEDS_Z = {"v_vs_z", "h_vs_z", "bias"}


@dataclass
class EvalConfig:
    metrics: Optional[list] = None  # None -> everything the corpus supports
    merge_groups: Optional[dict] = None  # group name -> concept indices or names
    concept_groups: Optional[list] = None  # one tag per concept, for grouped mAP
    hist_bins: int = 10
    v_threshold: float = 0.8
    quantiles: int = 4

    def __post_init__(self):
        if self.metrics is not None:
            unknown = set(self.metrics) - set(METRICS)
            if unknown:
                raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        if self.hist_bins < 1 or self.quantiles < 1:
            raise ConfigError("hist_bins and quantiles must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown evaluation settings: {sorted(set(d) - known)}")
        return cls(**d)


def resolve_groups(groups, names):
    out = {}
    for g, members in groups.items():
        idx = []
        for m in members:
            if isinstance(m, str):
                if m not in names:
                    raise ConfigError(f"merge group {g!r}: unknown concept {m!r}")
                idx.append(names.index(m))
            else:
                idx.append(int(m))
        out[g] = idx
    return out


def _mean(aps, groups=None):
    try:
        m = metrics.mean_ap(aps, groups)
    except InvalidInputError:
        return None, {}, len(aps)
    return m.overall, m.per_group, m.n_excluded


def evaluate(params, corpus, config=None):
    """Compute the metric table for ``params`` on ``corpus``.

    Returns a dict with ``per_concept`` (column name -> list) and ``summary``.
    Models without a relevance head report the same scores for ``v`` and ``h``.
    """
    config = config or EvalConfig()
    requested = list(METRICS) if config.metrics is None else list(config.metrics)
    if corpus.z is None:
        missing = [m for m in requested if m in NEEDS_Z]
        if config.metrics is not None and missing:
            raise ConfigError(
                f"corpus records lack field 'z' required for {', '.join(missing)}")
        requested = [m for m in requested if m not in NEEDS_Z]
    if corpus.k < 2 and "phr" in requested:
        if config.metrics is not None:
            raise ConfigError("PHR needs at least two references per image (k >= 2)")
        requested.remove("phr")

    v, h = predict(params, corpus.features)
    ids = corpus.ids
    y = corpus.y
    groups = config.concept_groups
    if groups is not None and len(groups) != corpus.n_concepts:
        raise ConfigError("concept_groups needs one tag per concept")

    cols = {"concept": list(corpus.concepts)}
    summary = {"model": model_kind(params).value, "n_images": int(corpus.n),
               "n_concepts": int(corpus.n_concepts)}
    pairs = {"h_vs_y": (h, y), "v_vs_y": (v, y)}
    if corpus.z is not None:
        pairs.update({"v_vs_z": (v, corpus.z), "h_vs_z": (h, corpus.z)})
    for name in ("h_vs_y", "v_vs_y", "v_vs_z", "h_vs_z"):
        if name not in requested:
            continue
        s, lab = pairs[name]
        aps = metrics.average_precisions(s, lab, ids)
        cols[f"ap_{name}"] = aps
        overall, per_group, excluded = _mean(aps, groups)
        summary[f"map_{name}"] = overall
        summary[f"excluded_{name}"] = excluded
        if groups is not None:
            summary[f"map_{name}_by_group"] = per_group

    if "phr" in requested:
        phr_h, hr = metrics.precision_at_human_recall(h, corpus.refs, ids)
        phr_v, _ = metrics.precision_at_human_recall(v, corpus.refs, ids)
        cols["human_recall"] = hr.tolist()
        cols["phr_h"] = phr_h.tolist()
        cols["phr_v"] = phr_v.tolist()
        summary["phr_h"] = float(np.nanmean(phr_h)) if np.isfinite(phr_h).any() else None
        summary["phr_v"] = float(np.nanmean(phr_v)) if np.isfinite(phr_v).any() else None

    if "bias" in requested:
        rep = metrics.reporting_bias(y, corpus.z)
        cols["r01"] = rep.estimate.tolist()
        cols["support"] = rep.support.tolist()
        summary["r01_undefined"] = rep.undefined

    if "merged" in requested and config.merge_groups:
        mg = resolve_groups(config.merge_groups, list(corpus.concepts))
        truth = corpus.z if corpus.z is not None else y
        merged_truth, merged_names = metrics.merge_concepts(truth, mg, corpus.concepts)
        out = {"names": merged_names, "truth": "z" if corpus.z is not None else "y"}
        for tag, s in (("v", v), ("h", h)):
            merged, _ = metrics.merge_concepts(s, mg, corpus.concepts)
            aps = metrics.average_precisions(merged, merged_truth, ids)
            out[f"ap_{tag}"] = aps
            out[f"map_{tag}"] = _mean(aps)[0]
        summary["merged"] = out
    return {"per_concept": cols, "summary": summary}


# ---------------------------------------------------------------------------
# seeded comparisons


# training schedule used for the synthetic comparisons: long enough for the
# joint phase to converge on the default preset
EXPERIMENT_TRAINING = dict(epochs=20, warmup_epochs=10, learning_rate=0.01, momentum=0.9,
                           batch_size=32, weight_decay=3e-3)


@dataclass
class Comparison:
    seed: int
    maps: dict = field(default_factory=dict)  # kind -> {metric: mAP}


def compare_models(seed, generator=None, kinds=("naive", "latent"), training=None):
    """Generate a corpus for ``seed``, train each model kind, report test mAPs."""
    generator = generator or synthgen.preset("coco-like")
    corpus, _ = synthgen.sample_corpus(generator, seed=seed)
    tr, te = synthgen.split(corpus, generator.n_train)
    settings = {**EXPERIMENT_TRAINING, **(training or {})}
    out = Comparison(seed)
    for kind in kinds:
        params, _ = train(tr.features, tr.y, TrainConfig(kind=kind, seed=seed, **settings))
        s = evaluate(params, te, EvalConfig(metrics=["h_vs_y", "v_vs_y", "v_vs_z", "h_vs_z"]))
        out.maps[BaselineKind(kind).value] = {
            k[4:]: v for k, v in s["summary"].items() if k.startswith("map_")}
    return out
