"""Command-line entry point: ``reportbias {gen,train,eval,diagnose,gradcheck}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import metrics, model as M, reports, synthgen
from . import rng as rngmod
from .baselines import BaselineKind, model_kind
from .corpus import read_jsonl, write_jsonl
from .errors import CheckpointError, ConfigError, InvalidInputError, NumericalError
from .evaluation import evaluate
from .trainer import (TrainConfig, gradient_check, load_checkpoint, save_checkpoint,
                      train)

log = logging.getLogger("reportbias")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRADCHECK_TOL = 1e-5


def _config(args):
    return cfgmod.load(args.config, args.seed)


def _corpus_file(path, split):
    """A corpus directory (as written by ``gen``) resolves to its split file."""
    if path and os.path.isdir(path):
        return os.path.join(path, f"{split}.jsonl")
    return path


def cmd_gen(args):
    cfg = _config(args)
    gen = cfg.generator
    out = args.out or cfg.paths.get("corpus")
    if not out:
        raise ConfigError("gen needs --out (or paths.corpus in the config)")
    os.makedirs(out, exist_ok=True)
    corpus, world = synthgen.sample_corpus(gen)
    train_c, test_c = synthgen.split(corpus, gen.n_train)
    write_jsonl(train_c, os.path.join(out, "train.jsonl"))
    write_jsonl(test_c, os.path.join(out, "test.jsonl"))
    if gen.regions == 1:
        save_checkpoint(synthgen.oracle_params(world, gen), os.path.join(out, "oracle.ckpt"))
    bias = synthgen.true_bias(train_c)
    report_dir = cfg.paths.get("reports") or out
    reports.write_bias_report(bias, train_c.concepts, report_dir, cfg.to_dict())
    for msg in world.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"wrote {train_c.n} train and {test_c.n} test images to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    training = cfg.training
    if args.kind:
        training = TrainConfig(**{**training.to_dict(), "kind": args.kind})
    corpus_path = _corpus_file(args.corpus or cfg.paths.get("corpus"), "train")
    out = args.out or cfg.paths.get("checkpoint")
    if not corpus_path or not out:
        raise ConfigError("train needs --corpus and --out")
    corpus = read_jsonl(corpus_path)
    params, trainlog = train(corpus.features, corpus.y, training)
    save_checkpoint(params, out)
    echo = cfg.to_dict()
    echo["training"].update({"kind": training.kind})
    reports.write_json({"config": echo, "log": trainlog.to_dict()}, out + ".log.json")
    reports.write_json({"epoch_seconds": trainlog.epoch_seconds}, out + ".timing.json")
    from .plotting import loss_figure
    loss_figure(trainlog.epoch_loss, trainlog.phase, out + ".loss.png")
    print(f"final epoch loss {trainlog.epoch_loss[-1]:.6f}; checkpoint written to {out}")
    return EXIT_OK


def _load_pair(args, cfg):
    corpus_path = _corpus_file(args.corpus or cfg.paths.get("corpus"), "test")
    ckpt = args.checkpoint or cfg.paths.get("checkpoint")
    if not corpus_path or not ckpt:
        raise ConfigError("--checkpoint and --corpus are required")
    corpus = read_jsonl(corpus_path)
    params = load_checkpoint(ckpt, corpus.n_concepts, corpus.dim)
    return params, corpus


def cmd_eval(args):
    cfg = _config(args)
    params, corpus = _load_pair(args, cfg)
    out = args.out or cfg.paths.get("reports")
    if not out:
        raise ConfigError("eval needs --out")
    result = evaluate(params, corpus, cfg.evaluation)
    reports.write_eval_report(result, out, cfg.to_dict())
    s = result["summary"]
    for key in sorted(k for k in s if k.startswith("map_") and not k.endswith("by_group")):
        print(f"{key}: {reports.fmt(s[key])}")
    return EXIT_OK


def cmd_diagnose(args):
    cfg = _config(args)
    params, corpus = _load_pair(args, cfg)
    if model_kind(params) in (BaselineKind.NAIVE, BaselineKind.MULTIHEAD):
        raise ConfigError(f"a {model_kind(params).value} checkpoint has no relevance "
                          "head, so v and h are not decoupled")
    out = args.out or cfg.paths.get("reports")
    if not out:
        raise ConfigError("diagnose needs --out")
    v, h = M.predict(params, corpus.features)
    ev = cfg.evaluation
    hists = [metrics.decoupling_histogram(v[:, w], h[:, w], ev.hist_bins, ev.v_threshold,
                                          ev.quantiles, corpus.ids)
             for w in range(corpus.n_concepts)]
    reports.write_diagnostics(corpus.concepts, hists, out, cfg.to_dict())
    print(f"wrote decoupling histograms for {corpus.n_concepts} concepts to {out}")
    return EXIT_OK


def random_instance(seed, n_concepts=3, dim=5, regions=1, hidden=(4,), bag=False,
                    conditioned=True, warmup=False, n_examples=2, scale=0.7):
    """Random parameters, features and labels for a gradient check."""
    gen = rngmod.stream(seed, 0x6AD)
    params = M.init_params(n_concepts, dim, hidden, seed=seed, bag_mode=bag,
                           relevance_conditioned=conditioned, identity_relevance=warmup)
    for a in params.named_arrays().values():
        a[...] = gen.normal(0.0, scale, a.shape)
    if not conditioned:
        params.relevance.weight[...] = 0.0
    x = gen.standard_normal((n_examples, regions if bag else 1, dim))
    y = gen.integers(0, 2, (n_examples, n_concepts))
    return params, x, y


def sweep_modes(n):
    """``n`` mode combinations cycling over bag/single, conditioning and warm-up."""
    combos = [(bag, cond, warm) for warm in (False, True)
              for cond in (True, False) for bag in (False, True)]
    return [combos[i % len(combos)] for i in range(n)]


def _corrupt(params, x, y, wd):
    value, grads = M.loss_and_grad(params, x, y, wd)
    grads["presence.bias"] = grads["presence.bias"] + 1e-3
    return value, grads


def cmd_gradcheck(args):
    hidden = tuple(args.hidden)
    if args.instances > 1:
        modes = sweep_modes(args.instances)
    else:
        modes = [(args.bag, not args.unconditioned, args.warmup)]
    worst = 0.0
    for i, (bag, cond, warm) in enumerate(modes):
        params, x, y = random_instance(args.seed + i, args.W, args.d, args.R, hidden, bag,
                                       cond, warm)
        err = gradient_check(params, x, y, args.weight_decay, args.step,
                             grad_fn=_corrupt if args.corrupt_gradient else None)
        log.info("instance %d bag=%s conditioned=%s warmup=%s: %.3e", i, bag, cond, warm, err)
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e} over {len(modes)} instance(s)")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="reportbias", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output file or directory")

    sp = sub.add_parser("gen", help="generate a synthetic corpus")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a corpus")
    common(sp)
    sp.add_argument("--corpus", help="training corpus (JSONL)")
    sp.add_argument("--kind", choices=[k.value for k in BaselineKind])
    sp.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                             ("diagnose", cmd_diagnose, "h-vs-v decoupling histograms")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--corpus")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="compare gradients with finite differences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--W", type=int, default=3)
    sp.add_argument("--d", type=int, default=5)
    sp.add_argument("--R", type=int, default=3, help="regions per example in bag mode")
    sp.add_argument("--hidden", type=int, nargs="*", default=[4])
    sp.add_argument("--bag", action="store_true")
    sp.add_argument("--unconditioned", action="store_true")
    sp.add_argument("--warmup", action="store_true", help="identity relevance (frozen)")
    sp.add_argument("--instances", type=int, default=1,
                    help="random instances; more than one cycles through all modes")
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--weight-decay", type=float, default=1e-3)
    sp.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
