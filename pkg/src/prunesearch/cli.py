"""Command line interface.

Subcommands: train, search, score, realize, eval, validate. Progress goes to
stderr via logging; stdout carries exactly one JSON document per run so the
commands compose in pipelines. Exit codes: 0 success, 1 configuration or
validation problem, 2 missing or malformed file, 3 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import evaluation as ev
from . import proxy as proxy_mod
from . import search as search_mod
from .config import default_config_toml, load_run_config
from .errors import ConfigError, FormatError, InputError, NumericalError
from .masks import ArchEncoding, compute_saliency, masks_to_json, realize_masks
from .model import (attach_adapters, collect_activation_stats,
                    init_supernetwork, parameter_count)

log = logging.getLogger("prunesearch")


def _load_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        overrides[key.strip()] = _parse_override(text.strip())
    return load_run_config(args.config, overrides)


def _parse_override(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _splits(cfg):
    tokens = corpus_mod.load_corpus(cfg.corpus_path or None, seed=cfg.corpus_seed,
                                    size=cfg.corpus_size)
    return corpus_mod.split_corpus(tokens)


def _calibration(cfg, split):
    seqs = corpus_mod.eval_sequences(split, cfg.calib_sequences, cfg.calib_length)
    return proxy_mod.CalibrationBatch(seqs)


def _heldout(cfg, split):
    seqs = corpus_mod.eval_sequences(split, cfg.heldout_sequences, cfg.calib_length)
    return proxy_mod.CalibrationBatch(seqs)


def _analysis(cfg, net):
    """Activation stats, saliency and importance prior from the calibration split."""
    train, heldout, calib = _splits(cfg)
    calib_batch = _calibration(cfg, calib)
    stats = collect_activation_stats(net, calib_batch.tokens)
    saliency = compute_saliency(net, stats)
    prior = search_mod.compute_importance_prior(net, stats)
    return train, heldout, calib_batch, saliency, prior


def _anchor(cfg, net, calib_batch, cache_path):
    attach_adapters(net, cfg.adapter_rank, cfg.adapter_seed)
    trace, cached = ckpt.get_or_compute_anchor(
        cache_path, net, calib_batch,
        lambda: proxy_mod.compute_anchor(net, calib_batch))
    log.info("anchor trace %s", "loaded from cache" if cached else "computed")
    return trace


def _encoding_arg(args, net):
    if getattr(args, "encoding", None):
        enc = ckpt.load_encoding(args.encoding)
        if enc.depth.size != net.config.n_layers:
            raise InputError(
                f"encoding has {enc.depth.size} layers, model has {net.config.n_layers}")
        return enc
    return ArchEncoding.identity(net.config.n_layers)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args):
    cfg = _load_config(args)
    net = init_supernetwork(cfg.model_config(), seed=cfg.init_seed)
    train, heldout, _ = _splits(cfg)
    history = ev.train_tiny_base(net, train, cfg.train_config())
    ckpt.save_checkpoint(args.out, net)
    loss = ev.heldout_loss(net, _heldout(cfg, heldout))
    _emit({"checkpoint": args.out, "steps": cfg.train_steps,
           "final_train_loss": history[-1], "heldout_loss": loss,
           "parameters": parameter_count(net, ArchEncoding.identity(net.config.n_layers))})
    return 0


def cmd_search(args):
    cfg = _load_config(args)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    net = ckpt.load_checkpoint(args.checkpoint)
    _, _, calib_batch, saliency, prior = _analysis(cfg, net)
    anchor = _anchor(cfg, net, calib_batch, args.anchor_cache)
    search_cfg = cfg.search_config(
        parameter_count(net, ArchEncoding.identity(net.config.n_layers)),
        net.config.n_layers)
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "search_log.jsonl")
    result = search_mod.run_search(net, saliency, prior, calib_batch, anchor,
                                   search_cfg, log_path=log_path)
    ckpt.save_encoding(os.path.join(args.out_dir, "best.json"),
                       result.best.encoding)
    _emit(search_mod.summary_json(result, search_cfg))
    return 0


def cmd_score(args):
    cfg = _load_config(args)
    net = ckpt.load_checkpoint(args.checkpoint)
    _, _, calib_batch, saliency, _ = _analysis(cfg, net)
    encoding = _encoding_arg(args, net)
    encoding.validate(min_depth=1, kappa_min=0.0)
    anchor = _anchor(cfg, net, calib_batch, args.anchor_cache)
    result, _ = proxy_mod.evaluate(net, encoding, saliency, calib_batch, anchor)
    out = result.to_json_dict()
    out["parameters"] = parameter_count(net, encoding)
    _emit(out)
    return 0


def cmd_realize(args):
    cfg = _load_config(args)
    net = ckpt.load_checkpoint(args.checkpoint)
    _, _, _, saliency, _ = _analysis(cfg, net)
    encoding = _encoding_arg(args, net)
    encoding.validate(min_depth=1, kappa_min=0.0)
    masks = realize_masks(net, encoding, saliency)
    realized = ckpt.realized_network(net, encoding, masks,
                                     slice_widths=args.slice)
    ckpt.save_checkpoint(args.out, realized)
    _emit({"checkpoint": args.out, "sliced": bool(args.slice),
           "parameters": parameter_count(net, encoding),
           "bytes": os.path.getsize(args.out),
           "masks": masks_to_json(masks)})
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    net = ckpt.load_checkpoint(args.checkpoint)
    train, heldout, _ = _splits(cfg)
    heldout_batch = _heldout(cfg, heldout)
    out = {"sequences": int(heldout_batch.tokens.shape[0])}
    if getattr(args, "encoding", None):
        _, _, _, saliency, _ = _analysis(cfg, net)
        encoding = _encoding_arg(args, net)
        encoding.validate(min_depth=1, kappa_min=0.0)
        recovery = cfg.recovery_config() if cfg.recovery_steps > 0 else None
        out["loss"] = ev.true_metric(net, encoding, saliency, heldout_batch,
                                     train_split=train, recovery=recovery)
        out["recovery_steps"] = cfg.recovery_steps
        out["parameters"] = parameter_count(net, encoding)
    else:
        out["loss"] = ev.heldout_loss(net, heldout_batch)
        out["parameters"] = parameter_count(
            net, ArchEncoding.identity(net.config.n_layers))
    out["perplexity"] = float(np.exp(out["loss"]))
    _emit(out)
    return 0


def cmd_validate(args):
    cfg = _load_config(args)
    net = ckpt.load_checkpoint(args.checkpoint)
    train, heldout, calib_batch, saliency, prior = _analysis(cfg, net)
    anchor = _anchor(cfg, net, calib_batch, args.anchor_cache)
    heldout_batch = _heldout(cfg, heldout)
    search_cfg = cfg.search_config(
        parameter_count(net, ArchEncoding.identity(net.config.n_layers)),
        net.config.n_layers)
    recovery = cfg.recovery_config() if cfg.recovery_steps > 0 else None
    pool = ev.build_pool(net, saliency, prior, calib_batch, anchor,
                         heldout_batch, count=cfg.pool_size,
                         seed=cfg.pool_seed, search_cfg=search_cfg,
                         train_split=train, recovery=recovery)
    report = ev.validate_proxy(pool)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(ev.report_csv(report))
    svg_path = os.path.join(args.out_dir, "scatter.svg")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(ev.scatter_svg(pool.proxy_values("full"), pool.metric_values(),
                                "proxy score", "negative heldout loss"))
    _emit({"pool_size": len(pool.entries), "report": csv_path,
           "scatter": svg_path,
           "rows": {v: {"spearman": report.row(v)["spearman"],
                        "kendall": report.row(v)["kendall"]}
                    for v in ev.PROXY_VARIANTS}})
    return 0


def cmd_init_config(args):
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(default_config_toml())
    _emit({"config": args.out})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prunesearch",
        description="Zero-shot width and depth pruning search for small "
                    "decoder transformers.")
    parser.add_argument("--verbose", action="store_true",
                        help="debug-level logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="flat TOML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="trained base model container")

    p = sub.add_parser("train", help="train the dense base model")
    common(p, checkpoint=False)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="run the evolutionary search")
    common(p)
    p.add_argument("--out-dir", required=True,
                   help="directory for search_log.jsonl and best.json")
    p.add_argument("--anchor-cache", help="anchor trace cache file")
    p.add_argument("--workers", type=int,
                   help="scoring threads (default: config value; 0 = all cores)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("score", help="proxy-score one encoding")
    common(p)
    p.add_argument("--encoding", help="encoding JSON (default: dense identity)")
    p.add_argument("--anchor-cache", help="anchor trace cache file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("realize", help="materialize a pruned checkpoint")
    common(p)
    p.add_argument("--encoding", required=True, help="encoding JSON")
    p.add_argument("--out", required=True, help="pruned checkpoint to write")
    p.add_argument("--slice", action="store_true",
                   help="physically remove pruned widths where shapes allow")
    p.set_defaults(func=cmd_realize)

    p = sub.add_parser("eval", help="held-out loss of a checkpoint or encoding")
    common(p)
    p.add_argument("--encoding", help="encoding JSON to mask before scoring")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="rank-correlate proxy against true loss")
    common(p)
    p.add_argument("--out-dir", required=True,
                   help="directory for report.csv and scatter.svg")
    p.add_argument("--anchor-cache", help="anchor trace cache file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("init-config", help="write a template config file")
    p.add_argument("--out", required=True, help="TOML path to write")
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"E:1: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"E:2: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"E:3: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main())
