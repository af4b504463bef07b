"""Command-line entry points: ``config``, ``gen-data``, ``train``, ``eval`` and ``infer``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ABLATIONS, ConfigError, ExperimentConfig
from .dataset import (PREDICATES, Vocabulary, apply_cleansing_filters, category_word,
                      default_vocabulary, generate_corpus, load_corpus, save_corpus)
from .evaluation import TASKS, format_reports
from .model import SceneGraphModel
from .training import evaluate, metrics_payload, predict_scene, scene_seed, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("scenegraph")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str, "tuple": _parse_ints}


def add_config_flags(p: argparse.ArgumentParser):
    """One ``--field-name`` override per configuration field, plus ``--config`` and ``--ablation``."""
    p.add_argument("--config", help="configuration file (key = value lines)")
    p.add_argument("--ablation", type=int, choices=sorted(ABLATIONS),
                   help="apply a numbered ablation row on top of the configuration")
    g = p.add_argument_group("configuration overrides")
    for f in fields(ExperimentConfig):
        kind = str(f.type).split("[")[0]
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                       type=_PARSERS.get(kind, str), default=None, metavar=kind.upper())


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = ExperimentConfig.load(args.config)
        except OSError as e:
            raise DataError(f"cannot read config: {e}") from None
        except ConfigError as e:
            raise DataError(f"{args.config}: {e}") from None
    else:
        cfg = ExperimentConfig()
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.ablation is not None:
        over = {**ABLATIONS[args.ablation], **over}
    try:
        return cfg.with_(**over) if over else cfg
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _load_corpus(path):
    try:
        return load_corpus(path)
    except OSError as e:
        raise DataError(f"cannot read corpus: {e}") from None
    except ValueError as e:
        raise DataError(str(e)) from None


def _load_model(path) -> tuple[SceneGraphModel, Vocabulary]:
    path = Path(path)
    try:
        model = SceneGraphModel.load(path)
        vocab = Vocabulary.load(path / "vocab.txt")
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e}") from None
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: corrupt checkpoint: {e}") from None
    return model, vocab


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# commands

def cmd_config(args) -> int:
    _write(args.out, config_from_args(args).dumps())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    scfg = cfg.scene_config()
    scenes = generate_corpus(scfg, cfg.n_scenes, cfg.data_seed)
    if args.cleanse:
        scenes = apply_cleansing_filters(scenes, default_vocabulary(scfg), cfg.min_obj_edge,
                                         cfg.min_cap_edge)
    save_corpus(args.out, scenes, {"n_scenes": len(scenes), "data_seed": cfg.data_seed})
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    _, scenes = _load_corpus(args.corpus)
    if not scenes:
        raise DataError(f"{args.corpus}: no scenes")
    vocab = default_vocabulary(cfg.scene_config())
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.log", "w") as fh:
        fh.write("step\tloss\n")

        def record(step, value):
            fh.write(f"{step}\t{value:.10g}\n")
        train(model, scenes, vocab, log_every=args.log_every, callback=record)
    model.save(out)
    vocab.save(out / "vocab.txt")
    log.info("checkpoint written to %s", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    _, scenes = _load_corpus(args.corpus)
    tasks = tuple(args.tasks.split(","))
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise UsageError(f"unknown task(s) {bad}; choose from {list(TASKS)}")
    result = evaluate(model, scenes, vocab, tasks, with_captions=args.captions, workers=args.workers)
    text = json.dumps(metrics_payload(result), sort_keys=True, indent=2) + "\n"
    _write(args.out, text)
    if args.out not in (None, "-"):
        sys.stderr.write(format_reports(result["reports"]))
    log.info("metrics sha256 %s", hashlib.sha256(text.encode()).hexdigest())
    return EXIT_OK


def cmd_infer(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    _, scenes = _load_corpus(args.corpus)
    if not 0 <= args.index < len(scenes):
        raise UsageError(f"--index {args.index} out of range for {len(scenes)} scenes")
    seed = scene_seed(model.cfg.eval_seed, args.index)
    pred, captions, topo = predict_scene(model, scenes[args.index], seed, vocab)
    names = [category_word(c) for c in range(model.cfg.n_obj_classes)]
    if args.json or not (args.dot or args.topology_dot):
        _write(args.json, json.dumps(pred.to_json(captions if model.cfg.caption_branch else None),
                                     sort_keys=True, indent=2) + "\n")
    if args.dot:
        _write(args.dot, pred.to_dot(names, list(PREDICATES)))
    if args.topology_dot:
        _write(args.topology_dot, topo.to_dot())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenegraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="write a configuration file")
    add_config_flags(c)
    c.add_argument("--out", default="-")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    add_config_flags(g)
    g.add_argument("--out", required=True)
    g.add_argument("--cleanse", action="store_true", help="apply size and frequency filters")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint directory")
    add_config_flags(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--tasks", default=",".join(TASKS))
    e.add_argument("--captions", action="store_true", help="also report caption exact match")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default="-", help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="export the predicted scene graph of one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--corpus", required=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--json", help="write the prediction as JSON")
    i.add_argument("--dot", help="write the prediction as Graphviz DOT")
    i.add_argument("--topology-dot", help="write the object/phrase/caption graph as DOT")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
