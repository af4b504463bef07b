"""Train and evaluate the numbered ablation rows on a shared synthetic corpus.

    python3 scripts/ablation.py --rows 1,2,3,4 --out results/ablation.json
"""
import argparse
import json
import logging
import time

import numpy as np

from scenegraph.config import ABLATIONS, ExperimentConfig
from scenegraph.dataset import default_vocabulary, generate_corpus
from scenegraph.model import SceneGraphModel
from scenegraph.training import evaluate, metrics_payload, train


def run_row(row, base, scenes, test, vocab, checkpoint_dir=None):
    cfg = base.with_(**ABLATIONS[row])
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    t0 = time.time()
    log = train(model, scenes, vocab)
    payload = metrics_payload(evaluate(model, test, vocab, with_captions=cfg.caption_branch))
    payload["row"] = row
    payload["train_seconds"] = round(time.time() - t0, 1)
    payload["final_loss"] = float(np.mean(log.losses[-200:]))
    if checkpoint_dir:
        model.save(f"{checkpoint_dir}/model{row}")
    return payload


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", default="1,2,3,4,5,6")
    p.add_argument("--train-scenes", type=int, default=2000)
    p.add_argument("--test-scenes", type=int, default=1000)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--test-seed", type=int, default=99)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--checkpoints", help="directory for per-row checkpoints")
    p.add_argument("--out", help="JSON results path")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = ExperimentConfig() if args.steps is None else ExperimentConfig(steps=args.steps)
    scenes = generate_corpus(base.scene_config(), args.train_scenes, args.train_seed)
    test = generate_corpus(base.scene_config(), args.test_scenes, args.test_seed)
    vocab = default_vocabulary(base.scene_config())
    results = []
    for row in (int(r) for r in args.rows.split(",")):
        res = run_row(row, base, scenes, test, vocab, args.checkpoints)
        recall = {f"{r['task']}@{r['K']}": round(100 * r["recall"], 2) for r in res["recall"]}
        logging.info("model %d  %s  predicate_acc %.3f  captions %s  (%.0fs)", row, recall,
                     res["predicate_acc"], res.get("caption_exact_match"), res["train_seconds"])
        results.append(res)
        if args.out:
            with open(args.out, "w") as fh:
                json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
