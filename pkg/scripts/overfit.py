"""Overfit a small corpus and report object, predicate and caption accuracy.

    python3 scripts/overfit.py --scenes 10 --steps 2000
"""
import argparse
import json
import time

from scenegraph.config import ABLATIONS, ExperimentConfig
from scenegraph.dataset import default_vocabulary, generate_corpus
from scenegraph.model import SceneGraphModel
from scenegraph.training import evaluate, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--row", type=int, default=4, choices=sorted(ABLATIONS))
    args = p.parse_args()

    cfg = ExperimentConfig(steps=args.steps, **ABLATIONS[args.row])
    vocab = default_vocabulary(cfg.scene_config())
    scenes = generate_corpus(cfg.scene_config(), args.scenes, args.seed)
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    t0 = time.time()
    log = train(model, scenes, vocab)
    res = evaluate(model, scenes, vocab, with_captions=cfg.caption_branch)
    print(json.dumps({
        "object_acc": res["detection"]["top1_acc"],
        "predicate_acc": res["predicate_acc"],
        "caption_exact_match": res.get("caption_exact_match"),
        "final_loss": log.losses[-1],
        "seconds": round(time.time() - t0, 1),
    }, indent=2))


if __name__ == "__main__":
    main()
