"""Train the default desk-scale configuration and report held-out seen/novel IoU and AP.

    python3 scripts/train_default.py [KEY=VALUE ...]
"""
import logging
import sys
import time

from priormask import trainer as T
from priormask.config import load_config
from priormask.synthdata import SplitSpec, generate_dataset


def main(argv):
    run = load_config(overrides=dict(a.split("=", 1) for a in argv))
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.info("resolved config:\n%s", run.dump())
    cfg, data = run.train, run.data
    rng = (data.min_instances, data.max_instances)
    train_s = generate_dataset(data.train_scenes, instances_per_scene_range=rng, seed=data.seed, side=cfg.image_side)
    test_s = generate_dataset(data.test_scenes, instances_per_scene_range=rng, seed=data.test_seed, side=cfg.image_side)
    split = SplitSpec.default()
    t0 = time.perf_counter()
    bank = T.build_bank_for(train_s, split, cfg)
    res = T.train(cfg, train_s, split, bank, log_every=200)
    reports = {label: T.evaluate(res.weights, test_s, classes, bank, cfg, label)
               for label, classes in (("seen", split.seen_mask_classes), ("novel", split.novel_classes))}
    print(T.summary_table(reports))
    print(f"elapsed {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main(sys.argv[1:])
