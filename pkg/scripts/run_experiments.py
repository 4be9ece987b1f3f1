"""Run the desk-scale experiment suite and write CSV reports plus a summary table.

    python3 scripts/run_experiments.py --which ablation robustness --out results/
"""
import argparse
import logging
import time
from pathlib import Path

from priormask import trainer as T
from priormask.config import DataConfig, load_config
from priormask.synthdata import SplitSpec, generate_dataset

EXPERIMENTS = ("generalization", "ablation", "robustness", "data", "capacity")


def datasets(side: int, data: DataConfig):
    rng = (data.min_instances, data.max_instances)
    return (generate_dataset(data.train_scenes, instances_per_scene_range=rng, seed=data.seed, side=side),
            generate_dataset(data.test_scenes, instances_per_scene_range=rng, seed=data.test_seed, side=side))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--which", nargs="+", choices=EXPERIMENTS + ("all",), default=["all"])
    ap.add_argument("--preset", default="experiment")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    which = EXPERIMENTS if "all" in args.which else args.which
    run = load_config(preset=args.preset, overrides=dict(kv.split("=", 1) for kv in args.set))
    cfg = run.train
    logging.info("resolved config:\n%s", run.dump())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_s, test_s = datasets(cfg.image_side, run.data)
    split = SplitSpec.default()
    reports = {}
    t0 = time.perf_counter()

    if "generalization" in which:
        for label, sp in (("partial", split), ("oracle", SplitSpec.oracle())):
            r = T.train_and_evaluate(cfg, train_s, test_s, sp, split.novel_classes, "novel")
            reports[f"generalization/{label}"] = r.report
            reports[f"generalization/{label}/seen"] = T.evaluate(r.result.weights, test_s, split.seen_mask_classes,
                                                                 r.bank, cfg, "seen")
    if "ablation" in which:
        names = {(0, 0): "neither", (0, 1): "embed-only", (1, 0): "shape-only", (1, 1): "both"}
        for key, r in T.run_ablation_grid(cfg, train_s, test_s, split).items():
            reports[f"ablation/{names[key]}"] = r.report
    if "robustness" in which:
        bank = T.build_bank_for(train_s, split, cfg)
        plain = T.train(cfg.replace(jitter_sigma=0.0), train_s, split, bank).weights
        jitter = T.train(cfg, train_s, split, bank).weights
        table = T.run_robustness(plain, jitter, test_s, bank, cfg, split.novel_classes, seed=cfg.seed)
        for (m, p), r in table.reports.items():
            reports[f"robustness/{m}/{p}"] = r
    if "data" in which:
        for f, r in T.run_data_sweep(cfg, train_s, test_s, split).items():
            reports[f"data/{f:g}"] = r.report
    if "capacity" in which:
        for d, (r, n) in T.run_capacity_sweep(cfg, train_s, test_s, split).items():
            reports[f"capacity/D={d}/params={n}"] = r.report

    T.write_reports_csv(reports, out / "reports.csv")
    T.write_summary(reports, out / "summary.txt")
    print(T.summary_table(reports))
    logging.info("done in %.1f min", (time.perf_counter() - t0) / 60)


if __name__ == "__main__":
    main()
