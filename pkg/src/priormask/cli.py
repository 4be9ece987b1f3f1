"""Command-line entry point.

Configuration is layered: preset, then ``--config`` file, then ``--set KEY=VALUE``
overrides, then the dedicated flags (``--seed``, ``--steps``...).  The resolved
configuration is logged at the start of every command.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import maskbranch as mb
from . import trainer as T
from .config import PRESETS, RunConfig, load_config
from .priors import build_prior_bank, load_bank, save_bank
from .synthdata import CLASS_NAMES, SplitSpec, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("priormask")

SPLITS = {"seen": lambda s: s.seen_mask_classes, "novel": lambda s: s.novel_classes, "all": lambda s: s.all_classes}
PERTURB = {"none": None, "downsize": (0.75, 1.0)}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- images

def to_gray(values: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def write_pgm(path, values: np.ndarray) -> None:
    """Binary graymap (P5, maxval 255) of values in [0, 1]."""
    img = to_gray(values)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 graymap")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def prior_atlas(bank, gap: int = 2) -> np.ndarray:
    """One row of tiles per bank key (sorted), one column per prior, separated by black gaps."""
    keys = sorted(bank.priors)
    side = bank.priors[keys[0]].shape[-1]
    k = bank.K
    out = np.zeros((len(keys) * (side + gap) + gap, k * (side + gap) + gap))
    for r, key in enumerate(keys):
        for c, prior in enumerate(bank.priors[key]):
            y, x = gap + r * (side + gap), gap + c * (side + gap)
            out[y:y + side, x:x + side] = prior
    return out


# --------------------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    items = {}
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        key, value = kv.split("=", 1)
        items[key.strip()] = value
    if args.seed is not None:
        items["seed"] = str(args.seed)
    for key in ("steps", "width", "k", "prior_mode"):
        value = getattr(args, key, None)
        if value is not None:
            items[key] = str(value)
    try:
        cfg = load_config(args.config, items, args.preset)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    log.info("resolved config:\n%s", cfg.dump().rstrip())
    return cfg


def _split(name: str) -> SplitSpec:
    return SplitSpec.oracle() if name == "oracle" else SplitSpec.default()


def _load_data(path, cfg: RunConfig | None = None):
    if path is None:
        raise UsageError("a dataset path is required (--data)")
    scenes = load_dataset(path)
    if cfg is not None and scenes[0].side != cfg.train.image_side:
        raise UsageError(f"dataset {path} has side {scenes[0].side}, config expects {cfg.train.image_side}")
    return scenes


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_outputs(reports: dict, out: Path) -> None:
    T.write_reports_csv(reports, out / "reports.csv")
    T.write_summary(reports, out / "summary.txt")
    print(T.summary_table(reports))


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.data.seed
    n = args.scenes if args.scenes is not None else cfg.data.train_scenes
    scenes = generate_dataset(n, CLASS_NAMES, (cfg.data.min_instances, cfg.data.max_instances), seed,
                              cfg.train.image_side)
    save_dataset(scenes, args.out)
    log.info("wrote %d scenes (%d instances) to %s", n, sum(len(s.instances) for s in scenes), args.out)


def cmd_build_priors(args) -> None:
    cfg = _config(args)
    split = _split(args.split)
    scenes = _load_data(args.data)
    masks = [i.mask for s in scenes for i in s.instances if i.class_id in split.seen_mask_classes]
    mode = {"agnostic": "class-agnostic", "specific": "class-specific"}.get(args.mode, cfg.train.prior_mode)
    bank = build_prior_bank(masks, mode, cfg.train.k, seed=cfg.train.seed, max_iter=cfg.train.kmeans_iter)
    save_bank(bank, args.out)
    log.info("wrote %s bank with %d priors to %s", bank.mode, bank.total_priors(), args.out)


def cmd_train(args) -> None:
    cfg = _config(args)
    scenes = _load_data(args.data, cfg)
    split = _split(args.split)
    bank = load_bank(args.bank) if args.bank else T.build_bank_for(scenes, split, cfg.train)
    out = _outdir(args)
    res = T.train(cfg.train, scenes, split, bank, log_every=args.log_every)
    mb.save_checkpoint(res.weights, out / "checkpoint.bin")
    if not args.bank:
        save_bank(bank, out / "bank.bin")
    T.write_history_csv(res.history, out / "history.csv")
    (out / "config.txt").write_text(cfg.dump())
    log.info("trained %d steps; outputs in %s", cfg.train.steps, out)


def _load_model(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not args.bank:
        raise UsageError("--bank is required")
    return mb.load_checkpoint(args.checkpoint), load_bank(args.bank)


def cmd_eval(args) -> None:
    cfg = _config(args)
    weights, bank = _load_model(args)
    scenes = _load_data(args.data, cfg)
    classes = SPLITS[args.classes](SplitSpec.default())
    rep = T.evaluate(weights, scenes, classes, bank, cfg.train.replace(width=weights.width), args.classes,
                     PERTURB[args.perturb], seed=cfg.train.seed)
    _report_outputs({"eval": rep}, _outdir(args))


def _train_test(args, cfg):
    return _load_data(args.data, cfg), _load_data(args.test_data, cfg)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    train_s, test_s = _train_test(args, cfg)
    grid = T.run_ablation_grid(cfg.train, train_s, test_s, SplitSpec.default())
    names = {(0, 0): "neither", (0, 1): "embed-only", (1, 0): "shape-only", (1, 1): "both"}
    _report_outputs({names[k]: grid[k].report for k in T.ABLATION_KEYS}, _outdir(args))


def cmd_robustness(args) -> None:
    cfg = _config(args)
    train_s, test_s = _train_test(args, cfg)
    split = SplitSpec.default()
    bank = T.build_bank_for(train_s, split, cfg.train)
    plain = T.train(cfg.train.replace(jitter_sigma=0.0), train_s, split, bank).weights
    jitter = T.train(cfg.train, train_s, split, bank).weights
    table = T.run_robustness(plain, jitter, test_s, bank, cfg.train, split.novel_classes, seed=cfg.train.seed)
    _report_outputs({f"{m}/{p}": r for (m, p), r in table.reports.items()}, _outdir(args))
    for m in ("plain", "jitter"):
        print(f"{m} degradation {table.degradation(m):.4f}")


def cmd_sweep_data(args) -> None:
    cfg = _config(args)
    train_s, test_s = _train_test(args, cfg)
    fractions = [float(eval_fraction(f)) for f in args.fractions]
    runs = T.run_data_sweep(cfg.train, train_s, test_s, SplitSpec.default(), fractions)
    _report_outputs({f"fraction={f:g}": r.report for f, r in runs.items()}, _outdir(args))


def eval_fraction(text: str) -> float:
    num, _, den = text.partition("/")
    try:
        value = float(num) / (float(den) if den else 1.0)
    except ValueError as exc:
        raise UsageError(f"bad fraction {text!r}") from exc
    if not 0 < value <= 1:
        raise UsageError(f"fraction must be in (0, 1], got {text!r}")
    return value


def cmd_sweep_capacity(args) -> None:
    cfg = _config(args)
    train_s, test_s = _train_test(args, cfg)
    runs = T.run_capacity_sweep(cfg.train, train_s, test_s, SplitSpec.default(), args.widths)
    out = _outdir(args)
    _report_outputs({f"D={d} params={n}": r.report for d, (r, n) in runs.items()}, out)


def cmd_export_viz(args) -> None:
    cfg = _config(args)
    weights, bank = _load_model(args)
    scenes = _load_data(args.data, cfg)
    tcfg = cfg.train.replace(width=weights.width)
    out = _outdir(args)
    scenes = scenes[:args.limit]
    preds = T.predict(weights, scenes, bank, tcfg)
    cache = T.FeatureCache(scenes, tcfg, max_scenes=1)
    for p in preds:
        inst = scenes[p.scene_idx].instances[p.inst_idx]
        item, _ = T.instance_input(cache, p.scene_idx, p.box, bank, p.class_id, tcfg, inst.mask)
        stem = out / f"s{p.scene_idx:04d}_i{p.inst_idx:02d}"
        write_pgm(f"{stem}_box.pgm", item.box_prior[0])
        write_pgm(f"{stem}_prior.pgm", p.output.s_prior)
        write_pgm(f"{stem}_coarse.pgm", _sigmoid(p.output.coarse_logits))
        write_pgm(f"{stem}_fine.pgm", _sigmoid(p.output.fine_logits))
        write_pgm(f"{stem}_gt.pgm", item.gt_hi[0])
    write_pgm(out / "prior_atlas.pgm", prior_atlas(bank))
    log.info("exported %d instances to %s", len(preds), out)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="default", help="base configuration preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="priormask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_help="output directory", out_default="runs"):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.add_argument("--out", default=out_default, metavar="PATH", help=out_help)
        p.set_defaults(fn=fn)
        return p

    def data_args(p, test=False):
        p.add_argument("--data", metavar="PATH", help="training dataset file" if test else "dataset file")
        if test:
            p.add_argument("--test-data", metavar="PATH", help="held-out dataset file")

    def model_args(p):
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
        p.add_argument("--bank", metavar="PATH", help="prior bank file")

    p = add("gen-data", cmd_gen_data, "generate a synthetic shapes dataset", "dataset file to write", "data.bin")
    p.add_argument("--scenes", type=int, help="number of scenes (default: train_scenes)")

    p = add("build-priors", cmd_build_priors, "cluster seen-class masks into a prior bank", "bank file to write",
            "bank.bin")
    data_args(p)
    p.add_argument("--mode", choices=["agnostic", "specific"], help="prior mode (default: from config)")
    p.add_argument("--k", type=int, help="priors per key")
    p.add_argument("--split", choices=["default", "oracle"], default="default", help="which classes expose masks")

    p = add("train", cmd_train, "train the mask branch")
    data_args(p)
    p.add_argument("--bank", metavar="PATH", help="prior bank (default: built from the training data)")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--width", type=int, help="channel width D")
    p.add_argument("--split", choices=["default", "oracle"], default="default", help="which classes expose masks")
    p.add_argument("--log-every", type=int, default=100, help="log losses every N steps")

    p = add("eval", cmd_eval, "evaluate a checkpoint on groundtruth boxes")
    data_args(p)
    model_args(p)
    p.add_argument("--classes", choices=sorted(SPLITS), default="novel", help="which classes to score")
    p.add_argument("--perturb", choices=sorted(PERTURB), default="none", help="test-time box perturbation")

    p = add("ablate", cmd_ablate, "train and score all four ablation variants")
    data_args(p, test=True)
    p.add_argument("--steps", type=int, help="training steps")

    p = add("robustness", cmd_robustness, "compare plain and jitter-trained models under box downsizing")
    data_args(p, test=True)
    p.add_argument("--steps", type=int, help="training steps")

    p = add("sweep-data", cmd_sweep_data, "train on prefixes of the training set")
    data_args(p, test=True)
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--fractions", nargs="+", default=["1", "1/2", "1/10", "1/50"], help="fractions such as 1/10")

    p = add("sweep-capacity", cmd_sweep_capacity, "train one model per channel width")
    data_args(p, test=True)
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--widths", type=int, nargs="+", default=[16, 32, 64, 128], help="channel widths")

    p = add("export-viz", cmd_export_viz, "write box, prior, coarse, fine and groundtruth PGMs plus a prior atlas")
    data_args(p)
    model_args(p)
    p.add_argument("--limit", type=int, default=4, help="number of scenes to export")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"priormask {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"priormask {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
