"""Training loop and evaluation for the mask branch on groundtruth (optionally perturbed) boxes."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import maskbranch as mb
from .config import TrainConfig
from .features import feature_pyramid
from .metrics import EvalReport, Prediction, coco_summary, mask_iou
from .priors import Mask, PriorBank, build_prior_bank
from .roi import Box, PatchSpec, crop_with_zeros, downsize_box, jitter_box, patch_spec_for
from .synthdata import Instance, Scene, SplitSpec, render_gt_at

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, losses: dict):
        super().__init__(f"loss became non-finite at step {step}: {losses}")
        self.step = step


class FeatureCache:
    """Lazily computed feature pyramid levels, keyed by (scene index, level)."""

    def __init__(self, scenes: list[Scene], cfg: TrainConfig, max_scenes: int | None = None):
        self.scenes = scenes
        self.cfg = cfg
        self.max_scenes = max_scenes
        self._levels: dict[tuple[int, int], np.ndarray] = {}

    def level(self, scene_idx: int, k: int) -> np.ndarray:
        key = (scene_idx, k)
        if key not in self._levels:
            if self.max_scenes is not None and len({s for s, _ in self._levels}) >= self.max_scenes:
                self._levels.clear()
            img = self.scenes[scene_idx].image
            self._levels[key] = feature_pyramid(img, [k], self.cfg.width, self.cfg.feature_seed)[k]
        return self._levels[key]


@dataclass
class MaskAccessAudit:
    """Counts groundtruth-mask reads during training, split by whether the class may be read."""

    allowed: frozenset
    reads: int = 0
    forbidden_reads: int = 0

    def read(self, inst: Instance) -> Mask:
        self.reads += 1
        if inst.class_id not in self.allowed:
            self.forbidden_reads += 1
        return inst.mask


def instance_input(cache: FeatureCache, scene_idx: int, box: Box, bank: PriorBank, class_id: int,
                   cfg: TrainConfig, mask: Mask | None = None) -> tuple[mb.HeadInput, PatchSpec]:
    spec = patch_spec_for(box, cfg.image_side, cfg.max_level, cfg.min_level)
    x = crop_with_zeros(cache.level(scene_idx, spec.level), spec.row0, spec.col0, spec.side, spec.side)
    gt_lo = gt_hi = None
    if mask is not None:
        gt_lo = render_gt_at(mask, spec, spec.side)
        gt_hi = render_gt_at(mask, spec, 2 * spec.side)
    key = None if bank.agnostic else class_id
    return mb.prepare_input(x, box, spec, bank, key, gt_lo, gt_hi), spec


@dataclass
class TrainResult:
    weights: mb.HeadWeights
    history: list[dict] = field(default_factory=list)
    audit: MaskAccessAudit | None = None

    def smoothed_total(self, window: int = 20) -> np.ndarray:
        tot = np.array([h["total"] for h in self.history])
        if len(tot) < window:
            return tot
        return np.convolve(tot, np.ones(window) / window, mode="valid")


def build_bank_for(scenes: list[Scene], split: SplitSpec, cfg: TrainConfig) -> PriorBank:
    """Prior bank from the masks of seen classes only; K shrinks if there are too few masks."""
    masks = [inst.mask for sc in scenes for inst in sc.instances if inst.class_id in split.seen_mask_classes]
    if cfg.prior_mode == "class-agnostic":
        k = min(cfg.k, len(masks))
    else:
        per_class = {}
        for m in masks:
            per_class[m.class_id] = per_class.get(m.class_id, 0) + 1
        k = min([cfg.k] + list(per_class.values()))
    return build_prior_bank(masks, cfg.prior_mode, k, seed=cfg.seed, max_iter=cfg.kmeans_iter)


def _clip(grads: dict, max_norm: float) -> dict:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def train(cfg: TrainConfig, scenes: list[Scene], split: SplitSpec, bank: PriorBank,
          init: mb.HeadWeights | None = None, log_every: int = 0) -> TrainResult:
    """SGD with momentum on jittered groundtruth boxes of mask-labelled classes."""
    weights = init.copy() if init is not None else mb.HeadWeights.init(cfg.width, bank.K, cfg.patch_side, cfg.seed)
    if weights.n_priors != bank.K:
        raise ValueError(f"weights expect K={weights.n_priors} priors, bank has {bank.K}")
    audit = MaskAccessAudit(split.seen_mask_classes)
    eligible = []
    for i, sc in enumerate(scenes):
        ids = [j for j, inst in enumerate(sc.instances) if inst.class_id in split.seen_mask_classes]
        if ids:
            eligible.append((i, ids))
    result = TrainResult(weights, [], audit)
    if cfg.steps == 0:
        return result
    if not eligible:
        raise ValueError("no training instance carries a mask label under this split")
    rng = np.random.default_rng(cfg.seed)
    cache = FeatureCache(scenes, cfg, max_scenes=1)
    ablation = mb.Ablation(cfg.no_shape, cfg.no_embed)
    velocity = {k: np.zeros_like(v) for k, v in weights.params.items()}
    for step in range(cfg.steps):
        scene_idx, ids = eligible[rng.integers(len(eligible))]
        picks = rng.choice(ids, size=cfg.batch, replace=len(ids) < cfg.batch)
        items = []
        for j in picks:
            inst = scenes[scene_idx].instances[j]
            box = jitter_box(inst.box, cfg.jitter_sigma, rng)
            item, _ = instance_input(cache, scene_idx, box, bank, inst.class_id, cfg, audit.read(inst))
            items.append(item)
        out, grads = mb.loss_and_grads(weights, mb.concat_inputs(items), ablation, cfg.loss_weights)
        if not all(math.isfinite(v) for v in out.losses.values()):
            raise TrainingDiverged(step, out.losses)
        grads = _clip(grads, cfg.grad_clip)
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] - cfg.lr * g
            weights.params[k] += velocity[k]
        result.history.append({"step": step, **out.losses})
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d  prior %.4f  coarse %.4f  fine %.4f", step, out.losses["prior"],
                     out.losses["coarse"], out.losses["fine"])
    return result


def fine_mask_to_image(fine_prob: np.ndarray, spec: PatchSpec, image_side: int) -> np.ndarray:
    """Nearest-cell lookup of a (2c, 2c) patch map at every image pixel centre; zero outside the patch."""
    n = fine_prob.shape[0]
    cell = spec.scale * spec.side / n
    x0 = spec.col0 * spec.scale
    y0 = spec.row0 * spec.scale
    out = np.zeros((image_side, image_side), dtype=fine_prob.dtype)
    centres = np.arange(image_side) + 0.5
    ui = np.floor((centres - y0) / cell).astype(int)
    uj = np.floor((centres - x0) / cell).astype(int)
    ri = np.flatnonzero((ui >= 0) & (ui < n))
    cj = np.flatnonzero((uj >= 0) & (uj < n))
    out[np.ix_(ri, cj)] = fine_prob[np.ix_(ui[ri], uj[cj])]
    return out


@dataclass
class InstancePrediction:
    scene_idx: int
    inst_idx: int
    class_id: int
    box: Box
    spec: PatchSpec
    output: mb.PipelineOutput
    mask: np.ndarray  # binary, image coordinates
    score: float


def predict(weights: mb.HeadWeights, scenes: list[Scene], bank: PriorBank, cfg: TrainConfig,
            classes=None, perturb: tuple[float, float] | None = None, seed: int = 0,
            batch: int = 32) -> list[InstancePrediction]:
    """Run the head on every (optionally perturbed) groundtruth box of the given classes."""
    rng = np.random.default_rng(seed)
    ablation = mb.Ablation(cfg.no_shape, cfg.no_embed)
    cache = FeatureCache(scenes, cfg, max_scenes=4)
    todo = []
    for si, sc in enumerate(scenes):
        for ii, inst in enumerate(sc.instances):
            if classes is not None and inst.class_id not in classes:
                continue
            box = downsize_box(inst.box, perturb[0], perturb[1], rng) if perturb else inst.box
            todo.append((si, ii, inst, box))
    preds = []
    for start in range(0, len(todo), batch):
        chunk = todo[start:start + batch]
        items, specs = [], []
        for si, _ii, inst, box in chunk:
            item, spec = instance_input(cache, si, box, bank, inst.class_id, cfg)
            items.append(item)
            specs.append(spec)
        out = mb.forward(weights, mb.concat_inputs(items), ablation, threshold=cfg.threshold)
        probs = 1.0 / (1.0 + np.exp(-out.fine_logits))
        for n, ((si, ii, inst, box), spec) in enumerate(zip(chunk, specs)):
            one = mb.PipelineOutput(out.s_prior[n], out.coarse_logits[n], out.fine_logits[n], out.w[n], {})
            binary = probs[n] >= 0.5
            score = float(probs[n][binary].mean()) if binary.any() else 0.0
            img_mask = fine_mask_to_image(binary.astype(np.uint8), spec, cfg.image_side).astype(bool)
            preds.append(InstancePrediction(si, ii, inst.class_id, box, spec, one, img_mask, score))
    return preds


def report_from_masks(scenes: list[Scene], preds: list[tuple[int, int, np.ndarray, float]], split_label: str,
                      classes=None) -> EvalReport:
    """Score (scene, instance, image mask, confidence) predictions against the groundtruth."""
    gt_counts: dict[int, int] = {}
    for sc in scenes:
        for inst in sc.instances:
            if classes is None or inst.class_id in classes:
                gt_counts[inst.class_id] = gt_counts.get(inst.class_id, 0) + 1
    ious_by_class: dict[int, list[float]] = {}
    coco_preds = []
    for si, ii, mask, score in preds:
        inst = scenes[si].instances[ii]
        ious_by_class.setdefault(inst.class_id, []).append(mask_iou(mask, inst.mask.bits))
        cand = {}
        for gj, other in enumerate(scenes[si].instances):
            if other.class_id == inst.class_id:
                cand[gj] = mask_iou(mask, other.mask.bits)
        # global groundtruth ids: one AP pool per class across all scenes
        coco_preds.append(Prediction(si, inst.class_id, score, {(si, g): v for g, v in cand.items()}))
    all_ious = [v for vals in ious_by_class.values() for v in vals]
    ap50, ap75, ap, class_ap = coco_summary(coco_preds, gt_counts)
    return EvalReport(split_label, len(all_ious), float(np.mean(all_ious)) if all_ious else 0.0,
                      {c: float(np.mean(v)) for c, v in sorted(ious_by_class.items())}, ap50, ap75, ap, class_ap)


def evaluate(weights: mb.HeadWeights, scenes: list[Scene], classes, bank: PriorBank, cfg: TrainConfig,
             split_label: str = "", perturb: tuple[float, float] | None = None, seed: int = 0) -> EvalReport:
    preds = predict(weights, scenes, bank, cfg, classes, perturb, seed)
    return report_from_masks(scenes, [(p.scene_idx, p.inst_idx, p.mask, p.score) for p in preds], split_label, classes)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "L_prior", "L_coarse", "L_fine"])
        for h in history:
            w.writerow([h["step"], repr(h["prior"]), repr(h["coarse"]), repr(h["fine"])])


def write_reports_csv(reports: dict[str, EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "split", "class", "metric", "value"])
        for label, rep in reports.items():
            for row in rep.rows(label):
                w.writerow(row[:4] + (f"{row[4]:.6f}",))


def summary_table(reports: dict[str, EvalReport]) -> str:
    lines = [f"{'run':<24}{'split':<8}{'n':>6}{'IoU':>8}{'AP':>8}{'AP50':>8}{'AP75':>8}"]
    for label, r in reports.items():
        lines.append(f"{label:<24}{r.split:<8}{r.n_instances:>6}{r.mean_iou:>8.4f}{r.ap:>8.4f}"
                     f"{r.ap50:>8.4f}{r.ap75:>8.4f}")
    return "\n".join(lines)


def write_summary(reports: dict[str, EvalReport], path) -> None:
    Path(path).write_text(summary_table(reports) + "\n")


# ---------------------------------------------------------------------------
# experiment harnesses

ABLATION_KEYS = ((0, 0), (0, 1), (1, 0), (1, 1))  # (shape stage on, embedding stage on)


def subsample(scenes: list[Scene], fraction: float) -> list[Scene]:
    """Prefix of the scene list by id; at least one scene."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return scenes[:max(1, int(round(len(scenes) * fraction)))]


@dataclass
class RunOutcome:
    result: TrainResult
    bank: PriorBank
    report: EvalReport
    cfg: TrainConfig


def train_and_evaluate(cfg: TrainConfig, train_scenes: list[Scene], test_scenes: list[Scene], split: SplitSpec,
                       eval_classes, label: str) -> RunOutcome:
    bank = build_bank_for(train_scenes, split, cfg)
    res = train(cfg, train_scenes, split, bank)
    rep = evaluate(res.weights, test_scenes, eval_classes, bank, cfg, label)
    return RunOutcome(res, bank, rep, cfg)


def run_ablation_grid(cfg: TrainConfig, train_scenes, test_scenes, split: SplitSpec) -> dict[tuple, RunOutcome]:
    """Novel-split outcomes for every combination of the two conditioning stages, shared seed and data."""
    out = {}
    for shape_on, embed_on in ABLATION_KEYS:
        c = cfg.replace(no_shape=not shape_on, no_embed=not embed_on)
        out[(shape_on, embed_on)] = train_and_evaluate(c, train_scenes, test_scenes, split, split.novel_classes,
                                                       "novel")
        log.info("ablation shape=%d embed=%d novel IoU %.4f", shape_on, embed_on, out[(shape_on, embed_on)].report.mean_iou)
    return out


@dataclass
class RobustnessTable:
    reports: dict[tuple[str, str], EvalReport]  # (model, "clean"|"downsized") -> report

    def degradation(self, model: str) -> float:
        return self.reports[(model, "clean")].mean_iou - self.reports[(model, "downsized")].mean_iou


def run_robustness(weights_plain: mb.HeadWeights, weights_jitter: mb.HeadWeights, test_scenes, bank: PriorBank,
                   cfg: TrainConfig, classes, lo: float = 0.75, hi: float = 1.0, seed: int = 0) -> RobustnessTable:
    """2x2 table: each model on clean groundtruth boxes and on boxes downsized by U(lo, hi)."""
    reports = {}
    for name, w in (("plain", weights_plain), ("jitter", weights_jitter)):
        reports[(name, "clean")] = evaluate(w, test_scenes, classes, bank, cfg, "clean")
        reports[(name, "downsized")] = evaluate(w, test_scenes, classes, bank, cfg, "downsized", (lo, hi), seed)
    return RobustnessTable(reports)


def run_data_sweep(cfg: TrainConfig, train_scenes, test_scenes, split: SplitSpec,
                   fractions=(1.0, 1 / 2, 1 / 10, 1 / 50)) -> dict[float, RunOutcome]:
    """One model per training-set prefix; each prior bank comes from its own subset."""
    out = {}
    for f in fractions:
        out[f] = train_and_evaluate(cfg, subsample(train_scenes, f), test_scenes, split, split.novel_classes, "novel")
        log.info("data fraction %.3f novel IoU %.4f", f, out[f].report.mean_iou)
    return out


def run_capacity_sweep(cfg: TrainConfig, train_scenes, test_scenes, split: SplitSpec,
                       widths=(16, 32, 64, 128)) -> dict[int, tuple[RunOutcome, int]]:
    out = {}
    for d in widths:
        run = train_and_evaluate(cfg.replace(width=d), train_scenes, test_scenes, split, split.novel_classes, "novel")
        out[d] = (run, mb.parameter_count(run.result.weights))
        log.info("width %d (%d params) novel IoU %.4f", d, out[d][1], run.report.mean_iou)
    return out
