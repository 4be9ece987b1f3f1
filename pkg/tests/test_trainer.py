import numpy as np
import pytest

from priormask import maskbranch as mb
from priormask import trainer as T
from priormask.config import TrainConfig
from priormask.metrics import IOU_THRESHOLDS
from priormask.roi import Box, PatchSpec
from priormask.synthdata import SplitSpec, generate_dataset


def tiny_cfg(**kw):
    base = dict(steps=20, image_side=64, max_level=2, min_level=0, width=8, k=4, batch=4, lr=0.02)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(10, seed=3, side=64)


@pytest.fixture(scope="module")
def test_scenes():
    return generate_dataset(6, seed=77, side=64)


@pytest.fixture(scope="module")
def split():
    return SplitSpec.default()


@pytest.fixture(scope="module")
def bank(scenes, split):
    return T.build_bank_for(scenes, split, tiny_cfg())


def test_zero_steps_returns_init(scenes, split, bank):
    cfg = tiny_cfg(steps=0)
    res = T.train(cfg, scenes, split, bank)
    assert res.weights == mb.HeadWeights.init(8, bank.K, cfg.patch_side, cfg.seed)
    assert res.history == []


def test_zero_lr_keeps_weights_and_losses(scenes, split, bank):
    one = [s for s in scenes if sum(i.class_id in split.seen_mask_classes for i in s.instances) == 1][:1]
    assert one, "fixture needs a scene with a single seen instance"
    cfg = tiny_cfg(steps=5, lr=0.0, jitter_sigma=0.0)
    res = T.train(cfg, one, split, bank)
    assert res.weights == mb.HeadWeights.init(8, bank.K, cfg.patch_side, cfg.seed)
    assert len({h["total"] for h in res.history}) == 1


def test_smoothed_loss_decreases(scenes, split, bank):
    res = T.train(tiny_cfg(steps=200), scenes, split, bank)
    sm = res.smoothed_total(20)
    assert sm[-1] < sm[0]


def test_history_is_bit_identical(scenes, split, bank):
    a = T.train(tiny_cfg(steps=8), scenes, split, bank)
    b = T.train(tiny_cfg(steps=8), scenes, split, bank)
    assert a.history == b.history and a.weights == b.weights


def test_novel_masks_never_read(scenes, split, bank):
    res = T.train(tiny_cfg(steps=30), scenes, split, bank)
    assert res.audit.reads == 30 * 4
    assert res.audit.forbidden_reads == 0


def test_bank_uses_seen_masks_only(scenes, split):
    cfg = tiny_cfg(k=1000)
    bank = T.build_bank_for(scenes, split, cfg)
    n_seen = sum(i.class_id in split.seen_mask_classes for s in scenes for i in s.instances)
    assert bank.K == n_seen


def test_divergence_reports_step(scenes, split, bank):
    with np.errstate(all="ignore"), pytest.raises(T.TrainingDiverged) as info:
        T.train(tiny_cfg(steps=50, lr=1e6, grad_clip=0.0, momentum=0.0), scenes, split, bank)
    assert info.value.step < 50


def test_weight_mismatch_rejected(scenes, split, bank):
    with pytest.raises(ValueError, match="priors"):
        T.train(tiny_cfg(), scenes, split, bank, init=mb.HeadWeights.init(8, bank.K + 1, 16))


def test_oracle_masks_score_perfectly(test_scenes):
    preds = [(si, ii, inst.mask.bits, 1.0) for si, sc in enumerate(test_scenes) for ii, inst in enumerate(sc.instances)]
    rep = T.report_from_masks(test_scenes, preds, "all")
    assert rep.mean_iou == 1.0 and rep.ap50 == rep.ap75 == rep.ap == 1.0


def test_empty_predictions_score_zero(test_scenes):
    preds = [(si, ii, np.zeros((64, 64), bool), 0.0) for si, sc in enumerate(test_scenes)
             for ii, _ in enumerate(sc.instances)]
    rep = T.report_from_masks(test_scenes, preds, "all")
    assert rep.mean_iou == 0.0 and rep.ap == 0.0


def test_evaluate_report_contract(scenes, test_scenes, split, bank):
    cfg = tiny_cfg(steps=10)
    w = T.train(cfg, scenes, split, bank).weights
    rep = T.evaluate(w, test_scenes, split.novel_classes, bank, cfg, "novel")
    n_novel = sum(i.class_id in split.novel_classes for s in test_scenes for i in s.instances)
    assert rep.n_instances == n_novel and set(rep.class_iou) <= split.novel_classes
    for v in [rep.mean_iou, rep.ap, rep.ap50, rep.ap75, *rep.class_iou.values()]:
        assert 0.0 <= v <= 1.0
    assert rep.ap50 >= rep.ap75
    again = T.evaluate(w, test_scenes, split.novel_classes, bank, cfg, "novel", perturb=None)
    assert again == rep


def test_fine_mask_to_image_inverts_patch_layout():
    spec = PatchSpec(1, 2, 3, 4)  # 8x8 image pixels starting at (row 4, col 6)
    fine = np.arange(64).reshape(8, 8)
    img = T.fine_mask_to_image(fine, spec, 16)
    np.testing.assert_array_equal(img[4:12, 6:14], fine)
    assert img[:4].sum() == 0 and img[:, :6].sum() == 0


def test_subsample_is_prefix(scenes):
    assert T.subsample(scenes, 1.0) is not scenes and T.subsample(scenes, 1.0) == scenes
    assert T.subsample(scenes, 0.5) == scenes[:5]
    assert T.subsample(scenes, 1 / 50) == scenes[:1]
    with pytest.raises(ValueError):
        T.subsample(scenes, 0.0)


def test_ablation_grid_keys_and_robustness_columns(scenes, test_scenes, split):
    cfg = tiny_cfg(steps=3)
    grid = T.run_ablation_grid(cfg, scenes, test_scenes, split)
    assert set(grid) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert grid[(1, 1)].report == T.train_and_evaluate(cfg, scenes, test_scenes, split, split.novel_classes,
                                                       "novel").report
    run = grid[(1, 1)]
    table = T.run_robustness(run.result.weights, run.result.weights, test_scenes, run.bank, cfg, split.novel_classes)
    assert table.reports[("plain", "clean")] == T.evaluate(run.result.weights, test_scenes, split.novel_classes,
                                                           run.bank, cfg, "clean")
    assert table.degradation("plain") == table.degradation("jitter")


def test_capacity_sweep_counts(scenes, test_scenes, split):
    out = T.run_capacity_sweep(tiny_cfg(steps=1), scenes, test_scenes, split, widths=(2, 4, 8))
    counts = [out[d][1] for d in (2, 4, 8)]
    assert counts == sorted(set(counts))


def test_csv_writers(tmp_path, scenes, split, bank):
    res = T.train(tiny_cfg(steps=3), scenes, split, bank)
    T.write_history_csv(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,L_prior,L_coarse,L_fine" and len(lines) == 4
