"""Training loop pieces: sampling, loss assembly, determinism, persistence."""
import csv
from pathlib import Path

import numpy as np
import pytest
import torch

from tbps.boxes import iou
from tbps.config import desk_profile, derive_seed
from tbps.dataset import caption_vocabulary, generate_dataset
from tbps.model import PersonSearchModel
from tbps.trainer import (LOSS_NAMES, LossBundle, Trainer, TrainingDiverged,
                          flip_horizontal, sample_id_rois, sample_rpn_anchors,
                          unlabeled_rois)


def _tiny_run(seed=0, epochs=2, **train_overrides):
    run = desk_profile()
    run.seed = seed
    run.data.train_scenes = 8
    run.data.gallery_scenes = 4
    run.data.query_boxes = 3
    run.train.epochs = epochs
    for key, value in train_overrides.items():
        setattr(run.train, key, value)
    split = generate_dataset(run.data, seed=seed)
    vocab = caption_vocabulary(split)
    torch.manual_seed(seed)
    model = PersonSearchModel(run.model, vocab, run.data.num_identities,
                              run.train, seed=seed)
    return run, split, model


# ---- roi sampling --------------------------------------------------------------


def test_sample_id_rois_caps_at_top_four_by_score():
    gt = np.array([[0.0, 0.0, 20.0, 40.0]])
    # ten near-duplicates of the gt box, distinct scores
    boxes = np.array([[0.0, 0.0, 20.0, 40.0 - i * 0.5] for i in range(10)])
    scores = np.arange(10, dtype=np.float64)
    sel, labels = sample_id_rois(boxes, scores, gt, np.array([7]))
    assert len(sel) == 4
    assert labels.tolist() == [7, 7, 7, 7]
    np.testing.assert_array_equal(sel, boxes[[9, 8, 7, 6]])


def test_sample_id_rois_single_qualifier():
    gt = np.array([[0.0, 0.0, 20.0, 40.0]])
    boxes = np.array([[0.0, 0.0, 20.0, 40.0], [100.0, 0.0, 120.0, 40.0]])
    scores = np.array([0.2, 0.9])
    sel, labels = sample_id_rois(boxes, scores, gt, np.array([3]))
    assert len(sel) == 1 and labels.tolist() == [3]


def test_sample_id_rois_threshold_gate():
    gt = np.array([[0.0, 0.0, 100.0, 100.0]])
    # IoU 0.49: fails the >= 0.5 gate
    boxes = np.array([[0.0, 0.0, 100.0, 49.0]])
    sel, labels = sample_id_rois(boxes, np.array([1.0]), gt, np.array([0]))
    assert len(sel) == 0
    # IoU exactly 0.5 passes
    boxes = np.array([[0.0, 0.0, 100.0, 50.0]])
    sel, _ = sample_id_rois(boxes, np.array([1.0]), gt, np.array([0]))
    assert len(sel) == 1


def test_sample_id_rois_assigns_by_argmax_identity():
    gts = np.array([[0.0, 0.0, 20.0, 40.0], [15.0, 0.0, 35.0, 40.0]])
    # overlaps both but more with the second
    boxes = np.array([[14.0, 0.0, 34.0, 40.0]])
    sel, labels = sample_id_rois(boxes, np.array([1.0]), gts, np.array([5, 9]))
    assert labels.tolist() == [9]


def test_unlabeled_rois_background_gate():
    gt = np.array([[0.0, 0.0, 50.0, 50.0]])
    boxes = np.array([
        [0.0, 0.0, 50.0, 48.0],     # high overlap: excluded
        [60.0, 60.0, 80.0, 80.0],   # background
        [70.0, 0.0, 90.0, 20.0],    # background
    ])
    scores = np.array([0.9, 0.3, 0.7])
    out = unlabeled_rois(boxes, scores, gt, count=1)
    np.testing.assert_array_equal(out, boxes[[2]])
    assert len(unlabeled_rois(boxes, scores, gt, count=0)) == 0


def test_sample_rpn_anchors_balances_and_excludes_ignores():
    labels = np.array([1] * 50 + [0] * 100 + [-1] * 30)
    rng = np.random.default_rng(0)
    picked = sample_rpn_anchors(labels, batch=64, pos_fraction=0.5, rng=rng)
    assert len(picked) == 64
    assert (labels[picked] >= 0).all()
    assert (labels[picked] == 1).sum() == 32


# ---- flip augmentation -----------------------------------------------------------


def test_flip_preserves_pairwise_iou():
    rng = np.random.default_rng(1)
    image = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    boxes = np.array([[4.0, 8.0, 30.0, 60.0], [20.0, 10.0, 50.0, 55.0]])
    _, flipped = flip_horizontal(image, boxes)
    assert iou(flipped[0], flipped[1]) == pytest.approx(iou(boxes[0], boxes[1]))


def test_flip_is_an_involution():
    rng = np.random.default_rng(2)
    image = rng.integers(0, 255, (32, 48, 3), dtype=np.uint8)
    boxes = np.array([[3.0, 5.0, 20.0, 30.0]])
    image2, boxes2 = flip_horizontal(*flip_horizontal(image, boxes))
    np.testing.assert_array_equal(image2, image)
    np.testing.assert_allclose(boxes2, boxes)


def test_flip_mirrors_pixels_and_coordinates_together():
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    image[2:6, 1:3] = 255                      # blob at x in [1, 3)
    box = np.array([[1.0, 2.0, 3.0, 6.0]])
    flipped_img, flipped_box = flip_horizontal(image, box)
    x1, _, x2, _ = flipped_box[0]
    assert (x1, x2) == (5.0, 7.0)
    assert flipped_img[2:6, 5:7].min() == 255   # blob moved with the box


# ---- loss bundle -----------------------------------------------------------------


def _bundle(**values):
    defaults = {name: torch.tensor(0.0) for name in LOSS_NAMES}
    defaults.update({k: torch.tensor(float(v)) for k, v in values.items()})
    return LossBundle(**defaults)


def test_total_loss_zero_case():
    weights = desk_profile().train.weights
    assert float(_bundle().total(weights)) == 0.0


def test_total_loss_csal_weighting():
    weights = desk_profile().train.weights
    assert float(_bundle(csal=10.0).total(weights)) == pytest.approx(1.0)


def test_total_loss_linear_in_weights():
    import dataclasses
    weights = desk_profile().train.weights
    doubled = dataclasses.replace(
        weights, **{name: getattr(weights, name) * 2 for name in LOSS_NAMES})
    bundle = _bundle(rpn_cls=1.0, oim=2.0, csal=3.0)
    assert float(bundle.total(doubled)) == pytest.approx(
        2 * float(bundle.total(weights)))


def test_total_loss_names_nan_component():
    weights = desk_profile().train.weights
    bundle = _bundle(cmpm=float("nan"))
    with pytest.raises(TrainingDiverged, match="cmpm"):
        bundle.total(weights)


# ---- training loop ---------------------------------------------------------------


def test_loss_log_header_and_determinism(tmp_path):
    run, split, model = _tiny_run(epochs=2)
    Trainer(model, split, run, tmp_path / "a").train()
    run2, split2, model2 = _tiny_run(epochs=2)
    Trainer(model2, split2, run2, tmp_path / "b").train()
    log_a = (tmp_path / "a" / "loss_log.csv").read_text()
    log_b = (tmp_path / "b" / "loss_log.csv").read_text()
    assert log_a == log_b
    header = log_a.splitlines()[0]
    assert header == "step,epoch,rpn_cls,rpn_reg,cls,reg,oim,cmpm,cmpc,csal,total"


def test_checkpoint_round_trip_reproduces_outputs(tmp_path):
    run, split, model = _tiny_run(epochs=1)
    trainer = Trainer(model, split, run, tmp_path)
    trainer.train()
    from tbps.cli import build_model_from_checkpoint
    reloaded, _, payload = build_model_from_checkpoint(tmp_path / "checkpoint.pt")
    assert payload["epoch"] == 1
    probe = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        a = model.features(probe)
        b = reloaded.features(probe)
    assert torch.equal(a, b)


def test_manifest_records_run_facts(tmp_path):
    import json
    run, split, model = _tiny_run(epochs=1, use_csal=False)
    Trainer(model, split, run, tmp_path).train()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["epoch"] == 1
    assert manifest["seed"] == run.seed
    assert manifest["use_csal"] is False
    assert manifest["use_sdrpn"] is True
    assert len(manifest["config_hash"]) == 16


def test_csal_ablation_zeroes_column(tmp_path):
    run, split, model = _tiny_run(epochs=1, use_csal=False)
    Trainer(model, split, run, tmp_path).train()
    with open(tmp_path / "loss_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert all(float(r["csal"]) == 0.0 for r in rows)
    assert any(float(r["cmpm"]) != 0.0 for r in rows)


def test_sdrpn_ablation_keeps_excitation_untouched():
    run, split, model = _tiny_run(epochs=1, use_sdrpn=False)
    trainer = Trainer(model, split, run, "/tmp/ablate_probe")
    rng = np.random.default_rng(derive_seed(run.seed, "epoch", 0))
    gen = torch.Generator().manual_seed(derive_seed(run.seed, "stripes", 0))
    bundle = trainer.step(split.train[:4], rng, gen)
    bundle.total(run.train.weights).backward()
    assert model.proposals.excite.squeeze.weight.grad is None
    assert model.proposals.sdrpn_head.conv.weight.grad is None
    assert model.proposals.rpn_head.conv.weight.grad is not None


def test_full_model_step_reaches_every_group():
    run, split, model = _tiny_run(epochs=1)
    trainer = Trainer(model, split, run, "/tmp/full_probe")
    rng = np.random.default_rng(derive_seed(run.seed, "epoch", 0))
    gen = torch.Generator().manual_seed(derive_seed(run.seed, "stripes", 0))
    bundle = trainer.step(split.train[:4], rng, gen)
    bundle.total(run.train.weights).backward()
    assert model.proposals.excite.squeeze.weight.grad is not None
    assert model.text.embed.weight.grad is not None
    assert model.visual.proj.weight.grad is not None
    assert model.base.body[0].weight.grad is not None
    assert model.cmpc_weight.grad is not None


def test_resume_continues_identically(tmp_path):
    run, split, model = _tiny_run(epochs=2)
    Trainer(model, split, run, tmp_path / "whole").train()

    run1, split1, model1 = _tiny_run(epochs=1)
    Trainer(model1, split1, run1, tmp_path / "piecewise").train()
    run2, split2, model2 = _tiny_run(epochs=2)
    resumed = Trainer(model2, split2, run2, tmp_path / "piecewise")
    resumed.resume()
    assert resumed.start_epoch == 1
    resumed.train()
    assert (tmp_path / "whole" / "loss_log.csv").read_text() == \
        (tmp_path / "piecewise" / "loss_log.csv").read_text()


def test_optimizer_groups_partition_parameters():
    run, split, model = _tiny_run(epochs=1)
    groups = model.parameter_groups()
    ids = [id(p) for params in groups.values() for p in params]
    assert len(ids) == len(set(ids))
    assert len(ids) == len([p for p in model.parameters() if p.requires_grad])
