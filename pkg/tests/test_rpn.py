"""Proposal machinery: excitation gates, anchor labeling, fused selection."""
import numpy as np
import pytest
import torch

from tbps.boxes import anchor_grid, clip_boxes, decode_boxes
from tbps.rpn import (Excitation, IGNORE, NEGATIVE, POSITIVE, ProposalEngine,
                      RPNHead, assign_anchor_labels, reweight, select_proposals)

from oracles import nms_ref


# ---- excitation ----------------------------------------------------------------


def test_excitation_zero_weights_give_half_gates():
    exc = Excitation(text_dim=6, channels=8, reduction=2)
    with torch.no_grad():
        for p in exc.parameters():
            p.zero_()
    gates = exc(torch.randn(6))
    assert torch.allclose(gates, torch.full((8,), 0.5))


def test_excitation_range_and_shape():
    torch.manual_seed(0)
    exc = Excitation(text_dim=12, channels=16, reduction=4)
    gates = exc(torch.randn(12) * 5)
    assert gates.shape == (16,)
    assert bool((gates > 0).all()) and bool((gates < 1).all())


def test_excitation_matches_dense_reference():
    torch.manual_seed(1)
    exc = Excitation(text_dim=4, channels=6, reduction=2)
    z = torch.randn(4, dtype=torch.float64)
    exc = exc.double()
    w1 = exc.squeeze.weight.detach().numpy()
    b1 = exc.squeeze.bias.detach().numpy()
    w2 = exc.expand.weight.detach().numpy()
    b2 = exc.expand.bias.detach().numpy()
    hidden = np.maximum(w1 @ z.numpy() + b1, 0)
    want = 1 / (1 + np.exp(-(w2 @ hidden + b2)))
    got = exc(z).detach().numpy()
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_excitation_validates_dims():
    with pytest.raises(ValueError):
        Excitation(text_dim=4, channels=6, reduction=4)
    exc = Excitation(text_dim=4, channels=8, reduction=2)
    with pytest.raises(ValueError):
        exc(torch.randn(5))


def test_reweight_identity_and_mismatch():
    fm = torch.randn(3, 4, 4)
    assert torch.equal(reweight(fm, torch.ones(3)), fm)
    assert torch.allclose(reweight(fm, torch.zeros(3)), torch.zeros_like(fm))
    with pytest.raises(ValueError):
        reweight(fm, torch.ones(4))
    batched = torch.randn(2, 3, 4, 4)
    scaled = reweight(batched, torch.tensor([1.0, 2.0, 0.5]))
    assert torch.allclose(scaled[:, 1], batched[:, 1] * 2.0)


# ---- rpn head ----------------------------------------------------------------


def test_head_output_arithmetic():
    torch.manual_seed(2)
    head = RPNHead(channels=8, anchors_per_loc=6)
    logits, deltas = head(torch.randn(8, 5, 7))
    assert logits.shape == (5 * 7 * 6,)
    assert deltas.shape == (5 * 7 * 6, 4)
    blogits, bdeltas = head(torch.randn(2, 8, 5, 7))
    assert blogits.shape == (2, 5 * 7 * 6)
    assert bdeltas.shape == (2, 5 * 7 * 6, 4)


def test_head_zero_weights_emit_bias():
    head = RPNHead(channels=4, anchors_per_loc=2)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        head.cls.bias.fill_(0.25)
    logits, deltas = head(torch.randn(4, 3, 3))
    assert torch.allclose(logits, torch.full((18,), 0.25))
    assert torch.allclose(deltas, torch.zeros(18, 4))


def test_head_location_major_order():
    # bump the cls bias of anchor slot 1 only; affected logits must appear at
    # positions loc * A + 1 for every location
    head = RPNHead(channels=4, anchors_per_loc=3)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        head.cls.bias[1] = 1.0
    logits, _ = head(torch.randn(4, 2, 2))
    want = np.zeros(12)
    want[1::3] = 1.0
    np.testing.assert_allclose(logits.detach().numpy(), want, atol=1e-7)


# ---- anchor labeling ----------------------------------------------------------


def test_assign_labels_basic_bands():
    anchors = np.array([
        [0.0, 0.0, 10.0, 10.0],     # exact match -> positive
        [100.0, 100.0, 110.0, 110.0],  # disjoint -> negative
        [0.0, 0.0, 10.0, 16.25],    # IoU 0.615 -> ignore band
    ])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    labels = assign_anchor_labels(anchors, gt)
    assert labels[0] == POSITIVE
    assert labels[1] == NEGATIVE
    assert labels[2] == IGNORE


def test_assign_labels_argmax_promotes_best_anchor():
    # no anchor reaches 0.7 but the best per gt becomes positive anyway
    anchors = np.array([
        [0.0, 0.0, 10.0, 20.0],
        [40.0, 40.0, 60.0, 60.0],
    ])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    labels = assign_anchor_labels(anchors, gt)
    assert labels[0] == POSITIVE        # argmax for the gt (IoU 0.5)
    assert labels[1] == NEGATIVE


def test_assign_labels_argmax_tie_promotes_all():
    anchors = np.array([
        [0.0, 0.0, 10.0, 20.0],
        [0.0, -10.0, 10.0, 10.0],      # same IoU 0.5 with the gt
    ])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    labels = assign_anchor_labels(anchors, gt)
    assert labels[0] == POSITIVE and labels[1] == POSITIVE


def test_assign_labels_empty_gt_modes():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
    empty = np.zeros((0, 4))
    assert assign_anchor_labels(anchors, empty, "all-persons").tolist() == [NEGATIVE]
    with pytest.raises(ValueError):
        assign_anchor_labels(anchors, empty, "text-relevant")
    with pytest.raises(ValueError):
        assign_anchor_labels(anchors, empty, "everything")


def test_assign_labels_text_relevant_single_target():
    anchors = anchor_grid(4, 4, 8, (2, 4), (1.0, 2.0))
    gt = np.array([[4.0, 4.0, 20.0, 20.0]])
    labels = assign_anchor_labels(anchors, gt, "text-relevant")
    assert (labels == POSITIVE).sum() >= 1
    assert (labels == NEGATIVE).sum() > 0


# ---- selection pipeline ---------------------------------------------------------


def _selection_oracle(boxes, scores, pre_nms, post_nms, threshold, w, h):
    order = np.argsort(-scores, kind="stable")[:pre_nms]
    keep = nms_ref(boxes[order], scores[order], threshold)[:post_nms]
    kept = order[keep]
    return kept, clip_boxes(boxes[kept], w, h)


def test_select_proposals_matches_oracle_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(1, 40))
        centers = rng.uniform(5, 60, (n, 2))
        sizes = rng.uniform(2, 30, (n, 2))
        boxes = np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)
        scores = np.round(rng.random(n), 3)   # rounding forces score ties
        pre = int(rng.integers(1, n + 4))
        post = int(rng.integers(1, n + 2))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        kept, clipped = select_proposals(boxes, scores, pre, post, thr, 64, 64)
        want_kept, want_boxes = _selection_oracle(boxes, scores, pre, post,
                                                  thr, 64, 64)
        np.testing.assert_array_equal(kept, want_kept)
        np.testing.assert_allclose(clipped, want_boxes)


def test_select_proposals_orders_by_descending_score():
    rng = np.random.default_rng(6)
    boxes = np.array([[i * 30.0, 0.0, i * 30.0 + 10.0, 10.0] for i in range(5)])
    scores = rng.random(5)
    kept, _ = select_proposals(boxes, scores, 10, 10, 0.5, 300, 300)
    assert list(scores[kept]) == sorted(scores, reverse=True)


# ---- engine: fusion and the conditioned branch -----------------------------------


def _engine(seed=0, fuse_logits=False):
    torch.manual_seed(seed)
    return ProposalEngine(channels=8, text_dim=12, stride=8,
                          scales=(2, 4), ratios=(1.0, 2.0), reduction=4,
                          fuse_logits=fuse_logits)


def test_disabled_branch_reproduces_plain_rpn():
    engine = _engine(seed=3)
    fm = torch.randn(8, 6, 6)
    plain = engine.propose(fm, None, 100, 20, 0.7, 48, 48)
    assert plain.sdrpn_logits is None
    assert np.allclose(plain.source_scores[:, 1], 0.0)
    # fused scores must equal plain sigmoid objectness, bitwise
    want = torch.sigmoid(plain.logits.detach()).double().numpy()
    np.testing.assert_array_equal(plain.scores,
                                  want[plain.anchor_indices])


def test_all_ones_gates_with_tied_heads_double_the_scores():
    engine = _engine(seed=4)
    engine.sdrpn_head.load_state_dict(engine.rpn_head.state_dict())
    engine.excitation_override = torch.ones(8)
    fm = torch.randn(8, 6, 6)
    z = torch.randn(12)
    fused = engine.fused_scores(*_logits_pair(engine, fm, z))
    plain = torch.sigmoid(engine.rpn_head(fm)[0])
    assert torch.allclose(fused, 2.0 * plain, atol=0, rtol=0)
    # identical ranking as the standard branch
    np.testing.assert_array_equal(
        np.argsort(-fused.detach().numpy(), kind="stable"),
        np.argsort(-plain.detach().numpy(), kind="stable"))


def _logits_pair(engine, fm, z):
    logits, _, sd_logits = engine.branch_outputs(fm, z)
    return logits, sd_logits


def test_conditioned_branch_changes_scores_but_not_boxes():
    engine = _engine(seed=5)
    fm = torch.randn(8, 6, 6)
    z = torch.randn(12)
    with_text = engine.propose(fm, z, 200, 200, 0.99, 48, 48)
    without = engine.propose(fm, None, 200, 200, 0.99, 48, 48)
    # same anchors decoded by the same standard deltas: box for a given anchor
    # index must agree even though the fused ordering differs
    map_with = dict(zip(with_text.anchor_indices.tolist(),
                        map(tuple, with_text.boxes)))
    map_without = dict(zip(without.anchor_indices.tolist(),
                           map(tuple, without.boxes)))
    shared = set(map_with) & set(map_without)
    assert shared
    for idx in shared:
        assert map_with[idx] == map_without[idx]


def test_fuse_logits_mode_sums_raw_logits():
    engine = _engine(seed=6, fuse_logits=True)
    logits = torch.tensor([0.5, -1.0])
    sd = torch.tensor([1.5, 2.0])
    fused = engine.fused_scores(logits, sd)
    assert torch.allclose(fused, torch.tensor([2.0, 1.0]))


def test_propose_matches_pipeline_oracle():
    engine = _engine(seed=7)
    fm = torch.randn(8, 5, 5)
    z = torch.randn(12)
    result = engine.propose(fm, z, 80, 15, 0.5, 40, 40)
    logits, deltas, sd_logits = engine.branch_outputs(fm, z)
    anchors = engine.anchors_for(5, 5)
    fused = (torch.sigmoid(logits) + torch.sigmoid(sd_logits)).detach().double().numpy()
    decoded = decode_boxes(anchors, deltas.detach().double().numpy())
    want_kept, want_boxes = _selection_oracle(decoded, fused, 80, 15, 0.5, 40, 40)
    np.testing.assert_array_equal(result.anchor_indices, want_kept)
    np.testing.assert_allclose(result.boxes, want_boxes)
    assert result.boxes.shape[0] <= 15
    sims = result.scores
    assert all(a >= b for a, b in zip(sims, sims[1:]))


def test_propose_rejects_batched_input():
    engine = _engine()
    with pytest.raises(ValueError):
        engine.propose(torch.randn(2, 8, 5, 5), None, 10, 5, 0.7, 40, 40)
