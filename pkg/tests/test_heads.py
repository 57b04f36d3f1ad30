"""Detection head behavior and the online instance matching loss."""
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from tbps.boxes import decode_boxes
from tbps.heads import DetHead, OimLoss

from oracles import oim_ref


# ---- detection head -----------------------------------------------------------


def test_det_head_zero_weights_uniform_probs():
    head = DetHead(in_channels=4, roi_size=3, hidden=8)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    logits, deltas = head(torch.randn(5, 4, 3, 3))
    probs = torch.softmax(logits, dim=1)
    assert torch.allclose(probs, torch.full((5, 2), 0.5))
    assert torch.allclose(deltas, torch.zeros(5, 4))


def test_det_head_order_preserved():
    torch.manual_seed(0)
    head = DetHead(in_channels=4, roi_size=3, hidden=8)
    rois = torch.randn(6, 4, 3, 3)
    logits, deltas = head(rois)
    flipped_logits, flipped_deltas = head(rois.flip(0))
    assert torch.allclose(logits.flip(0), flipped_logits, atol=1e-6)
    assert torch.allclose(deltas.flip(0), flipped_deltas, atol=1e-6)


def test_zero_deltas_refine_to_identity():
    boxes = np.array([[3.0, 5.0, 40.0, 90.0], [0.0, 0.0, 16.0, 16.0]])
    refined = decode_boxes(boxes, np.zeros((2, 4)))
    np.testing.assert_allclose(refined, boxes, atol=1e-9)


# ---- oim loss -----------------------------------------------------------------


def _orthogonal_oim(num_identities, dim, **kw):
    oim = OimLoss(num_identities, dim, **kw)
    with torch.no_grad():
        oim.lut.zero_()
        for i in range(num_identities):
            oim.lut[i, i] = 1.0
    return oim


def test_single_identity_empty_queue_gives_zero_loss():
    oim = OimLoss(num_identities=1, dim=4, queue_size=0)
    emb = F.normalize(torch.randn(3, 4), dim=1)
    loss = oim.loss_only(emb, torch.zeros(3, dtype=torch.long))
    assert float(loss) == pytest.approx(0.0, abs=1e-7)


def test_closed_form_orthogonal_prototypes():
    tau = 0.1
    L, D = 5, 8
    oim = _orthogonal_oim(L, D, queue_size=0, temperature=tau).double()
    emb = oim.lut[2].clone().unsqueeze(0)
    loss = oim.loss_only(emb, torch.tensor([2]))
    want = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (L - 1)))
    assert float(loss) == pytest.approx(want, rel=1e-6)


def test_matches_reference_on_random_instances():
    torch.manual_seed(1)
    for trial in range(10):
        oim = OimLoss(num_identities=4, dim=6, queue_size=8, seed=trial)
        # seed the queue with a few unlabeled pushes
        filler = F.normalize(torch.randn(3, 6), dim=1)
        oim(filler, torch.full((3,), -1))
        emb = torch.randn(5, 6)
        labels = torch.tensor([0, 3, -1, 2, 2])
        got = oim.loss_only(emb, labels)
        want = oim_ref(emb.numpy(), labels.numpy(), oim.lut.numpy(),
                       oim.valid_queue().numpy(), oim.temperature)
        assert float(got) == pytest.approx(want, rel=1e-6)


def test_momentum_update_formula():
    oim = _orthogonal_oim(3, 4, momentum=0.5)
    old = oim.lut[1].clone()
    emb = F.normalize(torch.tensor([[0.0, 0.0, 1.0, 1.0]]), dim=1)
    oim(emb, torch.tensor([1]))
    want = F.normalize(0.5 * old + 0.5 * emb[0], dim=0)
    assert torch.allclose(oim.lut[1], want, atol=1e-7)


def test_lut_unit_norm_after_many_updates():
    torch.manual_seed(2)
    oim = OimLoss(num_identities=6, dim=8, queue_size=4)
    for _ in range(1000):
        emb = torch.randn(2, 8)
        labels = torch.randint(-1, 6, (2,))
        oim(emb, labels)
    norms = oim.lut.norm(dim=1)
    assert torch.allclose(norms, torch.ones(6), atol=1e-5)


def test_queue_grows_then_evicts_fifo():
    oim = OimLoss(num_identities=2, dim=3, queue_size=2)
    vecs = F.normalize(torch.eye(3), dim=1)
    oim(vecs[0:1], torch.tensor([-1]))
    assert int(oim.queue_count) == 1
    oim(vecs[1:2], torch.tensor([-1]))
    assert int(oim.queue_count) == 2
    assert torch.allclose(oim.valid_queue(), vecs[:2])
    # third push evicts the first entry
    oim(vecs[2:3], torch.tensor([-1]))
    assert int(oim.queue_count) == 2
    assert torch.allclose(oim.valid_queue(), vecs[1:3])


def test_queue_feed_flag_disables_pushes():
    oim = OimLoss(num_identities=2, dim=3, queue_size=4, feed_unlabeled=False)
    oim(F.normalize(torch.randn(2, 3), dim=1), torch.tensor([-1, -1]))
    assert int(oim.queue_count) == 0


def test_label_out_of_range_rejected():
    oim = OimLoss(num_identities=3, dim=4)
    with pytest.raises(ValueError):
        oim.loss_only(torch.randn(1, 4), torch.tensor([3]))
    with pytest.raises(ValueError):
        oim.loss_only(torch.randn(2, 4), torch.tensor([0]))


def test_unlabeled_only_batch_zero_loss_but_fills_queue():
    oim = OimLoss(num_identities=3, dim=4, queue_size=4)
    emb = torch.randn(2, 4, requires_grad=True)
    loss = oim(emb, torch.tensor([-1, -1]))
    assert float(loss) == 0.0
    loss.backward()
    assert torch.allclose(emb.grad, torch.zeros_like(emb.grad))
    assert int(oim.queue_count) == 2


def test_stored_vectors_carry_no_gradient():
    oim = _orthogonal_oim(3, 4, queue_size=2)
    oim(F.normalize(torch.randn(1, 4), dim=1), torch.tensor([-1]))
    emb = torch.randn(2, 4, requires_grad=True)
    loss = oim.loss_only(emb, torch.tensor([0, 1]))
    loss.backward()
    assert oim.lut.grad is None and oim.queue.grad is None
    assert emb.grad is not None


def test_queue_entries_enter_the_denominator():
    # an unlabeled vector identical to the probe makes the loss strictly worse
    oim = _orthogonal_oim(2, 4, queue_size=2, temperature=0.2)
    probe = oim.lut[0].clone().unsqueeze(0)
    before = float(oim.loss_only(probe, torch.tensor([0])))
    oim(probe, torch.tensor([-1]))
    after = float(oim.loss_only(probe, torch.tensor([0])))
    assert after > before
