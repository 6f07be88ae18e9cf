import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box as shapely_box

from remerec.boxes import generalized_box_iou, giou, iou
from remerec.data import EntitySpan
from remerec.losses import bbox_loss, entity_loss, pair_ground_truth, relation_loss, remap_relations

from conftest import fd_max_rel_error


def shapely_giou(a, b):
    pa, pb = shapely_box(*a), shapely_box(*b)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    hull = pa.union(pb).envelope.area
    return inter / union - (hull - union) / hull


def test_entity_loss_uniform_is_ln2():
    logits = torch.zeros(2, 5)
    labels = torch.tensor([[1, 0, 1, 0, 0], [0, 1, 1, 0, 0]])
    valid = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
    token, _ = entity_loss(logits, labels, valid, torch.zeros(2, 4), torch.tensor([2, 1]), parts=True)
    assert float(token) == pytest.approx(math.log(2), abs=1e-7)


def test_entity_loss_optimum():
    labels = torch.tensor([[1, 1, 0, 1]])
    logits = (labels * 2 - 1) * 20.0
    count = torch.full((1, 4), -20.0)
    count[0, 2] = 20.0
    loss = entity_loss(logits.double(), labels, torch.ones(1, 4, dtype=torch.bool), count.double(), torch.tensor([2]))
    assert 0 <= float(loss) <= 1e-6


def test_entity_loss_ignores_padding():
    labels = torch.tensor([[1, 0, 0]])
    valid = torch.tensor([[True, True, False]])
    a = entity_loss(torch.tensor([[2.0, -1.0, 5.0]]), labels, valid, torch.zeros(1, 3), torch.tensor([1]))
    b = entity_loss(torch.tensor([[2.0, -1.0, -9.0]]), labels, valid, torch.zeros(1, 3), torch.tensor([1]))
    assert float(a) == float(b)


def test_bbox_worked_example():
    # corner boxes (0,0,1,1) and (2,0,3,1) in centre form
    a = torch.tensor([[[0.5, 0.5, 1.0, 1.0]]], dtype=torch.float64)
    b = torch.tensor([[[2.5, 0.5, 1.0, 1.0]]], dtype=torch.float64)
    assert shapely_giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)
    iou_term, l1_term = bbox_loss(a, b, parts=True)
    assert float(iou_term) == pytest.approx(1 - shapely_giou((0, 0, 1, 1), (2, 0, 3, 1)), abs=1e-12)
    assert float(l1_term) == pytest.approx(2.0, abs=1e-12)
    assert float(bbox_loss(a, b)) == pytest.approx(10 / 3, abs=1e-12)


def test_bbox_identical_is_zero():
    boxes = torch.tensor([[[0.3, 0.4, 0.2, 0.1], [0.6, 0.5, 0.3, 0.3]]], dtype=torch.float64)
    assert float(bbox_loss(boxes, boxes.clone())) == pytest.approx(0.0, abs=1e-15)


def test_bbox_masked_slots_do_not_count():
    pred = torch.tensor([[[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.0, 0.0]]])
    gt = torch.tensor([[[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.0, 0.0]]])
    loss = bbox_loss(pred, gt, torch.tensor([[True, False]]))
    assert float(loss) == 0.0


corner = st.tuples(
    st.floats(0, 10, allow_nan=False), st.floats(0, 10, allow_nan=False), st.floats(0.1, 5), st.floats(0.1, 5)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(corner, corner)
@settings(max_examples=300, deadline=None)
def test_giou_and_iou_match_shapely(a, b):
    assert giou(a, b) == pytest.approx(shapely_giou(a, b), abs=1e-9)
    pa, pb = shapely_box(*a), shapely_box(*b)
    assert iou(a, b) == pytest.approx(pa.intersection(pb).area / pa.union(pb).area, abs=1e-9)
    t = torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64)
    assert float(generalized_box_iou(*t)[0]) == pytest.approx(shapely_giou(a, b), abs=1e-9)


@given(corner, corner)
@settings(max_examples=100, deadline=None)
def test_bbox_loss_non_negative(a, b):
    def centre(c):
        return [(c[0] + c[2]) / 2, (c[1] + c[3]) / 2, c[2] - c[0], c[3] - c[1]]

    pa = torch.tensor([[centre(a)]], dtype=torch.float64)
    pb = torch.tensor([[centre(b)]], dtype=torch.float64)
    assert float(bbox_loss(pa, pb)) >= 0


def test_relation_loss_zero_scores_is_ln2():
    scores = torch.zeros(1, 2, 2)
    valid = torch.ones(1, 2, dtype=torch.bool)
    bce, _ = relation_loss(scores, torch.zeros(1, 2, 2), valid, torch.zeros(1, 3), torch.tensor([0]), parts=True)
    assert float(bce) == pytest.approx(math.log(2), abs=1e-7)


def test_relation_loss_optimum_and_diagonal_ignored():
    gt = torch.tensor([[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64)
    scores = (gt * 2 - 1) * 20
    scores[0, 0, 0] = scores[0, 1, 1] = 123.0  # diagonal never scored
    count = torch.full((1, 4), -20.0, dtype=torch.float64)
    count[0, 2] = 20
    loss = relation_loss(scores, gt, torch.ones(1, 3, dtype=torch.bool), count, torch.tensor([2]))
    assert 0 <= float(loss) <= 1e-6


def test_relation_loss_padded_entities_excluded():
    valid = torch.tensor([[True, True, False]])
    gt = torch.zeros(1, 3, 3)
    a = torch.zeros(1, 3, 3)
    b = a.clone()
    b[0, 2, :] = 50.0
    b[0, :, 2] = -50.0
    la = relation_loss(a, gt, valid, torch.zeros(1, 3), torch.tensor([0]))
    lb = relation_loss(b, gt, valid, torch.zeros(1, 3), torch.tensor([0]))
    assert float(la) == float(lb)


def test_pairing_examples():
    S = EntitySpan
    assert pair_ground_truth([S(3, 4), S(0, 1)], [S(0, 1), S(3, 4)]) == [(1, 0), (0, 1)]
    assert pair_ground_truth([S(0, 1), S(3, 4)], [S(0, 1), S(3, 4)]) == [(0, 0), (1, 1)]
    assert len(pair_ground_truth([S(0, 1), S(3, 4)], [S(0, 1), S(3, 4), S(6, 7)])) == 2
    # equal starts resolve by query index
    assert pair_ground_truth([S(2, 3), S(2, 3)], [S(0, 1), S(2, 3)]) == [(0, 0), (1, 1)]


def test_remap_relations():
    pairs = [(1, 0), (0, 1)]
    assert remap_relations({(0, 1)}, pairs) == {(1, 0)}
    assert remap_relations({(0, 2)}, pairs) == set()


@given(st.permutations(list(range(4))))
def test_pairing_is_bijection_in_start_order(perm):
    spans = [EntitySpan(3 * p, 3 * p + 1) for p in perm]
    gt = [EntitySpan(3 * k, 3 * k + 1) for k in range(4)]
    pairs = pair_ground_truth(spans, gt)
    assert sorted(q for q, _ in pairs) == [0, 1, 2, 3]
    for q, g in pairs:
        assert spans[q] == gt[g]


@pytest.mark.parametrize("which", ["entity", "bbox", "relation"])
def test_loss_gradients(which):
    g = torch.Generator().manual_seed(0)
    if which == "entity":
        logits = torch.randn(2, 5, dtype=torch.float64, generator=g)
        count = torch.randn(2, 4, dtype=torch.float64, generator=g)
        labels = torch.tensor([[1, 0, 1, 1, 0], [0, 1, 0, 0, 0]])
        valid = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
        params = [logits, count]
        fn = lambda: entity_loss(logits, labels, valid, count, torch.tensor([2, 1]))
    elif which == "bbox":
        pred = torch.tensor([[[0.4, 0.5, 0.3, 0.2], [0.6, 0.3, 0.2, 0.25]]], dtype=torch.float64)
        gt = torch.tensor([[[0.45, 0.55, 0.25, 0.3], [0.2, 0.7, 0.1, 0.1]]], dtype=torch.float64)
        params = [pred]
        fn = lambda: bbox_loss(pred, gt, lambda_iou=1.0, lambda_l1=0.5)
    else:
        scores = torch.randn(2, 3, 3, dtype=torch.float64, generator=g)
        count = torch.randn(2, 7, dtype=torch.float64, generator=g)
        gt = torch.zeros(2, 3, 3, dtype=torch.float64)
        gt[0, 0, 1] = gt[1, 1, 0] = 1
        valid = torch.tensor([[True, True, True], [True, True, False]])
        params = [scores, count]
        fn = lambda: relation_loss(scores, gt, valid, count, torch.tensor([1, 1]))
    for p in params:
        p.requires_grad_(True)
    assert fd_max_rel_error(fn, params) <= 1e-3
