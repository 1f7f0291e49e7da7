import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wscos.errors import ContractError
from wscos.evalkit import adaptive_fbeta, evaluate, iou_score, mae


def scalar_mae(pred, gt):
    total = 0.0
    for p, g in zip(pred.ravel(), gt.ravel()):
        total += abs(p - g)
    return total / pred.size


def scalar_fbeta(pred, gt, beta2=0.3):
    mean = sum(pred.ravel()) / pred.size
    thr = min(1.0, 2 * mean)
    tp = npos = nfg = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        pos = p >= thr and p > 0
        npos += pos
        nfg += g > 0.5
        tp += pos and g > 0.5
    prec = tp / npos if npos else 0.0
    rec = tp / nfg
    if beta2 * prec + rec == 0:
        return 0.0
    return (1 + beta2) * prec * rec / (beta2 * prec + rec)


def scalar_iou(pred, gt, thr=0.5):
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        a, b = p > thr, g > 0.5
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def _case(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.random((8, 8)) < rng.uniform(0.1, 0.6)).astype(float)
    gt[rng.integers(8), rng.integers(8)] = 1.0
    pred = rng.random((8, 8)) ** rng.uniform(0.3, 3)
    return pred, gt


def test_mae_examples():
    g = np.zeros((4, 4))
    g[:2] = 1
    assert mae(g, g) == 0.0
    assert mae(np.full((4, 4), 0.5), g) == 0.5


def test_fbeta_examples():
    g = np.zeros((10, 10))
    g[0, :] = 1
    assert adaptive_fbeta(g, g) == pytest.approx(1.0)
    assert adaptive_fbeta(np.zeros((10, 10)), g) == 0.0


def test_fbeta_constructed_precision_recall():
    gt = np.zeros((10, 10))
    gt[0, :] = 1
    pred = np.zeros((10, 10))
    pred[0, :8] = 1     # 8 true positives, recall 0.8
    pred[5, :8] = 1     # 8 false positives, precision 0.5
    assert adaptive_fbeta(pred, gt) == pytest.approx(1.3 * 0.4 / (0.15 + 0.8), abs=1e-12)


def test_fbeta_needs_foreground():
    with pytest.raises(ContractError):
        adaptive_fbeta(np.ones((4, 4)), np.zeros((4, 4)))


def test_iou_examples():
    a = np.zeros((8, 8))
    a[:4, :4] = 1
    b = np.zeros((8, 8))
    b[4:, 4:] = 1
    assert iou_score(a, a) == 1.0
    assert iou_score(a, b) == 0.0
    half = np.zeros((8, 8))
    half[:4, 2:6] = 1   # shares 8 of 16 pixels with a
    assert iou_score(half, a) == pytest.approx(1 / 3)
    assert iou_score(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_dims_mismatch():
    with pytest.raises(ContractError):
        mae(np.zeros((4, 4)), np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_scalar_loops(seed):
    pred, gt = _case(seed)
    assert abs(mae(pred, gt) - scalar_mae(pred, gt)) < 1e-10
    assert abs(adaptive_fbeta(pred, gt) - scalar_fbeta(pred, gt)) < 1e-10
    assert abs(iou_score(pred, gt) - scalar_iou(pred, gt)) < 1e-10


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_metrics_permutation_invariant(seed):
    pred, gt = _case(seed)
    perm = np.random.default_rng(seed + 1).permutation(64)
    p2, g2 = pred.ravel()[perm].reshape(8, 8), gt.ravel()[perm].reshape(8, 8)
    assert mae(p2, g2) == pytest.approx(mae(pred, gt), abs=1e-12)
    assert adaptive_fbeta(p2, g2) == pytest.approx(adaptive_fbeta(pred, gt), abs=1e-12)
    assert iou_score(p2, g2) == iou_score(pred, gt)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_mae_complement_symmetry(seed):
    pred, gt = _case(seed)
    assert mae(1 - pred, 1 - gt) == pytest.approx(mae(pred, gt), abs=1e-12)


def test_evaluate_report(tmp_path):
    cases = [_case(s) for s in range(3)]
    rep = evaluate([c[0] for c in cases], [c[1] for c in cases], ["a", "b", "c"])
    assert rep.mae == pytest.approx(np.mean([mae(*c) for c in cases]))
    assert [r[0] for r in rep.per_image] == ["a", "b", "c"]
    rep.write_json(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"mae", "f_beta", "iou", "per_image"}
    assert rep.table().splitlines()[-1].startswith("mean")
    with pytest.raises(ContractError):
        evaluate([], [])
