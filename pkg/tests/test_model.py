import math

import numpy as np
import pytest

from wscos import tensor as tn
from wscos.augment import LabeledPoint
from wscos.dataset import generate_dataset
from wscos.errors import ContractError, FormatError, TrainingError
from wscos.evalkit import iou_score
from wscos.model import (ModelConfig, TrainConfig, TrainItem, dense_ce, forward, init_segmenter,
                         load_checkpoint, partial_ce, predict, save_checkpoint, soft_iou_loss, total_loss,
                         train)
from wscos.pseudolabel import PseudoLabel, SparseAnnotation
from wscos.tensor import grad_check

CLIP = 1e-7


def _clip(p):
    return min(max(p, CLIP), 1 - CLIP)


def _scalar_bce(p, t):
    p = _clip(p)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def _scalar_pce(pred, mask, target):
    total, n = 0.0, 0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            if mask[r, c]:
                total += _scalar_bce(pred[r, c], target[r, c])
                n += 1
    return total / n


def _scalar_ce(pred, target):
    return sum(_scalar_bce(p, t) for p, t in zip(pred.ravel(), target.ravel())) / pred.size


def _scalar_iou(pred, target):
    inter = sum(p * t for p, t in zip(pred.ravel(), target.ravel()))
    union = pred.sum() + target.sum() - inter
    return 1 - (inter + 1) / (union + 1)


def _label(weighted, kept=True):
    z = np.zeros_like(weighted)
    return PseudoLabel(weighted_mask=weighted, fused=weighted, entropy=z, kept=kept)


TWO_POINTS = SparseAnnotation(points=[LabeledPoint(1, 1, "fg"), LabeledPoint(6, 6, "bg")])


# -- forward ---------------------------------------------------------------------
def test_forward_shape_and_range():
    p = init_segmenter(np.random.default_rng(0), (64, 64))
    out = forward(p, np.random.default_rng(1).random((2, 64, 64))).data
    assert out.shape == (2, 64, 64)
    assert np.all((out > 0) & (out < 1))
    assert predict(p, np.zeros((64, 64))).shape == (64, 64)


def test_zero_final_layer_gives_half():
    p = init_segmenter(np.random.default_rng(0), (16, 16))
    p.decoder[-1][0].data[:] = 0
    out = forward(p, np.random.default_rng(1).random((16, 16))).data
    np.testing.assert_array_equal(out, 0.5)


def test_forward_deterministic():
    p = init_segmenter(np.random.default_rng(0), (16, 16))
    x = np.random.default_rng(1).random((16, 16))
    np.testing.assert_array_equal(forward(p, x).data, forward(p, x).data)


def test_forward_dims_contract():
    with pytest.raises(ContractError):
        init_segmenter(np.random.default_rng(0), (20, 16))
    p = init_segmenter(np.random.default_rng(0), (16, 16))
    with pytest.raises(ContractError):
        forward(p, np.zeros((12, 16)))
    with pytest.raises(ContractError):
        init_segmenter(np.random.default_rng(0), (16, 16), ModelConfig(channels=30))


# -- losses --------------------------------------------------------------------------
def test_pce_perfect_points():
    pred = np.full((8, 8), 0.3)
    pred[1, 1], pred[6, 6] = 1.0, 0.0
    assert partial_ce(pred, TWO_POINTS).item() < 1e-6


def test_pce_uniform_prediction():
    assert abs(partial_ce(np.full((8, 8), 0.5), TWO_POINTS).item() - math.log(2)) < 1e-12


def test_pce_matches_scalar_oracle_with_scribble():
    rng = np.random.default_rng(0)
    scribble = rng.integers(0, 3, (8, 8)).astype(np.uint8)
    ann = SparseAnnotation(points=[LabeledPoint(0, 0, "fg")], scribble=scribble)
    pred = rng.random((8, 8))
    mask, target = ann.labeled_pixels((8, 8))
    assert abs(partial_ce(pred, ann).item() - _scalar_pce(pred, mask, target)) < 1e-10


def test_pce_needs_labels():
    with pytest.raises(ContractError):
        partial_ce(np.full((4, 4), 0.5), np.zeros((4, 4), bool), np.zeros((4, 4)))


def test_soft_iou_values():
    t = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(float)
    assert abs(soft_iou_loss(t, t).item()) < 1e-9
    n = 36
    assert abs(soft_iou_loss(np.ones((6, 6)), np.zeros((6, 6))).item() - (1 - 1 / (n + 1))) < 1e-12
    a, b = np.random.default_rng(1).random((2, 6, 6))
    assert soft_iou_loss(a, b).item() == pytest.approx(soft_iou_loss(b, a).item(), abs=1e-15)


def test_total_loss_gating_and_terms():
    rng = np.random.default_rng(3)
    pred, soft = rng.random((8, 8)), rng.random((8, 8))
    pce = partial_ce(pred, TWO_POINTS).item()
    assert total_loss(pred, TWO_POINTS, _label(soft, kept=False)).item() == pce
    mask, target = TWO_POINTS.labeled_pixels((8, 8))
    ref = _scalar_pce(pred, mask, target) + _scalar_ce(pred, soft) + _scalar_iou(pred, soft)
    assert abs(total_loss(pred, TWO_POINTS, _label(soft)).item() - ref) < 1e-10


def test_total_loss_perfect_kept_label():
    gt = np.zeros((8, 8))
    gt[0:4, 0:4] = 1
    ann = SparseAnnotation(points=[LabeledPoint(1, 1, "fg"), LabeledPoint(6, 6, "bg")])
    loss = total_loss(gt, ann, _label(gt)).item()
    assert loss < 1e-5


def test_soft_ce_minimised_at_target():
    grid = np.linspace(0.001, 0.999, 999)
    for t in (0.0, 0.1, 0.37, 0.5, 0.9, 1.0):
        losses = [_scalar_bce(p, t) for p in grid]
        best = grid[int(np.argmin(losses))]
        assert abs(best - min(max(t, 0.001), 0.999)) <= 0.001
        vals = dense_ce(grid.reshape(1, -1), np.full((1, grid.size), t)).data
        assert np.isfinite(vals).all()


def test_rejected_label_has_no_dense_gradient():
    pred = tn.parameter(np.random.default_rng(0).uniform(0.1, 0.9, (8, 8)))
    total_loss(pred, TWO_POINTS, _label(np.ones((8, 8)), kept=False)).backward()
    g = pred.grad.copy()
    mask, _ = TWO_POINTS.labeled_pixels((8, 8))
    assert np.all(g[~mask] == 0)
    assert np.all(g[mask] != 0)


def test_full_model_gradient_check():
    rng = np.random.default_rng(0)
    params = init_segmenter(rng, (16, 16), ModelConfig(channels=8, n1=2, n2=4))
    for t in params.tensors():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    image = rng.random((16, 16))
    ann = SparseAnnotation(points=[LabeledPoint(3, 4, "fg"), LabeledPoint(12, 10, "bg")])
    label = _label(rng.random((16, 16)))
    err = grad_check(lambda: total_loss(forward(params, image)[0], ann, label), params.tensors(), eps=1e-5)
    assert err < 1e-4


# -- training ------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_set():
    ds = generate_dataset(4, 0, (32, 32), seed=0)
    return [TrainItem(s.image, s.annotation, _label(s.gt)) for s in ds.samples]


def test_train_smoke_and_determinism(small_set):
    cfg = TrainConfig(epochs=1, batch_size=2, seed=3)
    p1, h1 = train(small_set, cfg)
    p2, h2 = train(small_set, cfg)
    assert len(h1) == 1 and np.isfinite(h1[0])
    assert h1 == h2
    for a, b in zip(p1.tensors(), p2.tensors()):
        np.testing.assert_array_equal(a.data, b.data)


def test_train_sparse_only_items(small_set):
    items = [TrainItem(it.image, it.annotation, None) for it in small_set]
    _, hist = train(items, TrainConfig(epochs=1))
    assert np.isfinite(hist[0])


def test_train_reports_divergence(small_set):
    bad = [TrainItem(it.image, it.annotation, _label(np.full(it.image.shape, np.nan))) for it in small_set]
    with pytest.raises(TrainingError) as info:
        train(bad, TrainConfig(epochs=2))
    assert info.value.epoch == 0


def test_train_rejects_empty():
    with pytest.raises(ContractError):
        train([], TrainConfig())


def test_loss_decreases_by_window():
    ds = generate_dataset(16, 0, (32, 32), seed=1)
    items = [TrainItem(s.image, s.annotation, _label(s.gt)) for s in ds.samples]
    _, hist = train(items, TrainConfig(epochs=40, seed=0))
    windows = [np.mean(hist[i:i + 10]) for i in range(0, 40, 10)]
    assert all(b <= a for a, b in zip(windows, windows[1:]))


def test_lr_decay_schedule(small_set, monkeypatch):
    seen = []
    import wscos.model as m
    orig = m.Adam.step

    def spy(self):
        seen.append(self.lr)
        orig(self)
    monkeypatch.setattr(m.Adam, "step", spy)
    train(small_set, TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, lr_decay_interval=2))
    np.testing.assert_allclose(seen, [1e-3, 1e-3, 1e-4])


def test_checkpoint_round_trip(tmp_path):
    p = init_segmenter(np.random.default_rng(0), (16, 16), ModelConfig(channels=8))
    save_checkpoint(tmp_path, p)
    q = load_checkpoint(tmp_path)
    for (na, a), (nb, b) in zip(p.named_tensors(), q.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(a.data, b.data)
    x = np.random.default_rng(1).random((16, 16))
    np.testing.assert_array_equal(forward(p, x).data, forward(q, x).data)
    raw = (tmp_path / "model.ckpt").read_bytes()
    assert raw[:8] == b"WSCOSCKP"
    (tmp_path / "model.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
    (tmp_path / "model.ckpt").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


@pytest.mark.slow
def test_noiseless_training_reaches_high_train_iou():
    ds = generate_dataset(50, 0, (64, 64), seed=0)
    items = [TrainItem(s.image, s.annotation, _label(s.gt)) for s in ds.samples]
    params, _ = train(items, TrainConfig(epochs=200, learning_rate=3e-3, seed=0))
    preds = predict(params, np.stack([s.image for s in ds.samples]))
    assert np.mean([iou_score(p, s.gt) for p, s in zip(preds, ds.samples)]) >= 0.85
