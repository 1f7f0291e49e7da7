import json
import os

import numpy as np
import pytest
from scipy import ndimage

from wscos.dataset import (SceneSpec, generate_dataset, generate_sample, read_dataset,
                           resample_points, sample_point_annotation, sample_scribble, write_dataset)
from wscos.errors import ContractError, FormatError
from wscos.pseudolabel import BACKGROUND, FOREGROUND, nine_box_points


def _contrast_gap(contrast, n=100):
    gaps = []
    for seed in range(n):
        image, gt = generate_sample(SceneSpec((64, 64), 1, contrast, seed))
        fg = gt > 0.5
        gaps.append(image[fg].mean() - image[~fg].mean())
    return np.array(gaps)


def test_high_contrast_separates_regions():
    assert np.abs(_contrast_gap(0.5)).mean() >= 0.2


def test_zero_contrast_is_concealed():
    assert abs(_contrast_gap(0.0).mean()) < 0.02


@pytest.mark.parametrize("n", [1, 2, 3])
def test_object_count_area_and_bounds(n):
    for seed in range(10):
        _, gt = generate_sample(SceneSpec((64, 64), n, 0.3, seed))
        labels, count = ndimage.label(gt > 0.5)
        assert count == n
        for k in range(1, count + 1):
            area = (labels == k).mean()
            assert 0.03 <= area <= 0.20
        assert not gt[[0, -1], :].any() and not gt[:, [0, -1]].any()


def test_sample_is_binary_quantised_and_deterministic():
    spec = SceneSpec((32, 48), 2, 0.2, 7)
    image, gt = generate_sample(spec)
    assert set(np.unique(gt)) <= {0.0, 1.0}
    assert image.min() >= 0 and image.max() <= 1
    np.testing.assert_array_equal(np.rint(image * 255) / 255, image)
    i2, g2 = generate_sample(spec)
    np.testing.assert_array_equal(image, i2)
    np.testing.assert_array_equal(gt, g2)


def test_masks_constant_on_2x2_blocks():
    _, gt = generate_sample(SceneSpec((64, 64), 3, 0.3, 1))
    np.testing.assert_array_equal(gt, gt[::2, ::2].repeat(2, 0).repeat(2, 1))


@pytest.mark.parametrize("dims,n,c", [((60, 64), 1, 0.3), ((64, 64), 4, 0.3), ((64, 64), 1, 0.6)])
def test_scene_spec_validation(dims, n, c):
    with pytest.raises(ContractError):
        SceneSpec(dims, n, c)


def test_point_annotation():
    _, gt = generate_sample(SceneSpec((64, 64), 1, 0.3, 3))
    seen = set()
    for seed in range(5):
        ann = sample_point_annotation(gt, np.random.default_rng(seed))
        fg, bg = ann.points
        assert fg.label == "fg" and gt[fg.row, fg.col] == 1
        assert bg.label == "bg" and gt[bg.row, bg.col] == 0
        seen.add((fg.row, fg.col, bg.row, bg.col))
    assert len(seen) > 1
    with pytest.raises(ContractError):
        sample_point_annotation(np.ones((8, 8)), np.random.default_rng(0))


def test_scribble_annotation():
    _, gt = generate_sample(SceneSpec((64, 64), 1, 0.3, 4))
    rng = np.random.default_rng(0)
    ann = sample_scribble(gt, rng, length=20)
    grid = ann.scribble
    assert (grid == FOREGROUND).sum() == 20 and (grid == BACKGROUND).sum() == 20
    assert np.all(gt[grid == FOREGROUND] == 1) and np.all(gt[grid == BACKGROUND] == 0)
    for code in (FOREGROUND, BACKGROUND):
        # a self-avoiding 4-connected walk is one connected component
        assert ndimage.label(grid == code)[1] == 1
    pts = nine_box_points(grid, "fg", rng)
    assert 1 <= len(pts) <= 9
    assert all(grid[p.row, p.col] == FOREGROUND for p in pts)
    with pytest.raises(ContractError):
        sample_scribble(gt, rng, length=10_000)


def test_generate_dataset_layout_and_determinism():
    a = generate_dataset(6, 3, (32, 32), seed=5)
    b = generate_dataset(6, 3, (32, 32), seed=5)
    assert [s.id for s in a.split("train")] == [f"train_{i:04d}" for i in range(6)]
    assert len(a.split("test")) == 3
    for x, y in zip(a.samples, b.samples):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.annotation.points == y.annotation.points
    c = generate_dataset(6, 3, (32, 32), seed=6)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a.samples, c.samples))


def test_resample_points_only_touches_train():
    ds = generate_dataset(4, 2, (32, 32), seed=0)
    r = resample_points(ds, 1)
    assert any(x.annotation.points != y.annotation.points
               for x, y in zip(ds.split("train"), r.split("train")))
    assert all(x.annotation.points == y.annotation.points for x, y in zip(ds.split("test"), r.split("test")))


@pytest.mark.parametrize("kind", ["points", "scribble"])
def test_write_read_round_trip(tmp_path, kind):
    ds = generate_dataset(3, 2, (32, 32), seed=1, annotation=kind, scribble_length=8)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.dims == ds.dims and back.seed == ds.seed
    for x, y in zip(ds.samples, back.samples):
        assert (x.id, x.split) == (y.id, y.split)
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.gt, y.gt)
        assert x.annotation.points == y.annotation.points
        if kind == "scribble":
            np.testing.assert_array_equal(x.annotation.scribble, y.annotation.scribble)
    ids = [e["id"] for e in json.loads((tmp_path / "manifest.json").read_text())["samples"]]
    assert sorted(ids) == sorted(s.id for s in ds.samples) and len(set(ids)) == len(ids)


def test_missing_file_names_the_sample(tmp_path):
    ds = generate_dataset(2, 1, (32, 32), seed=0)
    write_dataset(ds, tmp_path)
    os.remove(tmp_path / "gt" / "train_0001.pgm")
    with pytest.raises(FormatError, match="train_0001"):
        read_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        read_dataset(tmp_path)
