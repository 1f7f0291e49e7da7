
import numpy as np
import pytest
from scipy import ndimage

from wscos.augment import IDENTITY, AugSpec, LabeledPoint, apply_grid
from wscos.errors import ContractError, FormatError, MaskNotFoundError
from wscos.pgm import read_pgm, write_pgm
from wscos.provider import (ConstantProvider, FileMaskProvider, OracleConfig, OracleProvider,
                            file_lookup, oracle_segment, read_store_manifest, store_mask,
                            write_store_manifest)


@pytest.fixture
def two_blobs():
    gt = np.zeros((16, 16))
    gt[2:6, 2:6] = 1
    gt[10:14, 9:15] = 1
    return gt


def test_noiseless_oracle_is_identity(two_blobs):
    out = oracle_segment(two_blobs, [LabeledPoint(3, 3, "fg")], OracleConfig())
    np.testing.assert_array_equal(out, two_blobs)


def test_dropout_keeps_only_prompted_blob(two_blobs):
    out = oracle_segment(two_blobs, [LabeledPoint(3, 3, "fg"), LabeledPoint(0, 15, "bg")],
                         OracleConfig(dropout_rate=1.0, seed=4))
    ref = np.zeros_like(two_blobs)
    ref[2:6, 2:6] = 1
    np.testing.assert_array_equal(out, ref)


def test_jitter_area_bounds_on_square():
    gt = np.zeros((16, 16))
    gt[5:11, 5:11] = 1
    areas = set()
    for seed in range(40):
        out = oracle_segment(gt, [LabeledPoint(7, 7, "fg")], OracleConfig(boundary_jitter=1, seed=seed))
        areas.add(int(out.sum()))
    # erosion by one gives 4x4, dilation by one gives 8x8
    assert areas <= {16, 36, 64}
    assert min(areas) >= 16 and max(areas) <= 64


def test_forced_false_positive_is_disjoint(two_blobs):
    out = oracle_segment(two_blobs, [LabeledPoint(3, 3, "fg")], OracleConfig(fp_rate=1.0, seed=1))
    labels, n = ndimage.label(out)
    assert any(not (two_blobs[labels == k] > 0).any() for k in range(1, n + 1))


def test_oracle_is_binary_and_deterministic(two_blobs):
    cfg = OracleConfig(2, 0.3, 0.5, seed=9)
    p = [LabeledPoint(3, 3, "fg")]
    a, b = oracle_segment(two_blobs, p, cfg), oracle_segment(two_blobs, p, cfg)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0}


def test_oracle_config_validation():
    with pytest.raises(ContractError):
        OracleConfig(dropout_rate=1.5)
    with pytest.raises(ContractError):
        OracleConfig(boundary_jitter=-1)


def test_segment_requires_foreground_prompt(two_blobs):
    prov = OracleProvider({"a": two_blobs})
    with pytest.raises(ContractError):
        prov.segment(two_blobs, [LabeledPoint(0, 0, "bg")], image_id="a")
    with pytest.raises(ContractError):
        prov.segment(two_blobs, [], image_id="a")
    with pytest.raises(ContractError):
        prov.segment(two_blobs, [LabeledPoint(16, 0, "fg")], image_id="a")


@pytest.mark.parametrize("spec", [IDENTITY, AugSpec("horizontal", 90, 2.0), AugSpec("none", 270, 0.5)])
def test_provider_output_dims_follow_view(two_blobs, spec):
    view = apply_grid(two_blobs, spec, "bilinear")
    prov = OracleProvider({"a": two_blobs}, OracleConfig(1, 0.2, 0.2, seed=3))
    out = prov.segment(view, [LabeledPoint(0, 0, "fg")], image_id="a", aug_index=2, spec=spec)
    assert out.shape == view.shape
    assert ConstantProvider().segment(view, [LabeledPoint(0, 0, "fg")]).shape == view.shape


def test_file_store_round_trip(tmp_path):
    half = np.zeros((4, 6))
    half[:, :3] = 1.0
    store_mask(tmp_path, "img", 0, half)
    np.testing.assert_array_equal(file_lookup("img", 0, tmp_path), half)
    prov = FileMaskProvider(tmp_path)
    out = prov.segment(np.zeros((4, 6)), [LabeledPoint(0, 0, "fg")], image_id="img", aug_index=0)
    np.testing.assert_array_equal(out, half)


def test_file_store_zero_and_quantisation(tmp_path):
    (tmp_path / "x").mkdir()
    write_pgm(tmp_path / "x" / "aug_1.pgm", np.array([[0, 128]], dtype=np.uint8), raw=True)
    m = file_lookup("x", 1, tmp_path)
    assert m[0, 0] == 0.0
    assert abs(m[0, 1] - 128 / 255) < 1e-9


def test_file_store_missing_and_malformed(tmp_path):
    with pytest.raises(MaskNotFoundError):
        file_lookup("nope", 0, tmp_path)
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "aug_0.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(FormatError):
        file_lookup("bad", 0, tmp_path)
    (tmp_path / "bad" / "aug_1.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError):
        file_lookup("bad", 1, tmp_path)


def test_pgm_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_pgm(path), [[0.0, 1.0]])


def test_store_manifest(tmp_path):
    write_store_manifest(tmp_path, [{"id": "a", "dims": [4, 4], "augs": [0, 1]}])
    assert read_store_manifest(tmp_path)["a"]["augs"] == [0, 1]
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(FormatError):
        read_store_manifest(tmp_path)
