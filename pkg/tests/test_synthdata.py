import numpy as np
import pytest

from e2eloc.supervision import extract_bbox
from e2eloc.synthdata import (
    AttnMapDatasetConfig,
    GlyphDatasetConfig,
    dump_attention_dataset,
    dump_glyph_dataset,
    gaussian_blob,
    gen_attention_dataset,
    gen_glyph_dataset,
    glyph_codes,
    load_attention_split,
    load_glyph_split,
    rect_blob,
)


@pytest.fixture(scope="module")
def glyphs():
    return gen_glyph_dataset(GlyphDatasetConfig(n_train=60, n_test=20))


def test_glyph_codes_are_separated():
    codes = glyph_codes(10).reshape(10, 9)
    for a in range(10):
        assert 3 <= codes[a].sum() <= 5
        for b in range(a):
            assert (codes[a] != codes[b]).sum() >= 3


def test_glyph_dataset_deterministic(glyphs):
    again = gen_glyph_dataset(GlyphDatasetConfig(n_train=60, n_test=20))
    for a, b in zip(glyphs, again):
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.boxes, b.boxes)


def test_glyph_seed_changes_data(glyphs):
    other, _ = gen_glyph_dataset(GlyphDatasetConfig(n_train=60, n_test=20, seed=1))
    assert not np.array_equal(other.images, glyphs[0].images)


def test_glyph_boxes_inside_and_small(glyphs):
    for ds in glyphs:
        assert ((ds.boxes >= -1) & (ds.boxes <= 1)).all()
        side = (ds.boxes[:, 2] - ds.boxes[:, 0]) / 2
        assert (side <= 0.35 + 1e-12).all() and (side >= 0.15 - 1e-12).all()
        np.testing.assert_allclose(ds.boxes[:, 2] - ds.boxes[:, 0], ds.boxes[:, 3] - ds.boxes[:, 1])


def test_glyph_classes_balanced(glyphs):
    train, test = glyphs
    assert np.bincount(train.labels, minlength=10).tolist() == [6] * 10
    assert np.bincount(test.labels, minlength=10).tolist() == [2] * 10


def test_glyph_pixels_are_8bit(glyphs):
    img = glyphs[0].images
    assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1
    np.testing.assert_allclose(img * 255, np.round(img * 255), atol=1e-4)


def test_glyph_is_bright_inside_box(glyphs):
    ds = glyphs[0]
    s = ds.images.shape[-1]
    for i in range(10):
        x0, y0, x1, y1 = ((ds.boxes[i] + 1) * s / 2).round().astype(int)
        inside = ds.images[i, 0, y0:y1, x0:x1].mean()
        assert inside > 0.3 and inside > 3 * ds.images[i, 0].mean() / 2


def test_glyph_dump_round_trip(tmp_path, glyphs):
    train, test = glyphs
    dump_glyph_dataset(tmp_path, GlyphDatasetConfig(n_train=60, n_test=20), {"train": train, "test": test})
    back = load_glyph_split(tmp_path, "test")
    assert np.array_equal(back.images, test.images)
    assert np.array_equal(back.labels, test.labels)
    np.testing.assert_array_equal(back.boxes, test.boxes)


def test_glyph_config_validation():
    with pytest.raises(ValueError):
        GlyphDatasetConfig(glyph_frac=(0.5, 0.2))


def test_attention_full_blob_identity_target():
    assert extract_bbox(np.ones((16, 16))).degenerate
    m = rect_blob(16, -1.0, -1.0, 1.0, 1.0)
    m[0, 0] = 0.0  # one dark corner so the map is not constant
    box = extract_bbox(m, 0.3)
    assert box.as_array().tolist() == [-1.0, -1.0, 1.0, 1.0]


def test_attention_centered_half_blob():
    m = rect_blob(16, -0.5, -0.5, 0.5, 0.5)
    box = extract_bbox(m, 0.3)
    assert box.as_array().tolist() == [-0.5, -0.5, 0.5, 0.5]
    g = gaussian_blob(16, 0.0, 0.0, 0.3, 0.3)
    x0, y0, x1, y1 = extract_bbox(g, 0.3).as_array()
    assert x0 == -x1 and y0 == -y1


def test_attention_dataset_deterministic_and_consistent():
    cfg = AttnMapDatasetConfig(n_train=40, n_test=10)
    (a, ta), (b, _) = gen_attention_dataset(cfg), gen_attention_dataset(cfg)
    assert np.array_equal(a.maps, b.maps) and np.array_equal(a.thetas, b.thetas)
    for i in range(len(a)):
        box = extract_bbox(a.clean[i, 0], cfg.tau)
        assert not box.degenerate
        np.testing.assert_array_equal(box.as_array(), a.boxes[i])
    assert a.maps.shape == (40, 1, 16, 16) and ta.thetas.shape == (10, 4)


def test_attention_dump_round_trip(tmp_path):
    cfg = AttnMapDatasetConfig(n_train=5, n_test=5)
    train, test = gen_attention_dataset(cfg)
    dump_attention_dataset(tmp_path, cfg, {"train": train, "test": test})
    back = load_attention_split(tmp_path, "train")
    np.testing.assert_array_equal(back.thetas, train.thetas)
    span = train.maps.max() - train.maps.min()
    np.testing.assert_allclose(back.maps, train.maps, atol=span / 65535 + 1e-6)
