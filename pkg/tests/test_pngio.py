import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from weakseg import pngio
from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN

codes = st.sampled_from([BACKGROUND, FOREGROUND, UNCERTAIN])


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=codes))
def test_label_map_round_trip(tmp_path_factory, labels):
    path = tmp_path_factory.mktemp("lm") / "x.png"
    pngio.write_label_map(labels, path)
    assert np.array_equal(pngio.read_label_map(path), labels)


def test_palette_bytes_exact(tmp_path):
    path = tmp_path / "l.png"
    pngio.write_label_map(np.array([[0, 1, 255]], dtype=np.uint8), path)
    assert pngio.palette_bytes(path)[:9] == bytes([0, 0, 0, 255, 0, 0, 255, 255, 0])
    with Image.open(path) as img:
        assert img.mode == "P"
        assert list(np.asarray(img)[0]) == [0, 1, 2]


def test_binary_mask_uses_two_entries(tmp_path):
    path = tmp_path / "b.png"
    mask = np.array([[True, False], [False, True]])
    pngio.write_binary_mask(mask, path)
    assert pngio.palette_bytes(path)[:6] == bytes([0, 0, 0, 255, 0, 0])
    assert np.array_equal(pngio.read_mask(path), mask.astype(np.uint8))


def test_rejects_foreign_codes(tmp_path):
    with pytest.raises(ValueError):
        pngio.write_label_map(np.array([[3]], dtype=np.uint8), tmp_path / "bad.png")


def test_probability_map_quantization(tmp_path):
    prob = np.linspace(0, 1, 64).reshape(8, 8)
    path = tmp_path / "p.png"
    pngio.write_probability_map(prob, path)
    with Image.open(path) as img:
        raw = np.asarray(img)
    assert raw.dtype == np.uint16 or img.mode.startswith("I")
    assert np.array_equal(raw.astype(np.int64), np.round(prob * 65535).astype(np.int64))
    assert np.abs(pngio.read_probability_map(path) - prob).max() <= 0.5 / 65535 + 1e-12


def test_read_mask_rules(tmp_path):
    arr = np.array([[0, 10], [255, 0]], dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "g.png")
    assert np.array_equal(pngio.read_mask(tmp_path / "g.png"), [[0, 1], [1, 0]])
    assert np.array_equal(pngio.read_mask(tmp_path / "g.png", "nonwhite"), [[1, 1], [0, 1]])
    with pytest.raises(ValueError):
        pngio.read_mask(tmp_path / "g.png", "bogus")


def test_find_by_stem(tmp_path):
    Image.new("L", (2, 2)).save(tmp_path / "img_7_GT.png")
    Image.new("L", (2, 2)).save(tmp_path / "gt_img_8.bmp")
    assert pngio.find_by_stem(tmp_path, "img_7").name == "img_7_GT.png"
    assert pngio.find_by_stem(tmp_path, "img_8").name == "gt_img_8.bmp"
    assert pngio.find_by_stem(tmp_path, "img_9") is None
