import numpy as np
import pytest

from splatdiff.images import (contact_sheet, load_pfm, load_png, save_pfm,
                              save_png, to_uint8)


def test_to_uint8_rounds_and_clips():
    assert to_uint8(np.array([0.0]))[0] == 0
    assert to_uint8(np.array([1.0]))[0] == 255
    assert to_uint8(np.array([-3.0, 7.0])).tolist() == [0, 255]
    # round-half-up at the quantization midpoint
    assert to_uint8(np.array([0.5 / 255.0]))[0] == 1


def test_png_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((17, 23, 3))
    p = tmp_path / "x.png"
    save_png(p, img)
    back = load_png(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def test_png_is_deterministic(tmp_path):
    img = np.random.default_rng(1).random((9, 9, 3))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_png(a, img)
    save_png(b, img)
    assert a.read_bytes() == b.read_bytes()


def test_pfm_roundtrip_exact_with_inf(tmp_path):
    depth = np.random.default_rng(2).random((11, 13)).astype(np.float32)
    depth[3, 4] = np.inf
    p = tmp_path / "d.pfm"
    save_pfm(p, depth)
    back = load_pfm(p)
    assert back.shape == depth.shape
    assert np.array_equal(back, depth.astype(np.float64))
    color = np.random.default_rng(3).random((5, 6, 3)).astype(np.float32)
    save_pfm(p, color)
    assert np.array_equal(load_pfm(p), color.astype(np.float64))


def test_pfm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"P6\n3 3\n255\n" + b"\x00" * 27)
    with pytest.raises(ValueError, match="magic"):
        load_pfm(p)
    p.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(ValueError, match="truncated"):
        load_pfm(p)
    with pytest.raises(ValueError, match="PFM wants"):
        save_pfm(p, np.zeros((4, 4, 2)))


def test_contact_sheet_geometry():
    imgs = [[np.zeros((4, 6, 3)), np.ones((4, 6, 3)) * 0.5],
            [np.zeros((4, 6, 3))]]
    sheet = contact_sheet(imgs, pad=2, pad_value=1.0)
    assert sheet.shape == (2 * (4 + 2) + 2, 2 * (6 + 2) + 2, 3)
    assert np.all(sheet[0:2] == 1.0)                       # top padding
    assert np.all(sheet[2:6, 2:8] == 0.0)                  # first tile
    assert np.all(sheet[2:6, 10:16] == 0.5)                # second tile
    assert np.all(sheet[8:12, 10:16] == 1.0)               # ragged gap
    gray = contact_sheet([[np.full((3, 3), 0.25)]])
    assert gray.shape == (3 + 4, 3 + 4, 3)
    with pytest.raises(ValueError):
        contact_sheet([])
