import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from camforge.isp import (
    IspError, ProcessedImage, adaptive_gamma, apply_gamma, dark_level_census, demosaic_bilinear,
    encode_processed, normalize,
)
from camforge.pngio import decode_png
from camforge.sensor import RawFrame, make_cfa


def frame(dn, kind="rggb", depth=10):
    return RawFrame(np.asarray(dn, dtype=np.uint16), depth, make_cfa(kind), 0.01, "t", 0)


def textbook_bilinear_rggb(x):
    """Classical per-site neighbour averages, interior pixels only."""
    h, w = x.shape
    out = np.full((3, h, w), np.nan)
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            cross = (x[r - 1, c] + x[r + 1, c] + x[r, c - 1] + x[r, c + 1]) / 4
            diag = (x[r - 1, c - 1] + x[r - 1, c + 1] + x[r + 1, c - 1] + x[r + 1, c + 1]) / 4
            horiz = (x[r, c - 1] + x[r, c + 1]) / 2
            vert = (x[r - 1, c] + x[r + 1, c]) / 2
            if r % 2 == 0 and c % 2 == 0:      # R site
                out[:, r, c] = (x[r, c], cross, diag)
            elif r % 2 == 1 and c % 2 == 1:    # B site
                out[:, r, c] = (diag, cross, x[r, c])
            elif r % 2 == 0:                   # G in an R row
                out[:, r, c] = (horiz, x[r, c], vert)
            else:                              # G in a B row
                out[:, r, c] = (vert, x[r, c], horiz)
    return out


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint16, st.tuples(st.integers(3, 9), st.integers(3, 9)), elements=st.integers(0, 1023)))
def test_demosaic_matches_textbook_interior(dn):
    img = demosaic_bilinear(frame(dn))
    ref = textbook_bilinear_rggb(dn.astype(np.float64) / 1023)
    inner = np.s_[:, 1:-1, 1:-1]
    np.testing.assert_allclose(img.data[inner], ref[inner], rtol=0, atol=1e-12)
    assert img.channel_names == ("R", "G", "B") and img.pipeline_tag == "demosaic-bilinear"


def test_rccc_keeps_samples_and_fills_clear():
    dn = np.arange(36, dtype=np.uint16).reshape(6, 6) * 20
    img = demosaic_bilinear(frame(dn, "rccc"))
    x = dn / 1023
    assert img.channel_names == ("C", "R")
    # R sites keep their value in the R plane; C sites in the C plane
    np.testing.assert_allclose(img.data[1, ::2, ::2], x[::2, ::2])
    np.testing.assert_allclose(img.data[0, 1::2, :], x[1::2, :])
    # a C value at an R site is the mean of its four clear neighbours
    assert img.data[0, 2, 2] == pytest.approx((x[1, 2] + x[3, 2] + x[2, 1] + x[2, 3]) / 4)


def test_constant_frames_stay_constant():
    for kind in ("rggb", "rccc"):
        img = demosaic_bilinear(frame(np.full((5, 7), 300), kind))
        np.testing.assert_allclose(img.data, 300 / 1023)
    mono = demosaic_bilinear(frame(np.full((3, 3), 5), "mono"))
    assert mono.data.shape == (1, 3, 3) and mono.pipeline_tag == "raw"


def test_gamma_tags_and_values():
    img = normalize(frame(np.array([[0, 1023], [256, 512]])))
    g = apply_gamma(img, 0.3)
    assert g.pipeline_tag == "gamma-0.30"
    np.testing.assert_allclose(g.data, img.data ** 0.3)
    d = apply_gamma(demosaic_bilinear(frame(np.full((4, 4), 9))), 0.5)
    assert d.pipeline_tag == "demosaic-bilinear|gamma-0.50"
    with pytest.raises(IspError):
        apply_gamma(img, 0.0)


def test_adaptive_gamma_maps_mean_to_half():
    img = ProcessedImage(np.full((1, 4, 4), 0.1), ("raw",), "raw")
    out, g = adaptive_gamma(img)
    assert out.data.mean() == pytest.approx(0.5)
    assert out.pipeline_tag == f"gamma-adaptive-{g:.4f}"
    _, g_dark = adaptive_gamma(ProcessedImage(np.zeros((1, 2, 2)), ("raw",), "raw"))
    assert g_dark == 0.1
    _, g_bright = adaptive_gamma(ProcessedImage(np.full((1, 2, 2), 0.9), ("raw",), "raw"))
    assert g_bright == 1.0


def test_dark_level_census_by_hand():
    dn = np.array([[0, 1, 1, 31], [32, 5, 5, 1000]])
    # 10-bit, 1/32 -> threshold 32: codes {0, 1, 5, 31}
    assert dark_level_census(frame(dn), 1 / 32) == 4
    assert dark_level_census(dn, 1 / 32, bit_depth=10) == 4
    assert dark_level_census(frame(dn, depth=12), 1 / 32) == 5
    with pytest.raises(IspError):
        dark_level_census(dn, 1 / 32)


@pytest.mark.parametrize("depth", [8, 16])
def test_encode_processed(depth):
    img = demosaic_bilinear(frame(np.arange(16).reshape(4, 4) * 60, "rccc"))
    png, meta = encode_processed(img, depth)
    arr, d = decode_png(png)
    assert d == depth and arr.shape == (4, 4, 2)
    np.testing.assert_array_equal(arr, np.rint(img.data.transpose(1, 2, 0) * (2**depth - 1)))
    assert b"pipeline_tag=demosaic-bilinear" in meta and b"channels=C,R" in meta
