import numpy as np
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from emohrnet import plotting


@given(arrays(np.float64, (5, 7), elements=st.floats(-1e6, 1e6)))
def test_to_gray_range_and_zero_set(v):
    g = plotting.to_gray(v)
    assert g.dtype == np.uint8
    if v.max() == v.min():
        assert np.all(g == 0)
    else:
        np.testing.assert_array_equal(g == 0, v == v.min())
        assert g.max() == 255


def test_pgm_round_trip_with_low_bins_at_bottom(tmp_path):
    v = np.arange(12.0).reshape(3, 4)
    plotting.write_pgm(tmp_path / "a.pgm", v)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    img = plotting.read_pgm(tmp_path / "a.pgm")
    np.testing.assert_array_equal(img[::-1], plotting.to_gray(v))


def test_figures_are_written(tmp_path):
    gen = np.random.default_rng(0)
    a = gen.standard_normal((16, 32))
    plotting.plot_preview(a, np.where(a > 1, 0, a), tmp_path / "p.png")
    plotting.plot_history([(1, 0.7, 0.5), (2, 0.4, None), (3, 0.2, 0.75)], tmp_path / "h.png")
    plotting.plot_history([], tmp_path / "empty.png")
    plotting.plot_confusion(np.array([[3, 1], [0, 4]]), ["low", "high"], tmp_path / "c.png", "val")
    for name in ("p", "h", "empty", "c"):
        assert (tmp_path / f"{name}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
