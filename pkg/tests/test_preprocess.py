import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgcaware.preprocess import (PreprocessConfig, StructureTensorField, Trace, TracingError,
                                 coherent_tensor_image, extract_retina, extract_retina_full, fill_and_smooth,
                                 gradients, otsu_threshold, select_coherent_component, structure_tensor,
                                 trace_boundaries)
from rgcaware.scan import Scan, SynthConfig, generate_synthetic


def band_image(top=50, bottom=199, h=256, w=64):
    img = np.zeros((h, w))
    img[top:bottom + 1] = 1.0
    return img


def test_constant_image_has_zero_tensor():
    st_ = structure_tensor(Scan(np.full((20, 30), 0.4)))
    for c in st_.components().values():
        assert np.all(c == 0)


def test_vertical_edge_only_excites_sxx():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0
    s = structure_tensor(Scan(img))
    assert np.all(s.syy == 0) and np.all(s.sxy == 0)
    assert s.sxx[:, 7:9].min() > 0
    assert select_coherent_component(s) == "sxx"


def test_gradients_are_central_differences_with_replicated_border(rng):
    img = rng.random((6, 7))
    g = gradients(img)
    assert np.isclose(g.gx[2, 3], 0.5 * (img[2, 4] - img[2, 2]))
    assert np.isclose(g.gx[2, 0], 0.5 * (img[2, 1] - img[2, 0]))
    assert np.isclose(g.gy[5, 1], 0.5 * (img[5, 1] - img[4, 1]))


def test_transpose_swaps_sxx_and_syy(rng):
    img = rng.random((24, 24))
    a = structure_tensor(Scan(img))
    b = structure_tensor(Scan(img.T.copy()))
    np.testing.assert_allclose(b.sxx, a.syy.T, atol=1e-14)
    np.testing.assert_allclose(b.syy, a.sxx.T, atol=1e-14)
    np.testing.assert_allclose(b.sxy, a.sxy.T, atol=1e-14)


def test_tensor_components_nonnegative_diagonal(rng):
    s = structure_tensor(Scan(rng.random((20, 20))))
    assert s.sxx.min() >= 0 and s.syy.min() >= 0


def test_coherent_image_picks_dominant_and_rescales():
    sxx = np.arange(12.0).reshape(3, 4)
    st_ = StructureTensorField(sxx, np.zeros((3, 4)), np.full((3, 4), 0.1))
    out = coherent_tensor_image(st_)
    np.testing.assert_allclose(out.pixels, np.round(255 * sxx / 11) / 255)
    z = np.zeros((3, 4))
    assert np.all(coherent_tensor_image(StructureTensorField(z, z, z)).pixels == 0)


def test_coherent_response_peaks_at_ilm():
    cfg = SynthConfig(ilm_amplitude_px=6, ilm_period_px=180)
    scan, _, b, _ = generate_synthetic(cfg)
    t = coherent_tensor_image(structure_tensor(scan)).pixels
    for c in range(scan.width_px):
        upper = int(b.gcl[c])
        assert abs(np.argmax(t[:upper, c]) - b.ilm[c]) <= 3


def test_otsu_separates_two_levels():
    v = np.r_[np.full(100, 0.2), np.full(100, 0.8)]
    t = otsu_threshold(v)
    assert 0.2 < t <= 0.8


def test_band_trace_is_exact():
    ilm, cho = trace_boundaries(band_image())
    assert ilm.valid.all() and cho.valid.all()
    assert np.all(ilm.rows == 50) and np.all(cho.rows == 199)


def test_outlier_above_band_is_rejected():
    img = band_image()
    img[0, 30] = 1.0  # 50 px above the top edge
    ilm, _ = trace_boundaries(img, PreprocessConfig(tau_px=20))
    assert not ilm.valid[30]
    assert ilm.valid[29] and ilm.valid[31]


def test_first_column_seeds_unconditionally():
    img = band_image()
    img[:, 0] = 0
    img[5, 0] = 1.0
    ilm, _ = trace_boundaries(img)
    assert ilm.valid[0] and ilm.rows[0] == 5
    # the reference stays at row 5, so the band at row 50 is rejected everywhere
    assert not ilm.valid[1:].any()


def test_blank_columns_are_invalid_not_errors():
    img = band_image()
    img[:, 10] = 0
    ilm, cho = trace_boundaries(img)
    assert not ilm.valid[10] and not cho.valid[10]


def test_fill_midpoint_and_linear_gap():
    t = Trace(np.array([10.0, np.nan, 14.0]), np.array([True, False, True]))
    assert fill_and_smooth(t, 1)[1] == 12.0
    t = Trace(np.array([10.0, 0, 0, 0, 18.0]), np.array([True, False, False, False, True]))
    np.testing.assert_array_equal(fill_and_smooth(t, 1), [10, 12, 14, 16, 18])
    const = Trace(np.full(9, 7.0), np.ones(9, bool))
    np.testing.assert_array_equal(fill_and_smooth(const, 5), np.full(9, 7.0))
    edges = Trace(np.array([0, 5.0, 6.0, 0]), np.array([False, True, True, False]))
    np.testing.assert_array_equal(fill_and_smooth(edges, 1), [5, 5, 6, 6])


def test_fill_needs_two_valid_columns():
    with pytest.raises(TracingError):
        fill_and_smooth(Trace(np.array([1.0, 2.0]), np.array([True, False])))


def test_config_validation():
    for bad in (PreprocessConfig(median_window=4), PreprocessConfig(tau_px=0),
                PreprocessConfig(smoothing_sigma=0), PreprocessConfig(binarize_method="magic")):
        with pytest.raises(ValueError):
            bad.validate()


def test_extract_band_scan():
    scan = Scan(band_image())
    out, mask = extract_retina(scan)
    assert np.all(mask[50:200] == 1) and mask[:50].sum() == 0 and mask[200:].sum() == 0
    assert np.all(out.pixels[mask == 0] == 0)


def _truth_retina(b, h):
    rows = np.arange(h)[:, None]
    return (rows >= b.ilm) & (rows <= b.choroid)


@pytest.mark.parametrize("seed", range(5))
def test_retains_ground_truth_retina(seed):
    r = np.random.default_rng(seed)
    cfg = SynthConfig(ilm_amplitude_px=r.uniform(0, 8), ilm_period_px=r.uniform(120, 400),
                      ilm_offset_px=r.uniform(14, 22), rnfl_thickness_px=r.uniform(20, 40),
                      gcip_thickness_px=r.uniform(10, 28), height_px=160)
    scan, _, b, _ = generate_synthetic(cfg)
    out, mask = extract_retina(scan)
    truth = _truth_retina(b, scan.height_px)
    assert mask[truth].mean() >= 0.98
    assert np.all(out.pixels[mask == 0] == 0)
    # column-convex: one contiguous run per column
    d = np.diff(np.vstack([np.zeros((1, mask.shape[1])), mask, np.zeros((1, mask.shape[1]))]).astype(int), axis=0)
    assert np.all((d == 1).sum(axis=0) == 1)


@pytest.mark.parametrize("seed", range(4))
def test_idempotent_on_noiseless_scans(seed):
    r = np.random.default_rng(100 + seed)
    cfg = SynthConfig(ilm_amplitude_px=r.uniform(0, 8), ilm_period_px=r.uniform(120, 400))
    scan, _, _, _ = generate_synthetic(cfg)
    out, m1 = extract_retina(scan)
    _, m2 = extract_retina(out)
    assert np.array_equal(m1, m2)


@given(st.integers(1, 40), st.integers(0, 40), st.integers(0, 2**16))
def test_larger_tau_never_loses_columns_with_isolated_outliers(tau, extra, seed):
    # holds when outlier columns are isolated: an accepted outlier is within
    # tau of the band, so the band column after it is accepted too
    r = np.random.default_rng(seed)
    img = band_image(h=128, top=40, bottom=100, w=48)
    for c in r.choice(np.arange(0, 48, 2), size=6, replace=False):
        img[r.integers(0, 128), c] = 1.0
    a = trace_boundaries(img, PreprocessConfig(tau_px=tau))
    b = trace_boundaries(img, PreprocessConfig(tau_px=tau + extra))
    assert b[0].valid.sum() >= a[0].valid.sum() and b[1].valid.sum() >= a[1].valid.sum()


def test_larger_tau_can_lose_columns_with_adjacent_outliers():
    # two outliers in a row walk the last-accepted reference away from the band
    img = band_image(top=60, w=48)
    img[35, 10] = img[10, 11] = 1.0
    narrow = trace_boundaries(img, PreprocessConfig(tau_px=20))[0]
    wide = trace_boundaries(img, PreprocessConfig(tau_px=25))[0]
    assert narrow.valid.sum() == 46
    assert wide.valid.sum() == 12


def test_extraction_reports_component_and_boundaries():
    scan, _, _, _ = generate_synthetic(SynthConfig())
    ex = extract_retina_full(scan)
    assert ex.component == "syy"
    b = ex.boundaries()
    assert b.valid.all() and np.all(b.ilm <= b.choroid)
