import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgcaware.profiles import boundaries_from_mask
from rgcaware.scan import (GCIPL, RNFL, BoundarySet, FormatError, GradeLabel, LayerMask, Scan, SynthConfig,
                           generate_synthetic, grade_from_rnfl, ilm_waveform, read_boundaries, read_mask,
                           read_metadata, read_scan, write_boundaries, write_mask, write_scan)


def test_scan_validates_range_and_scale():
    with pytest.raises(ValueError):
        Scan(np.full((3, 3), 1.2))
    with pytest.raises(ValueError):
        Scan(np.zeros((3, 3)), axial_scale_um_per_px=0.0)
    s = Scan(np.zeros((4, 7)))
    assert (s.height_px, s.width_px) == (4, 7)
    with pytest.raises(ValueError):
        s.pixels[0, 0] = 1.0  # read-only


def test_layer_mask_ordering_enforced():
    lab = np.zeros((6, 2), dtype=np.uint8)
    lab[1, 0], lab[3, 0] = RNFL, GCIPL
    LayerMask(lab)
    lab[4, 1], lab[2, 1] = RNFL, GCIPL  # GC-IPL above RNFL
    with pytest.raises(ValueError):
        LayerMask(lab)
    with pytest.raises(ValueError):
        LayerMask(np.full((2, 2), 3, dtype=np.uint8))


def test_boundary_set_ordering():
    with pytest.raises(ValueError):
        BoundarySet(np.array([5.0]), np.array([4.0]), np.array([6.0]), np.array([7.0]), np.array([True]))
    # an invalid column may hold anything
    BoundarySet(np.array([5.0]), np.array([4.0]), np.array([6.0]), np.array([7.0]), np.array([False]))


def test_grade_label_parse_and_ordinal():
    assert GradeLabel.parse("EarlyGlaucoma") is GradeLabel.EARLY
    assert GradeLabel.parse(2) is GradeLabel.ADVANCED
    assert [g.ordinal for g in GradeLabel] == [0, 1, 2]
    assert not GradeLabel.HEALTHY.is_glaucoma and GradeLabel.EARLY.is_glaucoma
    with pytest.raises(ValueError):
        GradeLabel.parse("sort of glaucoma")


def test_grade_from_rnfl_uses_cohort_midpoints():
    assert grade_from_rnfl(69.46) is GradeLabel.ADVANCED
    assert grade_from_rnfl(93.50) is GradeLabel.EARLY
    assert grade_from_rnfl(81.48) is GradeLabel.EARLY
    assert grade_from_rnfl(120.0) is GradeLabel.HEALTHY


def test_flat_bands_have_exact_pixel_counts():
    cfg = SynthConfig(ilm_offset_px=50, rnfl_thickness_px=40, gcip_thickness_px=30, height_px=200, width_px=64)
    scan, mask, b, _ = generate_synthetic(cfg)
    assert np.all((mask.labels == RNFL).sum(axis=0) == 40)
    assert np.all((mask.labels == GCIPL).sum(axis=0) == 30)
    assert np.all(b.ilm == 50) and np.all(b.gcl == 90) and np.all(b.ipl == 120)
    # bands brighter than the vitreous above them
    assert scan.pixels[60, 0] > scan.pixels[10, 0] and scan.pixels[100, 0] > scan.pixels[10, 0]


def test_generation_is_deterministic():
    cfg = SynthConfig(noise_std=0.05, seed=3, ilm_amplitude_px=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert np.array_equal(a[0].pixels, b[0].pixels) and np.array_equal(a[1].labels, b[1].labels)


def test_sinusoidal_mask_follows_analytic_waveform():
    cfg = SynthConfig(ilm_amplitude_px=10, ilm_period_px=200, ilm_offset_px=30)
    _, mask, _, _ = generate_synthetic(cfg)
    b = boundaries_from_mask(mask)
    assert np.max(np.abs(b.ilm - ilm_waveform(cfg))) <= 1.0


def test_too_thick_is_rejected_with_explanation():
    with pytest.raises(ValueError, match="image has"):
        generate_synthetic(SynthConfig(rnfl_thickness_px=120, height_px=128))


def test_cup_tapers_layers_to_zero():
    cfg = SynthConfig(cup_center=128, cup_width=40)
    _, mask, b, _ = generate_synthetic(cfg)
    assert not b.valid[128]
    assert (mask.labels[:, 128] == 0).all()
    assert b.valid[0]


@given(st.floats(5, 40), st.floats(5, 30), st.floats(0, 8), st.floats(50, 400), st.floats(10, 20),
       st.floats(0, 0.1), st.integers(0, 1000))
def test_synthetic_masks_always_ordered(rnfl, gcip, amp, period, offset, noise, seed):
    cfg = SynthConfig(rnfl_thickness_px=rnfl, gcip_thickness_px=gcip, ilm_amplitude_px=amp,
                      ilm_period_px=period, ilm_offset_px=offset, noise_std=noise, seed=seed, height_px=160)
    scan, mask, b, _ = generate_synthetic(cfg)
    assert scan.pixels.min() >= 0 and scan.pixels.max() <= 1
    assert mask.gcc.sum() == mask.rnfl.sum() + mask.gcip.sum()


def test_scan_io(tmp_path):
    z = np.zeros((5, 9))
    write_scan(Scan(z, 2.6, "z"), tmp_path / "z.png")
    s = read_scan(tmp_path / "z.png")
    assert s.shape == (5, 9) and s.pixels.max() == 0 and s.id == "z"
    scan, _, _, g = generate_synthetic(SynthConfig(axial_scale_um_per_px=3.0, id="a"))
    write_scan(scan, tmp_path / "a.pgm", g)
    back = read_scan(tmp_path / "a.pgm")
    assert back.axial_scale_um_per_px == 3.0
    assert np.max(np.abs(back.pixels - scan.pixels)) <= 0.5 / 255 + 1e-12
    assert read_metadata(tmp_path / "a.pgm")["grade"] is g


def test_orientation_rows_are_depth(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((456, 951), dtype=np.uint8)).save(tmp_path / "afio.png")
    s = read_scan(tmp_path / "afio.png")
    assert (s.height_px, s.width_px) == (456, 951)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_mask_round_trip(h, w, seed):
    import tempfile
    from pathlib import Path
    from rgcaware.augment import enforce_layer_order
    labels = enforce_layer_order(np.random.default_rng(seed).integers(0, 3, size=(h, w)).astype(np.uint8))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.png"
        write_mask(LayerMask(labels), p)
        assert np.array_equal(read_mask(p).labels, labels)


def test_single_label2_pixel_round_trip(tmp_path):
    lab = np.zeros((4, 4), dtype=np.uint8)
    lab[2, 1] = GCIPL
    write_mask(LayerMask(lab), tmp_path / "m.png")
    assert np.array_equal(read_mask(tmp_path / "m.png").labels, lab)


def test_mask_read_errors(tmp_path):
    from PIL import Image
    Image.fromarray(np.full((3, 3), 7, dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(FormatError):
        read_mask(tmp_path / "bad.png")
    Image.fromarray(np.zeros((3, 3), dtype=np.uint8)).save(tmp_path / "ok.png")
    with pytest.raises(FormatError):
        read_mask(tmp_path / "ok.png", Scan(np.zeros((4, 3))))
    (tmp_path / "x.tiff").write_bytes(b"")
    with pytest.raises(FormatError):
        read_scan(tmp_path / "x.tiff")


def test_boundaries_csv_round_trip(tmp_path):
    _, _, b, _ = generate_synthetic(SynthConfig(ilm_amplitude_px=4, cup_center=50, cup_width=10))
    write_boundaries(b, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "col,ilm,gcl,ipl,choroid,valid"
    r = read_boundaries(tmp_path / "b.csv")
    for k in ("ilm", "gcl", "ipl", "choroid", "valid"):
        assert np.array_equal(getattr(r, k), getattr(b, k))


def test_sidecar_rejects_bad_scale(tmp_path):
    write_scan(Scan(np.zeros((2, 2))), tmp_path / "s.png")
    (tmp_path / "s.json").write_text(json.dumps({"axial_scale_um_per_px": -1}))
    with pytest.raises(FormatError):
        read_scan(tmp_path / "s.png")
