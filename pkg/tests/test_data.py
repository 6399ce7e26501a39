"""Dataset I/O and synthetic generator tests."""

import numpy as np
import numpy.testing as npt
import pytest

from vtdetect.data import (
    ImagePair,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    make_shift_pair,
    read_annotation,
    read_pgm,
    write_annotation,
    write_dataset,
    write_pgm,
)
from vtdetect.errors import ConfigError, DatasetError
from vtdetect.labels import BoxAnnotation, boxes_to_mask


class TestPGM:
    def test_round_trip_exact_for_quantized_values(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.uniform(0, 1, size=(9, 13)) * 255) / 255
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        npt.assert_array_equal(read_pgm(path), img)

    def test_write_read_deterministic_bytes(self, tmp_path):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
        write_pgm(a, img)
        write_pgm(b, img)
        assert a.read_bytes() == b.read_bytes()

    def test_header_comment_tolerated(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x7f\x80\xff")
        img = read_pgm(path)
        npt.assert_allclose(img, np.array([[0, 127], [128, 255]]) / 255.0)

    def test_malformed_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(DatasetError, match="bad.pgm"):
            read_pgm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DatasetError, match="short.pgm"):
            read_pgm(path)


class TestAnnotationsIO:
    def test_round_trip(self, tmp_path):
        ann = BoxAnnotation("a", [(2, 3, 4, 5), (1.5, 2.25, 3.0, 4.0)])
        path = tmp_path / "a.txt"
        write_annotation(path, ann)
        back = read_annotation(path, "a")
        assert back.boxes == [(2.0, 3.0, 4.0, 5.0), (1.5, 2.25, 3.0, 4.0)]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.txt"
        write_annotation(path, BoxAnnotation("e", []))
        assert read_annotation(path, "e").boxes == []

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(DatasetError, match="m.txt:1"):
            read_annotation(path, "m")


class TestDatasetTree:
    def test_empty_directory(self, tmp_path):
        assert load_dataset(tmp_path) == []

    def test_single_labeled_pair(self, tmp_path):
        rng = np.random.default_rng(1)
        img = np.round(rng.uniform(0, 1, size=(8, 8)) * 255) / 255
        pair = ImagePair("p0", img, img.copy(), BoxAnnotation("p0", [(1, 1, 3, 3)]))
        write_dataset([pair], tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 1
        assert loaded[0].labeled
        assert loaded[0].annotation.boxes == [(1.0, 1.0, 3.0, 3.0)]

    def test_unpaired_file_rejected(self, tmp_path):
        (tmp_path / "visible").mkdir()
        (tmp_path / "thermal").mkdir()
        write_pgm(tmp_path / "visible" / "only.pgm", np.zeros((4, 4)))
        with pytest.raises(DatasetError, match="only.pgm"):
            load_dataset(tmp_path)

    def test_shape_mismatch_rejected(self, tmp_path):
        (tmp_path / "visible").mkdir()
        (tmp_path / "thermal").mkdir()
        write_pgm(tmp_path / "visible" / "a.pgm", np.zeros((4, 4)))
        write_pgm(tmp_path / "thermal" / "a.pgm", np.zeros((4, 6)))
        with pytest.raises(DatasetError, match="a.pgm"):
            load_dataset(tmp_path)

    def test_tags_loaded(self, tmp_path):
        img = np.zeros((8, 8))
        write_dataset(
            [ImagePair("d0", img, img, tag="day"), ImagePair("n0", img, img, tag="night")],
            tmp_path,
        )
        loaded = load_dataset(tmp_path)
        assert {p.image_id: p.tag for p in loaded} == {"d0": "day", "n0": "night"}

    def test_generated_round_trips_bit_exactly(self, tmp_path):
        pairs = generate_synthetic(SynthConfig(seed=5), 4)
        write_dataset(pairs, tmp_path)
        loaded = load_dataset(tmp_path)
        assert [p.image_id for p in loaded] == [p.image_id for p in pairs]
        for orig, back in zip(pairs, loaded):
            npt.assert_array_equal(orig.visible, back.visible)
            npt.assert_array_equal(orig.thermal, back.thermal)
            assert orig.annotation.boxes == back.annotation.boxes


class TestImagePairValidation:
    def test_misaligned_rejected(self):
        with pytest.raises(DatasetError, match="misaligned"):
            ImagePair("x", np.zeros((4, 4)), np.zeros((4, 5)))

    def test_out_of_range_rejected(self):
        with pytest.raises(DatasetError, match="outside"):
            ImagePair("x", np.full((4, 4), 1.5), np.zeros((4, 4)))


class TestGenerator:
    def test_deterministic(self):
        a = generate_synthetic(SynthConfig(seed=9), 6)
        b = generate_synthetic(SynthConfig(seed=9), 6)
        for pa, pb in zip(a, b):
            npt.assert_array_equal(pa.visible, pb.visible)
            npt.assert_array_equal(pa.thermal, pb.thermal)
            assert pa.annotation.boxes == pb.annotation.boxes

    def test_zero_count_range_gives_empty_annotations(self):
        pairs = generate_synthetic(SynthConfig(count_range=(0, 0), seed=2), 3)
        assert all(p.annotation.boxes == [] for p in pairs)

    def test_thermal_contrast_statistic(self):
        # With thermal contrast 0.5 and noise 0.02, pixels inside boxes must
        # average at least 0.3 above the outside pixels on the thermal channel.
        cfg = SynthConfig(contrast_thermal=0.5, noise_thermal=0.02, seed=3)
        pairs = generate_synthetic(cfg, 20)
        inside_vals, outside_vals = [], []
        for p in pairs:
            h, w = p.shape
            mask = boxes_to_mask(p.annotation, h, w, h, w)
            if mask.any():
                inside_vals.append(p.thermal[mask])
                outside_vals.append(p.thermal[~mask])
        inside = np.concatenate(inside_vals).mean()
        outside = np.concatenate(outside_vals).mean()
        assert inside - outside >= 0.3

    def test_boxes_tightly_bound_blobs(self):
        pairs = generate_synthetic(SynthConfig(seed=4, noise_visible=0.0, noise_thermal=0.0,
                                               texture_amplitude=0.0), 10)
        for p in pairs:
            bg = SynthConfig().background_level
            lit = p.thermal > bg + 0.02
            for x, y, w, h in p.annotation.boxes:
                assert 0 <= x and 0 <= y and x + w <= p.shape[1] and y + h <= p.shape[0]
            box_mask = boxes_to_mask(p.annotation, *p.shape, *p.shape)
            assert not (lit & ~box_mask).any()  # nothing lit outside all boxes

    def test_every_box_detectable_in_thermal(self):
        cfg = SynthConfig(seed=6, dropout_thermal=0.5)  # even dropped blobs stay faintly warm
        for p in generate_synthetic(cfg, 15):
            for x, y, w, h in p.annotation.boxes:
                ys = slice(max(0, int(y)), min(p.shape[0], int(np.ceil(y + h))))
                xs = slice(max(0, int(x)), min(p.shape[1], int(np.ceil(x + w))))
                inside = p.thermal[ys, xs]
                y0, y1 = max(0, ys.start - 3), min(p.shape[0], ys.stop + 3)
                x0, x1 = max(0, xs.start - 3), min(p.shape[1], xs.stop + 3)
                local = p.thermal[y0:y1, x0:x1].mean()
                assert inside.max() > local

    def test_values_quantized_to_255ths(self):
        pairs = generate_synthetic(SynthConfig(seed=7), 2)
        for p in pairs:
            for img in (p.visible, p.thermal):
                npt.assert_array_equal(img, np.round(img * 255) / 255)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(count_range=(3, 1))
        with pytest.raises(ConfigError):
            SynthConfig(size_range=(0.0, 4.0))
        with pytest.raises(ConfigError):
            SynthConfig(dropout_visible=1.5)
        with pytest.raises(ConfigError):
            SynthConfig(noise_visible=-0.1)
        with pytest.raises(ConfigError):
            SynthConfig(size_range=(20.0, 40.0))


class TestShiftPair:
    def test_neutral_knobs_identity(self):
        base = SynthConfig(seed=11)
        src, tgt = make_shift_pair(base, brightness=0.0, contrast=1.0, noise=1.0,
                                   dropout_visible=0.0)
        assert src == tgt == base

    def test_default_shift_lowers_visible_mean(self):
        base = SynthConfig(seed=12)
        src_cfg, tgt_cfg = make_shift_pair(base)
        src = generate_synthetic(src_cfg, 30)
        tgt = generate_synthetic(tgt_cfg, 30)
        src_mean = np.mean([p.visible.mean() for p in src])
        tgt_mean = np.mean([p.visible.mean() for p in tgt])
        assert abs((src_mean - tgt_mean) - 0.15) <= 0.02

    def test_source_config_untouched(self):
        base = SynthConfig(seed=13)
        src, tgt = make_shift_pair(base)
        assert src == base
        assert tgt.brightness_offset == pytest.approx(-0.15)
        assert tgt.contrast_scale == pytest.approx(0.8)
        assert tgt.noise_multiplier == pytest.approx(2.0)
        assert tgt.dropout_visible == pytest.approx(0.3)
        assert tgt.seed == base.seed
