import json

import numpy as np
import pytest

from tirtrack.synthgen import (
    ATTRIBUTES, DISTRACTOR_IOU_MAX, EVAL_PER_MIX, N_TRAIN, SUITE_FRAMES, Occlusion, SceneConfig, SceneError,
    SequenceIOError, _iou, export_sequence, generate, import_sequence, make_suite, split_suite, suite_config,
)


def quiet(**kw):
    base = dict(n_frames=20, pixel_noise=0.0, jitter=0.0)
    base.update(kw)
    return SceneConfig(**base)


@pytest.fixture(scope="module")
def suite():
    return make_suite(0)


class TestGenerate:
    def test_constant_velocity_line(self):
        seq = generate(quiet(start=(20.0, 25.0), velocity=(0.5, -0.25)))
        for t, b in enumerate(seq.gt):
            assert b.cx == pytest.approx(20.0 + 0.5 * t, abs=0.005)
            assert b.cy == pytest.approx(25.0 - 0.25 * t, abs=0.005)

    def test_bit_identical_under_seed(self):
        cfg = SceneConfig(n_frames=10, distractors=2, jitter=0.5, pixel_noise=0.02, seed=7)
        a, b = generate(cfg), generate(cfg)
        assert np.array_equal(a.frames, b.frames) and a.gt == b.gt
        c = generate(SceneConfig(n_frames=10, distractors=2, jitter=0.5, pixel_noise=0.02, seed=8))
        assert not np.array_equal(a.frames, c.frames)

    def test_similarity_one_copies_target_parameters(self):
        cfg = quiet(distractors=3, similarity=1.0, seed=2)
        seq = generate(cfg)
        for sx, sy, peak in seq.distractor_params:
            assert abs(sx - cfg.target_sigma[0]) < 1e-9 and abs(sy - cfg.target_sigma[1]) < 1e-9
            assert abs(peak - cfg.target_peak) < 1e-9

    def test_values_in_unit_range_and_one_box_per_frame(self):
        seq = generate(SceneConfig(n_frames=15, distractors=2, pixel_noise=0.1, drift_amp=0.4, seed=3))
        assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
        assert len(seq.gt) == len(seq.frames) == 15

    def test_target_stays_inside_margin(self):
        seq = generate(SceneConfig(n_frames=40, jitter=0.5, seed=1))
        for b in seq.gt:
            x1, y1, x2, y2 = b.corners()
            assert x1 >= 4.0 - 0.01 and y1 >= 4.0 - 0.01 and x2 <= 63 - 4.0 + 0.01 and y2 <= 63 - 4.0 + 0.01

    def test_leaving_frame_rejected(self):
        with pytest.raises(SceneError):
            generate(quiet(start=(50.0, 32.0), velocity=(1.0, 0.0)))

    def test_out_of_view_window_allows_exit(self):
        seq = generate(quiet(start=(50.0, 32.0), velocity=(1.0, 0.0), n_frames=20, out_of_view=[(3, 20)]))
        assert len(seq) == 20

    def test_gt_bounds_half_peak_level_set(self):
        cfg = quiet(n_frames=6, velocity=(0.7, 0.3), seed=4)
        seq = generate(cfg)
        bg = generate(quiet(n_frames=6, velocity=(0.7, 0.3), seed=4, target_peak=0.0))
        target = seq.frames - bg.frames
        yy, xx = np.mgrid[0:64, 0:64]
        for t, b in enumerate(seq.gt):
            x1, y1, x2, y2 = b.corners()
            hot = target[t] >= 0.5 * cfg.target_peak
            assert hot.any()
            assert np.all((xx[hot] >= x1) & (xx[hot] <= x2) & (yy[hot] >= y1) & (yy[hot] <= y2))

    def test_distractors_keep_clear_of_target(self):
        seq = generate(quiet(n_frames=30, distractors=3, similarity=0.9, seed=5))
        assert seq.n_distractors == 3 and len(seq.distractor_params) == 3

    def test_distractor_placement_cap(self):
        with pytest.raises(SceneError):
            generate(quiet(height=24, width=24, start=(12.0, 12.0), velocity=(0.0, 0.0),
                           target_sigma=(3.0, 3.0), similarity=1.0, distractors=1))

    def test_occluder_overwrites_target(self):
        occ = Occlusion(2, 4, (24.0, 24.0, 40.0, 40.0))
        seq = generate(quiet(start=(32.0, 32.0), velocity=(0.0, 0.0), occlusions=[occ]))
        assert seq.frames[2, 32, 32] == pytest.approx(0.08)
        assert seq.frames[4, 32, 32] > 0.5
        assert seq.attributes == {"OCC"}

    @pytest.mark.parametrize("kwargs", [dict(similarity=1.5), dict(n_frames=0), dict(target_sigma=(0.0, 1.0))])
    def test_invalid_config(self, kwargs):
        with pytest.raises(SceneError):
            SceneConfig(**kwargs)


class TestSuite:
    def test_size_and_split(self, suite):
        assert len(suite) == 68
        ev, tr = split_suite(suite)
        assert len(ev) == 4 * EVAL_PER_MIX == 48 and len(tr) == N_TRAIN == 20
        assert all(len(s) == SUITE_FRAMES for s in suite)

    def test_eval_sequences_tagged(self, suite):
        ev, tr = split_suite(suite)
        assert all(len(s.attributes) >= 1 for s in ev)
        assert all(s.attributes == set() for s in tr)
        for kind in ATTRIBUTES:
            assert sum(kind in s.attributes for s in ev) == EVAL_PER_MIX

    def test_di_has_at_least_two_distractors(self, suite):
        assert all(s.n_distractors >= 2 for s in suite if "DI" in s.attributes)

    def test_suite_configs_deterministic(self):
        assert suite_config(3, "DI", 5) == suite_config(3, "DI", 5)
        assert suite_config(3, "DI", 5) != suite_config(4, "DI", 5)


class TestDiskFormat:
    def test_round_trip(self, tmp_path):
        seq = generate(SceneConfig(n_frames=5, distractors=2, pixel_noise=0.02, seed=9), name="demo")
        d = export_sequence(seq, tmp_path / "demo")
        back = import_sequence(d)
        assert back.gt == seq.gt and back.attributes == seq.attributes and back.name == "demo"
        assert np.abs(back.frames - seq.frames).max() <= 1 / 255 + 1e-12
        assert (d / "frame_0000.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
        assert json.loads((d / "meta.json").read_text())["attributes"] == ["DI"]
        first = (d / "groundtruth.txt").read_text().splitlines()[0]
        assert all(len(v.split(".")[1]) == 2 for v in first.split(","))

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(SequenceIOError):
            import_sequence(tmp_path)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(SequenceIOError):
            import_sequence(tmp_path / "nope")

    def test_corrupt_frame_rejected(self, tmp_path):
        d = export_sequence(generate(quiet(n_frames=2)), tmp_path / "s")
        (d / "frame_0001.pgm").write_bytes(b"P5\n64 64\n255\nshort")
        with pytest.raises(SequenceIOError):
            import_sequence(d)

    def test_frame_count_mismatch_rejected(self, tmp_path):
        d = export_sequence(generate(quiet(n_frames=3)), tmp_path / "s")
        (d / "frame_0002.pgm").unlink()
        with pytest.raises(SequenceIOError):
            import_sequence(d)

    def test_bad_box_line_rejected(self, tmp_path):
        d = export_sequence(generate(quiet(n_frames=2)), tmp_path / "s")
        (d / "groundtruth.txt").write_text("1,2,3\n4,5,6,7\n")
        with pytest.raises(SequenceIOError):
            import_sequence(d)


def test_iou_cap_constant():
    assert DISTRACTOR_IOU_MAX == 0.3
