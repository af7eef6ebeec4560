import numpy as np
import pytest

from latentscene import scenes
from latentscene.errors import ConfigError, UsageError


def make_config(**overrides):
    return scenes.SceneConfig(**{"resolution": 64, "seed": 5, **overrides})


class TestGenerateSequence:
    def test_no_other_cars_means_empty_car_masks(self):
        seq = scenes.generate_sequence(make_config(max_other_cars=0))
        assert all(int(m.sum()) == 0 for m in seq.car_masks)

    def test_same_seed_is_bit_identical(self):
        a = scenes.generate_sequence(make_config(seed=99))
        b = scenes.generate_sequence(make_config(seed=99))
        for fa, fb in zip(a.frames, b.frames):
            assert fa.tobytes() == fb.tobytes()
        for ma, mb in zip(a.car_masks, b.car_masks):
            assert np.array_equal(ma, mb)

    def test_different_seeds_differ(self):
        a = scenes.generate_sequence(make_config(seed=1, max_other_cars=3))
        b = scenes.generate_sequence(make_config(seed=2, max_other_cars=3))
        assert any(not np.array_equal(x, y) for x, y in zip(a.frames, b.frames))

    def test_dash_phase_periodicity(self):
        # ego 4 px/frame against a 16 px period: the pattern repeats every
        # 4 frames, so lane masks must match exactly.
        seq = scenes.generate_sequence(make_config(ego_speed=4, dash_period=16,
                                                   sequence_length=16))
        for t in range(len(seq) - 4):
            assert np.array_equal(seq.lane_masks[t], seq.lane_masks[t + 4])

    def test_lane_masks_move_between_frames(self):
        seq = scenes.generate_sequence(make_config(ego_speed=4, dash_period=16))
        assert not np.array_equal(seq.lane_masks[0], seq.lane_masks[1])

    def test_rerender_from_kinematic_log_is_bit_exact(self):
        config = make_config(max_other_cars=3, seed=21)
        seq = scenes.generate_sequence(config)
        for t in (0, 3, len(seq) - 1):
            rgb, car, lane = scenes.render_frame(config, seq.kinematics[t])
            assert rgb.tobytes() == seq.frames[t].tobytes()
            assert np.array_equal(car, seq.car_masks[t])
            assert np.array_equal(lane, seq.lane_masks[t])

    def test_masks_are_strictly_binary(self):
        seq = scenes.generate_sequence(make_config(max_other_cars=3, seed=8))
        for mask in seq.car_masks + seq.lane_masks:
            assert mask.dtype == np.uint8
            assert set(np.unique(mask)).issubset({0, 1})

    def test_frames_are_unit_range_float32(self):
        seq = scenes.generate_sequence(make_config(seed=3))
        for frame in seq.frames:
            assert frame.dtype == np.float32
            assert frame.shape == (3, 64, 64)
            assert frame.min() >= 0.0 and frame.max() <= 1.0

    @pytest.mark.parametrize("resolution", [32, 64])
    @pytest.mark.parametrize("condition", scenes.CONDITIONS)
    def test_class_imbalance_caps(self, resolution, condition):
        ratios_car, ratios_lane = [], []
        for seed in range(4):
            seq = scenes.generate_sequence(make_config(
                resolution=resolution, condition=condition, seed=seed))
            ratios_car.append(np.mean([m.mean() for m in seq.car_masks]))
            ratios_lane.append(np.mean([m.mean() for m in seq.lane_masks]))
        assert np.mean(ratios_car) < 0.25
        assert np.mean(ratios_lane) < 0.08

    def test_dark_condition_lowers_luminance(self):
        sunny = scenes.generate_sequence(make_config(condition="sunny", seed=4))
        dark = scenes.generate_sequence(make_config(condition="dark", seed=4))
        assert dark.frames[0].mean() < 0.5 * sunny.frames[0].mean()

    def test_sequence_length_minimum(self):
        with pytest.raises(ConfigError):
            make_config(sequence_length=11).validate()

    def test_bad_resolution_rejected(self):
        with pytest.raises(ConfigError):
            make_config(resolution=48).validate()

    def test_bad_condition_rejected(self):
        with pytest.raises(ConfigError):
            make_config(condition="foggy").validate()


class TestGenerateDataset:
    def test_conditions_cycle(self):
        base = make_config(resolution=32, sequence_length=12)
        seqs = scenes.generate_dataset(base, 8, seed=1)
        assert [s.condition for s in seqs] == list(scenes.CONDITIONS) * 2

    def test_deterministic(self):
        base = make_config(resolution=32, sequence_length=12)
        a = scenes.generate_dataset(base, 4, seed=9)
        b = scenes.generate_dataset(base, 4, seed=9)
        for sa, sb in zip(a, b):
            assert sa.frames[0].tobytes() == sb.frames[0].tobytes()

    def test_sequences_differ_across_indices(self):
        base = make_config(resolution=32, sequence_length=12, max_other_cars=3)
        seqs = scenes.generate_dataset(base, 8, conditions=("sunny",), seed=2)
        frames = {s.frames[0].tobytes() for s in seqs}
        assert len(frames) > 1


class TestClassPixelRatio:
    def test_all_true_is_one(self):
        masks = [np.ones((4, 4), dtype=np.uint8)]
        assert scenes.class_pixel_ratio(masks, 4.0) == 1.0

    def test_half_true_smoothed(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[:2] = 1
        value = scenes.class_pixel_ratio([mask], 4.0)
        assert abs(value - 0.5 ** 0.25) < 1e-12
        assert abs(value - 0.8409) < 1e-4

    def test_all_false_is_zero(self):
        assert scenes.class_pixel_ratio([np.zeros((4, 4), np.uint8)], 4.0) == 0.0

    def test_empty_dataset_rejected(self):
        with pytest.raises(UsageError):
            scenes.class_pixel_ratio([], 4.0)

    def test_nonpositive_smoothing_rejected(self):
        with pytest.raises(ConfigError):
            scenes.class_pixel_ratio([np.ones((2, 2))], 0.0)
