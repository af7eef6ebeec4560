import struct

import numpy as np
import pytest

from latentscene import dataio, scenes
from latentscene.errors import ConfigError, DataError, UsageError


@pytest.fixture
def records():
    base = scenes.SceneConfig(resolution=32, sequence_length=12, seed=5)
    return dataio.sequences_to_records(scenes.generate_dataset(base, 4, seed=5))


class TestDatasetContainer:
    def test_roundtrip_preserves_content(self, records, tmp_path):
        path = tmp_path / "d.lsds"
        dataio.save_dataset(path, records)
        loaded = dataio.load_dataset(path)
        assert loaded.resolution == 32
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded.sequences):
            assert np.array_equal(a.rgb, b.rgb)
            assert np.array_equal(a.car, b.car)
            assert np.array_equal(a.lane, b.lane)
            assert a.condition == b.condition

    def test_write_read_write_is_byte_identical(self, records, tmp_path):
        first = tmp_path / "a.lsds"
        second = tmp_path / "b.lsds"
        dataio.save_dataset(first, records)
        dataio.save_dataset(second, dataio.load_dataset(first).sequences)
        assert first.read_bytes() == second.read_bytes()

    def test_header_layout_is_little_endian(self, records, tmp_path):
        path = tmp_path / "d.lsds"
        dataio.save_dataset(path, records)
        raw = path.read_bytes()
        assert raw[:4] == b"LSDS"
        version, resolution, seq_count, frames = struct.unpack("<IIII", raw[4:20])
        assert (version, resolution, seq_count) == (1, 32, 4)
        assert frames == sum(len(r) for r in records)
        first_offset, first_len = struct.unpack("<QI", raw[20:32])
        assert first_offset == 20 + 12 * 4
        assert first_len == 12

    def test_bad_magic_rejected(self, records, tmp_path):
        path = tmp_path / "d.lsds"
        dataio.save_dataset(path, records)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            dataio.load_dataset(path)

    def test_truncation_rejected(self, records, tmp_path):
        path = tmp_path / "d.lsds"
        dataio.save_dataset(path, records)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(DataError):
            dataio.load_dataset(path)

    def test_non_binary_masks_rejected(self, records, tmp_path):
        records[0].car[0, 0, 0] = 7
        with pytest.raises(DataError):
            dataio.save_dataset(tmp_path / "d.lsds", records)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            dataio.save_dataset(tmp_path / "d.lsds", [])


class TestLatentContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        trajectories = [rng.normal(size=(12, 8)).astype(np.float32)
                        for _ in range(3)]
        path = tmp_path / "z.lslt"
        dataio.save_latents(path, 8, 2, 2, trajectories)
        widths, loaded = dataio.load_latents(path)
        assert widths == (8, 2, 2)
        for a, b in zip(trajectories, loaded):
            assert np.array_equal(a, b)

    def test_rewrite_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        trajectories = [rng.normal(size=(5, 4)).astype(np.float32)]
        first = tmp_path / "a.lslt"
        second = tmp_path / "b.lslt"
        dataio.save_latents(first, 4, 1, 1, trajectories)
        widths, loaded = dataio.load_latents(first)
        dataio.save_latents(second, *widths, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_short_trajectory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            dataio.save_latents(tmp_path / "z.lslt", 4, 1, 1,
                                [np.zeros((2, 4), np.float32)])

    def test_width_mismatch_rejected(self, tmp_path):
        with pytest.raises(DataError):
            dataio.save_latents(tmp_path / "z.lslt", 4, 1, 1,
                                [np.zeros((5, 3), np.float32)])


class TestCheckpointContainer:
    @pytest.fixture
    def state(self):
        rng = np.random.default_rng(2)
        params = {"enc.w": rng.normal(size=(3, 4)).astype(np.float32),
                  "enc.b": np.zeros(4, np.float32),
                  "norm.mean": np.ones(4, np.float32)}
        moments = {k: (np.full_like(v, 0.25), np.full_like(v, 0.5))
                   for k, v in params.items() if k != "norm.mean"}
        return params, (11, moments)

    def test_roundtrip_and_byte_identity(self, state, tmp_path):
        params, opt = state
        digest = dataio.config_digest("arch-v1")
        first = tmp_path / "a.lsck"
        second = tmp_path / "b.lsck"
        dataio.save_checkpoint(first, "net3", digest, params, 7, 123, opt)
        loaded = dataio.load_checkpoint(first, expected_digest=digest)
        assert loaded["kind"] == "net3"
        assert loaded["epoch"] == 7
        assert loaded["batch_counter"] == 123
        assert loaded["opt_state"][0] == 11
        assert "norm.mean" not in loaded["opt_state"][1]
        for name, value in params.items():
            assert np.array_equal(loaded["params"][name], value)
        dataio.save_checkpoint(second, loaded["kind"], loaded["digest"],
                               loaded["params"], loaded["epoch"],
                               loaded["batch_counter"], loaded["opt_state"])
        assert first.read_bytes() == second.read_bytes()

    def test_digest_mismatch_rejected(self, state, tmp_path):
        params, opt = state
        path = tmp_path / "a.lsck"
        dataio.save_checkpoint(path, "net2", dataio.config_digest("arch-v1"),
                               params, 1, 1, opt)
        with pytest.raises(DataError):
            dataio.load_checkpoint(path,
                                   expected_digest=dataio.config_digest("arch-v2"))

    def test_trailing_bytes_rejected(self, state, tmp_path):
        params, opt = state
        path = tmp_path / "a.lsck"
        dataio.save_checkpoint(path, "net2", dataio.config_digest("x"), params,
                               1, 1, opt)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataError):
            dataio.load_checkpoint(path)

    def test_unknown_kind_rejected(self, state, tmp_path):
        params, opt = state
        with pytest.raises(UsageError):
            dataio.save_checkpoint(tmp_path / "a.lsck", "net9",
                                   dataio.config_digest("x"), params, 1, 1, opt)


class TestSplit:
    def test_paper_fractions(self):
        train_idx, val_idx, test_idx = dataio.split(100, (0.70, 0.25, 0.05), 3)
        assert (len(train_idx), len(val_idx), len(test_idx)) == (70, 25, 5)

    def test_all_train(self):
        train_idx, val_idx, test_idx = dataio.split(5, (1.0, 0.0, 0.0), 1)
        assert len(train_idx) == 5 and len(val_idx) == 0 and len(test_idx) == 0

    def test_deterministic_in_seed(self):
        a = dataio.split(40, (0.7, 0.2, 0.1), 9)
        b = dataio.split(40, (0.7, 0.2, 0.1), 9)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        c = dataio.split(40, (0.7, 0.2, 0.1), 10)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_disjoint_and_exhaustive(self):
        parts = dataio.split(33, (0.6, 0.3, 0.1), 4)
        merged = sorted(np.concatenate(parts).tolist())
        assert merged == list(range(33))

    def test_every_nonzero_partition_gets_a_sequence(self):
        parts = dataio.split(3, (0.9, 0.05, 0.05), 0)
        assert all(len(p) >= 1 for p in parts)

    def test_fraction_sum_validated(self):
        with pytest.raises(ConfigError):
            dataio.split(10, (0.5, 0.2, 0.2), 0)

    def test_too_few_sequences_rejected(self):
        with pytest.raises(UsageError):
            dataio.split(2, (0.5, 0.3, 0.2), 0)


class TestWindows:
    def test_exact_fit_gives_one_window(self):
        assert len(dataio.windows_for([12], [0], 12, 1)) == 1

    def test_stride_window_count(self):
        windows = dataio.windows_for([20], [0], 12, 4)
        assert [s for _, s in windows] == [0, 4, 8]

    def test_windows_never_cross_boundaries(self):
        windows = dataio.windows_for([12, 20], [0, 1], 3, 1)
        for seq, start in windows:
            assert start + 3 <= (12 if seq == 0 else 20)

    def test_window_too_large_rejected(self):
        with pytest.raises(ConfigError):
            dataio.windows_for([12, 8], [0, 1], 12, 1)

    def test_net3_triples(self):
        windows = dataio.windows_for([12], [0], 3, 1)
        assert len(windows) == 10

    def test_shuffle_deterministic_per_epoch(self):
        windows = dataio.windows_for([12, 12], [0, 1], 3, 1)
        a = dataio.shuffle_windows(windows, 5, 0)
        b = dataio.shuffle_windows(windows, 5, 0)
        c = dataio.shuffle_windows(windows, 5, 1)
        assert a == b
        assert a != c
        assert sorted(a) == sorted(windows)
