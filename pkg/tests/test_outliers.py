import csv

import numpy as np
import pytest

from lowbit.errors import InputError
from lowbit.outliers import (
    ChannelStats,
    accumulate,
    outlier_channels,
    read_dump,
    scan_dump_dir,
    trajectory_report,
    write_dump,
    write_report,
)


def make_stats(batches, site="QKV Input", layer=0):
    stats = ChannelStats(site=site, layer=layer, width=batches[0].shape[1])
    for b in batches:
        accumulate(stats, b)
    return stats


class TestAccumulate:
    def test_streaming_matches_batch(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((257, 16)) * 3 + 0.5
        split = make_stats([data[:100], data[100:140], data[140:]])
        whole = make_stats([data])
        np.testing.assert_allclose(split.mean, whole.mean, rtol=1e-6)
        np.testing.assert_allclose(split.variance, whole.variance, rtol=1e-6)
        np.testing.assert_allclose(split.kurtosis, whole.kurtosis, rtol=1e-6)
        np.testing.assert_allclose(split.mean_abs, whole.mean_abs, rtol=1e-6)

    def test_order_insensitive(self):
        rng = np.random.default_rng(1)
        a, b, c = (rng.standard_normal((40, 8)) for _ in range(3))
        s1 = make_stats([a, b, c])
        s2 = make_stats([c, a, b])
        np.testing.assert_allclose(s1.variance, s2.variance, rtol=1e-6)
        np.testing.assert_allclose(s1.kurtosis, s2.kurtosis, rtol=1e-6)

    def test_permuting_tokens_changes_nothing(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((64, 8))
        perm = rng.permutation(64)
        s1, s2 = make_stats([data]), make_stats([data[perm]])
        np.testing.assert_allclose(s1.mean_abs, s2.mean_abs, rtol=1e-6)
        np.testing.assert_allclose(s1.kurtosis, s2.kurtosis, rtol=1e-6)

    def test_zeros_batch(self):
        stats = make_stats([np.zeros((5, 4))])
        np.testing.assert_array_equal(stats.mean_abs, 0.0)

    def test_constant_channel(self):
        batch = np.zeros((10, 3))
        batch[:, 1] = 7.0
        stats = make_stats([batch])
        assert stats.mean_abs[1] == 7.0
        assert stats.variance[1] == 0.0

    def test_width_mismatch_rejected(self):
        stats = ChannelStats(site="s", layer=0, width=4)
        with pytest.raises(InputError):
            accumulate(stats, np.zeros((3, 5)))

    def test_jensen_inequality(self):
        rng = np.random.default_rng(3)
        stats = make_stats([rng.standard_normal((200, 32)) + 0.3])
        assert (np.abs(stats.mean) <= stats.mean_abs + 1e-6).all()


class TestOutlierRule:
    def test_iid_channels_no_outliers(self):
        rng = np.random.default_rng(4)
        stats = make_stats([rng.standard_normal((512, 256))])
        _, fraction = outlier_channels(stats)
        assert fraction == 0.0

    def test_scaled_channel_flagged(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((512, 64))
        data[:, 17] *= 100.0
        idx, fraction = outlier_channels(make_stats([data]))
        assert idx.tolist() == [17]
        assert fraction == pytest.approx(1 / 64)

    def test_infinite_threshold_empty(self):
        rng = np.random.default_rng(6)
        idx, fraction = outlier_channels(make_stats([rng.standard_normal((10, 4))]),
                                         threshold=np.inf)
        assert idx.size == 0 and fraction == 0.0

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal((256, 32))
        data[:, 3] *= 50
        idx1, _ = outlier_channels(make_stats([data]))
        idx2, _ = outlier_channels(make_stats([data * 12.5]))
        np.testing.assert_array_equal(idx1, idx2)


class TestDumpFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        values = rng.standard_normal((12, 6)).astype(np.float32)
        path = write_dump(tmp_path / "a.actd", values, "QKV Input", 1, 42, "m0")
        back, meta = read_dump(path)
        np.testing.assert_array_equal(back, values)
        assert meta["site"] == "QKV Input"
        assert meta["layer"] == 1 and meta["step"] == 42

    def test_header_layout(self, tmp_path):
        path = write_dump(tmp_path / "b.actd", np.zeros((2, 3), dtype=np.float32),
                          "MLP Input", 0, 1)
        raw = path.read_bytes()
        assert raw[:4] == b"ACTD"
        assert len(raw) == 8 + 12 + 8 + 2 * 3 * 4  # magic, fixed, dims, payload

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "c.actd"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(InputError):
            read_dump(p)


class TestTrajectoryReport:
    def _dump_series(self, tmp_path, scale_by_step):
        rng = np.random.default_rng(9)
        base = rng.standard_normal((64, 8))
        for step in (1, 2, 3):
            values = base.copy()
            values[:, 3] *= scale_by_step(step)
            write_dump(tmp_path / f"step{step}_l0_qkv_in.actd",
                       values, "QKV Input", 0, step)
        return scan_dump_dir(tmp_path)

    def test_single_step_single_summary_row(self, tmp_path):
        write_dump(tmp_path / "one.actd",
                   np.random.default_rng(0).standard_normal((16, 4)),
                   "MLP Input", 0, 5)
        channels, summary = trajectory_report(scan_dump_dir(tmp_path))
        assert len(summary) == 1
        assert len(channels) == 4

    def test_growing_channel_is_monotone(self, tmp_path):
        paths = self._dump_series(tmp_path, lambda s: 10.0 * s)
        channels, _ = trajectory_report(paths)
        series = [r["mean_abs"] for r in channels
                  if r["channel"] == 3 and r["site"] == "QKV Input"]
        assert series == sorted(series)
        assert len(series) == 3

    def test_width_mismatch_across_steps_rejected(self, tmp_path):
        write_dump(tmp_path / "s1.actd", np.zeros((4, 4), dtype=np.float32),
                   "QKV Input", 0, 1)
        write_dump(tmp_path / "s2.actd", np.zeros((4, 5), dtype=np.float32),
                   "QKV Input", 0, 2)
        with pytest.raises(InputError):
            trajectory_report(scan_dump_dir(tmp_path))

    def test_report_files_and_columns(self, tmp_path):
        paths = self._dump_series(tmp_path, lambda s: 10.0 * s)
        channels, summary = trajectory_report(paths)
        files = write_report(tmp_path / "report", channels, summary)
        with open(files["channels_csv"]) as fh:
            header = next(csv.reader(fh))
        assert header == ["step", "site", "layer", "channel", "mean_abs",
                          "mean", "variance", "kurtosis", "is_outlier"]
        assert files["report_json"].exists()
