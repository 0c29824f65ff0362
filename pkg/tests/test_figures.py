import numpy as np
import pytest

from lowbit.figures import (
    channel_trajectory_figure,
    grid_figure,
    outlier_fraction_figure,
    training_curves_figure,
)


@pytest.fixture
def summary_rows():
    rows = []
    for step in (1, 10, 20):
        for site in ("QKV Input", "MLP Proj Input"):
            rows.append({"step": step, "site": site, "layer": 0,
                         "n_channels": 8, "n_outliers": step // 10,
                         "outlier_fraction": step / 100,
                         "mean_kurtosis": 3.0 * 8})
    return rows


@pytest.fixture
def channel_rows():
    rng = np.random.default_rng(0)
    rows = []
    for step in (1, 10, 20):
        for ch in range(8):
            rows.append({"step": step, "site": "QKV Input", "layer": 0,
                         "channel": ch, "mean_abs": float(rng.uniform(0.1, 2)),
                         "mean": 0.0, "variance": 1.0, "kurtosis": 24.0,
                         "is_outlier": 0})
    return rows


def test_outlier_fraction_figure(tmp_path, summary_rows):
    out = outlier_fraction_figure(summary_rows, tmp_path / "f.png")
    assert out.exists() and out.stat().st_size > 0


def test_channel_trajectory_figure(tmp_path, channel_rows):
    out = channel_trajectory_figure(channel_rows, "QKV Input", 0,
                                    tmp_path / "c.png", top_k=4)
    assert out.exists() and out.stat().st_size > 0


def test_channel_trajectory_unknown_site_rejected(tmp_path, channel_rows):
    with pytest.raises(ValueError):
        channel_trajectory_figure(channel_rows, "Nowhere", 0, tmp_path / "c.png")


def test_training_curves_figure(tmp_path):
    rows = [{"step": s, "ce_loss": 5.0 / (1 + s), "kurt_loss": 0.01,
             "clips": {"l0.qkv_in": {"clip_lo": -4.0, "clip_hi": 4.0 - s / 100}},
             "outlier_fraction": None}
            for s in range(1, 30, 5)]
    out = training_curves_figure(rows, tmp_path / "t.png")
    assert out.exists() and out.stat().st_size > 0


def test_grid_figure(tmp_path):
    out = grid_figure(["baseline", "qat"],
                      ["native W16/None", "4b W4/RTN"],
                      [[23.5, 11855.0], [24.3, 27.8]],
                      tmp_path / "g.png")
    assert out.exists() and out.stat().st_size > 0
