"""Activation-channel statistics, outlier detection, and trajectory reports.

A channel is an outlier when its mean absolute activation exceeds
``threshold`` (default 6) times the grand mean absolute activation of the
whole site, which makes the rule scale-equivariant and comparable across
layers.  Statistics stream one batch at a time with merge updates for the
central moments up to order four, so accumulation order only moves results
at the float rounding level.

Dump files carry one activation matrix each:

    header  magic 8s = b"ACTD" + 4 zero bytes, version u32, dtype u32
            (1 = float32), n_dims u32, then one u32 per dimension
    payload row-major little-endian float32

with a JSON sidecar of the same basename (site, layer, step, model id).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"ACTD\x00\x00\x00\x00"
DUMP_VERSION = 1
DTYPE_F32 = 1
OUTLIER_THRESHOLD = 6.0
KURT_EPS = 1e-6

REPORT_COLUMNS = ("step", "site", "layer", "channel", "mean_abs", "mean",
                  "variance", "kurtosis", "is_outlier")
SUMMARY_COLUMNS = ("step", "site", "layer", "n_channels", "n_outliers",
                   "outlier_fraction", "mean_kurtosis")
REPORT_SCHEMA_VERSION = 1


@dataclass
class ChannelStats:
    """Streaming per-channel moments over a token stream."""

    site: str
    layer: int
    width: int
    n_tokens: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    m3: np.ndarray = field(default=None)
    m4: np.ndarray = field(default=None)
    mean_abs: np.ndarray = field(default=None)
    min: np.ndarray = field(default=None)
    max: np.ndarray = field(default=None)

    def __post_init__(self):
        z = lambda: np.zeros(self.width, dtype=np.float64)
        if self.mean is None:
            self.mean, self.m2, self.m3, self.m4 = z(), z(), z(), z()
            self.mean_abs = z()
            self.min = np.full(self.width, np.inf)
            self.max = np.full(self.width, -np.inf)

    @property
    def variance(self) -> np.ndarray:
        if self.n_tokens == 0:
            return np.zeros(self.width)
        return self.m2 / self.n_tokens

    @property
    def kurtosis(self) -> np.ndarray:
        """Per-channel sum-form kurtosis: M4 / (variance^2 + eps)."""
        if self.n_tokens == 0:
            return np.zeros(self.width)
        var = self.m2 / self.n_tokens
        return self.m4 / (var * var + KURT_EPS)


def accumulate(stats: ChannelStats, batch: np.ndarray) -> ChannelStats:
    """Merge one (tokens x channels) batch into the running statistics."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != stats.width:
        raise InputError(
            f"batch width {batch.shape} does not match stats width {stats.width}"
        )
    nb = batch.shape[0]
    if nb == 0:
        return stats
    mean_b = batch.mean(axis=0)
    d = batch - mean_b
    d2 = d * d
    m2_b = d2.sum(axis=0)
    m3_b = (d2 * d).sum(axis=0)
    m4_b = (d2 * d2).sum(axis=0)

    na = stats.n_tokens
    n = na + nb
    if na == 0:
        stats.mean, stats.m2, stats.m3, stats.m4 = mean_b, m2_b, m3_b, m4_b
    else:
        delta = mean_b - stats.mean
        d_n = delta / n
        stats.m4 = (stats.m4 + m4_b
                    + delta * d_n ** 3 * na * nb * (na * na - na * nb + nb * nb)
                    + 6.0 * d_n ** 2 * (na * na * m2_b + nb * nb * stats.m2)
                    + 4.0 * d_n * (na * m3_b - nb * stats.m3))
        stats.m3 = (stats.m3 + m3_b
                    + delta * d_n ** 2 * na * nb * (na - nb)
                    + 3.0 * d_n * (na * m2_b - nb * stats.m2))
        stats.m2 = stats.m2 + m2_b + delta * d_n * na * nb
        stats.mean = stats.mean + d_n * nb
    stats.mean_abs = (stats.mean_abs * na + np.abs(batch).sum(axis=0)) / n
    stats.min = np.minimum(stats.min, batch.min(axis=0))
    stats.max = np.maximum(stats.max, batch.max(axis=0))
    stats.n_tokens = n
    return stats


def outlier_channels(stats: ChannelStats,
                     threshold: float = OUTLIER_THRESHOLD) -> tuple[np.ndarray, float]:
    """Channels whose mean |x| exceeds ``threshold`` times the site's grand
    mean |x|; returns (indices, fraction of channels)."""
    if stats.n_tokens <= 0:
        raise InputError("no tokens accumulated")
    if not np.isfinite(threshold):
        return np.array([], dtype=np.int64), 0.0
    grand = stats.mean_abs.mean()
    idx = np.nonzero(stats.mean_abs > threshold * grand)[0]
    return idx, idx.size / stats.width


# ---------------------------------------------------------------------------
# dump files
# ---------------------------------------------------------------------------

def write_dump(path, values: np.ndarray, site: str, layer: int, step: int,
               model_id: str = "") -> Path:
    path = Path(path)
    values = np.asarray(values, dtype="<f4")
    if values.ndim < 1:
        raise InputError("dump payload must be at least 1-D")
    header = MAGIC + struct.pack("<III", DUMP_VERSION, DTYPE_F32, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values).tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(
        {"site": site, "layer": layer, "step": step, "model_id": model_id,
         "schema_version": DUMP_VERSION}, sort_keys=True))
    return path


def read_dump(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise InputError(f"bad dump magic in {path}")
    version, dtype_code, n_dims = struct.unpack_from("<III", raw, 8)
    if version != DUMP_VERSION or dtype_code != DTYPE_F32:
        raise InputError(f"unsupported dump version/dtype in {path}")
    dims = struct.unpack_from(f"<{n_dims}I", raw, 20)
    count = int(np.prod(dims, dtype=np.int64))
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=20 + 4 * n_dims)
    if payload.size != count:
        raise InputError(f"truncated dump payload in {path}")
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return payload.reshape(dims).copy(), meta


def scan_dump_dir(dump_dir) -> list[Path]:
    return sorted(Path(dump_dir).rglob("*.actd"))


# ---------------------------------------------------------------------------
# trajectory report
# ---------------------------------------------------------------------------

def trajectory_report(dump_paths, threshold: float = OUTLIER_THRESHOLD):
    """Per-step channel statistics and outlier summaries from dump files.

    Returns (channel_rows, summary_rows) as lists of dicts; dumps are
    grouped by (site, layer) and must keep a constant width within a group.
    """
    groups: dict[tuple[str, int], dict[int, ChannelStats]] = {}
    widths: dict[tuple[str, int], int] = {}
    for path in dump_paths:
        values, meta = read_dump(path)
        if values.ndim != 2:
            raise InputError(f"expected 2-D activations in {path}")
        site = meta.get("site", "unknown")
        layer = int(meta.get("layer", -1))
        step = int(meta.get("step", 0))
        key = (site, layer)
        expected = widths.setdefault(key, values.shape[1])
        if values.shape[1] != expected:
            raise InputError(
                f"width {values.shape[1]} at step {step} of site {site} "
                f"disagrees with {expected}"
            )
        per_step = groups.setdefault(key, {})
        stats = per_step.get(step)
        if stats is None:
            stats = ChannelStats(site=site, layer=layer, width=expected)
            per_step[step] = stats
        accumulate(stats, values)

    channel_rows, summary_rows = [], []
    for (site, layer) in sorted(groups):
        for step in sorted(groups[(site, layer)]):
            stats = groups[(site, layer)][step]
            idx, fraction = outlier_channels(stats, threshold)
            outlier_set = set(idx.tolist())
            kurt = stats.kurtosis
            var = stats.variance
            for ch in range(stats.width):
                channel_rows.append({
                    "step": step, "site": site, "layer": layer, "channel": ch,
                    "mean_abs": float(stats.mean_abs[ch]),
                    "mean": float(stats.mean[ch]),
                    "variance": float(var[ch]),
                    "kurtosis": float(kurt[ch]),
                    "is_outlier": int(ch in outlier_set),
                })
            summary_rows.append({
                "step": step, "site": site, "layer": layer,
                "n_channels": stats.width, "n_outliers": int(idx.size),
                "outlier_fraction": float(fraction),
                "mean_kurtosis": float(kurt.mean()),
            })
    return channel_rows, summary_rows


def write_report(out_dir, channel_rows, summary_rows) -> dict:
    """Emit channels.csv / summary.csv and a JSON mirror; returns file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels_csv = out_dir / "channels.csv"
    with open(channels_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(channel_rows)
    summary_csv = out_dir / "summary.csv"
    with open(summary_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(summary_rows)
    report_json = out_dir / "report.json"
    report_json.write_text(json.dumps({
        "schema_version": REPORT_SCHEMA_VERSION,
        "channels": channel_rows,
        "summary": summary_rows,
    }, sort_keys=True))
    return {"channels_csv": channels_csv, "summary_csv": summary_csv,
            "report_json": report_json}
