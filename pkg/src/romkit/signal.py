"""Signal conditioning for joint-angle series.

Order of operations downstream: visibility gating happens in kinematics,
then short gaps are linearly interpolated, then each contiguous valid
segment is Savitzky-Golay smoothed, and only then are percentile statistics
taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .errors import ConfigError, InsufficientDataError
from .kinematics import AngleSeries


@dataclass(frozen=True)
class SmoothingConfig:
    window_length: int = 11
    poly_order: int = 2
    max_gap: float = 2.0  # seconds; gaps at least this long stay unfilled
    rom_low_pct: float = 5.0
    rom_high_pct: float = 95.0

    def __post_init__(self):
        if self.window_length % 2 == 0 or self.window_length <= self.poly_order:
            raise ConfigError(
                f"window_length must be odd and exceed poly_order "
                f"(got {self.window_length}, order {self.poly_order})"
            )
        if not (0 <= self.rom_low_pct < self.rom_high_pct <= 100):
            raise ConfigError("require 0 <= rom_low_pct < rom_high_pct <= 100")
        if self.max_gap <= 0:
            raise ConfigError("max_gap must be positive")


def _invalid_runs(valid: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of invalid samples as [start, end] inclusive index pairs."""
    runs = []
    n = len(valid)
    i = 0
    while i < n:
        if not valid[i]:
            j = i
            while j + 1 < n and not valid[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def interpolate_gaps(series: AngleSeries, max_gap: float = 2.0) -> AngleSeries:
    """Fill interior invalid runs shorter than ``max_gap`` by linear interpolation.

    Run duration is measured between its first and last invalid timestamps;
    runs touching either boundary stay unfilled, as do longer occlusions.
    Valid samples are never modified and the operation is idempotent.
    """
    t = series.timestamps
    angles = series.angles.copy()
    valid = series.valid.copy()
    n = len(series)
    for start, end in _invalid_runs(series.valid):
        if start == 0 or end == n - 1:
            continue
        if t[end] - t[start] >= max_gap:
            continue
        t0, t1 = t[start - 1], t[end + 1]
        a0, a1 = series.angles[start - 1], series.angles[end + 1]
        frac = (t[start : end + 1] - t0) / (t1 - t0)
        angles[start : end + 1] = a0 + frac * (a1 - a0)
        valid[start : end + 1] = True
    return series.with_samples(angles, valid)


def _valid_segments(valid: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of valid samples as [start, end] inclusive index pairs."""
    return _invalid_runs(~valid)


def savitzky_golay(series: AngleSeries, cfg: SmoothingConfig | None = None) -> AngleSeries:
    """Smooth each contiguous valid segment independently.

    Segment edges refit the local polynomial on the first/last full window
    and evaluate it off-center, so polynomials up to the filter order are
    reproduced exactly everywhere (plain padding schemes lose that at the
    boundaries and would bias first/last-repetition ROM). Segments shorter
    than the window use the largest odd window that fits; segments under 5
    samples (or not exceeding the polynomial order) pass through unsmoothed.
    Invalid samples are untouched.
    """
    cfg = cfg or SmoothingConfig()
    angles = series.angles.copy()
    for start, end in _valid_segments(series.valid):
        seg = series.angles[start : end + 1]
        n = len(seg)
        window = min(cfg.window_length, n if n % 2 == 1 else n - 1)
        if n < 5 or window <= cfg.poly_order:
            continue
        angles[start : end + 1] = savgol_filter(
            seg, window_length=window, polyorder=cfg.poly_order, mode="interp"
        )
    return series.with_samples(angles, series.valid.copy())


def percentile_rom(series: AngleSeries, cfg: SmoothingConfig | None = None) -> float:
    """Robust whole-series ROM: high minus low percentile over valid samples."""
    cfg = cfg or SmoothingConfig()
    vals = series.angles[series.valid]
    if len(vals) < 2:
        raise InsufficientDataError(
            f"percentile ROM needs >= 2 valid samples, got {len(vals)}"
        )
    high, low = np.percentile(vals, [cfg.rom_high_pct, cfg.rom_low_pct])
    return float(high - low)


def condition(series: AngleSeries, cfg: SmoothingConfig | None = None) -> AngleSeries:
    """Gap interpolation followed by smoothing: the standard conditioning chain."""
    cfg = cfg or SmoothingConfig()
    return savitzky_golay(interpolate_gaps(series, cfg.max_gap), cfg)
