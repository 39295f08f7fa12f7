"""Coincidence finding, delay histograms and CAR between two click streams."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np


class InsufficientDataError(ValueError):
    """Too few events for a statistic to be defined."""


@dataclass(frozen=True)
class CoincidenceConfig:
    bin_ps: float = 192.0
    window_bins: int = 80
    peak_halfwidth_bins: int = 2
    accidental_offset_bins: int = 50
    accidental_width_bins: int = 20
    # expected B-minus-A delay the windows are centred on
    center_ps: float = 0.0

    def __post_init__(self):
        if not self.bin_ps > 0:
            raise ValueError("bin_ps must be > 0")
        for name in ("window_bins", "peak_halfwidth_bins", "accidental_width_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.accidental_offset_bins < self.peak_halfwidth_bins:
            raise ValueError("accidental window overlaps the peak window")
        if self.accidental_offset_bins + self.accidental_width_bins > self.window_bins:
            raise ValueError("accidental window extends past the search window")

    @property
    def window_ps(self) -> float:
        return self.window_bins * self.bin_ps

    def bin_of(self, delay_ps):
        return np.floor((np.asarray(delay_ps) - self.center_ps) / self.bin_ps).astype(np.int64)

    def in_peak(self, delay_ps) -> np.ndarray:
        k = self.bin_of(delay_ps)
        return (k >= -self.peak_halfwidth_bins) & (k < self.peak_halfwidth_bins)


@dataclass
class DelayHistogram:
    bin_ps: float
    counts: np.ndarray
    first_bin: int
    total_pairs: int
    center_ps: float = 0.0

    @property
    def bin_index(self) -> np.ndarray:
        return np.arange(self.first_bin, self.first_bin + len(self.counts))

    @property
    def delay_ps_center(self) -> np.ndarray:
        return self.center_ps + (self.bin_index + 0.5) * self.bin_ps

    def window_sum(self, lo: int, hi: int) -> int:
        """Counts in bins ``lo <= k < hi``."""
        a = max(lo - self.first_bin, 0)
        b = min(hi - self.first_bin, len(self.counts))
        return int(self.counts[a:b].sum()) if b > a else 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_index", "delay_ps_center", "counts"])
            for k, c, n in zip(self.bin_index.tolist(), self.delay_ps_center.tolist(), self.counts.tolist()):
                writer.writerow([k, repr(c), n])

    def metadata(self, cfg: CoincidenceConfig) -> dict:
        try:
            ratio = car(self, cfg)
        except InsufficientDataError:
            ratio = None
        return {
            "config": asdict(cfg),
            "total_pairs": self.total_pairs,
            "peak_counts": self.window_sum(-cfg.peak_halfwidth_bins, cfg.peak_halfwidth_bins),
            "car": _json_ratio(ratio),
        }

    def metadata_json(self, cfg: CoincidenceConfig) -> str:
        return json.dumps(self.metadata(cfg), sort_keys=True, indent=2)


def _json_ratio(value):
    if value is None:
        return None
    return "inf" if math.isinf(value) else value


@dataclass
class Coincidences:
    """Matched event pairs: indices into the A and B streams and tB - tA."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    delay_ps: np.ndarray

    def __len__(self):
        return len(self.delay_ps)

    def subset(self, mask) -> "Coincidences":
        return Coincidences(self.idx_a[mask], self.idx_b[mask], self.delay_ps[mask])


def _check_sorted(t: np.ndarray, name: str) -> None:
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise ValueError(f"stream {name} is not sorted by time")


def find_coincidences(ta, tb, cfg: CoincidenceConfig = CoincidenceConfig()):
    """Greedy nearest-neighbour matching of two sorted timestamp arrays.

    A-events are visited in time order; each takes the closest still-unused
    B-event whose delay lies within ``center_ps +- window_ps`` (ties go to the
    earlier B-event).  Returns ``(Coincidences, DelayHistogram)``.
    """
    ta = np.asarray(ta, dtype=float)
    tb = np.asarray(tb, dtype=float)
    _check_sorted(ta, "A")
    _check_sorted(tb, "B")
    w = cfg.window_ps
    target = ta + cfg.center_ps
    lo = np.searchsorted(tb, target - w, side="left")
    hi = np.searchsorted(tb, target + w, side="right")

    used = np.zeros(len(tb), dtype=bool)
    pairs_a, pairs_b = [], []
    tb_list = tb.tolist()
    for i in np.flatnonzero(hi > lo).tolist():
        x = target[i]
        best, best_d = -1, math.inf
        for j in range(lo[i], hi[i]):
            if used[j]:
                continue
            d = abs(tb_list[j] - x)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d <= w:
            used[best] = True
            pairs_a.append(i)
            pairs_b.append(best)

    idx_a = np.asarray(pairs_a, dtype=np.int64)
    idx_b = np.asarray(pairs_b, dtype=np.int64)
    coinc = Coincidences(idx_a, idx_b, tb[idx_b] - ta[idx_a])
    return coinc, histogram_delays(coinc.delay_ps, cfg)


def histogram_delays(delay_ps, cfg: CoincidenceConfig) -> DelayHistogram:
    k = cfg.bin_of(delay_ps)
    first = -cfg.window_bins
    counts = np.bincount(k - first, minlength=2 * cfg.window_bins + 1)
    return DelayHistogram(cfg.bin_ps, counts.astype(np.int64), first, int(len(k)), cfg.center_ps)


def car(hist: DelayHistogram, cfg: CoincidenceConfig = CoincidenceConfig()) -> float:
    """Coincidence-to-accidental ratio; ``math.inf`` when no accidentals are seen.

    Accidentals are averaged over two side windows placed symmetrically at
    ``+-accidental_offset_bins`` from the peak.
    """
    if hist.total_pairs == 0:
        raise InsufficientDataError("CAR undefined for an empty histogram")
    h = cfg.peak_halfwidth_bins
    peak = hist.window_sum(-h, h)
    off, width = cfg.accidental_offset_bins, cfg.accidental_width_bins
    acc = hist.window_sum(off, off + width) + hist.window_sum(-off - width, -off)
    acc_mean = acc / (2 * width)
    if acc_mean == 0:
        if peak == 0:
            raise InsufficientDataError("CAR undefined: no peak or accidental counts")
        return math.inf
    return peak / (acc_mean * 2 * h)


def delay_variance(delay_ps) -> float:
    """Unbiased sample variance of coincidence delays (ps^2)."""
    d = np.asarray(delay_ps, dtype=float)
    if len(d) < 2:
        raise InsufficientDataError(f"need >= 2 coincidences for a variance, got {len(d)}")
    return float(np.var(d, ddof=1))
