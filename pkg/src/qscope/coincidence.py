"""Signal/idler cross-correlation, delay estimation and coincidence matching."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numba
import numpy as np

from .timetag import TagStream

DEFAULT_BIN_PS = 100
DEFAULT_WINDOW_PS = 1000


class NoCorrelationPeak(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationHistogram:
    """Counts of idler-minus-signal lags in bins ``[lag_min + k*w, lag_min + (k+1)*w)``."""

    bin_width: int
    lag_min: int
    lag_max: int
    counts: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return self.lag_min + self.bin_width * np.arange(self.counts.size + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.lag_min + self.bin_width * (np.arange(self.counts.size) + 0.5)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("lag_ps,counts\n")
        for lag, c in zip(self.edges[:-1].tolist(), self.counts.tolist()):
            buf.write(f"{lag},{c}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class DelayEstimate:
    delay: float
    significance: float
    peak_counts: int


@dataclass(frozen=True)
class CoincidenceSet:
    """Matched pairs, time-stamped with the idler detection time.

    ``signal_index`` and ``idler_index`` point into the streams that were
    matched and are kept for bookkeeping.
    """

    times: np.ndarray
    delay_applied: float
    window: int
    signal_index: np.ndarray
    idler_index: np.ndarray

    def __len__(self) -> int:
        return self.times.size


def _times(x) -> np.ndarray:
    return x.times if isinstance(x, TagStream) else np.asarray(x, dtype=np.int64)


def _lag_bounds(bin_width: int, lag_range) -> tuple[int, int]:
    if np.ndim(lag_range) == 0:
        # symmetric range: bins centred on multiples of the bin width
        half = int(lag_range)
        if half <= 0 or half % bin_width:
            raise ValueError(
                f"lag range ±{half} ps is not a positive multiple of the {bin_width} ps bin")
        lo = -half - bin_width // 2
        return lo, lo + 2 * half + bin_width
    lo, hi = (int(v) for v in lag_range)
    if hi <= lo or (hi - lo) % bin_width:
        raise ValueError(
            f"lag range [{lo}, {hi}) is not a positive multiple of the {bin_width} ps bin")
    return lo, hi


@numba.njit(cache=True)
def _sweep_histogram(sig, idl, lo, hi, width, counts):
    n_idl = idl.size
    start = 0
    for s in sig:
        while start < n_idl and idl[start] - s < lo:
            start += 1
        j = start
        while j < n_idl and idl[j] - s < hi:
            counts[(idl[j] - s - lo) // width] += 1
            j += 1


def cross_correlation_histogram(signal, idler, bin_width: int = DEFAULT_BIN_PS,
                                lag_range=10_000) -> CorrelationHistogram:
    """Histogram of ``idler - signal`` over all pairs whose lag falls in range.

    ``lag_range`` is either a half-width ``L`` (bins centred on ``0, ±w, ...,
    ±L``) or an explicit ``(lag_min, lag_max)`` pair. Both streams must be
    time ordered; the sweep visits only pairs inside the lag window.
    """
    bin_width = int(bin_width)
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    lo, hi = _lag_bounds(bin_width, lag_range)
    counts = np.zeros((hi - lo) // bin_width, dtype=np.int64)
    _sweep_histogram(_times(signal), _times(idler), lo, hi, bin_width, counts)
    return CorrelationHistogram(bin_width, lo, hi, counts)


def estimate_delay(hist: CorrelationHistogram) -> DelayEstimate:
    """Centroid of the peak bin and its two neighbours.

    ``significance`` is the peak height over the median bin count and is
    infinite when the median is zero.
    """
    counts = hist.counts
    if counts.size == 0:
        raise ValueError("empty histogram")
    if not counts.any():
        raise NoCorrelationPeak("no correlation peak")
    k = int(np.argmax(counts))
    sl = slice(max(k - 1, 0), min(k + 2, counts.size))
    w = counts[sl].astype(float)
    delay = float(np.dot(w, hist.centers[sl]) / w.sum())
    background = float(np.median(counts))
    peak = int(counts[k])
    significance = peak / background if background > 0 else float("inf")
    return DelayEstimate(delay, significance, peak)


@numba.njit(cache=True)
def _greedy_match(sig, idl, delay, half):
    n_s, n_i = sig.size, idl.size
    si = np.empty(min(n_s, n_i), np.int64)
    ii = np.empty(min(n_s, n_i), np.int64)
    i = j = m = 0
    while i < n_s and j < n_i:
        d = (idl[j] - delay) - sig[i]
        if d < -half:
            j += 1
        elif d > half:
            i += 1
        else:
            si[m] = i
            ii[m] = j
            m += 1
            i += 1
            j += 1
    return si[:m], ii[:m]


def match_coincidences(signal, idler, delay: float = 0.0,
                       window: int = DEFAULT_WINDOW_PS) -> CoincidenceSet:
    """Greedy earliest-first one-to-one pairing of delay-corrected idler tags.

    An idler tag at ``t`` pairs with a signal tag at ``s`` when
    ``|t - delay - s| <= window / 2``. Each idler, in time order, takes the
    earliest still-unused signal tag in its window.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    sig, idl = _times(signal), _times(idler)
    si, ii = _greedy_match(sig, idl, float(delay), window / 2)
    return CoincidenceSet(idl[ii], float(delay), int(window), si, ii)
