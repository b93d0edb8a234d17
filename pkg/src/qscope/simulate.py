"""Synthetic photon-pair timetag streams for closed-loop tests of the pipeline.

Pairs are emitted as a homogeneous Poisson process. The idler half of a
pair probes the sample where the beam points at emission time and survives
with probability ``idler_path_efficiency * reflectance``; the signal half is
detected independently with ``signal_efficiency``. Outside the scan passes
the beam is parked on a reflectance-0 spot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .scan import REVERSE, ImageGrid, ScanTimeline, build_timeline, locate
from .timetag import IDLER, SIGNAL, TRIGGER, ScanConfig, TagStream

# pairs drawn per batch; bounds peak memory on long runs
_BATCH = 4_000_000


@dataclass(frozen=True, eq=False)
class SamplePattern:
    """Reflectance map in [0, 1] covering ``size`` (x, y) micrometers from the origin."""

    reflectance: np.ndarray
    size: tuple[float, float]
    blur_sigma: float = 0.0

    def __post_init__(self):
        r = np.asarray(self.reflectance, dtype=float)
        if r.ndim != 2 or r.size == 0:
            raise ValueError("reflectance must be a non-empty 2-D array")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("reflectance values must lie in [0, 1]")
        size = self.size if np.ndim(self.size) else (self.size, self.size)
        object.__setattr__(self, "reflectance", r)
        object.__setattr__(self, "size", (float(size[0]), float(size[1])))
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")

    @property
    def texel(self) -> tuple[float, float]:
        ny, nx = self.reflectance.shape
        return self.size[0] / nx, self.size[1] / ny

    @cached_property
    def blurred(self) -> np.ndarray:
        if self.blur_sigma == 0:
            return self.reflectance
        tx, ty = self.texel
        return ndimage.gaussian_filter(
            self.reflectance, (self.blur_sigma / ty, self.blur_sigma / tx), mode="nearest")

    def at(self, x, y) -> np.ndarray:
        """Blurred reflectance at positions in micrometers; zero off the sample."""
        tx, ty = self.texel
        ny, nx = self.reflectance.shape
        i, j = np.broadcast_arrays(np.floor(np.asarray(y) / ty).astype(np.int64),
                                   np.floor(np.asarray(x) / tx).astype(np.int64))
        inside = (i >= 0) & (i < ny) & (j >= 0) & (j < nx)
        out = np.zeros(i.shape)
        out[inside] = self.blurred[i[inside], j[inside]]
        return out


@dataclass(frozen=True)
class SourceModel:
    pair_rate: float = 1e5
    signal_efficiency: float = 0.1
    idler_path_efficiency: float = 0.1
    signal_dark_rate: float = 1e3
    idler_dark_rate: float = 1e3
    inter_arm_delay: int = 5000
    jitter_sigma: float = 50.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("pair_rate", "signal_dark_rate", "idler_dark_rate", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("signal_efficiency", "idler_path_efficiency"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def coincidence_rate(self) -> float:
        """True-coincidence rate on a perfectly reflecting spot, per second."""
        return self.pair_rate * self.signal_efficiency * self.idler_path_efficiency


@dataclass
class Simulation:
    signal: TagStream
    idler: TagStream
    triggers: TagStream
    ground_truth: ImageGrid
    timeline: ScanTimeline | None = None
    n_pairs: int = 0
    params: dict = field(default_factory=dict)


def make_grating(square_size: float = 20.0, gap: float = 10.0, field: float = 100.0,
                 resolution: int = 400, blur_sigma: float = 0.0,
                 offset: float = 0.0) -> SamplePattern:
    """Square grating: reflectance 1 on ``square_size`` squares separated by ``gap``.

    ``resolution`` is the number of map texels per side and ``offset``
    shifts the first square away from the origin.
    """
    if resolution <= 0:
        raise ValueError("resolution must be a positive texel count")
    if square_size <= 0 or gap < 0 or field <= 0:
        raise ValueError("grating dimensions must be positive")
    period = square_size + gap
    centers = (np.arange(resolution) + 0.5) * field / resolution
    on = np.mod(centers - offset, period) < square_size
    return SamplePattern(np.outer(on, on).astype(float), (field, field), blur_sigma)


def trigger_times(config: ScanConfig, duration_ps: int, lead_in_ps: int = 0) -> np.ndarray:
    n_frames = max(0, -(-(duration_ps - lead_in_ps) // config.frame_period_ps))
    frame0 = lead_in_ps + config.frame_period_ps * np.arange(n_frames, dtype=np.int64)
    lines = config.line_period_ps * np.arange(config.pixels_y, dtype=np.int64)
    t = (frame0[:, None] + lines[None, :]).ravel()
    return t[t < duration_ps]


def beam_position(times, timeline: ScanTimeline):
    """Beam (x, y) in micrometers at each time and whether it is on a scan pass."""
    cfg = timeline.config
    t = np.asarray(times, dtype=np.int64)
    line, direction, _ = locate(t, timeline)
    on = direction > 0
    offset = t - timeline.trigger_times[np.maximum(line, 0)]
    frac = offset / cfg.dwell_ps
    rfrac = cfg.pixels_x - (offset - cfg.forward_ps - cfg.turnaround_ps) / cfg.dwell_ps
    x = np.where(direction == REVERSE, rfrac, frac) * cfg.pixel_pitch
    y = (np.maximum(line, 0) % cfg.pixels_y + 0.5) * cfg.pixel_pitch_y
    return x, y, on


def expected_image(sample: SamplePattern, source: SourceModel, timeline: ScanTimeline | None,
                   config: ScanConfig, duration_ps: int, subsamples: int = 16) -> ImageGrid:
    """Noise-free mean true-coincidence image for the given acquisition."""
    px, py = config.pixels_x, config.pixels_y
    exposure = np.zeros((py, px))
    if timeline is not None:
        k = np.arange(px)
        rows = timeline.line_index
        passes = [(timeline.forward[:, 0], False)]
        if config.bidirectional:
            passes.append((timeline.reverse[:, 0], True))
        for starts, mirrored in passes:
            pix_start = starts[:, None] + k[None, :] * config.dwell_ps
            overlap = np.clip(duration_ps - pix_start, 0, config.dwell_ps) * 1e-12
            if mirrored:
                overlap = overlap[:, ::-1]
            np.add.at(exposure, rows, overlap)
    u = (np.arange(px * subsamples) + 0.5) / subsamples * config.pixel_pitch
    y = (np.arange(py) + 0.5) * config.pixel_pitch_y
    r = sample.at(u[None, :], y[:, None]).reshape(py, px, subsamples).mean(axis=2)
    n_frames = 0 if timeline is None else len(timeline.frames)
    return ImageGrid(source.coincidence_rate * exposure * r, n_frames, 0, config.pixel_pitch)


def _poisson_times(rng, rate: float, duration_ps: int) -> np.ndarray:
    n = rng.poisson(rate * duration_ps * 1e-12)
    return np.sort(rng.integers(0, duration_ps, size=n, dtype=np.int64))


def simulate(sample: SamplePattern, source: SourceModel, config: ScanConfig,
             duration: float, lead_in: float = 0.0) -> Simulation:
    """Generate signal, idler and trigger streams for ``duration`` seconds.

    ``lead_in`` (microseconds) delays the first line trigger.
    """
    rng = np.random.default_rng(source.rng_seed)
    duration_ps = int(round(duration * 1e12))
    lead_in_ps = int(round(lead_in * 1e6))
    params = {"duration_s": duration, "lead_in_us": lead_in}
    if duration_ps <= 0:
        empty = [TagStream.empty() for _ in range(3)]
        truth = ImageGrid(np.zeros((config.pixels_y, config.pixels_x)), 0, 0, config.pixel_pitch)
        return Simulation(*empty, truth, None, 0, params)

    trig = trigger_times(config, duration_ps, lead_in_ps)
    timeline = build_timeline(trig, config) if trig.size else None

    n_pairs = rng.poisson(source.pair_rate * duration_ps * 1e-12)
    sig_parts, idl_parts = [], []
    # batches split the window proportionally so pair times stay sorted
    n_batches = max(1, -(-n_pairs // _BATCH))
    bounds = np.linspace(0, duration_ps, n_batches + 1).round().astype(np.int64)
    counts = rng.multinomial(n_pairs, np.diff(bounds) / duration_ps) if n_pairs else [0] * n_batches
    for b in range(n_batches):
        t_lo, t_hi = bounds[b], bounds[b + 1]
        t = np.sort(rng.integers(t_lo, t_hi, size=counts[b], dtype=np.int64))
        if timeline is not None:
            x, y, on = beam_position(t, timeline)
            r = np.where(on, sample.at(x, y), 0.0)
        else:
            r = np.zeros(t.size)
        sig_keep = rng.random(t.size) < source.signal_efficiency
        idl_keep = rng.random(t.size) < source.idler_path_efficiency * r
        jitter = rng.normal(0.0, source.jitter_sigma, size=t.size) if source.jitter_sigma else 0.0
        idl_t = t + source.inter_arm_delay + np.rint(jitter).astype(np.int64)
        sig_parts.append(t[sig_keep])
        idl_parts.append(idl_t[idl_keep])

    sig = np.concatenate(sig_parts + [_poisson_times(rng, source.signal_dark_rate, duration_ps)])
    idl = np.concatenate(idl_parts + [_poisson_times(rng, source.idler_dark_rate, duration_ps)])
    sig = np.sort(sig, kind="stable")
    idl = np.sort(idl[(idl >= 0) & (idl < duration_ps)], kind="stable")

    truth = expected_image(sample, source, timeline, config, duration_ps)
    return Simulation(
        TagStream.from_times(sig, SIGNAL),
        TagStream.from_times(idl, IDLER),
        TagStream.from_times(trig, TRIGGER),
        truth,
        timeline,
        int(n_pairs),
        params,
    )
