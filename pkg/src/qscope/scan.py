"""Line-trigger decoding, pixel assignment and frame accumulation.

Each line trigger opens a forward pass of ``pixels_x * dwell`` followed,
for bidirectional scans, by a turnaround and a reverse pass over the same
row. Reverse-pass events are folded back by mirroring the column. Anything
outside a pass (turnaround, flyback, before the first trigger) is
discarded and tallied.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coincidence import CoincidenceSet
from .timetag import TRIGGER, ScanConfig, TagStream, atomic_write

log = logging.getLogger(__name__)

PGM_MAX = 65535
FORWARD, REVERSE = 1, 2


class TimelineError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    index: int
    first_line: int
    n_lines: int
    complete: bool
    flyback: tuple[int, int | None] | None


@dataclass(frozen=True)
class ScanTimeline:
    config: ScanConfig
    trigger_times: np.ndarray
    frames: list[Frame] = field(default_factory=list)

    @property
    def n_lines(self) -> int:
        return self.trigger_times.size

    @property
    def line_index(self) -> np.ndarray:
        return np.arange(self.n_lines) % self.config.pixels_y

    @property
    def frame_index(self) -> np.ndarray:
        return np.arange(self.n_lines) // self.config.pixels_y

    @property
    def forward(self) -> np.ndarray:
        """``(n_lines, 2)`` array of forward ``[start, end)`` in ps."""
        t = self.trigger_times
        return np.stack([t, t + self.config.forward_ps], axis=1)

    @property
    def reverse(self) -> np.ndarray | None:
        if not self.config.bidirectional:
            return None
        start = self.trigger_times + self.config.forward_ps + self.config.turnaround_ps
        return np.stack([start, start + self.config.forward_ps], axis=1)

    def line_end(self) -> np.ndarray:
        seg = self.reverse if self.config.bidirectional else self.forward
        return seg[:, 1]

    def lines(self):
        """Yield per-line records as dicts (slow; meant for inspection)."""
        fwd, rev = self.forward, self.reverse
        for k in range(self.n_lines):
            yield {
                "frame": int(k // self.config.pixels_y),
                "line_index": int(k % self.config.pixels_y),
                "forward": tuple(int(v) for v in fwd[k]),
                "reverse": None if rev is None else tuple(int(v) for v in rev[k]),
            }


@dataclass
class ImageGrid:
    """Per-pixel counts with provenance.

    ``counts`` has shape ``(height, width)``; ground-truth grids may hold
    floating-point expectations instead of integer counts.
    """

    counts: np.ndarray
    frames_accumulated: int = 1
    discarded_tags: int = 0
    pixel_pitch: float = 1.0

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def total(self):
        return self.counts.sum()

    def __add__(self, other: "ImageGrid") -> "ImageGrid":
        return accumulate_frames([self, other])


def build_timeline(triggers, config: ScanConfig) -> ScanTimeline:
    """Turn a line-trigger train into per-line scan segments grouped in frames."""
    if isinstance(triggers, TagStream):
        trig = triggers.times[triggers.channels == TRIGGER]
    else:
        trig = np.asarray(triggers, dtype=np.int64)
    if trig.size == 0:
        raise TimelineError("cannot build timeline: no line triggers")
    gaps = np.diff(trig)
    if np.any(gaps <= 0):
        raise TimelineError("cannot build timeline: triggers are not strictly increasing")
    short = np.flatnonzero(gaps < config.min_trigger_spacing_ps)
    if short.size:
        k = int(short[0])
        raise TimelineError(
            f"overlapping line segments: trigger {k + 1} follows {k} after {int(gaps[k])} ps, "
            f"need at least {config.min_trigger_spacing_ps} ps")

    timeline = ScanTimeline(config, trig)
    ends = timeline.line_end()
    py = config.pixels_y
    for f, first in enumerate(range(0, trig.size, py)):
        n = min(py, trig.size - first)
        complete = n == py
        flyback = None
        if complete:
            last = first + n - 1
            nxt = int(trig[last + 1]) if last + 1 < trig.size else None
            flyback = (int(ends[last]), nxt)
        timeline.frames.append(Frame(f, first, n, complete, flyback))
    if not timeline.frames[-1].complete:
        log.info("trailing frame %d is partial (%d of %d lines)",
                 len(timeline.frames) - 1, timeline.frames[-1].n_lines, py)
    return timeline


def _event_times(events) -> np.ndarray:
    if isinstance(events, (CoincidenceSet, TagStream)):
        return events.times
    return np.asarray(events, dtype=np.int64)


def locate(times, timeline: ScanTimeline):
    """Map event times to ``(line, direction, column)``.

    ``direction`` is 0 for events outside every pass, ``FORWARD`` or
    ``REVERSE`` otherwise. ``line`` is the global line ordinal (-1 before
    the first trigger). Columns are already mirrored for reverse passes.
    """
    cfg = timeline.config
    t = np.asarray(times, dtype=np.int64)
    line = np.searchsorted(timeline.trigger_times, t, side="right") - 1
    started = line >= 0
    offset = np.where(started, t - timeline.trigger_times[np.maximum(line, 0)], -1)
    F, Ta, dwell = cfg.forward_ps, cfg.turnaround_ps, cfg.dwell_ps
    fwd = started & (offset < F)
    direction = np.where(fwd, FORWARD, 0)
    column = np.where(fwd, offset // dwell, -1)
    if cfg.bidirectional:
        roff = offset - (F + Ta)
        rev = started & (roff >= 0) & (roff < F)
        direction = np.where(rev, REVERSE, direction)
        column = np.where(rev, cfg.pixels_x - 1 - roff // dwell, column)
    return line, direction, column


def _select(timeline, line, direction, which, frames):
    keep = direction > 0
    if which == "forward":
        keep &= direction == FORWARD
    elif which == "reverse":
        keep &= direction == REVERSE
    elif which != "both":
        raise ValueError(f"direction must be 'both', 'forward' or 'reverse', got {which!r}")
    if frames is not None:
        keep &= np.isin(line // timeline.config.pixels_y, np.asarray(list(frames)))
    return keep


def assign_pixels(events, timeline: ScanTimeline, config: ScanConfig | None = None, *,
                  direction: str = "both", frames=None) -> ImageGrid:
    """Bin events into an image.

    ``direction`` restricts to one scan direction and ``frames`` to a subset
    of frame indices; excluded events count as discarded.
    """
    cfg = config or timeline.config
    if cfg != timeline.config:
        raise ValueError("config does not match the timeline's scan configuration")
    t = _event_times(events)
    line, d, col = locate(t, timeline)
    keep = _select(timeline, line, d, direction, frames)
    row = line[keep] % cfg.pixels_y
    flat = row * cfg.pixels_x + col[keep]
    counts = np.bincount(flat, minlength=cfg.pixels_x * cfg.pixels_y)
    counts = counts.reshape(cfg.pixels_y, cfg.pixels_x).astype(np.int64)
    n_frames = len(timeline.frames) if frames is None else len(set(frames))
    return ImageGrid(counts, n_frames, int(t.size - keep.sum()), cfg.pixel_pitch)


def frame_stack(events, timeline: ScanTimeline, *, direction: str = "both"):
    """Per-frame images as an ``(n_frames, height, width)`` array plus the discarded tally."""
    cfg = timeline.config
    t = _event_times(events)
    line, d, col = locate(t, timeline)
    keep = _select(timeline, line, d, direction, None)
    npix = cfg.pixels_x * cfg.pixels_y
    flat = line[keep] * cfg.pixels_x + col[keep]
    n_frames = len(timeline.frames)
    stack = np.bincount(flat, minlength=n_frames * npix)
    stack = stack.reshape(n_frames, cfg.pixels_y, cfg.pixels_x).astype(np.int32)
    return stack, int(t.size - keep.sum())


def accumulate_frames(grids) -> ImageGrid:
    """Element-wise sum of grids, adding up frames and discarded tallies."""
    grids = list(grids)
    if not grids:
        raise ValueError("nothing to accumulate")
    shape = grids[0].counts.shape
    for g in grids[1:]:
        if g.counts.shape != shape:
            raise ValueError(f"dimension mismatch: {g.counts.shape} vs {shape}")
    counts = np.sum([g.counts for g in grids], axis=0)
    return ImageGrid(
        counts,
        sum(g.frames_accumulated for g in grids),
        sum(g.discarded_tags for g in grids),
        grids[0].pixel_pitch,
    )


# image files

def encode_pgm(grid: ImageGrid) -> tuple[bytes, int]:
    """16-bit binary PGM; returns the bytes and how many pixels were clamped."""
    counts = np.rint(np.asarray(grid.counts, dtype=float))
    clamped = int(np.count_nonzero(counts > PGM_MAX))
    data = np.clip(counts, 0, PGM_MAX).astype(">u2")
    header = f"P5\n{grid.width} {grid.height}\n{PGM_MAX}\n".encode("ascii")
    return header + data.tobytes(), clamped


def write_pgm(path, grid: ImageGrid) -> None:
    data, clamped = encode_pgm(grid)
    atomic_write(path, data)
    if clamped:
        msg = f"{clamped} pixel(s) exceeded {PGM_MAX} counts and were clamped\n"
        atomic_write(f"{path}.warning.txt", msg)
        warnings.warn(f"{path}: {msg.strip()}", stacklevel=2)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(x) for x in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos + 1:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def image_to_csv(grid: ImageGrid) -> str:
    buf = io.StringIO()
    buf.write("# width,height,frames,pixel_pitch_um\n")
    buf.write(f"# {grid.width},{grid.height},{grid.frames_accumulated},{grid.pixel_pitch!r}\n")
    integral = np.issubdtype(np.asarray(grid.counts).dtype, np.integer)
    np.savetxt(buf, grid.counts, fmt="%d" if integral else "%.10g", delimiter=",")
    return buf.getvalue()


def write_image_csv(path, grid: ImageGrid) -> None:
    atomic_write(path, image_to_csv(grid))


def read_image_csv(path) -> ImageGrid:
    with open(path) as fh:
        first = fh.readline()
        meta = fh.readline()
        if not (first.startswith("# width") and meta.startswith("#")):
            raise ValueError(f"{path}: missing image CSV header")
        w, h, frames, pitch = meta[1:].strip().split(",")
        body = fh.read()
    counts = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    if counts.shape != (int(h), int(w)):
        raise ValueError(f"{path}: header says {h}x{w}, data is {counts.shape}")
    if np.all(counts == np.rint(counts)):
        counts = counts.astype(np.int64)
    return ImageGrid(counts, int(frames), 0, float(pitch))
