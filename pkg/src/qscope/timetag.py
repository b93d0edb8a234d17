"""Timetag streams, scanner configuration and the QTT1 binary stream format.

All timestamps are 64-bit signed integers in picoseconds. Channel ids are
fixed in files (0 = signal, 1 = idler, 2 = line trigger) and may be remapped
when loading.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

SIGNAL, IDLER, TRIGGER = 0, 1, 2
CHANNELS = (SIGNAL, IDLER, TRIGGER)

QTT1_MAGIC = b"QTT1\0\0\0\0"
QTT1_RECORD = np.dtype(
    [("time", "<i8"), ("channel", "<u2"), ("reserved0", "<u2"), ("reserved1", "<u4")]
)


class StreamFormatError(ValueError):
    """Raised when a timetag file or stream is malformed."""


@dataclass(frozen=True)
class TimeTag:
    channel: int
    time: int


@dataclass(frozen=True, eq=False)
class TagStream:
    """Time-ordered sequence of tags stored as parallel arrays.

    ``resolution`` is the timestamp quantum of the recording device in
    picoseconds; ``times`` are always expressed in picoseconds.
    """

    times: np.ndarray
    channels: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.int64)
        channels = np.ascontiguousarray(self.channels, dtype=np.uint16)
        if channels.ndim == 0:
            channels = np.full(times.shape, channels, dtype=np.uint16)
        if times.ndim != 1 or times.shape != channels.shape:
            raise ValueError("times and channels must be 1-D arrays of equal length")
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        times.setflags(write=False)
        channels.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "channels", channels)

    @classmethod
    def empty(cls, resolution: float = 1.0) -> "TagStream":
        return cls(np.empty(0, np.int64), np.empty(0, np.uint16), resolution)

    @classmethod
    def from_times(cls, times, channel: int, resolution: float = 1.0) -> "TagStream":
        times = np.asarray(times, dtype=np.int64)
        return cls(times, np.full(times.shape, channel, np.uint16), resolution)

    @classmethod
    def from_tags(cls, tags, resolution: float = 1.0) -> "TagStream":
        tags = list(tags)
        return cls(
            np.array([t.time for t in tags], dtype=np.int64),
            np.array([t.channel for t in tags], dtype=np.uint16),
            resolution,
        )

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self):
        for c, t in zip(self.channels.tolist(), self.times.tolist()):
            yield TimeTag(c, t)

    def __getitem__(self, i) -> TimeTag:
        return TimeTag(int(self.channels[i]), int(self.times[i]))

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.channels, other.channels)
        )

    __hash__ = None

    def channel(self, ch: int) -> "TagStream":
        """Sub-stream containing only tags of channel ``ch``."""
        keep = self.channels == ch
        return TagStream(self.times[keep], self.channels[keep], self.resolution)

    def remap(self, mapping: dict[int, int]) -> "TagStream":
        """Rename channels, ``mapping`` goes from stored id to logical id."""
        out = self.channels.copy()
        for src, dst in mapping.items():
            out[self.channels == src] = dst
        return TagStream(self.times, out, self.resolution)


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_stream(stream: TagStream, channels=CHANNELS) -> ValidationReport:
    """Check ordering, sign and channel range of every tag.

    Every offending index is reported; the stream itself is not touched.
    """
    times, chans = stream.times, stream.channels
    violations = []
    for i in np.flatnonzero(np.diff(times) < 0) + 1:
        violations.append(Violation(
            int(i), "order",
            f"time {times[i]} precedes previous tag at {times[i - 1]}"))
    for i in np.flatnonzero(times < 0):
        violations.append(Violation(int(i), "negative", f"negative time {times[i]}"))
    for i in np.flatnonzero(~np.isin(chans, np.asarray(channels, np.uint16))):
        violations.append(Violation(int(i), "channel", f"unknown channel {chans[i]}"))
    violations.sort(key=lambda v: v.index)
    return ValidationReport(violations)


def merge_streams(a: TagStream, b: TagStream) -> TagStream:
    """Time-ordered union of two streams; on equal times tags of ``a`` come first."""
    if a.resolution != b.resolution:
        raise ValueError(
            f"cannot merge streams with resolutions {a.resolution} and {b.resolution} ps")
    times = np.concatenate([a.times, b.times])
    chans = np.concatenate([a.channels, b.channels])
    order = np.argsort(times, kind="stable")
    return TagStream(times[order], chans[order], a.resolution)


def merge_all(streams) -> TagStream:
    streams = list(streams)
    out = streams[0]
    for s in streams[1:]:
        out = merge_streams(out, s)
    return out


# QTT1 on-disk layout: 8-byte magic, u64 resolution in femtoseconds, then
# 16-byte records (i64 time in resolution units, u16 channel, 6 zero bytes).

def _resolution_fs(resolution_ps: float) -> int:
    fs = round(resolution_ps * 1000)
    if fs <= 0 or abs(fs - resolution_ps * 1000) > 1e-6 * fs:
        raise StreamFormatError(f"resolution {resolution_ps} ps is not a whole number of fs")
    return fs


def encode_stream(stream: TagStream) -> bytes:
    fs = _resolution_fs(stream.resolution)
    units, rem = np.divmod(stream.times * 1000, fs)
    if np.any(rem):
        raise StreamFormatError("timestamps are not multiples of the stream resolution")
    records = np.zeros(len(stream), dtype=QTT1_RECORD)
    records["time"] = units
    records["channel"] = stream.channels
    return QTT1_MAGIC + np.uint64(fs).astype("<u8").tobytes() + records.tobytes()


def decode_stream(data: bytes) -> TagStream:
    if len(data) < 16 or data[:8] != QTT1_MAGIC:
        raise StreamFormatError("bad magic: not a QTT1 stream")
    fs = int(np.frombuffer(data, "<u8", count=1, offset=8)[0])
    if fs == 0:
        raise StreamFormatError("zero resolution in header")
    body = data[16:]
    if len(body) % QTT1_RECORD.itemsize:
        raise StreamFormatError(
            f"truncated record: {len(body)} payload bytes is not a multiple of 16")
    records = np.frombuffer(body, dtype=QTT1_RECORD)
    bad = np.flatnonzero((records["reserved0"] != 0) | (records["reserved1"] != 0))
    if bad.size:
        raise StreamFormatError(f"nonzero reserved bytes in record {bad[0]}")
    times = records["time"].astype(np.int64) * fs // 1000
    return TagStream(times, records["channel"], fs / 1000)


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_stream(path, stream: TagStream) -> None:
    atomic_write(path, encode_stream(stream))


def read_stream(path) -> TagStream:
    with open(path, "rb") as fh:
        return decode_stream(fh.read())


@dataclass(frozen=True)
class ScanConfig:
    """Scanner geometry and timing.

    Durations are in microseconds and lengths in micrometers. With
    ``bidirectional`` each trigger starts a forward pass followed, one
    turnaround later, by a reverse pass over the same line.
    """

    pixels_x: int = 96
    pixels_y: int = 96
    dwell_time: float = 10.0
    turnaround_time: float = 400.0
    field_of_view_x: float = 100.0
    field_of_view_y: float = 100.0
    bidirectional: bool = True
    flyback_equals_frame: bool = True

    def __post_init__(self):
        if self.pixels_x < 1 or self.pixels_y < 1:
            raise ValueError("pixel counts must be positive")
        if not self.dwell_time > 0:
            raise ValueError(f"dwell_time must be positive, got {self.dwell_time}")
        if not self.turnaround_time >= 0:
            raise ValueError(f"turnaround_time must be >= 0, got {self.turnaround_time}")
        for name in ("field_of_view_x", "field_of_view_y"):
            pitch = getattr(self, name) / (self.pixels_x if name.endswith("x") else self.pixels_y)
            if not (math.isfinite(pitch) and pitch > 0):
                raise ValueError(f"{name} gives a non-positive pixel pitch")

    @property
    def pixel_pitch(self) -> float:
        return self.field_of_view_x / self.pixels_x

    @property
    def pixel_pitch_y(self) -> float:
        return self.field_of_view_y / self.pixels_y

    @property
    def dwell_ps(self) -> int:
        return round(self.dwell_time * 1e6)

    @property
    def turnaround_ps(self) -> int:
        return round(self.turnaround_time * 1e6)

    @property
    def forward_ps(self) -> int:
        return self.pixels_x * self.dwell_ps

    @property
    def line_period_ps(self) -> int:
        """Nominal spacing of line triggers."""
        passes = 2 if self.bidirectional else 1
        return passes * (self.forward_ps + self.turnaround_ps)

    @property
    def min_trigger_spacing_ps(self) -> int:
        """Shortest trigger spacing that keeps a line's segments disjoint from the next."""
        if self.bidirectional:
            return 2 * self.forward_ps + self.turnaround_ps
        return self.forward_ps + self.turnaround_ps

    @property
    def frame_duration_ps(self) -> int:
        return self.pixels_y * self.line_period_ps

    @property
    def flyback_ps(self) -> int:
        return self.frame_duration_ps if self.flyback_equals_frame else 0

    @property
    def frame_period_ps(self) -> int:
        return self.frame_duration_ps + self.flyback_ps

    def duration_for_frames(self, frames: int, lead_in_ps: int = 0) -> float:
        """Acquisition time in seconds that contains ``frames`` complete frames."""
        return (lead_in_ps + frames * self.frame_period_ps) * 1e-12
