"""Simulation, reconstruction and analysis of scanning photon-pair correlation images."""

from .timetag import (
    IDLER, SIGNAL, TRIGGER, ScanConfig, StreamFormatError, TagStream, TimeTag,
    merge_streams, read_stream, validate_stream, write_stream,
)
from .coincidence import (
    CoincidenceSet, CorrelationHistogram, NoCorrelationPeak, cross_correlation_histogram,
    estimate_delay, match_coincidences,
)
from .scan import (
    ImageGrid, ScanTimeline, TimelineError, accumulate_frames, assign_pixels, build_timeline,
    frame_stack,
)
from .simulate import SamplePattern, SourceModel, make_grating, simulate

__version__ = "0.1.0"

__all__ = [
    "IDLER", "SIGNAL", "TRIGGER", "ScanConfig", "StreamFormatError", "TagStream", "TimeTag",
    "merge_streams", "read_stream", "validate_stream", "write_stream",
    "CoincidenceSet", "CorrelationHistogram", "NoCorrelationPeak", "cross_correlation_histogram",
    "estimate_delay", "match_coincidences",
    "ImageGrid", "ScanTimeline", "TimelineError", "accumulate_frames", "assign_pixels",
    "build_timeline", "frame_stack",
    "SamplePattern", "SourceModel", "make_grating", "simulate",
]
