"""Run configuration: JSON files with a versioned schema, strict keys and defaults.

Every section maps one-to-one onto ``--set section.key=value`` overrides.
Defaults reproduce the 96 x 96 px, 100 µm silver-grating scenario.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .analysis import EdgeRegion
from .simulate import SamplePattern, SourceModel, make_grating
from .timetag import ScanConfig

SCHEMA = "qscope-run/1"


class ConfigError(ValueError):
    pass


@dataclass
class SampleSection:
    kind: str = "grating"          # "grating" or "csv"
    square_size: float = 20.0      # µm
    gap: float = 10.0              # µm
    field: float = 100.0           # µm, side of the sample map
    resolution: int = 400          # texels per side
    offset: float = 0.0            # µm shift of the first square
    floor: float = 0.0             # reflectance between squares
    blur_sigma: float = 2.0        # µm, optical blur
    path: str | None = None        # reflectance CSV when kind == "csv"


@dataclass
class AcquisitionSection:
    frames: int | None = 20        # whole frames to acquire
    duration: float | None = None  # seconds; overrides frames when set
    lead_in: float = 0.0           # µs before the first line trigger


@dataclass
class CoincidenceSection:
    bin_width_ps: int = 100
    lag_range_ps: int = 10_000
    window_ps: int = 1000
    delay_ps: float | None = None  # None: estimate from the histogram
    direction: str = "both"        # "both", "forward" or "reverse"


@dataclass
class ChannelSection:
    signal: int = 0
    idler: int = 1
    trigger: int = 2


@dataclass
class AnalysisSection:
    edge_regions: list | None = None   # [{"rows": [r0, r1], "cols": [c0, c1], "count": n, "axis": "x"}]
    wavelength_um: float = 1.673
    numerical_apertures: list = field(default_factory=lambda: [0.3, 0.5])
    pump_nm: float = 772.3
    signal_nm: float = 1435.0
    plots: bool = True


@dataclass
class PathSection:
    input: str | None = None
    out: str = "qscope-out"
    streams: list = field(default_factory=lambda: ["signal.qtt", "idler.qtt", "triggers.qtt"])


@dataclass
class RunConfig:
    schema: str = SCHEMA
    seed: int = 0
    scan: dict = field(default_factory=lambda: asdict(ScanConfig()))
    source: dict = field(default_factory=lambda: _source_defaults())
    sample: SampleSection = field(default_factory=SampleSection)
    acquisition: AcquisitionSection = field(default_factory=AcquisitionSection)
    coincidence: CoincidenceSection = field(default_factory=CoincidenceSection)
    channels: ChannelSection = field(default_factory=ChannelSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def scan_config(self) -> ScanConfig:
        return ScanConfig(**self.scan)

    def source_model(self) -> SourceModel:
        return SourceModel(rng_seed=self.seed, **self.source)

    def sample_pattern(self) -> SamplePattern:
        s = self.sample
        if s.kind == "grating":
            g = make_grating(s.square_size, s.gap, s.field, s.resolution, s.blur_sigma, s.offset)
            r = s.floor + (1.0 - s.floor) * g.reflectance
            return SamplePattern(r, g.size, s.blur_sigma)
        refl = np.loadtxt(s.path, delimiter=",", ndmin=2)
        return SamplePattern(refl, (s.field, s.field * refl.shape[0] / refl.shape[1]),
                             s.blur_sigma)

    def duration(self) -> float:
        a = self.acquisition
        if a.duration is not None:
            return float(a.duration)
        return self.scan_config().duration_for_frames(a.frames, round(a.lead_in * 1e6))

    def edge_regions(self) -> list[EdgeRegion]:
        regions = self.analysis.edge_regions
        if not regions:
            raise ConfigError(
                "analysis needs edge regions: set analysis.edge_regions to a list of "
                "{rows: [r0, r1], cols: [c0, c1], count: n, axis: 'x'|'y'}")
        out = []
        for i, r in enumerate(regions):
            unknown = set(r) - {"rows", "cols", "count", "axis"}
            missing = {"rows", "cols"} - set(r)
            if unknown or missing:
                raise ConfigError(
                    f"analysis.edge_regions[{i}]: required keys rows, cols; "
                    f"missing {sorted(missing)}, unknown {sorted(unknown)}")
            out.append(EdgeRegion(tuple(r["rows"]), tuple(r["cols"]),
                                  int(r.get("count", 20)), r.get("axis", "x")))
        return out


def _source_defaults() -> dict:
    d = asdict(SourceModel())
    d.pop("rng_seed")
    return d


_SECTIONS = {
    "sample": SampleSection,
    "acquisition": AcquisitionSection,
    "coincidence": CoincidenceSection,
    "channels": ChannelSection,
    "analysis": AnalysisSection,
    "paths": PathSection,
}
_DICT_SECTIONS = {"scan": lambda: asdict(ScanConfig()), "source": _source_defaults}


PRESETS = {
    "paper-grating": {},
    "large-fov": {
        "scan": {"pixels_x": 160, "pixels_y": 160,
                 "field_of_view_x": 450.0, "field_of_view_y": 450.0},
        "sample": {"field": 450.0, "resolution": 900, "floor": 0.3},
        "acquisition": {"frames": 10},
    },
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key in {**_SECTIONS, **_DICT_SECTIONS}:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path!r} must be an object")
            _merge(base[key], value, path)
        else:
            base[key] = value
    return base


def build(overrides: dict | None = None, preset: str | None = None) -> RunConfig:
    """Defaults, then an optional preset, then ``overrides``; validated."""
    data = RunConfig().to_dict()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(data, copy.deepcopy(PRESETS[preset]))
    if overrides:
        _merge(data, overrides)
    return from_dict(data)


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    if data.get("schema", SCHEMA) != SCHEMA:
        raise ConfigError(f"unsupported schema {data.get('schema')!r}, expected {SCHEMA!r}")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            bad = set(value) - {f.name for f in fields(cls)}
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            kwargs[key] = cls(**value)
        elif key in _DICT_SECTIONS:
            bad = set(value) - set(_DICT_SECTIONS[key]())
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            kwargs[key] = {**_DICT_SECTIONS[key](), **value}
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.scan_config()
        cfg.source_model()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.sample.kind not in ("grating", "csv"):
        raise ConfigError(f"sample.kind must be 'grating' or 'csv', got {cfg.sample.kind!r}")
    if cfg.sample.kind == "csv" and not cfg.sample.path:
        raise ConfigError("sample.path is required when sample.kind is 'csv'")
    a = cfg.acquisition
    if a.duration is None and (a.frames is None or a.frames < 0):
        raise ConfigError("set acquisition.frames (>= 0) or acquisition.duration")
    if a.duration is not None and a.duration < 0:
        raise ConfigError("acquisition.duration must be >= 0")
    c = cfg.coincidence
    if c.bin_width_ps <= 0 or c.window_ps <= 0:
        raise ConfigError("coincidence.bin_width_ps and window_ps must be positive")
    if c.lag_range_ps <= 0 or c.lag_range_ps % c.bin_width_ps:
        raise ConfigError("coincidence.lag_range_ps must be a positive multiple of bin_width_ps")
    if c.direction not in ("both", "forward", "reverse"):
        raise ConfigError("coincidence.direction must be 'both', 'forward' or 'reverse'")
    if len({cfg.channels.signal, cfg.channels.idler, cfg.channels.trigger}) != 3:
        raise ConfigError("channels.signal, idler and trigger must be distinct")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")


def load(path, preset: str | None = None, sets=()) -> RunConfig:
    overrides = {}
    if path:
        try:
            with open(path) as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for item in sets:
        _deep_update(overrides, parse_set(item))
    return build(overrides, preset)


def _deep_update(base: dict, update: dict) -> dict:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def parse_set(item: str) -> dict:
    """``section.key=value`` to a nested dict; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out
