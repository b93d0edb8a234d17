"""``qscope simulate|reconstruct|analyze`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from .analysis import (
    EdgeFitError, confocal_limit, extract_linescans, fit_linescans, fit_sqrt_scaling,
    idler_wavelength, snr_curve, threshold_mask,
)
from .coincidence import (
    NoCorrelationPeak, cross_correlation_histogram, estimate_delay, match_coincidences,
)
from .config import ConfigError, RunConfig
from .scan import (
    ImageGrid, TimelineError, assign_pixels, build_timeline, frame_stack, read_image_csv,
    write_image_csv, write_pgm,
)
from .simulate import simulate
from .timetag import (
    IDLER, SIGNAL, TRIGGER, StreamFormatError, TagStream, atomic_write, merge_all,
    read_stream, validate_stream, write_stream,
)

log = logging.getLogger("qscope")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


def _threads() -> int:
    raw = os.environ.get("QSCOPE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _dump_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _indir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.input) if cfg.paths.input else Path(cfg.paths.out)


def cmd_simulate(cfg: RunConfig) -> dict:
    """Write QTT1 streams, the ground-truth image and a run manifest."""
    scan = cfg.scan_config()
    sample = cfg.sample_pattern()
    duration = cfg.duration()
    out = _outdir(cfg)

    sim = simulate(sample, cfg.source_model(), scan, duration, cfg.acquisition.lead_in)
    names = dict(zip(("signal", "idler", "triggers"), cfg.paths.streams))
    ch = cfg.channels
    write_stream(out / names["signal"], sim.signal.remap({SIGNAL: ch.signal}))
    write_stream(out / names["idler"], sim.idler.remap({IDLER: ch.idler}))
    write_stream(out / names["triggers"], sim.triggers.remap({TRIGGER: ch.trigger}))
    write_image_csv(out / "ground_truth.csv", sim.ground_truth)
    write_pgm(out / "ground_truth.pgm", sim.ground_truth)
    summary = {
        "duration_s": duration,
        "pairs": sim.n_pairs,
        "signal_tags": len(sim.signal),
        "idler_tags": len(sim.idler),
        "trigger_tags": len(sim.triggers),
        "frames": 0 if sim.timeline is None else len(sim.timeline.frames),
    }
    _dump_json(out / "manifest.json",
               {"qscope_version": __version__, "config": cfg.to_dict(), "summary": summary})
    log.info("simulated %.3f s: %s", duration, summary)
    return summary


def load_streams(cfg: RunConfig) -> tuple[TagStream, TagStream, TagStream]:
    src = _indir(cfg)
    streams = []
    for name in cfg.paths.streams:
        path = src / name
        try:
            streams.append(read_stream(path))
        except FileNotFoundError as exc:
            raise DataError(f"missing stream file {path}") from exc
        except StreamFormatError as exc:
            raise DataError(f"{path}: {exc}") from exc
    if not streams:
        raise DataError("no stream files configured in paths.streams")
    try:
        merged = merge_all(streams)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    ch = cfg.channels
    merged = merged.remap({ch.signal: SIGNAL, ch.idler: IDLER, ch.trigger: TRIGGER})
    report = validate_stream(merged)
    if not report.ok:
        v = report.violations[0]
        raise DataError(
            f"invalid stream: {len(report.violations)} violation(s), first at tag {v.index}: "
            f"{v.message}")
    return merged.channel(SIGNAL), merged.channel(IDLER), merged.channel(TRIGGER)


def cmd_reconstruct(cfg: RunConfig) -> dict:
    """Coincidence and idler-singles images, per-frame stack, histogram and report."""
    scan = cfg.scan_config()
    c = cfg.coincidence
    signal, idler, triggers = load_streams(cfg)
    if len(triggers) == 0:
        raise DataError("cannot build timeline: the stream has no line-trigger tags")
    try:
        timeline = build_timeline(triggers, scan)
    except TimelineError as exc:
        raise DataError(str(exc)) from exc
    out = _outdir(cfg)
    warnings = []

    hist = cross_correlation_histogram(signal, idler, c.bin_width_ps, c.lag_range_ps)
    significance = peak = None
    if c.delay_ps is not None:
        delay = float(c.delay_ps)
    else:
        try:
            est = estimate_delay(hist)
            delay, peak = est.delay, est.peak_counts
            # JSON has no infinity; an empty background is reported as null
            significance = est.significance if math.isfinite(est.significance) else None
        except NoCorrelationPeak:
            delay = 0.0
            warnings.append("no correlation peak in histogram; using zero delay")
    coinc = match_coincidences(signal, idler, delay, c.window_ps)
    if len(coinc) == 0:
        warnings.append("no coincidences found; coincidence image is empty")

    stack, _ = frame_stack(coinc, timeline, direction=c.direction)
    image = assign_pixels(coinc, timeline, direction=c.direction)
    idler_img = assign_pixels(idler, timeline, direction=c.direction)

    atomic_write(out / "histogram.csv", hist.to_csv())
    write_image_csv(out / "coincidence.csv", image)
    write_pgm(out / "coincidence.pgm", image)
    write_image_csv(out / "idler.csv", idler_img)
    write_pgm(out / "idler.pgm", idler_img)
    np.save(out / "coincidence_frames.npy", stack)

    report = {
        "delay_ps": delay,
        "peak_significance": significance,
        "peak_counts": peak,
        "coincidences": len(coinc),
        "window_ps": c.window_ps,
        "discarded_coincidences": image.discarded_tags,
        "discarded_idler_tags": idler_img.discarded_tags,
        "frames": len(timeline.frames),
        "complete_frames": sum(f.complete for f in timeline.frames),
        "image_total": int(image.counts.sum()),
        "signal_tags": len(signal),
        "idler_tags": len(idler),
        "trigger_tags": len(triggers),
        "warnings": warnings,
    }
    _dump_json(out / "reconstruction.json", report)
    if cfg.analysis.plots:
        from . import plotting

        plotting.plot_histogram(hist, out / "histogram.png", delay)
        plotting.plot_image(image, out / "coincidence.png", label="coincidences / pixel")
        plotting.plot_image(idler_img, out / "idler.png", label="idler counts / pixel")
    for w in warnings:
        log.warning(w)
    return report


def _read_image(path) -> ImageGrid:
    try:
        return read_image_csv(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing image {path}; run reconstruct first") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_analyze(cfg: RunConfig) -> dict:
    """SNR-versus-frames curve with its square-root fit, edge fits and confocal limits."""
    regions = cfg.edge_regions()
    src = _indir(cfg)
    image = _read_image(src / "coincidence.csv")
    reference = _read_image(src / "idler.csv")
    try:
        stack = np.load(src / "coincidence_frames.npy")
    except FileNotFoundError as exc:
        raise DataError(f"missing {src / 'coincidence_frames.npy'}; run reconstruct first") from exc
    if stack.shape[1:] != image.counts.shape or reference.counts.shape != image.counts.shape:
        raise DataError("frame stack, coincidence image and idler image differ in shape")
    out = _outdir(cfg)

    masks = threshold_mask(reference)
    try:
        frames, values = snr_curve(stack, masks)
    except ValueError as exc:
        raise NumericalError(f"SNR undefined: {exc}") from exc
    lines = ["frames,snr"] + [f"{k},{v!r}" for k, v in zip(frames.tolist(), values.tolist())]
    atomic_write(out / "snr_curve.csv", "\n".join(lines) + "\n")
    try:
        sqrt_fit = fit_sqrt_scaling(np.c_[frames, values])
        sqrt_report = {"A": sqrt_fit.A, "r_squared": sqrt_fit.r_squared,
                       "points": sqrt_fit.n_points, "degenerate": sqrt_fit.degenerate}
    except ValueError as exc:
        sqrt_fit = None
        sqrt_report = {"degenerate": True, "error": str(exc), "points": int(frames.size)}
    _dump_json(out / "sqrt_fit.json", sqrt_report)

    scans = []
    try:
        for region in regions:
            scans.extend(extract_linescans(image, region))
    except ValueError as exc:
        raise ConfigError(f"analysis.edge_regions: {exc}") from exc
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        summary = fit_linescans(scans, pool)
    if not summary.fits:
        raise NumericalError(f"every edge fit failed: {summary.failures}")
    fitted = summary.scans
    rows = ["scan,axis,index,amplitude,offset,center_um,sigma_res_um,sigma_res_se,"
            "residual_norm,iterations,sharp_edge"]
    for n, (scan, f) in enumerate(zip(fitted, summary.fits)):
        rows.append(
            f"{n},{scan.axis},{scan.index},{f.amplitude!r},{f.offset!r},{f.center!r},"
            f"{f.sigma_res!r},{f.stderr['sigma_res']!r},{f.residual_norm!r},{f.iterations},"
            f"{int(f.sharp_edge)}")
    atomic_write(out / "edge_fits.csv", "\n".join(rows) + "\n")
    edge_report = {
        "fits": [f.to_dict() for f in summary.fits],
        "failures": summary.failures,
        "sigma_res_mean_um": summary.mean,
        "sigma_res_std_um": summary.std,
        "count": len(summary.fits),
    }
    _dump_json(out / "edge_fits.json", edge_report)

    a = cfg.analysis
    optics = {
        "idler_wavelength_nm": idler_wavelength(a.pump_nm, a.signal_nm),
        "wavelength_um": a.wavelength_um,
        "confocal_limit_um": {str(na): confocal_limit(a.wavelength_um, na)
                              for na in a.numerical_apertures},
    }
    bundle = {
        "snr": {"final": float(values[-1]), "fit": sqrt_report},
        "edges": {k: edge_report[k] for k in ("sigma_res_mean_um", "sigma_res_std_um", "count")},
        "optics": optics,
        "frames": int(frames.size),
    }
    _dump_json(out / "analysis.json", bundle)
    if a.plots:
        from . import plotting

        plotting.plot_snr_curve(frames, values, sqrt_fit, out / "snr_curve.png")
        plotting.plot_edge_fits(fitted, summary.fits, out / "edge_fits.png")
    return bundle


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qscope", description="Simulate, reconstruct and analyse scanning coincidence images.")
    parser.add_argument("--version", action="version", version=f"qscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS),
                       help="base configuration applied before --config")
        p.add_argument("--seed", type=int, help="overrides seed")
        p.add_argument("--out", help="overrides paths.out")
        p.add_argument("--input", help="overrides paths.input")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (value parsed as JSON)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.out is not None:
        sets.append(f"paths.out={json.dumps(args.out)}")
    if args.input is not None:
        sets.append(f"paths.input={json.dumps(args.input)}")
    try:
        cfg = config_mod.load(args.config, args.preset, sets)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"qscope: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"qscope: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, EdgeFitError, FloatingPointError) as exc:
        print(f"qscope: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
