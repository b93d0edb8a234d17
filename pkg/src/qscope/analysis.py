"""Image-quality analyses: SNR between bright and dark regions, its growth
with accumulated frames, and edge-response resolution fits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .scan import ImageGrid

SQRT2 = math.sqrt(2.0)
TWO_OVER_SQRTPI = 2.0 / math.sqrt(math.pi)


def idler_wavelength(lambda_p: float, lambda_s: float) -> float:
    """Idler wavelength from energy conservation, ``1/li = 1/lp - 1/ls``."""
    if not 0 < lambda_p < lambda_s:
        raise ValueError(
            f"need 0 < pump ({lambda_p}) < signal ({lambda_s}) wavelength for a physical idler")
    return 1.0 / (1.0 / lambda_p - 1.0 / lambda_s)


def confocal_limit(wavelength: float, na: float) -> float:
    """20-80 % edge-response width of a confocal microscope, ``0.33 * lambda / NA``."""
    if not 0 < na <= 1.6:
        raise ValueError(f"numerical aperture {na} outside (0, 1.6]")
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    return 0.33 * wavelength / na


# --- SNR -------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPair:
    bright: np.ndarray
    dark: np.ndarray

    def __post_init__(self):
        if self.bright.shape != self.dark.shape:
            raise ValueError("bright and dark masks differ in shape")
        if np.any(self.bright & self.dark):
            raise ValueError("bright and dark masks overlap")


def _counts(image) -> np.ndarray:
    return np.asarray(image.counts if isinstance(image, ImageGrid) else image, dtype=float)


def threshold_mask(reference) -> MaskPair:
    """Bright = pixels strictly above the reference mean, dark = the rest."""
    c = _counts(reference)
    if c.size == 0:
        raise ValueError("empty reference image")
    bright = c > c.mean()
    return MaskPair(bright, ~bright)


def snr(image, masks: MaskPair) -> float:
    """``|mean_bright - mean_dark| / sqrt(var_bright + var_dark)`` over pixels.

    Variances are population variances of the pixel counts in each region.
    """
    c = _counts(image)
    if c.shape != masks.bright.shape:
        raise ValueError(f"image shape {c.shape} does not match masks {masks.bright.shape}")
    b, d = c[masks.bright], c[masks.dark]
    if b.size == 0 or d.size == 0:
        raise ValueError("SNR needs non-empty bright and dark regions")
    num = abs(b.mean() - d.mean())
    den = math.sqrt(b.var() + d.var())
    if num == 0:
        return 0.0
    return num / den if den > 0 else math.inf


def snr_curve(stack: np.ndarray, masks: MaskPair) -> tuple[np.ndarray, np.ndarray]:
    """SNR of the running sum of the first ``k`` frames for ``k = 1..n``."""
    stack = np.asarray(stack)
    if not masks.bright.any() or not masks.dark.any():
        raise ValueError("SNR needs non-empty bright and dark regions")
    cum = np.cumsum(stack, axis=0, dtype=np.int64)
    b = cum[:, masks.bright].astype(float)
    d = cum[:, masks.dark].astype(float)
    num = np.abs(b.mean(axis=1) - d.mean(axis=1))
    den = np.sqrt(b.var(axis=1) + d.var(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(num == 0, 0.0, num / den)
    return np.arange(1, len(stack) + 1), out


@dataclass(frozen=True)
class SqrtFitResult:
    A: float
    r_squared: float
    n_points: int
    degenerate: bool = False


def fit_sqrt_scaling(points) -> SqrtFitResult:
    """Least-squares fit of ``y = A * sqrt(x)`` with its coefficient of determination."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no points to fit")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 1):
        raise ValueError("frame counts must be >= 1")
    if np.all(y == 0):
        raise ValueError("degenerate SNR curve: all values are zero")
    A = float(np.sum(y * np.sqrt(x)) / np.sum(x))
    if pts.shape[0] == 1:
        return SqrtFitResult(float(y[0] / math.sqrt(x[0])), 1.0, 1, degenerate=True)
    ss_res = float(np.sum((y - A * np.sqrt(x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else -math.inf
    else:
        r2 = 1.0 - ss_res / ss_tot
    return SqrtFitResult(A, r2, int(pts.shape[0]))


# --- edge response -----------------------------------------------------------

PARAM_NAMES = ("amplitude", "offset", "center", "sigma_res")


def edge_model(x, params) -> np.ndarray:
    """``A * erf((x - c) / (sqrt(2) * sigma)) + B`` with params ``(A, B, c, sigma)``."""
    A, B, c, s = params
    return A * erf((np.asarray(x, dtype=float) - c) / (SQRT2 * s)) + B


def edge_jacobian(x, params) -> np.ndarray:
    """Partial derivatives of :func:`edge_model`, shape ``(len(x), 4)``."""
    A, B, c, s = params
    x = np.asarray(x, dtype=float)
    z = (x - c) / (SQRT2 * s)
    g = A * TWO_OVER_SQRTPI * np.exp(-z * z)
    J = np.empty((x.size, 4))
    J[:, 0] = erf(z)
    J[:, 1] = 1.0
    J[:, 2] = -g / (SQRT2 * s)
    J[:, 3] = -g * z / s
    return J


def poisson_weights(counts) -> np.ndarray:
    return 1.0 / np.sqrt(np.maximum(np.asarray(counts, dtype=float), 1.0))


def edge_residuals(x, y, params, weights=None) -> np.ndarray:
    w = poisson_weights(y) if weights is None else weights
    return (edge_model(x, params) - np.asarray(y, dtype=float)) * w


def edge_residual_jacobian(x, y, params, weights=None) -> np.ndarray:
    w = poisson_weights(y) if weights is None else weights
    return edge_jacobian(x, params) * w[:, None]


@dataclass
class EdgeFitResult:
    amplitude: float
    offset: float
    center: float
    sigma_res: float
    residual_norm: float
    stderr: dict
    iterations: int
    reduced_chi2: float
    sharp_edge: bool = False

    @property
    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.offset, self.center, self.sigma_res])

    def to_dict(self) -> dict:
        return asdict(self)


class EdgeFitError(RuntimeError):
    """Fit did not converge; carries the best parameters found and diagnostics."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


def _crossing(x, y, level, rising) -> float:
    """Position where ``y`` first passes ``level``, linearly interpolated."""
    above = y >= level if rising else y <= level
    k = int(np.argmax(above))
    if k == 0 or not above[k]:
        return float(x[k])
    y0, y1 = y[k - 1], y[k]
    frac = 0.5 if y1 == y0 else (level - y0) / (y1 - y0)
    return float(x[k - 1] + frac * (x[k] - x[k - 1]))


def initial_edge_guess(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lo, hi = y.min(), y.max()
    third = max(1, y.size // 3)
    rising = y[-third:].mean() >= y[:third].mean()
    A = (hi - lo) / 2 * (1 if rising else -1)
    B = (hi + lo) / 2
    c = _crossing(x, y, B, rising)
    l10, l90 = lo + 0.1 * (hi - lo), lo + 0.9 * (hi - lo)
    rise = abs(_crossing(x, y, l90, rising) - _crossing(x, y, l10, rising))
    spacing = float(np.median(np.diff(x)))
    sigma = max(rise / 4, spacing)
    return np.array([A, B, c, sigma])


def fit_edge(positions, counts, *, p0=None, max_iter: int = 2000, gtol: float = 1e-8,
             xtol: float = 1e-12) -> EdgeFitResult:
    """Poisson-weighted Levenberg-Marquardt fit of an erf edge profile.

    The width is kept above 1 % of the sampling pitch. A fit that ends on
    that bound, or below a quarter of the pitch where the samples no longer
    constrain it, is returned with ``sharp_edge=True``.
    """
    x = np.asarray(positions, dtype=float)
    y = np.asarray(counts, dtype=float)
    if x.size < 6:
        raise ValueError("edge fit needs at least 6 points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("positions must be strictly increasing")
    w = poisson_weights(y)
    pitch = float(np.median(np.diff(x)))
    sigma_min = 0.01 * pitch

    p = initial_edge_guess(x, y) if p0 is None else np.asarray(p0, dtype=float).copy()
    p[3] = max(p[3], sigma_min)
    r = edge_residuals(x, y, p, w)
    J = edge_residual_jacobian(x, y, p, w)
    cost = 0.5 * r @ r
    H = J.T @ J
    g = J.T @ r
    mu = 1e-3 * float(np.max(np.diag(H)))
    nu = 2.0
    converged = False

    it = 0
    for it in range(1, max_iter + 1):
        at_bound = p[3] <= sigma_min * (1 + 1e-12)
        g_eff = g.copy()
        if at_bound and g_eff[3] > 0:
            g_eff[3] = 0.0
        col = np.linalg.norm(J, axis=0)
        rn = math.sqrt(2 * cost)
        if rn == 0 or np.max(np.abs(g_eff) / np.maximum(col * rn, 1e-300)) <= gtol:
            converged = True
            break
        D = np.maximum(np.diag(H), 1e-300)
        try:
            h = np.linalg.solve(H + mu * np.diag(D), -g)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2
            continue
        p_new = p + h
        p_new[3] = max(p_new[3], sigma_min)
        step = p_new - p
        if np.linalg.norm(step) <= xtol * (np.linalg.norm(p) + xtol):
            converged = True
            break
        r_new = edge_residuals(x, y, p_new, w)
        cost_new = 0.5 * r_new @ r_new
        predicted = 0.5 * step @ (mu * D * step - g)
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if rho > 0:
            p, r, cost = p_new, r_new, cost_new
            J = edge_residual_jacobian(x, y, p, w)
            H = J.T @ J
            g = J.T @ r
            mu *= max(1 / 3, 1 - (2 * min(rho, 1.0) - 1) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2

    dof = max(x.size - 4, 1)
    chi2 = 2 * cost / dof
    if not converged:
        raise EdgeFitError(
            f"edge fit did not converge in {max_iter} iterations",
            best=p.copy(),
            diagnostics={"iterations": it, "cost": cost, "gradient": g.tolist(), "mu": mu},
        )
    span = float(x[-1] - x[0])
    if p[3] > span:
        raise EdgeFitError(
            f"fitted width {p[3]:.3g} exceeds the linescan span {span:.3g}: no edge resolved",
            best=p.copy(), diagnostics={"iterations": it, "cost": cost})
    try:
        # weights are absolute Poisson errors, so no rescaling by chi2
        cov = np.linalg.inv(H)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(4, math.nan)
    diag = {"iterations": it, "cost": cost, "stderr": se.tolist()}
    if not np.all(np.isfinite(se)) or abs(p[0]) < 3 * se[0]:
        raise EdgeFitError("no significant edge in profile", best=p.copy(), diagnostics=diag)
    if not x[0] <= p[2] <= x[-1]:
        raise EdgeFitError(f"fitted edge center {p[2]:.3g} lies outside the linescan",
                           best=p.copy(), diagnostics=diag)
    return EdgeFitResult(
        amplitude=float(p[0]),
        offset=float(p[1]),
        center=float(p[2]),
        sigma_res=float(p[3]),
        residual_norm=float(math.sqrt(2 * cost)),
        stderr=dict(zip(PARAM_NAMES, (float(v) for v in se))),
        iterations=it,
        reduced_chi2=float(chi2),
        sharp_edge=bool(p[3] < 0.25 * pitch),
    )


@dataclass(frozen=True)
class Linescan:
    positions: np.ndarray
    counts: np.ndarray
    index: int
    axis: str = "x"


@dataclass(frozen=True)
class EdgeRegion:
    """Pixel block ``rows x cols`` (half-open ranges) straddling one edge.

    ``axis="x"`` takes profiles along rows (for an edge running vertically).
    """

    rows: tuple[int, int]
    cols: tuple[int, int]
    count: int = 20
    axis: str = "x"


def extract_linescans(image, region: EdgeRegion) -> list[Linescan]:
    """``region.count`` evenly spread one-pixel profiles across the edge, positions in µm."""
    c = _counts(image)
    pitch = image.pixel_pitch if isinstance(image, ImageGrid) else 1.0
    (r0, r1), (c0, c1) = region.rows, region.cols
    h, w = c.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"region rows {region.rows}, cols {region.cols} outside {h}x{w} image")
    if region.axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    across = (r0, r1) if region.axis == "x" else (c0, c1)
    along = np.arange(c0, c1) if region.axis == "x" else np.arange(r0, r1)
    n = across[1] - across[0]
    if not 1 <= region.count <= n:
        raise ValueError(f"cannot take {region.count} distinct linescans from {n} lines")
    picks = np.unique(np.rint(np.linspace(across[0], across[1] - 1, region.count)).astype(int))
    positions = (along + 0.5) * pitch
    out = []
    for k in picks:
        prof = c[k, c0:c1] if region.axis == "x" else c[r0:r1, k]
        out.append(Linescan(positions, prof.copy(), int(k), region.axis))
    return out


@dataclass
class EdgeSummary:
    fits: list = field(default_factory=list)
    scans: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([f.sigma_res for f in self.fits])

    @property
    def mean(self) -> float:
        return float(self.sigmas.mean()) if self.fits else math.nan

    @property
    def std(self) -> float:
        return float(self.sigmas.std(ddof=1)) if len(self.fits) > 1 else math.nan


def fit_linescans(scans, executor=None) -> EdgeSummary:
    """Fit every linescan; failed fits are collected rather than raised."""
    def one(scan):
        try:
            return fit_edge(scan.positions, scan.counts)
        except (EdgeFitError, ValueError) as exc:
            return exc

    results = list(executor.map(one, scans)) if executor else [one(s) for s in scans]
    summary = EdgeSummary()
    for scan, res in zip(scans, results):
        if isinstance(res, Exception):
            summary.failures.append((scan.index, str(res)))
        else:
            summary.fits.append(res)
            summary.scans.append(scan)
    return summary
