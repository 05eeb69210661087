"""
Correlation fractal dimension of the row-points of a data matrix.

Pair counts (or squared box occupancies) are sampled over a radius schedule,
plotted as log measure against log(1/r), and fitted with a parametric sigmoid
under Tukey weighting over the y range. The dimension D2 is the slope of the
sigmoid at its inflection point, Cx*Cy/4.
"""
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy import stats
from scipy.optimize import least_squares
from scipy.signal.windows import tukey
from scipy.spatial.distance import pdist
from scipy.special import expit

from artifact_io import write_json_atomic, write_text_atomic
from datamodel import DataMatrix

logger = logging.getLogger(__name__)

PAIR_COUNT = "pair-count"
BOX_COUNT = "box-count"
METHODS = (PAIR_COUNT, BOX_COUNT)

DEFAULT_Q = 0.75
CX_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)
MIN_FIT_POINTS = 5
MIN_RADII = 8
CONFIDENCE_ALPHA = 0.05
CY_SPAN_LIMIT = 2.0
MAX_HALVINGS = 50
BISECTION_STEPS = 40

PRINCIPAL_FRAME = "principal"
DATA_FRAME = "data"
FRAMES = (PRINCIPAL_FRAME, DATA_FRAME)


class DegenerateCurveError(ValueError):
    """Not enough usable information to build or fit a log-log curve."""


class SigmoidFitError(RuntimeError):
    """The sigmoid optimizer did not converge, or converged to an inflection outside the data."""


@dataclass
class LogLogCurve:
    """
    Sampled points (log(1/r), log measure), r strictly decreasing.

    `measure` holds the raw pair counts or occupancy sums per kept radius;
    radii whose pair count was zero are listed in `dropped_r`.
    """

    r_values: NDArray[np.float64]
    measure: NDArray[np.float64]
    method: str
    dropped_r: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.r_values = np.asarray(self.r_values, dtype=np.float64)
        self.measure = np.asarray(self.measure, dtype=np.float64)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.r_values.shape != self.measure.shape:
            raise ValueError("r_values and measure differ in length")
        if np.any(self.r_values <= 0) or np.any(np.diff(self.r_values) >= 0):
            raise ValueError("r_values must be positive and strictly decreasing")
        if np.any(self.measure <= 0) or not np.all(np.isfinite(self.measure)):
            raise ValueError("measure must be positive and finite")

    @property
    def x(self) -> NDArray[np.float64]:
        return np.log(1.0 / self.r_values)

    @property
    def y(self) -> NDArray[np.float64]:
        return np.log(self.measure)

    @property
    def points(self) -> List[tuple]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def __len__(self) -> int:
        return int(self.r_values.size)


@dataclass
class RadiusPolicy:
    """
    Radius schedule.

    Pair-count: `count` radii geometrically spaced between the low and high
    percentiles of the pairwise distances; percentile 0 is the smallest
    nonzero distance (one pair) and 100 the largest (every pair). Box-count
    with the "bracket" schedule: `count` radii from the largest per-axis
    extent (every point in one cell, sum of squares 1) down to the largest
    side found by bisection at which every distinct row sits alone (sum of
    squares at its floor, 1/t without duplicate rows). The "diagonal"
    schedule scales the bounding-box diagonal by 2^-box_min_exponent ..
    2^-box_max_exponent. Explicit `radii` override all of these.
    """

    count: int = 24
    low_percentile: float = 0.0
    high_percentile: float = 100.0
    box_schedule: str = "bracket"
    box_min_exponent: float = 1.0
    box_max_exponent: float = 12.0
    radii: Optional[Sequence[float]] = None


@dataclass
class SigmoidFit:
    """
    Parametric sigmoid y = y0 + Cy / (1 + exp(-direction * Cx * (x - x0))).

    Cx and Cy are positive; `direction` is -1 for falling curves (pair counts
    against log(1/r)). The fractal dimension is the inflection slope
    magnitude Cx*Cy/4.
    """

    x0: float
    y0: float
    cx: float
    cy: float
    q: float
    direction: int = 1
    weighted_rmse: float = 0.0
    converged: bool = True
    evaluations: int = 0
    n_points: int = 0
    curve: Optional[LogLogCurve] = field(default=None, repr=False, compare=False)

    @property
    def fd(self) -> float:
        return self.cx * self.cy / 4.0

    @property
    def slope(self) -> float:
        return self.direction * self.fd

    def predict(self, x) -> NDArray[np.float64]:
        return sigmoid(np.asarray(x, dtype=np.float64), self.x0, self.y0, self.cx, self.cy, self.direction)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x0": self.x0, "y0": self.y0, "cx": self.cx, "cy": self.cy,
            "q": self.q, "direction": self.direction, "fd": self.fd,
            "weighted_rmse": self.weighted_rmse, "converged": self.converged,
            "evaluations": self.evaluations, "n_points": self.n_points,
        }


@dataclass
class FdStats:
    mean: float
    conf_halfwidth: float
    stdev: float
    count: int

    @property
    def relative_halfwidth_pct(self) -> float:
        return 100.0 * self.conf_halfwidth / abs(self.mean) if self.mean else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "conf_halfwidth": self.conf_halfwidth, "stdev": self.stdev,
                "count": self.count, "relative_halfwidth_pct": self.relative_halfwidth_pct}


@dataclass
class FdSummary:
    """Mean, confidence half-width and stdev with and without trimming."""

    trimmed: FdStats
    untrimmed: FdStats
    instance_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {"trimmed": self.trimmed.to_dict(), "untrimmed": self.untrimmed.to_dict(),
                "instance_count": self.instance_count}


def _row_points(m: Union[DataMatrix, NDArray]) -> NDArray[np.float64]:
    points = m.values if isinstance(m, DataMatrix) else np.asarray(m, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected a 2-D matrix of row-points, got shape {points.shape}")
    if points.shape[0] < 2:
        raise ValueError(f"need at least 2 row-points, got {points.shape[0]}")
    return points


def _check_radii(r_values: Sequence[float]) -> NDArray[np.float64]:
    r = np.asarray(r_values, dtype=np.float64).ravel()
    if r.size == 0 or np.any(~np.isfinite(r)) or np.any(r <= 0):
        raise ValueError("r_values must be positive finite reals")
    if np.any(np.diff(r) >= 0):
        raise ValueError("r_values must be sorted strictly descending")
    return r


def occupancy_floor(points: NDArray[np.float64]) -> float:
    """Smallest reachable sum of squared occupancies: every distinct row alone."""
    _, counts = np.unique(points, axis=0, return_counts=True)
    freq = counts / points.shape[0]
    return float(np.sum(freq * freq))


def _singleton_side(points: NDArray[np.float64], origin: NDArray[np.float64],
                    extent: NDArray[np.float64], high: float) -> float:
    """Bisect for the largest cell side at which the occupancy sum sits at its floor."""
    floor = occupancy_floor(points)

    def alone(r: float) -> bool:
        return box_occupancy_sum(points, origin, extent, r) <= floor * (1.0 + 1e-9)

    low = high
    for _ in range(MAX_HALVINGS):
        low /= 2.0
        if alone(low):
            break
    else:
        raise DegenerateCurveError(f"rows are not separated at cell side {low:g} (extent {high:g})")
    upper = 2.0 * low
    for _ in range(BISECTION_STEPS):
        mid = math.sqrt(low * upper)
        if alone(mid):
            low = mid
        else:
            upper = mid
    return low


def _box_radii(points: NDArray[np.float64], policy: RadiusPolicy) -> NDArray[np.float64]:
    origin = points.min(axis=0)
    extent = points.max(axis=0) - origin
    if not np.any(extent > 0):
        raise DegenerateCurveError("bounding box of the row-points is a single point")
    if policy.box_schedule == "diagonal":
        exponents = np.linspace(policy.box_min_exponent, policy.box_max_exponent, policy.count)
        return float(np.linalg.norm(extent)) * np.power(2.0, -exponents)
    if policy.box_schedule != "bracket":
        raise ValueError(f"unknown box schedule {policy.box_schedule!r}")
    high = float(extent.max())
    low = _singleton_side(points, origin, extent, high)
    logger.debug("box radii bracket [%g, %g]", low, high)
    return np.geomspace(high, low, policy.count)


def principal_axes(m: Union[DataMatrix, NDArray]) -> NDArray[np.float64]:
    """
    Row-points expressed on their principal axes, axes without variance dropped.

    Distances between rows are unchanged. Axes are ordered by decreasing
    variance and oriented so a rigid rotation of the input gives the same
    coordinates when the variances are distinct.
    """
    points = _row_points(m)
    centered = points - points.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    if s.size == 0 or not s[0] > 0:
        raise DegenerateCurveError("bounding box of the row-points is a single point")
    rank = int(np.count_nonzero(s > s[0] * max(centered.shape) * np.finfo(np.float64).eps))
    u = u[:, :rank]
    # orient each axis so its largest-magnitude coordinate is positive
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(rank)])
    return u * signs * s[:rank]


def radius_schedule(m: Union[DataMatrix, NDArray], method: str, policy: Optional[RadiusPolicy] = None) -> NDArray[np.float64]:
    """Radii (descending) for curve construction on `m`."""
    policy = policy or RadiusPolicy()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if policy.radii is not None:
        radii = np.unique(np.asarray(policy.radii, dtype=np.float64))[::-1]
    else:
        if policy.count < MIN_RADII:
            raise ValueError(f"radius policy must yield at least {MIN_RADII} radii, got {policy.count}")
        points = _row_points(m)
        if method == PAIR_COUNT:
            distances = pdist(points)
            positive = distances[distances > 0]
            if positive.size == 0:
                raise DegenerateCurveError("all row-points coincide")
            low, high = np.percentile(distances, [policy.low_percentile, policy.high_percentile])
            low = low if low > 0 else positive.min()
            if not high > low:
                raise DegenerateCurveError(f"distance percentiles do not span a range ({low:g}, {high:g})")
            radii = np.geomspace(high, low, policy.count)
        else:
            radii = _box_radii(points, policy)
    if radii.size < MIN_RADII:
        raise ValueError(f"radius schedule has {radii.size} radii, need at least {MIN_RADII}")
    return _check_radii(radii)


def pair_count_curve(m: Union[DataMatrix, NDArray], r_values: Sequence[float]) -> LogLogCurve:
    """
    PC(r) = number of unordered row pairs within Euclidean distance r.

    Radii with PC = 0 are dropped and recorded on the curve.
    """
    points = _row_points(m)
    r = _check_radii(r_values)
    distances = np.sort(pdist(points))
    counts = np.searchsorted(distances, r, side="right").astype(np.int64)

    keep = counts > 0
    dropped = r[~keep].tolist()
    if dropped:
        logger.info("dropped %d radii with zero pair count (smallest kept r=%s)",
                    len(dropped), r[keep].min() if keep.any() else None)
    if keep.sum() < 2:
        raise DegenerateCurveError(f"only {int(keep.sum())} radii have a nonzero pair count")
    return LogLogCurve(r[keep], counts[keep].astype(np.float64), PAIR_COUNT, dropped)


def box_occupancy_sum(points: NDArray[np.float64], origin: NDArray[np.float64],
                      extent: NDArray[np.float64], r: float) -> float:
    """
    Sum over grid cells of the squared occupancy frequency for cell side r.

    Cells are anchored at `origin`; points on the far face of the bounding
    box belong to the last cell along that axis.
    """
    last_cell = np.maximum(np.ceil(extent / r).astype(np.int64) - 1, 0)
    cells = np.minimum(np.floor((points - origin) / r).astype(np.int64), last_cell)
    _, counts = np.unique(cells, axis=0, return_counts=True)
    freq = counts / points.shape[0]
    return float(np.sum(freq * freq))


def box_count_curve(m: Union[DataMatrix, NDArray], r_values: Sequence[float]) -> LogLogCurve:
    """Box-counting curve: y = log sum_i (R_r^i)^2 over side-r grid cells."""
    points = _row_points(m)
    r = _check_radii(r_values)
    origin = points.min(axis=0)
    extent = points.max(axis=0) - origin
    if not np.any(extent > 0):
        raise DegenerateCurveError("bounding box of the row-points is a single point")
    sums = np.array([box_occupancy_sum(points, origin, extent, radius) for radius in r])
    return LogLogCurve(r, sums, BOX_COUNT)


def tukey_window(N: int, q: float) -> NDArray[np.float64]:
    """Symmetric tapered-cosine window; q=0 is rectangular, q=1 is Hann."""
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return tukey(int(N), alpha=q, sym=True)


def tukey_weight(u, q: float) -> NDArray[np.float64]:
    """Continuous Tukey taper on normalized positions u in [0, 1]."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    w = np.ones_like(u)
    if q == 0:
        return w
    low = u < q / 2.0
    high = u > 1.0 - q / 2.0
    w[low] = 0.5 * (1.0 + np.cos(np.pi * (2.0 * u[low] / q - 1.0)))
    w[high] = 0.5 * (1.0 + np.cos(np.pi * (2.0 * (1.0 - u[high]) / q - 1.0)))
    return w


def sigmoid(x, x0: float, y0: float, cx: float, cy: float, direction: int = 1) -> NDArray[np.float64]:
    return y0 + cy * expit(direction * cx * (np.asarray(x, dtype=np.float64) - x0))


def curve_weights(y: NDArray[np.float64], q: float) -> NDArray[np.float64]:
    """Tukey weights at the normalized y position of every curve point."""
    y_min, y_max = float(np.min(y)), float(np.max(y))
    span = y_max - y_min
    if span <= 1e-12 * max(1.0, abs(y_max), abs(y_min)):
        raise DegenerateCurveError("curve has zero y-range")
    return tukey_weight((y - y_min) / span, q)


def fit_sigmoid(curve: LogLogCurve, q: float = DEFAULT_Q, max_evaluations: int = 2000) -> SigmoidFit:
    """
    Tukey-weighted least-squares fit of the parametric sigmoid.

    Multi-start: x0 at the point of median y, y0 at the y minimum, Cy at the
    y-range, Cx over a coarse grid; the lowest weighted residual among
    converged starts wins. x0 is bounded to the sampled x range and Cy to
    CY_SPAN_LIMIT times the sampled y-range.

    Raises:
        DegenerateCurveError: fewer than 5 points or zero y-range
        SigmoidFitError: no start converged within the evaluation budget,
            or the winning inflection lies outside the sampled x range
    """
    x, y = curve.x, curve.y
    if x.size < MIN_FIT_POINTS:
        raise DegenerateCurveError(f"need at least {MIN_FIT_POINTS} curve points, got {x.size}")
    weights = curve_weights(y, q)
    if np.count_nonzero(weights) < 4:
        raise DegenerateCurveError("fewer than 4 points carry positive weight")

    trend = stats.linregress(x, y).slope
    direction = -1 if trend < 0 else 1
    sqrt_w = np.sqrt(weights)

    def residuals(theta):
        return sqrt_w * (y - sigmoid(x, *theta, direction))

    def jacobian(theta):
        x0, _, cx, cy = theta
        s = expit(direction * cx * (x - x0))
        ds = s * (1.0 - s)
        grad = np.column_stack([
            -cy * ds * direction * cx,
            np.ones_like(x),
            cy * ds * direction * (x - x0),
            s,
        ])
        return -sqrt_w[:, np.newaxis] * grad

    y_min = float(y.min())
    span = float(y.max() - y_min)
    x_mid = float(x[np.argmin(np.abs(y - np.median(y)))])
    x_min, x_max = float(x.min()), float(x.max())
    lower = [x_min, -np.inf, 1e-9, 1e-9]
    upper = [x_max, np.inf, np.inf, CY_SPAN_LIMIT * span]

    best = None
    for cx0 in CX_GRID:
        theta0 = np.array([x_mid, y_min, cx0, span])
        result = least_squares(residuals, theta0, jac=jacobian, bounds=(lower, upper), method="trf",
                               x_scale="jac", ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=max_evaluations)
        if result.status <= 0:
            logger.debug("sigmoid start Cx=%g stopped without converging (%s)", cx0, result.message)
            continue
        if best is None or result.cost < best.cost:
            best = result

    if best is None:
        raise SigmoidFitError(f"sigmoid fit did not converge within {max_evaluations} evaluations from any start")

    x0, y0, cx, cy = (float(v) for v in best.x)
    if not x_min <= x0 <= x_max:
        raise SigmoidFitError(f"sigmoid inflection x0={x0:g} lies outside the sampled range [{x_min:g}, {x_max:g}]")
    weighted_rmse = float(np.sqrt(np.sum(best.fun ** 2) / np.sum(weights)))
    return SigmoidFit(x0, y0, cx, cy, float(q), direction, weighted_rmse, True,
                      int(best.nfev), int(x.size), curve)


def estimate_fd(m: Union[DataMatrix, NDArray], method: str = BOX_COUNT, q: float = DEFAULT_Q,
                r_policy: Optional[RadiusPolicy] = None, frame: str = PRINCIPAL_FRAME) -> SigmoidFit:
    """
    Curve construction plus sigmoid fit; `fit.fd` is the dimension estimate.

    Box counting lays its grid over the principal axes of the row-points
    unless `frame` is "data", which keeps the matrix columns as grid axes.
    Pair counts do not depend on the frame.
    """
    if frame not in FRAMES:
        raise ValueError(f"unknown frame {frame!r}; expected one of {FRAMES}")
    points = _row_points(m)
    if method == BOX_COUNT and frame == PRINCIPAL_FRAME:
        points = principal_axes(points)
    radii = radius_schedule(points, method, r_policy)
    if method == PAIR_COUNT:
        curve = pair_count_curve(points, radii)
    else:
        curve = box_count_curve(points, radii)
    return fit_sigmoid(curve, q)


def linear_fit_slope(curve: LogLogCurve, y_band=(0.25, 0.75)) -> float:
    """Absolute least-squares slope over the central band of the y range."""
    y = curve.y
    u = (y - y.min()) / (y.max() - y.min()) if y.max() > y.min() else np.zeros_like(y)
    inside = (u >= y_band[0]) & (u <= y_band[1])
    if inside.sum() < 2:
        inside = np.ones_like(inside)
    return abs(float(stats.linregress(curve.x[inside], y[inside]).slope))


def describe(values: Sequence[float], alpha: float = CONFIDENCE_ALPHA) -> FdStats:
    """Mean, two-sided t-based confidence half-width and sample stdev."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot describe an empty set")
    mean = float(data.mean())
    if data.size < 2:
        return FdStats(mean, 0.0, 0.0, 1)
    stdev = float(data.std(ddof=1))
    halfwidth = float(stats.t.ppf(1.0 - alpha / 2.0, data.size - 1) * stdev / math.sqrt(data.size))
    return FdStats(mean, halfwidth, stdev, int(data.size))


def fd_summary(fds: Sequence[float]) -> FdSummary:
    """Statistics over all instances and over the set minus one minimum and one maximum."""
    values = sorted(float(v) for v in fds)
    if len(values) < 3:
        raise ValueError(f"fd_summary needs at least 3 values, got {len(values)}")
    return FdSummary(describe(values[1:-1]), describe(values), len(values))


def write_curve_csv(fit: SigmoidFit, path: Union[str, Path]) -> Path:
    """Columns r, x = log(1/r), y, Tukey weight used in the fit, fitted y."""
    curve = fit.curve
    if curve is None:
        raise ValueError("fit carries no curve")
    weights = curve_weights(curve.y, fit.q)
    table = np.column_stack([curve.r_values, curve.x, curve.y, weights, fit.predict(curve.x)])
    buf = io.StringIO()
    np.savetxt(buf, table, delimiter=",", fmt="%.17g", header="r,x,y,weight,fitted", comments="")
    return write_text_atomic(path, buf.getvalue())


def write_fit_json(fit: SigmoidFit, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    document = dict(fit.to_dict())
    if fit.curve is not None:
        document["method"] = fit.curve.method
        document["dropped_r"] = fit.curve.dropped_r
        document["linear_slope"] = linear_fit_slope(fit.curve)
    document.update(extra or {})
    return write_json_atomic(path, document)
