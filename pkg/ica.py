"""
Spatial independent component analysis of a data matrix.

Y (t x n) is factorized as T . S with S holding p statistically independent
spatial maps (rows) and T the matching time courses (columns). Components
are found by symmetric fixed-point fastICA on whitened data, ordered by
their rank-1 reconstruction error, and scored against ground truth when it
is available.
"""
import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, stats

from artifact_io import write_bytes_atomic, write_json_atomic, write_text_atomic
from datamodel import DataMatrix

logger = logging.getLogger(__name__)

AUTO = "auto"
NONLINEARITIES = ("tanh", "cube")
AUTO_EIGENVALUE_RATIO = 1e-10
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 1000
DEFAULT_RESTARTS = 5
MATRIX_DTYPE = "<f8"


class WhiteningError(ValueError):
    """The data has no variance left to whiten."""


class ComponentCountError(ValueError):
    """Requested component count exceeds what the data supports."""


class ICAConvergenceError(RuntimeError):
    """
    fastICA did not reach the tolerance on any attempt.

    `model` holds the attempt that came closest, `achieved_tol` its final
    change in weight-vector direction.
    """

    def __init__(self, message: str, achieved_tol: float, model: Optional["UnmixingModel"] = None):
        super().__init__(message)
        self.achieved_tol = achieved_tol
        self.model = model


@dataclass
class WhiteningModel:
    """
    Projection of centered data onto its top-k principal axes with unit variance.

    `Xc @ projection.T` has identity covariance over the t time points.
    """

    mean: NDArray[np.float64]         # (n,)
    projection: NDArray[np.float64]   # (k, n)
    eigenvalues: NDArray[np.float64]  # (k,), descending

    @property
    def k(self) -> int:
        return int(self.eigenvalues.size)

    def transform(self, m: DataMatrix) -> NDArray[np.float64]:
        return (m.values - self.mean) @ self.projection.T

    def inverse_transform(self, whitened: NDArray[np.float64]) -> NDArray[np.float64]:
        """Back-projection onto the retained axes, without the mean."""
        return whitened @ (self.projection * self.eigenvalues[:, np.newaxis])


@dataclass
class UnmixingModel:
    """
    Result of one fastICA run.

    Component indices are 0-based. `order` lists them by ascending rank-1
    reconstruction RMSE once `sort_components` has run; `rmse_curve` has
    p+1 entries once `rmse_curve` has been attached.
    """

    T: NDArray[np.float64]           # (t, p) time courses
    S: NDArray[np.float64]           # (p, n) spatial maps, unit second moment per row
    mean: NDArray[np.float64]        # (n,) temporal mean removed before the fit
    unmixing: NDArray[np.float64]    # (p, p) orthonormal rotation in whitened space
    nonlinearity: str = "tanh"
    seed: int = 0
    converged: bool = True
    iterations: int = 0
    achieved_tol: float = 0.0
    attempts: int = 1
    whitened_rank: int = 0
    order: Optional[NDArray[np.int64]] = None
    component_rmse: Optional[NDArray[np.float64]] = None
    rmse_curve: Optional[List[float]] = None
    whitening: Optional[WhiteningModel] = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return int(self.S.shape[0])

    @property
    def ordered_T(self) -> NDArray[np.float64]:
        return self.T if self.order is None else self.T[:, self.order]

    @property
    def ordered_S(self) -> NDArray[np.float64]:
        return self.S if self.order is None else self.S[self.order]

    def reconstruct(self, components: Optional[int] = None) -> NDArray[np.float64]:
        """Centered reconstruction from the first `components` ordered components."""
        j = self.p if components is None else components
        return self.ordered_T[:, :j] @ self.ordered_S[:j]

    def metadata(self) -> Dict[str, Any]:
        return {
            "p": self.p,
            "t": int(self.T.shape[0]),
            "n": int(self.S.shape[1]),
            "nonlinearity": self.nonlinearity,
            "seed": self.seed,
            "converged": self.converged,
            "iterations": self.iterations,
            "achieved_tol": self.achieved_tol,
            "attempts": self.attempts,
            "order": None if self.order is None else self.order.tolist(),
            "component_rmse": None if self.component_rmse is None else self.component_rmse.tolist(),
            "rmse_curve": self.rmse_curve,
            "whitened_dim": self.whitened_rank,
        }


@dataclass
class SourceMatch:
    """Best-matching component for one ground-truth source."""

    source_id: int
    component: int
    r: float
    p_value: float
    rmse: float
    map_r: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"source_id": self.source_id, "component": self.component, "r": self.r,
                "p_value": self.p_value, "rmse": self.rmse, "map_r": self.map_r}


def _centered(m: DataMatrix) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    mean = m.values.mean(axis=0)
    return m.values - mean, mean


def _auto_rank(singular: NDArray[np.float64]) -> int:
    if singular.size == 0 or singular[0] <= 0:
        return 0
    eig = singular ** 2
    return int(np.count_nonzero(eig > AUTO_EIGENVALUE_RATIO * eig[0]))


def _decompose(m: DataMatrix):
    """Centered data, its temporal mean and thin SVD."""
    if m.t < 2:
        raise ValueError(f"whitening needs at least 2 time points, got {m.t}")
    xc, mean = _centered(m)
    u, s, vt = linalg.svd(xc, full_matrices=False, lapack_driver="gesvd")
    if _auto_rank(s) == 0:
        raise WhiteningError("data has zero variance after centering")
    return xc, mean, u, s, vt


def whiten(m: DataMatrix, k: Union[int, str] = AUTO) -> Tuple[WhiteningModel, NDArray[np.float64]]:
    """
    Remove the temporal mean and whiten onto the top-k principal axes.

    Returns the model and the (t, k) whitened data. "auto" keeps every
    eigenvalue above 1e-10 times the largest.

    Raises:
        WhiteningError: the centered data is identically zero
        ComponentCountError: k exceeds the data's usable dimension
    """
    _, mean, u, s, vt = _decompose(m)
    rank = _auto_rank(s)
    if k == AUTO:
        k = rank
    elif int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer or 'auto', got {k!r}")
    elif k > rank:
        raise ComponentCountError(f"k={k} exceeds the whitened dimension {rank}")
    k = int(k)

    eigenvalues = s[:k] ** 2 / m.t
    projection = vt[:k] / np.sqrt(eigenvalues)[:, np.newaxis]
    model = WhiteningModel(mean, projection, eigenvalues)
    return model, u[:, :k] * np.sqrt(m.t)


def _sym_decorrelation(w: NDArray[np.float64]) -> NDArray[np.float64]:
    """W <- (W W^T)^(-1/2) W"""
    s, u = linalg.eigh(w @ w.T)
    s = np.clip(s, a_min=np.finfo(w.dtype).tiny, a_max=None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def _contrast(wz: NDArray[np.float64], nonlinearity: str):
    if nonlinearity == "tanh":
        gwz = np.tanh(wz)
        return gwz, (1.0 - gwz ** 2).mean(axis=1)
    return wz ** 3, (3.0 * wz ** 2).mean(axis=1)


def _fixed_point(z: NDArray[np.float64], w: NDArray[np.float64], nonlinearity: str,
                 tol: float, max_iter: int) -> Tuple[NDArray[np.float64], int, float]:
    n = z.shape[1]
    w = _sym_decorrelation(w)
    lim = np.inf
    for iteration in range(1, max_iter + 1):
        gwz, g_wz = _contrast(w @ z, nonlinearity)
        w_new = _sym_decorrelation(gwz @ z.T / n - g_wz[:, np.newaxis] * w)
        lim = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if lim < tol:
            return w, iteration, lim
    return w, max_iter, lim


def fastica(m: DataMatrix, p: Union[int, str] = AUTO, nonlinearity: str = "tanh", seed: int = 0,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
            restarts: int = DEFAULT_RESTARTS, strict: bool = True) -> UnmixingModel:
    """
    Spatial fastICA with symmetric decorrelation.

    The data is reduced to p principal axes, rotated there to maximize
    non-Gaussianity of the spatial maps, and the time courses are recovered
    by back-projection T = Xc S^T / n. Each map is sign-flipped to positive
    skew. Non-converged attempts are retried from fresh random rotations.

    Raises:
        ComponentCountError: p > t or p above the whitened dimension
        ICAConvergenceError: no attempt converged and `strict` is set; otherwise
            the closest attempt comes back with `converged=False`
    """
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}; expected one of {NONLINEARITIES}")
    if int(seed) != seed or seed < 0:
        raise ValueError(f"seed must be an unsigned integer, got {seed}")

    xc, mean, _, s, vt = _decompose(m)
    rank = _auto_rank(s)
    if p == AUTO:
        p = rank
    if int(p) != p or p < 1:
        raise ValueError(f"p must be a positive integer or 'auto', got {p!r}")
    p = int(p)
    if p > m.t:
        raise ComponentCountError(
            f"p={p} exceeds the number of time points t={m.t}; ICA is capped at p <= t"
        )
    if p > rank:
        raise ComponentCountError(f"p={p} exceeds the whitened dimension {rank}")

    n = m.n
    z = vt[:p] * np.sqrt(n)
    eigenvalues = s[:p] ** 2 / m.t
    whitening = WhiteningModel(mean, vt[:p] / np.sqrt(eigenvalues)[:, np.newaxis], eigenvalues)

    rng = np.random.Generator(np.random.PCG64(int(seed)))
    best = None
    attempts = 0
    for attempts in range(1, restarts + 2):
        w, iterations, lim = _fixed_point(z, rng.standard_normal((p, p)), nonlinearity, tol, max_iter)
        if best is None or lim < best[2]:
            best = (w, iterations, lim)
        if lim < tol:
            break
        logger.info("fastICA attempt %d stopped at tolerance %.3g after %d iterations", attempts, lim, iterations)

    w, iterations, lim = best
    maps = w @ z
    skew_sign = np.where(np.mean(maps ** 3, axis=1) < 0, -1.0, 1.0)
    maps = maps * skew_sign[:, np.newaxis]
    w = w * skew_sign[:, np.newaxis]
    t_courses = xc @ maps.T / n

    model = UnmixingModel(t_courses, maps, mean, w, nonlinearity, int(seed), lim < tol,
                          iterations, lim, attempts, rank, whitening=whitening)
    if not model.converged:
        logger.warning("fastICA p=%d did not converge (achieved tolerance %.3g)", p, lim)
        if not strict:
            return model
        raise ICAConvergenceError(
            f"fastICA did not converge in {attempts} attempts of {max_iter} iterations "
            f"(achieved tolerance {lim:.3g}, target {tol:g})", lim, model,
        )
    logger.info("fastICA p=%d converged after %d iterations (attempt %d)", p, iterations, attempts)
    return model


def rank1_rmse(u: UnmixingModel, m: DataMatrix) -> NDArray[np.float64]:
    """RMSE of each single-component reconstruction against the centered data."""
    xc = m.values - u.mean
    size = xc.size
    total = float(np.sum(xc * xc))
    cross = np.sum((xc @ u.S.T) * u.T, axis=0)
    norms = np.sum(u.T ** 2, axis=0) * np.sum(u.S ** 2, axis=1)
    return np.sqrt(np.clip(total - 2.0 * cross + norms, 0.0, None) / size)


def sort_components(u: UnmixingModel, m: DataMatrix) -> UnmixingModel:
    """Order components by ascending rank-1 RMSE; ties keep index order."""
    errors = rank1_rmse(u, m)
    order = np.argsort(errors, kind="stable").astype(np.int64)
    return replace(u, order=order, component_rmse=errors)


def rmse_curve(u: UnmixingModel, m: DataMatrix) -> List[float]:
    """RMSE of reconstructing the centered data from the first 0..p ordered components."""
    xc = m.values - u.mean
    curve = [float(np.sqrt(np.mean(xc ** 2)))]
    recon = np.zeros_like(xc)
    ordered_T, ordered_S = u.ordered_T, u.ordered_S
    for j in range(u.p):
        recon += np.outer(ordered_T[:, j], ordered_S[j])
        curve.append(float(np.sqrt(np.mean((xc - recon) ** 2))))
    return curve


def with_rmse_curve(u: UnmixingModel, m: DataMatrix) -> UnmixingModel:
    """Sort (if needed) and attach the RMSE curve."""
    if u.order is None:
        u = sort_components(u, m)
    return replace(u, rmse_curve=rmse_curve(u, m))


def rmse_knee(curve: Sequence[float]) -> int:
    """
    Component count at the knee of an RMSE curve.

    The point farthest from the chord joining the first and last entries,
    after scaling both axes to [0, 1].
    """
    y = np.asarray(curve, dtype=np.float64)
    if y.size < 3 or y[0] == y[-1]:
        return int(y.size - 1)
    x = np.linspace(0.0, 1.0, y.size)
    y_norm = (y - y[-1]) / (y[0] - y[-1])
    # chord runs from (0, 1) to (1, 0)
    distance = np.abs(x + y_norm - 1.0) / np.sqrt(2.0)
    return int(np.argmax(distance))


def component_kurtosis(u: UnmixingModel) -> NDArray[np.float64]:
    """Excess kurtosis of every spatial map."""
    return stats.kurtosis(u.S, axis=1, fisher=True, bias=True)


def _pearson(a: NDArray[np.float64], b: NDArray[np.float64]) -> Tuple[float, float]:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, 1.0
    result = stats.pearsonr(a, b)
    return float(np.clip(result.statistic, -1.0, 1.0)), float(result.pvalue)


def aligned_rmse(reference: NDArray[np.float64], estimate: NDArray[np.float64]) -> float:
    """RMSE after optimal sign and least-squares scale of the centered estimate."""
    ref = reference - reference.mean()
    est = estimate - estimate.mean()
    denom = float(est @ est)
    scale = float(est @ ref) / denom if denom > 0 else 0.0
    return float(np.sqrt(np.mean((ref - scale * est) ** 2)))


def map_columns(m: DataMatrix, map_dims: Tuple[int, int]) -> Optional[NDArray[np.int64]]:
    """Flat row-major map positions of the matrix columns, for a 2-D slice."""
    idx = m.voxel_index
    if idx.size == 0 or np.any(idx[:, 2] != 0):
        return None
    if np.any(idx[:, 0] >= map_dims[1]) or np.any(idx[:, 1] >= map_dims[0]):
        return None
    return idx[:, 1] * map_dims[1] + idx[:, 0]


def match_sources(u: UnmixingModel, truth, m: Optional[DataMatrix] = None) -> List[SourceMatch]:
    """
    For each ground-truth source, the component with the largest |Pearson r|
    between time courses. With `m`, the spatial map correlation of the chosen
    pair is reported too.
    """
    timecourses = np.asarray(truth.timecourses, dtype=np.float64)
    if timecourses.shape[1] != u.T.shape[0]:
        raise ValueError(
            f"ground-truth timecourses have {timecourses.shape[1]} points, components have {u.T.shape[0]}"
        )
    columns = map_columns(m, truth.maps.shape[1:]) if m is not None else None

    matches = []
    for i, spec in enumerate(truth.specs):
        scores = [_pearson(timecourses[i], u.T[:, j]) for j in range(u.p)]
        best = int(np.argmax([abs(r) for r, _ in scores]))
        r, p_value = scores[best]
        map_r = None
        if columns is not None:
            map_r, _ = _pearson(truth.flat_maps[i][columns], u.S[best])
        matches.append(SourceMatch(spec.id, best, r, p_value,
                                   aligned_rmse(timecourses[i], u.T[:, best]), map_r))
    return matches


def write_unmixing(u: UnmixingModel, directory: Union[str, Path], stem: str = "ica",
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """JSON metadata plus T and S as raw little-endian float64 (C order)."""
    directory = Path(directory)
    t_file, s_file = f"{stem}.T.bin", f"{stem}.S.bin"
    write_bytes_atomic(directory / t_file, u.T.astype(MATRIX_DTYPE).tobytes(order="C"))
    write_bytes_atomic(directory / s_file, u.S.astype(MATRIX_DTYPE).tobytes(order="C"))
    document = u.metadata()
    document.update({"T_file": t_file, "S_file": s_file, "dtype": MATRIX_DTYPE,
                     "kurtosis": component_kurtosis(u)})
    document.update(extra or {})
    return write_json_atomic(directory / f"{stem}.json", document)


def write_matches(matches: Sequence[SourceMatch], path: Union[str, Path]) -> Path:
    buf = io.StringIO()
    fieldnames = ["source_id", "component", "r", "p_value", "rmse", "map_r"]
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for match in matches:
        row = match.to_dict()
        writer.writerow({k: ("" if row[k] is None else repr(row[k])) for k in fieldnames})
    return write_text_atomic(path, buf.getvalue())
