"""
Simulated fMRI slice: eight spatial sources mixed linearly over 100 time points.

The sources are defined by their statistics rather than by exact waveforms:
five super-Gaussian maps (S1, S2, S5, S6, S8), one Gaussian (S4) and two
sub-Gaussian (S3, S7). S1 follows the task, S2 and S6 follow it only
transiently, and the rest carry artifacts (respiration, cardiac pulsation,
scanner drift, broadband noise).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from artifact_io import read_json, write_bytes_atomic, write_json_atomic
from datamodel import DataMatrix, linearize_slice

logger = logging.getLogger(__name__)

MAP_DIMS = (60, 60)
TIMECOURSE_LEN = 100
GROUND_TRUTH_FILE = "ground_truth.json"
MAPS_FILE = "maps.bin"


class SynthConstants(BaseModel):
    """Waveform and map constants of the simulated dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    prng: Literal["PCG64"] = "PCG64"
    tr_s: float = Field(2.0, gt=0)
    voxel_size_mm: Tuple[float, float, float] = (3.0, 3.0, 4.0)
    block_period: int = Field(20, ge=2, description="task on/off period in time points")
    hrf_peak_s: float = 6.0
    hrf_undershoot_s: float = 16.0
    hrf_undershoot_ratio: float = 1.0 / 6.0
    hrf_length_s: float = 32.0
    transient_decay: float = Field(25.0, gt=0, description="decay constant (points) of transient responses")
    drift_curvature: float = 0.5
    respiration_cycles_per_point: float = Field(0.12, gt=0, lt=0.5)
    cardiac_cycles_per_point: float = Field(0.31, gt=0, lt=0.5)
    physio_noise_std: float = Field(0.3, ge=0)
    grating_period_voxels: float = 15.0


@dataclass(frozen=True)
class SourceSpec:
    id: int
    gaussianity: str  # "super" | "gaussian" | "sub"
    role: str         # "task-related" | "transiently-task-related" | "artifact"
    artifact: Optional[str] = None
    map_dims: Tuple[int, int] = MAP_DIMS
    timecourse_len: int = TIMECOURSE_LEN

    @property
    def name(self) -> str:
        return f"S{self.id}"


SOURCE_SPECS: Tuple[SourceSpec, ...] = (
    SourceSpec(1, "super", "task-related"),
    SourceSpec(2, "super", "transiently-task-related"),
    SourceSpec(3, "sub", "artifact", "respiration"),
    SourceSpec(4, "gaussian", "artifact", "background-noise"),
    SourceSpec(5, "super", "artifact", "scanner-drift"),
    SourceSpec(6, "super", "transiently-task-related"),
    SourceSpec(7, "sub", "artifact", "cardiac"),
    SourceSpec(8, "super", "artifact", "broadband-noise"),
)


@dataclass
class SourceSet:
    """Ground truth of one simulated realization."""

    maps: NDArray[np.float64]          # (8, 60, 60)
    timecourses: NDArray[np.float64]   # (8, 100)
    seed: int
    specs: Tuple[SourceSpec, ...] = SOURCE_SPECS
    constants: SynthConstants = field(default_factory=SynthConstants)

    @property
    def count(self) -> int:
        return int(self.maps.shape[0])

    @property
    def flat_maps(self) -> NDArray[np.float64]:
        """(sources, voxels) in the row-major scan order of `linearize_slice`."""
        return self.maps.reshape(self.count, -1)


def make_rng(seed: int, constants: SynthConstants = SynthConstants()) -> np.random.Generator:
    if int(seed) != seed or seed < 0:
        raise ValueError(f"seed must be an unsigned integer, got {seed}")
    if constants.prng != "PCG64":
        raise ValueError(f"unsupported PRNG {constants.prng}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def canonical_hrf(constants: SynthConstants = SynthConstants()) -> NDArray[np.float64]:
    """Double-gamma response sampled at the TR, scaled to unit peak."""
    t = np.arange(0.0, constants.hrf_length_s, constants.tr_s)
    # gamma shape k+1 with unit scale peaks at k seconds
    response = stats.gamma.pdf(t, constants.hrf_peak_s + 1.0) \
        - constants.hrf_undershoot_ratio * stats.gamma.pdf(t, constants.hrf_undershoot_s + 1.0)
    return response / response.max()


def excess_kurtosis(values: NDArray) -> float:
    return float(stats.kurtosis(np.asarray(values, dtype=np.float64).ravel(), fisher=True, bias=True))


def _unit_peak(values: NDArray[np.float64]) -> NDArray[np.float64]:
    peak = np.abs(values).max()
    return values / peak if peak > 0 else values


def _blob(xx, yy, cx, cy, sigma):
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))


def _spatial_maps(rng: np.random.Generator, constants: SynthConstants) -> NDArray[np.float64]:
    yy, xx = np.mgrid[0:MAP_DIMS[0], 0:MAP_DIMS[1]].astype(np.float64)
    centre_y, centre_x = (MAP_DIMS[0] - 1) / 2.0, (MAP_DIMS[1] - 1) / 2.0
    radius = np.hypot(xx - centre_x, yy - centre_y)

    vessel = np.exp(-((xx - 30.0) ** 2) / (2.0 * 1.5 ** 2)) * ((yy >= 10) & (yy < 50))
    maps = [
        _blob(xx, yy, 18, 20, 4.0),                                     # S1 task area
        _blob(xx, yy, 42, 16, 3.5) + 0.8 * _blob(xx, yy, 48, 25, 3.0),  # S2
        np.cos(2.0 * np.pi * xx / constants.grating_period_voxels),     # S3 sub-Gaussian grating
        rng.standard_normal(MAP_DIMS),                                  # S4 Gaussian field
        vessel,                                                         # S5
        _blob(xx, yy, 20, 44, 4.0),                                     # S6
        rng.uniform(-1.0, 1.0, MAP_DIMS),                               # S7 sub-Gaussian field
        np.exp(-((radius - 26.0) ** 2) / (2.0 * 1.2 ** 2)),             # S8 rim artifact
    ]
    return np.stack([_unit_peak(m) for m in maps])


def _timecourses(rng: np.random.Generator, constants: SynthConstants) -> NDArray[np.float64]:
    n = TIMECOURSE_LEN
    points = np.arange(n, dtype=np.float64)
    hrf = canonical_hrf(constants)

    half = constants.block_period // 2
    boxcar = ((np.arange(n) % constants.block_period) >= half).astype(np.float64)
    task = np.convolve(boxcar, hrf)[:n]

    early = boxcar * np.exp(-points / constants.transient_decay)
    late = boxcar * (points >= n // 2) * np.exp(-(points - n // 2).clip(0) / constants.transient_decay)
    transient_early = np.convolve(early, hrf)[:n]
    transient_late = np.convolve(late, hrf)[:n]

    ramp = points / (n - 1)
    drift = ramp + constants.drift_curvature * ramp ** 2

    def physio(cycles_per_point):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * cycles_per_point * points + phase)
        return wave + constants.physio_noise_std * rng.standard_normal(n)

    respiration = physio(constants.respiration_cycles_per_point)
    background = rng.standard_normal(n)
    cardiac = physio(constants.cardiac_cycles_per_point)
    broadband = rng.standard_normal(n)

    series = [task, transient_early, respiration, background, drift, transient_late, cardiac, broadband]
    return np.stack([_unit_peak(s) for s in series])


def generate_sources(seed: int, constants: Optional[SynthConstants] = None) -> SourceSet:
    """
    Build the eight ground-truth sources of one realization.

    The same seed always reproduces the same maps and time courses bit for bit.
    """
    constants = constants or SynthConstants()
    rng = make_rng(seed, constants)
    maps = _spatial_maps(rng, constants)
    timecourses = _timecourses(rng, constants)
    return SourceSet(maps, timecourses, int(seed), SOURCE_SPECS, constants)


def mix(s: SourceSet, noise_level: float = 0.0, seed: int = 0) -> DataMatrix:
    """
    Linear mixture of all sources plus optional white Gaussian noise.

    Noise standard deviation is noise_level times the RMS of the noiseless
    mixture. Output is (100, 3600) for the default sources.
    """
    if noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {noise_level}")
    mixture = linearize_slice(list(s.maps), list(s.timecourses))
    values = mixture.values
    if noise_level > 0:
        rng = make_rng(seed, s.constants)
        rms = float(np.sqrt(np.mean(values ** 2)))
        values = values + noise_level * rms * rng.standard_normal(values.shape)
    return DataMatrix(values, mixture.voxel_index, mixture.grid_dims, s.constants.voxel_size_mm)


def write_ground_truth(s: SourceSet, directory: Union[str, Path]) -> Path:
    """
    Export time courses and metadata as JSON plus the maps as raw float64.

    maps.bin is little-endian float64 in (source, row, column) C order.
    """
    directory = Path(directory)
    write_bytes_atomic(directory / MAPS_FILE, s.maps.astype("<f8").tobytes(order="C"))
    document = {
        "seed": s.seed,
        "constants": s.constants.model_dump(),
        "sources": [
            {"id": spec.id, "name": spec.name, "gaussianity": spec.gaussianity,
             "role": spec.role, "artifact": spec.artifact,
             "map_kurtosis": excess_kurtosis(s.maps[i])}
            for i, spec in enumerate(s.specs)
        ],
        "map_dims": list(s.maps.shape[1:]),
        "maps_file": MAPS_FILE,
        "maps_dtype": "<f8",
        "timecourses": s.timecourses,
    }
    return write_json_atomic(directory / GROUND_TRUTH_FILE, document)


def read_ground_truth(directory: Union[str, Path]) -> SourceSet:
    directory = Path(directory)
    document = read_json(directory / GROUND_TRUTH_FILE)
    timecourses = np.asarray(document["timecourses"], dtype=np.float64)
    dims = tuple(document["map_dims"])
    maps = np.frombuffer((directory / document["maps_file"]).read_bytes(), dtype=document["maps_dtype"])
    maps = maps.reshape((timecourses.shape[0],) + dims).astype(np.float64)
    specs = tuple(
        SourceSpec(src["id"], src["gaussianity"], src["role"], src.get("artifact"))
        for src in document["sources"]
    )
    return SourceSet(maps, timecourses, int(document["seed"]), specs, SynthConstants(**document["constants"]))
