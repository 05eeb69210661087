"""
Run configuration: schema, file loading, flag overrides and hashing.

One declarative file (JSON or YAML) describes a whole batch; `--set
section.key=value` flags are applied on top of it and always win.
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from artifact_io import canonical_json, sha256_text
from synthgen import SynthConstants

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "VOXELDIM_WORKERS"
HASH_PREFIX_LEN = 12


class ConfigError(ValueError):
    """The configuration is invalid or cannot be read."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [1, 2])
    noise_level: float = Field(0.0, ge=0.0)
    noise_seed: int = Field(0, ge=0)
    constants: SynthConstants = Field(default_factory=SynthConstants)

    @field_validator("seeds")
    @classmethod
    def _seeds_unsigned(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be unsigned integers")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        return seeds


class IngestSection(_Section):
    inputs: List[str] = Field(default_factory=list, description="volume files or directories of volumes")
    format: Literal["auto", "nifti1", "raw-f32-4d"] = "auto"
    mask: Optional[str] = Field(None, description="mask volume; voxels > 0 are included")
    mean_mask_fraction: Optional[float] = Field(
        0.1, ge=0.0, lt=1.0, description="intensity mask when no mask file is given; null keeps every voxel"
    )


class PreprocessSection(_Section):
    fwhm_mm: List[float] = Field(default_factory=lambda: [0.0, 4.0, 8.0])
    smooth_before_mask: bool = True
    edge_mode: Literal["renormalize", "wrap"] = "renormalize"
    activity_threshold: float = Field(0.05, ge=0.0)
    decimate_stride: int = Field(1, ge=1)

    @field_validator("fwhm_mm")
    @classmethod
    def _fwhm_non_negative(cls, levels: List[float]) -> List[float]:
        if not levels or any(v < 0 for v in levels):
            raise ValueError("fwhm_mm needs at least one non-negative level")
        return levels


class FdSection(_Section):
    method: Literal["box-count", "pair-count"] = "box-count"
    q: float = Field(0.75, ge=0.0, le=1.0)
    radius_count: int = Field(24, ge=8)
    low_percentile: float = Field(0.0, ge=0.0, lt=100.0)
    high_percentile: float = Field(100.0, gt=0.0, le=100.0)
    box_schedule: Literal["bracket", "diagonal"] = "bracket"
    box_frame: Literal["principal", "data"] = "principal"
    box_min_exponent: float = 1.0
    box_max_exponent: float = 12.0
    radii: Optional[List[float]] = None
    smoothing_fwhm_mm: List[float] = Field(default_factory=lambda: [0.0])
    strides: List[int] = Field(default_factory=lambda: [1])
    inputs: List[str] = Field(default_factory=list, description="matrix files; empty uses this run's matrices")

    @field_validator("strides")
    @classmethod
    def _strides_positive(cls, strides: List[int]) -> List[int]:
        if not strides or any(s < 1 for s in strides):
            raise ValueError("strides must be positive integers")
        return strides

    @field_validator("smoothing_fwhm_mm")
    @classmethod
    def _smoothing_non_negative(cls, levels: List[float]) -> List[float]:
        if not levels or any(v < 0 for v in levels):
            raise ValueError("smoothing_fwhm_mm needs at least one non-negative level")
        return levels


class IcaSection(_Section):
    p: List[Union[int, Literal["auto"]]] = Field(default_factory=lambda: ["auto"])
    p_real: List[Union[int, Literal["auto"]]] = Field(
        default_factory=lambda: [10, 25, 50, 100], description="component counts for ingested volumes"
    )
    nonlinearity: Literal["tanh", "cube"] = "tanh"
    seed: int = Field(0, ge=0)
    tol: float = Field(1e-6, gt=0.0)
    max_iter: int = Field(1000, ge=1)
    restarts: int = Field(5, ge=0)
    inputs: List[str] = Field(default_factory=list, description="matrix files; empty uses this run's matrices")

    @field_validator("p", "p_real")
    @classmethod
    def _p_positive(cls, values: List[Union[int, str]]) -> List[Union[int, str]]:
        if not values or any(v != "auto" and v < 1 for v in values):
            raise ValueError("p entries must be positive integers or 'auto'")
        return values


class ReportSection(_Section):
    title: str = "Fractal dimension and ICA summary"
    fragments: List[str] = Field(default_factory=list, description="fragment files; empty merges this run's")


class RunSection(_Section):
    output_root: str = "runs"
    workers: Optional[int] = Field(None, ge=1)


class RunConfig(_Section):
    """Complete, serializable description of one batch run."""

    schema_version: int = SCHEMA_VERSION
    synth: SynthSection = Field(default_factory=SynthSection)
    ingest: IngestSection = Field(default_factory=IngestSection)
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)
    fd: FdSection = Field(default_factory=FdSection)
    ica: IcaSection = Field(default_factory=IcaSection)
    report: ReportSection = Field(default_factory=ReportSection)
    run: RunSection = Field(default_factory=RunSection)

    @field_validator("schema_version")
    @classmethod
    def _supported_version(cls, version: int) -> int:
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}; this tool reads version {SCHEMA_VERSION}")
        return version


def parse_override(item: str) -> tuple:
    """'section.key=value' -> (['section', 'key'], parsed value)"""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: cannot parse value: {e}") from e
    return key.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Set nested keys of a raw config mapping; later overrides win."""
    data = dict(data)
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[path[-1]] = value
    return data


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid JSON/YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Build a validated RunConfig from an optional file plus overrides.

    Args:
        path: JSON or YAML config file; defaults apply when omitted
        overrides: 'section.key=value' strings, applied in order

    Returns:
        The validated configuration

    Raises:
        ConfigError: unreadable file, bad override or failed validation
    """
    data = read_config_file(path) if path else {}
    data = apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical config, without the `run` section."""
    return sha256_text(canonical_json(cfg.model_dump(mode="json", exclude={"run"})))


def run_directory(cfg: RunConfig) -> Path:
    return Path(cfg.run.output_root) / f"run-{config_hash(cfg)[:HASH_PREFIX_LEN]}"


def resolve_workers(cfg: RunConfig, flag: Optional[int] = None) -> int:
    """Worker count: flag, then config, then VOXELDIM_WORKERS, then 1."""
    if flag is not None:
        if flag < 1:
            raise ConfigError(f"--workers must be >= 1, got {flag}")
        return int(flag)
    if cfg.run.workers is not None:
        return cfg.run.workers
    load_dotenv()
    raw = os.getenv(WORKERS_ENV)
    if raw:
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
        if workers < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
        return workers
    return 1


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
