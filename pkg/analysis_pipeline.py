"""
Batch execution behind every subcommand.

`AnalysisPipeline` owns one run directory (named by the config hash) and
runs instances of each stage through a bounded worker pool. A failing
instance is logged and recorded in the stage fragment; its siblings keep
going.
"""
import logging
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from artifact_io import read_json, sha256_file, write_json_atomic, write_text_atomic
from datamodel import (
    DataMatrix,
    Volume4D,
    apply_mask_and_threshold,
    decimate,
    full_mask,
    gaussian_smooth,
    mask_from_mean,
    read_matrix_binary,
    read_matrix_header,
    smooth_matrix,
    write_matrix_binary,
)
from fractal import RadiusPolicy, describe, estimate_fd, fd_summary, linear_fit_slope, write_curve_csv, write_fit_json
from ica import component_kurtosis, fastica, match_sources, rmse_knee, with_rmse_curve, write_matches, write_unmixing
from report_builder import FRAGMENT_VERSION, build_report, load_fragments, write_report
from run_config import RunConfig, config_hash, dump_config, run_directory
from synthgen import generate_sources, mix, read_ground_truth, write_ground_truth
from volume_parser import VolumeParser, write_raw_f32

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG_COPY = "config.yaml"
OK = "ok"
FAILED = "failed"
NOT_CONVERGED = "not-converged"


def _level_tag(fwhm_mm: float) -> str:
    return f"{fwhm_mm:g}".replace(".", "p")


def combined_fwhm(*levels: float) -> float:
    """FWHM of successive Gaussian smoothings."""
    return round(float(np.sqrt(sum(level ** 2 for level in levels))), 6)


def failure(instance: str, error: BaseException) -> Dict[str, Any]:
    return {"instance": instance, "status": FAILED, "error": f"{type(error).__name__}: {error}"}


class AnalysisPipeline:
    """Runs synth, ingest, smooth, fd, ica and report stages for one configuration."""

    def __init__(
        self,
        config: RunConfig,
        workers: int = 1,
        progress: bool = True,
        tool_version: Optional[str] = None,
    ):
        """
        Initialize the pipeline.

        Args:
            config: Validated run configuration
            workers: Size of the worker pool for batch stages
            progress: Show tqdm progress bars
            tool_version: Version string recorded in fragments
        """
        if tool_version is None:
            from voxeldim import __version__ as tool_version
        self.config = config
        self.workers = max(1, int(workers))
        self.progress = progress
        self.tool_version = tool_version
        self.config_hash = config_hash(config)
        self.run_dir = run_directory(config)
        self.parser = VolumeParser()

    # directories

    @property
    def matrix_dir(self) -> Path:
        return self.run_dir / "matrices"

    @property
    def fragment_dir(self) -> Path:
        return self.run_dir / "fragments"

    def _relative(self, path: Path) -> str:
        try:
            return Path(path).relative_to(self.run_dir).as_posix()
        except ValueError:
            return str(path)

    # batch plumbing

    def _map(self, func: Callable[[Any], Dict[str, Any]], items: Sequence[Any], desc: str) -> List[Dict[str, Any]]:
        """Apply `func` to every item, results in input order."""
        with tqdm(total=len(items), desc=desc, disable=not self.progress, leave=False) as bar:
            if self.workers == 1 or len(items) <= 1:
                results = []
                for item in items:
                    results.append(func(item))
                    bar.update(1)
                return results
            with ThreadPool(min(self.workers, len(items))) as pool:
                results = []
                for result in pool.imap(func, items):
                    results.append(result)
                    bar.update(1)
                return results

    def _fragment(self, kind: str, instances: List[Dict[str, Any]], **extra) -> Dict[str, Any]:
        fragment = {
            "kind": kind,
            "fragment_version": FRAGMENT_VERSION,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "instances": instances,
            "failed": sum(1 for i in instances if i.get("status") != OK),
        }
        fragment.update(extra)
        write_text_atomic(self.run_dir / CONFIG_COPY, dump_config(self.config))
        write_json_atomic(self.fragment_dir / f"{kind}.json", fragment)
        return fragment

    def _read_manifest(self) -> Dict[str, Any]:
        path = self.matrix_dir / MANIFEST
        return read_json(path) if path.is_file() else {}

    def _update_manifest(self, entries: Dict[str, Dict[str, Any]]):
        manifest = self._read_manifest()
        manifest.update(entries)
        write_json_atomic(self.matrix_dir / MANIFEST, dict(sorted(manifest.items())))

    def _save_matrix(self, name: str, m: DataMatrix) -> Tuple[str, str]:
        path = write_matrix_binary(m, self.matrix_dir / f"{name}.bin")
        return self._relative(path), sha256_file(path)

    def matrix_inputs(self, explicit: Sequence[str]) -> List[Dict[str, Any]]:
        """
        Matrices a stage works on: explicit files, else this run's manifest.

        Every entry carries the smoothing already applied (`fwhm_mm`, from
        the manifest or the matrix file header) and its `source`: "synth",
        "ingest" or "file" for explicitly named matrices.

        Raises:
            FileNotFoundError: no matrix is available
        """
        if explicit:
            inputs = []
            for item in explicit:
                path = Path(item)
                if not path.is_file():
                    raise FileNotFoundError(f"input matrix {path} does not exist")
                fwhm_mm = float(read_matrix_header(path).get("fwhm_mm", 0.0))
                inputs.append({"name": path.stem, "path": path, "fwhm_mm": fwhm_mm, "ground_truth": None,
                               "source": "file"})
            return inputs
        manifest = self._read_manifest()
        if not manifest:
            raise FileNotFoundError(f"no matrices in {self.matrix_dir}; run synth or ingest first")
        return [
            {"name": name, "path": self.run_dir / entry["matrix"], "fwhm_mm": entry.get("fwhm_mm", 0.0),
             "ground_truth": entry.get("ground_truth"), "source": entry.get("source", "synth")}
            for name, entry in manifest.items()
        ]

    # stages

    def synth(self) -> Dict[str, Any]:
        """Generate, mix and export one simulated slice per configured seed."""
        cfg = self.config.synth

        def one(seed: int) -> Dict[str, Any]:
            name = f"synth-seed{seed}"
            try:
                sources = generate_sources(seed, cfg.constants)
                truth_dir = self.run_dir / "synth" / f"seed-{seed}"
                write_ground_truth(sources, truth_dir)
                m = mix(sources, cfg.noise_level, cfg.noise_seed + seed)
                matrix, digest = self._save_matrix(name, m)
            except (ValueError, ArithmeticError) as e:
                logger.warning("synth %s failed: %s", name, e)
                return failure(name, e)
            return {"instance": name, "status": OK, "seed": seed, "t": m.t, "n": m.n,
                    "matrix": matrix, "matrix_sha256": digest, "ground_truth": self._relative(truth_dir),
                    "fwhm_mm": 0.0}

        instances = self._map(one, list(cfg.seeds), "synth")
        self._update_manifest({
            i["instance"]: {"matrix": i["matrix"], "fwhm_mm": 0.0, "ground_truth": i["ground_truth"], "source": "synth"}
            for i in instances if i["status"] == OK
        })
        return self._fragment("synth", instances, noise_level=cfg.noise_level)

    def _volume_inputs(self) -> List[Tuple[Path, Optional[Volume4D]]]:
        """
        Explicitly named files are parsed here so format errors surface
        immediately; files found in directories are parsed per instance.
        """
        inputs = []
        for item in self.config.ingest.inputs:
            path = Path(item)
            if path.is_dir():
                inputs.extend((p, None) for p in self.parser.volume_files(path, self.config.ingest.format))
            else:
                inputs.append((path, self.parser.parse_file(path, self.config.ingest.format)))
        if not inputs:
            raise FileNotFoundError("ingest.inputs names no volume")
        return inputs

    def _mask_for(self, v: Volume4D):
        cfg = self.config.ingest
        if cfg.mask:
            return self.parser.parse_mask(cfg.mask, cfg.format)
        if cfg.mean_mask_fraction is not None:
            return mask_from_mean(v, cfg.mean_mask_fraction)
        return full_mask(v)

    def preprocess_volume(self, v: Volume4D, fwhm_mm: float) -> DataMatrix:
        """Smoothing, masking, activity threshold and decimation for one level."""
        cfg = self.config.preprocess
        mask = self._mask_for(v)
        if cfg.smooth_before_mask:
            m = apply_mask_and_threshold(gaussian_smooth(v, fwhm_mm, cfg.edge_mode), mask, cfg.activity_threshold)
        else:
            m = smooth_matrix(apply_mask_and_threshold(v, mask, cfg.activity_threshold), fwhm_mm, cfg.edge_mode)
        m = decimate(m, cfg.decimate_stride)
        m.fwhm_mm = float(fwhm_mm)
        return m

    def ingest(self) -> Dict[str, Any]:
        """Turn every input volume into one data matrix per smoothing level."""
        levels = self.config.preprocess.fwhm_mm
        mask_path = self.config.ingest.mask
        mask_digest = sha256_file(mask_path) if mask_path else None
        volume_inputs = self._volume_inputs()

        def one(item: Tuple[Path, Optional[Volume4D]]) -> List[Dict[str, Any]]:
            path, volume = item
            try:
                volume = volume or self.parser.parse_file(path, self.config.ingest.format)
                input_digest = sha256_file(path)
            except (OSError, ValueError) as e:
                logger.warning("ingest %s failed: %s", path.name, e)
                return [failure(path.stem, e)]
            results = []
            for level in levels:
                name = f"{path.stem}-fwhm{_level_tag(level)}"
                try:
                    m = self.preprocess_volume(volume, level)
                    matrix, digest = self._save_matrix(name, m)
                except (ValueError, ArithmeticError) as e:
                    logger.warning("ingest %s failed: %s", name, e)
                    results.append(failure(name, e))
                    continue
                results.append({"instance": name, "status": OK, "input": str(path), "input_sha256": input_digest,
                                "fwhm_mm": level, "t": m.t, "n": m.n, "matrix": matrix, "matrix_sha256": digest})
            return results

        instances = [r for group in self._map(one, volume_inputs, "ingest") for r in group]
        self._update_manifest({
            i["instance"]: {"matrix": i["matrix"], "fwhm_mm": i["fwhm_mm"], "ground_truth": None, "source": "ingest"}
            for i in instances if i["status"] == OK
        })
        return self._fragment("ingest", instances, mask=mask_path, mask_sha256=mask_digest)

    def smooth(self) -> List[Path]:
        """Write each input volume smoothed at every configured level as raw-f32-4d."""
        cfg = self.config.preprocess
        outputs = []
        for path, volume in self._volume_inputs():
            volume = volume or self.parser.parse_file(path, self.config.ingest.format)
            for level in cfg.fwhm_mm:
                smoothed = gaussian_smooth(volume, level, cfg.edge_mode)
                outputs.append(write_raw_f32(smoothed, self.run_dir / "smooth" / f"{path.stem}-fwhm{_level_tag(level)}.f32"))
        return outputs

    def _radius_policy(self) -> RadiusPolicy:
        cfg = self.config.fd
        return RadiusPolicy(
            count=cfg.radius_count,
            low_percentile=cfg.low_percentile,
            high_percentile=cfg.high_percentile,
            box_schedule=cfg.box_schedule,
            box_min_exponent=cfg.box_min_exponent,
            box_max_exponent=cfg.box_max_exponent,
            radii=cfg.radii,
        )

    def fd(self) -> Dict[str, Any]:
        """
        Fit one FD per (matrix, smoothing, stride) and summarize per group.

        Returns:
            The fd fragment: per-instance fits plus per-group statistics
        """
        cfg = self.config.fd
        policy = self._radius_policy()
        inputs = self.matrix_inputs(cfg.inputs)
        tasks = [(entry, smoothing, stride) for entry in inputs
                 for smoothing in cfg.smoothing_fwhm_mm for stride in cfg.strides]
        out_dir = self.run_dir / "fd"

        def one(task) -> Dict[str, Any]:
            entry, smoothing, stride = task
            name = f"{entry['name']}-s{_level_tag(smoothing)}-k{stride}"
            effective = combined_fwhm(entry["fwhm_mm"], smoothing)
            try:
                m = decimate(smooth_matrix(read_matrix_binary(entry["path"]), smoothing, self.config.preprocess.edge_mode), stride)
                fit = estimate_fd(m, cfg.method, cfg.q, policy, cfg.box_frame)
                curve_csv = write_curve_csv(fit, out_dir / f"{name}.csv")
                fit_json = write_fit_json(fit, out_dir / f"{name}.json", {"instance": name, "n": m.n, "t": m.t})
            except (ValueError, ArithmeticError, RuntimeError) as e:
                logger.warning("fd %s failed: %s", name, e)
                result = failure(name, e)
                result.update(matrix=entry["name"], smoothing_fwhm_mm=effective, stride=stride)
                return result
            return {"instance": name, "status": OK, "matrix": entry["name"],
                    "matrix_sha256": sha256_file(entry["path"]),
                    "smoothing_fwhm_mm": effective, "stride": stride, "n": m.n, "fd": fit.fd,
                    "linear_slope": linear_fit_slope(fit.curve), "weighted_rmse": fit.weighted_rmse,
                    "curve_points": fit.n_points, "curve": self._relative(curve_csv), "fit": self._relative(fit_json)}

        instances = self._map(one, tasks, "fd")
        return self._fragment("fd", instances, method=cfg.method, q=cfg.q, summaries=summarize_groups(instances))

    def ica(self) -> Dict[str, Any]:
        """
        One fastICA run per (matrix, p), matched against ground truth when there is one.

        Ingested volumes sweep `ica.p_real`; simulated and explicitly named
        matrices sweep `ica.p`.
        """
        cfg = self.config.ica
        inputs = self.matrix_inputs(cfg.inputs)
        tasks = [(entry, p) for entry in inputs for p in (cfg.p_real if entry["source"] == "ingest" else cfg.p)]
        out_dir = self.run_dir / "ica"

        def one(task) -> Dict[str, Any]:
            entry, p = task
            name = f"{entry['name']}-p{p}"
            try:
                m = read_matrix_binary(entry["path"])
                u = with_rmse_curve(fastica(m, p, cfg.nonlinearity, cfg.seed, cfg.tol, cfg.max_iter,
                                            cfg.restarts, strict=False), m)
                model_json = write_unmixing(u, out_dir, name, {"instance": name, "matrix": entry["name"]})
                matches = None
                if entry["ground_truth"]:
                    matches = match_sources(u, read_ground_truth(self.run_dir / entry["ground_truth"]), m)
                    write_matches(matches, out_dir / f"{name}.matches.csv")
            except (ValueError, ArithmeticError, RuntimeError) as e:
                logger.warning("ica %s failed: %s", name, e)
                result = failure(name, e)
                result.update(matrix=entry["name"], p=p)
                return result
            return {"instance": name, "status": OK if u.converged else NOT_CONVERGED, "matrix": entry["name"],
                    "matrix_sha256": sha256_file(entry["path"]), "p": u.p, "converged": u.converged,
                    "iterations": u.iterations, "attempts": u.attempts, "achieved_tol": u.achieved_tol,
                    "whitened_dim": u.whitened_rank,
                    "rmse_curve": u.rmse_curve, "knee": rmse_knee(u.rmse_curve),
                    "kurtosis": component_kurtosis(u).tolist(), "model": self._relative(model_json),
                    "matches": None if matches is None else [match.to_dict() for match in matches]}

        instances = self._map(one, tasks, "ica")
        return self._fragment("ica", instances, nonlinearity=cfg.nonlinearity, seed=cfg.seed)

    def report(self, fragment_paths: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """Merge fragments (configured, given, or every one in this run) into the report."""
        paths = list(fragment_paths or self.config.report.fragments)
        if not paths:
            paths = sorted(self.fragment_dir.glob("*.json")) if self.fragment_dir.is_dir() else []
        report = build_report(load_fragments(paths), self.config.report.title)
        write_report(report, self.run_dir / "report")
        return report

    def run_all(self) -> Dict[str, Any]:
        """synth, fd, ica and report in sequence."""
        fragments = [self.synth(), self.fd(), self.ica()]
        return self.report([str(self.fragment_dir / f"{f['kind']}.json") for f in fragments])


def summarize_groups(instances: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    FD statistics per (smoothing, stride) group of successful instances.

    Groups with fewer than 3 values carry untrimmed statistics only.
    """
    groups: Dict[Tuple[float, int], List[float]] = {}
    for instance in instances:
        if instance.get("status") == OK:
            groups.setdefault((instance["smoothing_fwhm_mm"], instance["stride"]), []).append(instance["fd"])
    summaries = []
    for (smoothing, stride), values in sorted(groups.items()):
        if len(values) >= 3:
            summary = fd_summary(values).to_dict()
            trimmed, untrimmed = summary["trimmed"], summary["untrimmed"]
        else:
            trimmed, untrimmed = None, describe(values).to_dict()
        summaries.append({"smoothing_fwhm_mm": smoothing, "stride": stride, "instance_count": len(values),
                          "trimmed": trimmed, "untrimmed": untrimmed})
    return summaries
