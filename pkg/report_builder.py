"""
Merge pipeline fragments into one report.

Each batch command leaves a JSON fragment (synth, ingest, fd, ica) in the run
directory. The report gathers them with their provenance, lays the FD
summaries out as a smoothing-level table and lines up the FD estimates
with the ICA reconstruction curves.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from artifact_io import canonical_json, sha256_text, write_json_atomic, write_text_atomic

logger = logging.getLogger(__name__)

FRAGMENT_VERSION = 1
REPORT_VERSION = 1
FRAGMENT_KINDS = ("synth", "ingest", "fd", "ica")
REPORT_JSON = "report.json"
REPORT_TEXT = "summary.txt"


class FragmentError(ValueError):
    """Fragments are missing, unreadable or do not belong together."""


def load_fragments(paths: Sequence[Union[str, Path]]) -> List[Dict[str, Any]]:
    if not paths:
        raise FragmentError("no fragments to merge")
    fragments = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FragmentError(f"fragment {path} does not exist")
        try:
            fragments.append(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise FragmentError(f"fragment {path} is unreadable: {e}") from e
    return fragments


def _check_fragments(fragments: Sequence[Dict[str, Any]]) -> Tuple[str, str]:
    if not fragments:
        raise FragmentError("no fragments to merge")
    hashes, versions, kinds = set(), set(), []
    for fragment in fragments:
        kind = fragment.get("kind")
        if kind not in FRAGMENT_KINDS:
            raise FragmentError(f"unknown fragment kind {kind!r}")
        if fragment.get("fragment_version") != FRAGMENT_VERSION:
            raise FragmentError(
                f"{kind} fragment has version {fragment.get('fragment_version')}, expected {FRAGMENT_VERSION}"
            )
        kinds.append(kind)
        hashes.add(fragment.get("config_hash"))
        versions.add(fragment.get("tool_version"))
    duplicates = sorted({k for k in kinds if kinds.count(k) > 1})
    if duplicates:
        raise FragmentError(f"duplicate fragments: {', '.join(duplicates)}")
    if len(hashes) != 1:
        raise FragmentError(f"fragments come from different configurations: {sorted(map(str, hashes))}")
    if len(versions) != 1:
        raise FragmentError(f"fragments come from different tool versions: {sorted(map(str, versions))}")
    return hashes.pop(), versions.pop()


def _input_hashes(fragments: Sequence[Dict[str, Any]]) -> Dict[str, str]:
    inputs = {}
    for fragment in fragments:
        for instance in fragment.get("instances", []):
            for key in ("input", "matrix"):
                name, digest = instance.get(key), instance.get(f"{key}_sha256")
                if name and digest:
                    inputs[name] = digest
    return dict(sorted(inputs.items()))


def cross_check(fd_fragment: Optional[Dict[str, Any]], ica_fragment: Optional[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Per input matrix: mean FD next to the RMSE knee and whitened rank of its ICA runs."""
    if not fd_fragment or not ica_fragment:
        return []
    rows = {}
    for instance in fd_fragment.get("instances", []):
        if instance.get("status") == "ok":
            rows.setdefault(instance["matrix"], {"fd": [], "knee": [], "rank": []})["fd"].append(instance["fd"])
    for run in ica_fragment.get("instances", []):
        if run.get("status") in ("ok", "not-converged") and run["matrix"] in rows:
            rows[run["matrix"]]["knee"].append(run["knee"])
            rows[run["matrix"]]["rank"].append(run["whitened_dim"])
    return [
        {"matrix": name, "mean_fd": sum(row["fd"]) / len(row["fd"]),
         "rmse_knee": sorted(set(row["knee"])), "whitened_dim": sorted(set(row["rank"]))}
        for name, row in sorted(rows.items())
    ]


def build_report(fragments: Sequence[Dict[str, Any]], title: str = "") -> Dict[str, Any]:
    """
    Merge fragments into a report dictionary carrying its own content hash.

    Raises:
        FragmentError: empty, unknown, duplicated or mismatched fragments
    """
    config_hash, tool_version = _check_fragments(fragments)
    by_kind = {fragment["kind"]: fragment for fragment in fragments}
    report = {
        "report_version": REPORT_VERSION,
        "title": title,
        "provenance": {
            "config_hash": config_hash,
            "tool_version": tool_version,
            "inputs": _input_hashes(fragments),
            "fragments": {kind: sha256_text(canonical_json(by_kind[kind])) for kind in sorted(by_kind)},
        },
        "sections": {kind: by_kind[kind] for kind in sorted(by_kind)},
        "cross_check": cross_check(by_kind.get("fd"), by_kind.get("ica")),
        "failed": sum(int(fragment.get("failed", 0)) for fragment in fragments),
    }
    report["content_hash"] = report_content_hash(report)
    return report


def report_content_hash(report: Dict[str, Any]) -> str:
    body = {k: v for k, v in report.items() if k != "content_hash"}
    return sha256_text(canonical_json(body))


def _stats_cells(stats: Optional[Dict[str, Any]]) -> List[str]:
    if not stats:
        return ["-", "-", "-", "-"]
    return [f"{stats['mean']:.2f}", f"±{stats['conf_halfwidth']:.2f} ({stats['relative_halfwidth_pct']:.2f}%)",
            f"{stats['stdev']:.2f}", str(stats["count"])]


def format_fd_table(fd_fragment: Dict[str, Any]) -> str:
    """Mean, confidence range and stdev per (smoothing, stride) group."""
    headers = ["smoothing (mm)", "stride", "mean", "conf. range", "stdev", "n",
               "mean (all)", "conf. range (all)", "stdev (all)", "n (all)"]
    rows = []
    for group in fd_fragment.get("summaries", []):
        rows.append([f"{group['smoothing_fwhm_mm']:g}", str(group["stride"])]
                    + _stats_cells(group.get("trimmed")) + _stats_cells(group.get("untrimmed")))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = "  ".join("{:<%d}" % w for w in widths)
    output = [line.format(*headers), line.format(*("-" * w for w in widths))]
    output.extend(line.format(*row) for row in rows)
    return "\n".join(output)


def format_report(report: Dict[str, Any]) -> str:
    """Human-readable summary of a merged report."""
    sections = report["sections"]
    output = f"\n{'=' * 80}\n"
    output += f"{report.get('title') or 'REPORT'}\n"
    output += f"{'=' * 80}\n\n"
    provenance = report["provenance"]
    output += f"Config hash: {provenance['config_hash']}\n"
    output += f"Tool version: {provenance['tool_version']}\n"
    output += f"Inputs: {len(provenance['inputs'])}\n"
    output += f"Content hash: {report['content_hash']}\n"

    if "fd" in sections:
        fd = sections["fd"]
        output += f"\n{'=' * 80}\nFRACTAL DIMENSION ({fd.get('method')}, q={fd.get('q')})\n{'=' * 80}\n\n"
        output += format_fd_table(fd) + "\n"
        failed = [i for i in fd.get("instances", []) if i.get("status") != "ok"]
        for instance in failed:
            output += f"  failed: {instance['instance']}: {instance.get('error')}\n"

    if "ica" in sections:
        output += f"\n{'=' * 80}\nICA\n{'=' * 80}\n\n"
        for run in sections["ica"].get("instances", []):
            if run.get("status") == "failed":
                output += f"{run['instance']}: failed: {run.get('error')}\n"
                continue
            curve = run["rmse_curve"]
            output += (f"{run['instance']}: p={run['p']} converged={run['converged']} "
                       f"knee={run['knee']} rmse {curve[0]:.4g} -> {curve[-1]:.4g}\n")
            for match in run.get("matches") or []:
                output += (f"   S{match['source_id']}: component {match['component']} "
                           f"r={match['r']:.3f} rmse={match['rmse']:.3g}\n")

    if report.get("cross_check"):
        output += f"\n{'=' * 80}\nFD VS ICA\n{'=' * 80}\n\n"
        for row in report["cross_check"]:
            output += (f"{row['matrix']}: mean FD {row['mean_fd']:.2f}, RMSE knee {row['rmse_knee']}, "
                       f"whitened rank {row['whitened_dim']}\n")
    return output


def write_report(report: Dict[str, Any], directory: Union[str, Path]) -> Tuple[Path, Path]:
    directory = Path(directory)
    json_path = write_json_atomic(directory / REPORT_JSON, report)
    text_path = write_text_atomic(directory / REPORT_TEXT, format_report(report))
    logger.info("report %s written to %s", report["content_hash"][:12], directory)
    return json_path, text_path
