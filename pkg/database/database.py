"""
(©) EDQ Lab

This file manages every artifact the laboratory writes to disk.
- Datasets: line-delimited CSV records, one block of event rows per trajectory.
- Manifests: JSON sidecars carrying seed, parameters, config hash and content hash.
- Checkpoints: versioned JSON dumps of Q-functions.
- Diagnostics and results: CSV tables headed by the config hash.

Every writer is atomic (temp file + rename) and every failure raises ArtifactError with the path.
"""

import csv
import io
import json
import logging
import os
from pathlib import Path

from edq.core_process import Event, EventKind, Trajectory
from edq.errors import ArtifactError, EdqError
from helper_func import content_hash, file_hash

# Set up a logger for this module
logger = logging.getLogger(__name__)

DATASET_FORMAT = "edq-dataset"
MANIFEST_FORMAT = "edq-manifest"
ARTIFACT_VERSION = 1
OUTCOME_RECORD = "OUTCOME"
DIAGNOSTIC_COLUMNS = ("iteration", "loss", "mean_label", "mean_delta", "frac_horizon")

_KINDS = {kind.value: kind for kind in (EventKind.FEATURE, EventKind.OUTCOME, EventKind.TREATMENT)}

# ======================================================================================
#                                 *** File Helpers ***
# ======================================================================================

def write_text(path, text: str) -> Path:
    """Writes `text` atomically, creating parent directories."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise ArtifactError(f"Could not write file: {e.strerror or e}", path) from e
    return path

def read_text(path) -> str:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ArtifactError("File not found", path) from e
    except OSError as e:
        raise ArtifactError(f"Could not read file: {e.strerror or e}", path) from e

def write_json(path, data: dict) -> Path:
    return write_text(path, json.dumps(data, sort_keys=True, indent=2) + "\n")

def read_json(path) -> dict:
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Invalid JSON: {e}", path) from e

def _num(value: float) -> str:
    return repr(float(value))

# ======================================================================================
#                                    *** Datasets ***
# ======================================================================================

def dataset_text(pairs, horizon: float) -> str:
    """
    Rows `traj_id,time,kind,mark...` for every event, then `traj_id,OUTCOME,y`.
    Floats are written in repr form so reading back is exact.
    """
    buffer = io.StringIO()
    buffer.write(f"# {DATASET_FORMAT} v{ARTIFACT_VERSION}; horizon={_num(horizon)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    for traj_id, (traj, y) in enumerate(pairs):
        for event in traj.events:
            writer.writerow([traj_id, _num(event.time), event.kind.value, *(_num(m) for m in event.mark)])
        writer.writerow([traj_id, OUTCOME_RECORD, _num(y)])
    return buffer.getvalue()

def write_dataset(path, pairs, horizon: float) -> str:
    """Writes a dataset file and returns its content hash."""
    text = dataset_text(pairs, horizon)
    write_text(path, text)
    logger.info(f"Dataset written to {path}")
    return content_hash(text)

def _parse_header(line: str, path) -> float:
    prefix = f"# {DATASET_FORMAT} v"
    if not line.startswith(prefix):
        raise ArtifactError("Missing dataset header", path)
    try:
        version, rest = line[len(prefix):].split(";", 1)
        if int(version) != ARTIFACT_VERSION:
            raise ArtifactError(f"Unsupported dataset version {version}", path)
        key, value = rest.strip().split("=", 1)
        if key != "horizon":
            raise ValueError(key)
        return float(value)
    except ValueError as e:
        raise ArtifactError(f"Malformed dataset header: {line.strip()}", path) from e

def read_dataset(path) -> tuple:
    """Returns (list of (trajectory, Y), horizon)."""
    lines = read_text(path).splitlines()
    if not lines:
        raise ArtifactError("Empty dataset file", path)
    horizon = _parse_header(lines[0], path)
    pairs, events, expected = [], [], 0
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        try:
            traj_id = int(row[0])
            if traj_id != expected:
                raise ArtifactError(f"Line {lineno}: trajectory id {traj_id}, expected {expected}", path)
            if row[1] == OUTCOME_RECORD:
                pairs.append((Trajectory(events, horizon), float(row[2])))
                events, expected = [], expected + 1
                continue
            kind = _KINDS[row[2]]
            events.append(Event(float(row[1]), kind, tuple(float(m) for m in row[3:])))
        except (IndexError, KeyError, ValueError) as e:
            raise ArtifactError(f"Line {lineno}: malformed row {row!r}", path) from e
        except EdqError as e:
            if isinstance(e, ArtifactError):
                raise
            raise ArtifactError(f"Line {lineno}: {e}", path) from e
    if events:
        raise ArtifactError(f"Trajectory {expected} has no {OUTCOME_RECORD} record", path)
    return pairs, horizon

# ======================================================================================
#                                   *** Manifests ***
# ======================================================================================

def manifest_path(dataset_path) -> Path:
    dataset_path = Path(dataset_path)
    return dataset_path.with_name(dataset_path.stem + ".manifest.json")

def write_manifest(dataset_path, *, seed: int, config_hash: str, data_hash: str, info: dict) -> Path:
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": ARTIFACT_VERSION,
        "file": Path(dataset_path).name,
        "seed": int(seed),
        "config_hash": config_hash,
        "content_hash": data_hash,
        **info,
    }
    return write_json(manifest_path(dataset_path), manifest)

def read_manifest(dataset_path) -> dict:
    path = manifest_path(dataset_path)
    manifest = read_json(path)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ArtifactError("Not a dataset manifest", path)
    if manifest.get("version") != ARTIFACT_VERSION:
        raise ArtifactError(f"Unsupported manifest version {manifest.get('version')!r}", path)
    return manifest

def check_dataset(dataset_path, config_hash: str | None = None) -> dict:
    """
    Verifies a dataset against its manifest and, when given, against the current config hash.
    Returns the manifest.
    """
    manifest = read_manifest(dataset_path)
    actual = file_hash(dataset_path) if Path(dataset_path).exists() else None
    if actual is None:
        raise ArtifactError("Dataset file not found", dataset_path)
    if actual != manifest.get("content_hash"):
        logger.error(f"Dataset {dataset_path} does not match its manifest content hash")
        raise ArtifactError("Dataset content hash does not match its manifest", dataset_path)
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        logger.error(f"Dataset {dataset_path} was produced under config {manifest.get('config_hash')}")
        raise ArtifactError(
            f"Dataset was simulated under config {manifest.get('config_hash')}, current config is {config_hash}",
            dataset_path,
        )
    return manifest

# ======================================================================================
#                                  *** Checkpoints ***
# ======================================================================================

def save_checkpoint(path, payload: dict) -> Path:
    """Float repr in JSON round-trips every parameter bit for bit."""
    write_json(path, payload)
    logger.info(f"Checkpoint saved to {path}")
    return Path(path)

def load_checkpoint(path) -> dict:
    payload = read_json(path)
    if not isinstance(payload, dict) or "format" not in payload:
        raise ArtifactError("Not a checkpoint file", path)
    return payload

# ======================================================================================
#                               *** Diagnostics & Results ***
# ======================================================================================

def diagnostics_text(rows, config_hash: str) -> str:
    buffer = io.StringIO()
    buffer.write(f"# edq-diagnostics v{ARTIFACT_VERSION}; config_hash={config_hash}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(DIAGNOSTIC_COLUMNS)
    for r in rows:
        writer.writerow([r.iteration, _num(r.loss), _num(r.mean_label), _num(r.mean_delta), _num(r.frac_horizon)])
    return buffer.getvalue()

def write_diagnostics(path, rows, config_hash: str) -> Path:
    return write_text(path, diagnostics_text(rows, config_hash))

def read_diagnostics(path) -> list:
    """Diagnostic rows as dicts of floats (iteration as int)."""
    lines = [line for line in read_text(path).splitlines() if not line.startswith("#")]
    try:
        return [
            {key: (int(value) if key == "iteration" else float(value)) for key, value in row.items()}
            for row in csv.DictReader(lines)
        ]
    except (TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed diagnostics: {e}", path) from e

def write_table(path, table_text: str, config_hash: str) -> Path:
    """Writes a results table, prefixed by a config hash comment."""
    return write_text(path, f"# config_hash={config_hash}\n{table_text}")

def table_config_hash(path) -> str | None:
    first = read_text(path).split("\n", 1)[0]
    return first.split("=", 1)[1] if first.startswith("# config_hash=") else None
