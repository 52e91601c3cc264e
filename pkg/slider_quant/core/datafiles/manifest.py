"""
Run manifests (run.json).

Every CLI run records the command, resolved config, seed, package versions and
checksums of its input files so the run can be repeated bit-exactly.
"""
from pathlib import Path
import dataclasses as dc
import typing as t
import hashlib
import platform

import numpy as np
import scipy

import slider_quant
import slider_quant.core.logging as logging
import slider_quant.core.datafiles.serialization as ser

logger = logging.get_logger(__name__)

MANIFEST_NAME = "run.json"


@dc.dataclass(frozen=True)
class RunManifest:
    """Immutable description of one CLI run."""
    command: str
    config: t.Dict[str, t.Any]
    seed: int
    inputs: t.Dict[str, str] = dc.field(default_factory=dict)
    outputs: t.List[str] = dc.field(default_factory=list)
    versions: t.Dict[str, str] = dc.field(default_factory=dict)
    version: int = 1


def calculate_checksum(file_path: t.Union[str, Path]) -> str:
    """
    Calculate SHA-256 checksum of a file.

    :param file_path: Path to the file
    :returns: Hexadecimal string representation of the file's SHA-256 hash
    """
    file_path = Path(file_path)
    hasher = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def package_versions() -> t.Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "slider_quant": slider_quant.__version__,
    }


def create_manifest(command: str, config: t.Any, seed: int,
                    inputs: t.Iterable[t.Union[str, Path]] = (),
                    outputs: t.Iterable[t.Union[str, Path]] = ()) -> RunManifest:
    """
    Build a manifest for a run.

    :param command: CLI subcommand name
    :param config: Resolved config dataclass (or plain mapping)
    :param seed: Seed used by the run
    :param inputs: Input files; each is checksummed
    :param outputs: Output files written by the run
    """
    config_dict = ser.serialize_dataclass(config) if dc.is_dataclass(config) else dict(config)
    return RunManifest(
        command=command,
        config=config_dict,
        seed=seed,
        inputs={str(p): calculate_checksum(p) for p in inputs},
        outputs=[str(p) for p in outputs],
        versions=package_versions(),
    )


def get_manifest_path(output_path: t.Union[str, Path]) -> Path:
    """run.json lives in the directory of the run's primary output."""
    output_path = Path(output_path)
    directory = output_path if output_path.is_dir() else output_path.parent
    return directory / MANIFEST_NAME


def save_manifest(manifest: RunManifest, manifest_path: t.Union[str, Path]) -> Path:
    ser.save_json(ser.serialize_dataclass(manifest), manifest_path)
    logger.info(f"Wrote run manifest: {manifest_path}")
    return Path(manifest_path)


def load_manifest(manifest_path: t.Union[str, Path]) -> RunManifest:
    return ser.deserialize_dataclass(RunManifest, ser.load_json(manifest_path))
