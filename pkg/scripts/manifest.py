import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from utils import load_config, load_from_json, save_to_json, setup_logger
from scripts.errors import ManifestError

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

TOOL_VERSION = "floodloss 0.1.0"
MANIFEST_NAME = "manifest.json"
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
STAGE_STATES = ("pending", "ok", "failed", "skipped")
_CHUNK = 1 << 20


def file_digest(path: str | Path) -> str:
    """md5 hex digest of a file's bytes, read in chunks."""
    digest = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    Provenance of one CLI run.

    Reports written by the run carry `manifest_id`, which depends only on the
    config snapshot, the master seed and the input digests, so reruns with
    identical inputs produce identical reports. Timestamps live here only.
    """

    config: dict
    seed: int
    digests: Dict[str, str] = field(default_factory=dict)
    version: str = TOOL_VERSION
    started_at: datetime = field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    stages: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.config, dict):
            raise TypeError("config must be a dict")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise TypeError("seed must be an int")
        if not isinstance(self.started_at, datetime):
            raise TypeError("started_at must be a datetime object")
        if self.finished_at is not None and not isinstance(self.finished_at, datetime):
            raise TypeError("finished_at must be a datetime object or None")
        for stage, state in self.stages.items():
            if state not in STAGE_STATES:
                raise ValueError(f"stage '{stage}' has unknown state '{state}'")

    @classmethod
    def start(cls, config: dict, seed: int, inputs: Optional[List[str | Path]] = None) -> "RunManifest":
        """Snapshots the config and digests every existing input file."""
        digests = {}
        for path in inputs or []:
            if path is None:
                continue
            digests[str(path)] = file_digest(path)
        return cls(config=dict(config), seed=int(seed), digests=digests)

    @property
    def manifest_id(self) -> str:
        key = json.dumps(
            {"config": self.config, "seed": self.seed, "digests": self.digests},
            sort_keys=True,
            default=str,
        )
        return hashlib.md5(key.encode()).hexdigest()

    def mark(self, stage: str, state: str) -> None:
        if state not in STAGE_STATES:
            raise ValueError(f"unknown stage state '{state}'")
        self.stages[stage] = state
        logger.info("Stage '%s' -> %s", stage, state)

    def finish(self) -> None:
        self.finished_at = datetime.now()

    def verify(self) -> List[str]:
        """Input paths whose current digest differs from the recorded one (missing files included)."""
        changed = []
        for path, recorded in sorted(self.digests.items()):
            if not Path(path).exists() or file_digest(path) != recorded:
                changed.append(path)
        return changed

    def to_dict(self) -> dict:
        return {
            "manifest_id": self.manifest_id,
            "version": self.version,
            "config": self.config,
            "seed": self.seed,
            "digests": self.digests,
            "started_at": self.started_at.strftime(TIME_FORMAT),
            "finished_at": self.finished_at.strftime(TIME_FORMAT) if self.finished_at else None,
            "stages": self.stages,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        try:
            started = datetime.strptime(data["started_at"], TIME_FORMAT)
            finished = data.get("finished_at")
            finished = datetime.strptime(finished, TIME_FORMAT) if finished else None
        except (KeyError, ValueError) as e:
            raise ValueError(f"invalid manifest timestamps: {e}") from e
        return cls(
            config=dict(data.get("config") or {}),
            seed=int(data["seed"]),
            digests=dict(data.get("digests") or {}),
            version=data.get("version", TOOL_VERSION),
            started_at=started,
            finished_at=finished,
            stages=dict(data.get("stages") or {}),
        )


def write_manifest(manifest: RunManifest, directory: str | Path) -> Path:
    path = Path(directory) / MANIFEST_NAME
    save_to_json(manifest.to_dict(), path)
    return path


def read_manifest(directory: str | Path, verify: bool = True) -> RunManifest:
    """
    Loads the manifest of an output directory.

    Raises:
        ManifestError: If the file is missing, or `verify` is set and an input changed.
    """
    path = Path(directory) / MANIFEST_NAME
    data = load_from_json(path)
    if not data:
        raise ManifestError(f"no manifest found in {directory}")
    manifest = RunManifest.from_dict(data)
    if verify:
        changed = manifest.verify()
        if changed:
            raise ManifestError(f"inputs changed since the run: {', '.join(changed)}")
    return manifest
