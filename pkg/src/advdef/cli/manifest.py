"""Run manifest: the single record tying a run's artifacts together.

Each run directory (named after the config hash) holds one manifest;
phases are marked complete with their artifacts and wall-clock, and
reruns resume from it instead of re-deriving state from file globs.
"""

import os
import time
from dataclasses import dataclass, field

import yaml

from ..errors import DependencyError

MANIFEST_NAME = "manifest.yaml"

#: canonical phase ordering; a phase may only start when its dependency
#: (the previous stage kind) is complete
PHASE_KINDS = ("classifier", "attack", "defense", "evaluation")


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    created: float = field(default_factory=time.time)
    phases: dict = field(default_factory=dict)

    def phase_complete(self, name: str) -> bool:
        return bool(self.phases.get(name, {}).get("complete"))

    def mark_phase(self, name: str, artifacts, seconds: float) -> None:
        self.phases[name] = {
            "complete": True,
            "timestamp": time.time(),
            "seconds": float(seconds),
            "artifacts": [str(p) for p in artifacts],
        }

    def require_phase(self, name: str, hint: str) -> None:
        if not self.phase_complete(name):
            raise DependencyError(
                f"phase {name!r} has not completed; run `{hint}` first")

    def artifact(self, phase: str, index: int = 0) -> str:
        entries = self.phases.get(phase, {}).get("artifacts", [])
        if len(entries) <= index:
            raise DependencyError(f"phase {phase!r} has no recorded artifact")
        return entries[index]

    def defense_phases(self) -> list:
        return [name for name in self.phases
                if name.startswith("defense:") and self.phase_complete(name)]


def manifest_path(run_dir) -> str:
    return os.path.join(run_dir, MANIFEST_NAME)


def load_manifest(run_dir, config_hash: str) -> RunManifest:
    """Load the manifest, or start a fresh one for this config hash.

    A manifest written by a different config is not resumed: the run id
    is the hash, so a changed config gets a new directory anyway; this
    guards against hand-edited directories.
    """
    path = manifest_path(run_dir)
    if os.path.exists(path):
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if raw.get("config_hash") == config_hash:
            return RunManifest(run_id=raw["run_id"], config_hash=config_hash,
                               created=raw.get("created", time.time()),
                               phases=raw.get("phases", {}))
    return RunManifest(run_id=f"run-{config_hash}", config_hash=config_hash)


def save_manifest(manifest: RunManifest, run_dir) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(manifest_path(run_dir), "w") as fh:
        yaml.safe_dump({
            "run_id": manifest.run_id,
            "config_hash": manifest.config_hash,
            "created": manifest.created,
            "phases": manifest.phases,
        }, fh, sort_keys=True)
