"""Per-run provenance record written next to every CLI artifact."""

from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .graph import Graph, atomic_write_text

MANIFEST_NAME = "manifest.json"


def artifact_version() -> str:
    """Package version, plus the git commit when running from a checkout."""
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    dataset: dict
    version: str = field(default_factory=artifact_version)
    timings: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    @staticmethod
    def describe(graph: Graph) -> dict:
        return {"num_nodes": graph.num_nodes, "num_edges": graph.num_edges, "fingerprint": graph.fingerprint()}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        atomic_write_text(path, self.to_json())
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        return cls(**json.loads(path.read_text(encoding="utf-8")))
