"""Run manifests: a config snapshot plus hashes, seeds, timestamps, and the
metric summary, written atomically so interrupted runs leave a manifest
marked failed rather than a half-written one."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..config import config_hash, to_plain

MANIFEST_FILE = "manifest.json"


def code_state_hash() -> str:
    """Content hash over the package's source files (opaque code fingerprint)."""
    pkg_root = Path(__file__).resolve().parent.parent
    digest = hashlib.sha256()
    for path in sorted(pkg_root.rglob("*.py")) + sorted(pkg_root.rglob("*.yaml")):
        digest.update(path.relative_to(pkg_root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def corpus_hash(split_dir) -> str:
    split_dir = Path(split_dir)
    digest = hashlib.sha256()
    for path in sorted(split_dir.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(split_dir).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_hash: str
    code_hash: str
    seed: int
    corpus_hashes: dict = field(default_factory=dict)
    started_at: float = 0.0
    finished_at: float = 0.0
    status: str = "running"
    error: str = ""
    metrics_summary: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @staticmethod
    def start(run_id, cfg) -> "RunManifest":
        cfg = to_plain(cfg)
        return RunManifest(
            run_id=run_id,
            config=cfg,
            config_hash=config_hash(cfg),
            code_hash=code_state_hash(),
            seed=int(cfg["run"]["seed"]),
            started_at=time.time(),
        )

    def finish(self, status="ok", error=""):
        self.status = status
        self.error = error
        self.finished_at = time.time()
        return self

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "config_hash": self.config_hash,
            "code_hash": self.code_hash,
            "seed": self.seed,
            "corpus_hashes": self.corpus_hashes,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "error": self.error,
            "metrics_summary": self.metrics_summary,
            "artifacts": self.artifacts,
        }

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / MANIFEST_FILE
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        tmp.replace(path)
        return path

    @staticmethod
    def load(run_dir) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"missing run manifest: {path}")
        d = json.loads(path.read_text())
        m = RunManifest(
            run_id=d["run_id"], config=d["config"], config_hash=d["config_hash"],
            code_hash=d["code_hash"], seed=d["seed"],
        )
        m.corpus_hashes = d["corpus_hashes"]
        m.started_at = d["started_at"]
        m.finished_at = d["finished_at"]
        m.status = d["status"]
        m.error = d["error"]
        m.metrics_summary = d["metrics_summary"]
        m.artifacts = d["artifacts"]
        return m
