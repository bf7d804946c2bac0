"""Experiment manifests, output-directory locking and replay checks."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"
# Outputs whose bytes must reproduce exactly on replay. Figures are excluded:
# their encoding depends on the matplotlib build, not on the computation.
PRIMARY_SUFFIXES = (".csv", ".yaml", ".npz", ".pkl")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_commit(cwd: str | Path | None = None) -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    return x


@dataclass
class ExperimentManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict = field(default_factory=dict)
    materials_sha256: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    wall_seconds: float = 0.0
    commit: str | None = None
    environment: dict = field(default_factory=dict)

    def record_artifacts(self, out_dir: Path) -> None:
        self.artifacts = {}
        for p in sorted(out_dir.rglob("*")):
            if p.is_file() and p.name not in (MANIFEST_NAME, LOCK_NAME):
                self.artifacts[str(p.relative_to(out_dir))] = sha256_file(p)

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> ExperimentManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))

    def primary_artifacts(self) -> dict[str, str]:
        return {k: v for k, v in self.artifacts.items() if k.endswith(PRIMARY_SUFFIXES)}


def new_manifest(command: str, argv: list[str], config: dict, seeds: dict | None = None,
                 materials_sha256: str | None = None) -> ExperimentManifest:
    return ExperimentManifest(
        command=command, argv=list(argv), config=_jsonable(config), seeds=seeds or {},
        materials_sha256=materials_sha256, started=time.time(), commit=git_commit(),
        environment={"python": sys.version.split()[0], "numpy": np.__version__,
                     "platform": platform.platform()})


@contextmanager
def locked(out_dir: str | Path):
    """Exclusive use of ``out_dir`` by one experiment process."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"{out_dir} is in use by another experiment (remove {lock} if that run died)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def compare_artifacts(reference: ExperimentManifest, replayed: ExperimentManifest) -> list[tuple[str, bool]]:
    """(artifact, identical?) for every primary output of ``reference``."""
    out = []
    for name, digest in sorted(reference.primary_artifacts().items()):
        out.append((name, replayed.artifacts.get(name) == digest))
    return out
