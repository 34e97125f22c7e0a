import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pytz
import scipy

from . import __version__
from .config import RunConfig, config_fingerprint
from .errors import SynthAuditError

logger = logging.getLogger(__name__)

SOURCE_DATE_EPOCH_ENV = "SOURCE_DATE_EPOCH"
MANIFEST_DIR = "manifests"


def current_timestamp() -> str:
    """UTC ISO timestamp; SOURCE_DATE_EPOCH pins it for reproducible runs"""
    pinned = os.getenv(SOURCE_DATE_EPOCH_ENV)
    if pinned:
        try:
            return datetime.fromtimestamp(int(pinned), pytz.utc).isoformat()
        except ValueError:
            logger.warning(f"Ignoring invalid {SOURCE_DATE_EPOCH_ENV}={pinned!r}")
    return datetime.now(pytz.utc).isoformat()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class RunLifecycle:
    """One CLI command run: tracks inputs and outputs and writes the run manifest on success"""

    def __init__(self, command: str, argv: Sequence[str], config: RunConfig, out_dir: Path):
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.out_dir = Path(out_dir)
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.manifest_path: Optional[Path] = None
        self.is_running = False

    def _display(self, path: Path) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return path.as_posix()

    def record_input(self, path: Path) -> Path:
        self.inputs.append(Path(path))
        return Path(path)

    def record_output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def _hashes(self, paths: Sequence[Path]) -> Dict[str, str]:
        hashes: Dict[str, str] = {}
        for path in paths:
            if path.is_file():
                hashes[self._display(path)] = sha256_file(path)
        return dict(sorted(hashes.items()))

    def manifest(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "argv": self.argv,
            "versions": {
                "synthaudit": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "config_fingerprint": config_fingerprint(self.config),
            "config": self.config.model_dump(mode="json"),
            "seeds": {
                "generation": self.config.generation.seed,
                "tsne": self.config.tsne.seed,
                "hash_embedding": self.config.embedding.resolved_seed,
            },
            "inputs": self._hashes(self.inputs),
            "outputs": self._hashes(self.outputs),
            "created_at": current_timestamp(),
        }

    def write_manifest(self) -> Path:
        path = self.out_dir / MANIFEST_DIR / f"{self.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        self.manifest_path = path
        logger.info(f"Wrote run manifest to {path}")
        return path

    async def __aenter__(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.is_running = True
        logger.info(f"Starting {self.command} (python {sys.version.split()[0]}, output {self.out_dir})")
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        self.is_running = False
        if exc_type is None:
            self.write_manifest()
        elif isinstance(exc_val, SynthAuditError):
            logger.error(f"{self.command} failed: {exc_val.message}")
        else:
            logger.error(f"{self.command} failed: {exc_val!r}")
        return False
