from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional
import json
import subprocess
import time

import pandas as pd

from necroseg import __version__
from necroseg.core import PathLike, logger, sha256_file


def code_version() -> str:
    """Package version, with the git revision appended when available"""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunLedger:
    """Append-only record of a pipeline run

    Entries are JSON objects, one per line, with a ``kind`` of ``config``,
    ``step``, ``metric``, ``timing`` or ``artifact``. Previous lines are never
    rewritten, so several commands of one experiment share a ledger.

    Args:
        path (PathLike): JSON-lines file, created if needed
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.entries: List[dict] = []
        if self.path.exists():
            with open(self.path, "r") as fh:
                self.entries = [json.loads(line) for line in fh if line.strip()]

    def __repr__(self):
        return f"RunLedger(path={self.path}, entries={len(self.entries)})"

    def append(self, kind: str, **fields) -> dict:
        entry = {"kind": kind, **fields}
        self.entries.append(entry)
        with open(self.path, "a") as fw:
            fw.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def log_config(self, config: dict) -> None:
        self.append("config", config=config, code_version=code_version())

    def log_step(self, stage: str, step: int, **values: float) -> None:
        self.append("step", stage=stage, step=int(step), **{k: float(v) for k, v in values.items()})

    def log_metric(self, stage: str, name: str, value, **labels) -> None:
        self.append("metric", stage=stage, name=name, value=value, **labels)

    def log_artifact(self, path: PathLike, role: str) -> str:
        """Register a written file with its content hash

        Returns:
            str: sha256 of the file
        """
        digest = sha256_file(path)
        self.append("artifact", path=str(Path(path)), role=role, sha256=digest)
        logger.debug(f"Recorded {role} artifact {path} ({digest[:12]})")
        return digest

    @contextmanager
    def timing(self, stage: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.append("timing", stage=stage, seconds=elapsed)
            logger.info(f"{stage} finished in {elapsed:.1f} s")

    def curves(self, stage: str) -> pd.DataFrame:
        """Logged training steps of a stage as a table"""
        rows = [e for e in self.entries if e["kind"] == "step" and e["stage"] == stage]
        return pd.DataFrame(rows).drop(columns=["kind", "stage"], errors="ignore")

    def artifacts(self) -> Dict[str, str]:
        """Latest recorded hash per artifact path"""
        return {e["path"]: e["sha256"] for e in self.entries if e["kind"] == "artifact"}

    def latest_artifact(self, role: str) -> Optional[dict]:
        matches = [e for e in self.entries if e["kind"] == "artifact" and e["role"] == role]
        return matches[-1] if matches else None
