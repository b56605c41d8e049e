"""Append-only result store: one checksummed JSON document per record plus an index CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from importlib.metadata import PackageNotFoundError, version

try:
    TOOL_VERSION = version("archleak")
except PackageNotFoundError:  # running from a source tree
    TOOL_VERSION = "0+unknown"

INDEX_FIELDS = ["file", "preset", "config_hash", "cell", "seed", "status", "spec_hash",
                "recipe_hash", "wall_time"]


class CorruptRecord(RuntimeError):
    pass


@dataclass
class ResultRecord:
    preset: str
    config_hash: str
    cell: dict
    seed: int
    spec_hash: str | None
    recipe_hash: str | None
    metrics: dict
    wall_time: float
    artifacts: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    config: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    @property
    def cell_key(self) -> str:
        return json.dumps(self.cell, sort_keys=True)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def body(self) -> dict:
        return asdict(self)

    def checksum(self) -> str:
        text = json.dumps(self.body(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _slug(cell: dict) -> str:
    text = "-".join(f"{k}{v}" for k, v in sorted(cell.items()))
    return re.sub(r"[^A-Za-z0-9.]+", "_", text)[:60] or "cell"


class RecordStore:
    """Records are never rewritten; a forced rerun appends a new file."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self.artifacts_dir = self.root / "artifacts"
        self.index_path = self.root / "index.csv"
        self._lock = threading.Lock()

    def _ensure(self):
        self.records_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)

    def artifact_path(self, record_stem: str, name: str) -> Path:
        self._ensure()
        return self.artifacts_dir / f"{record_stem}-{name}"

    def stem_for(self, preset: str, config_hash: str, cell: dict, seed: int) -> str:
        base = f"{preset}-{config_hash}-{_slug(cell)}-s{seed}"
        n = 0
        while (self.records_dir / f"{base}-{n}.json").exists():
            n += 1
        return f"{base}-{n}"

    def append(self, record: ResultRecord, stem: str | None = None) -> Path:
        with self._lock:
            self._ensure()
            stem = stem or self.stem_for(record.preset, record.config_hash, record.cell, record.seed)
            path = self.records_dir / f"{stem}.json"
            if path.exists():
                raise FileExistsError(f"record {path} already exists; the store is append-only")
            doc = {"record": record.body(), "checksum": record.checksum()}
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
            os.replace(tmp, path)
            new_index = not self.index_path.exists()
            with open(self.index_path, "a", newline="") as fh:
                w = csv.DictWriter(fh, INDEX_FIELDS)
                if new_index:
                    w.writeheader()
                w.writerow({"file": path.name, "preset": record.preset,
                            "config_hash": record.config_hash, "cell": record.cell_key,
                            "seed": record.seed, "status": record.status,
                            "spec_hash": record.spec_hash, "recipe_hash": record.recipe_hash,
                            "wall_time": f"{record.wall_time:.3f}"})
            return path

    @staticmethod
    def read(path: str | Path) -> ResultRecord:
        doc = json.loads(Path(path).read_text())
        record = ResultRecord(**doc["record"])
        if record.checksum() != doc.get("checksum"):
            raise CorruptRecord(f"checksum mismatch in {path}")
        return record

    def records(self) -> list[ResultRecord]:
        if not self.records_dir.exists():
            return []
        return [self.read(p) for p in sorted(self.records_dir.glob("*.json"))]

    def completed(self, config_hash: str, cell: dict, seed: int) -> bool:
        key = json.dumps(cell, sort_keys=True)
        return any(r.ok and r.config_hash == config_hash and r.cell_key == key and r.seed == seed
                   for r in self.records())
