"""Execute a preset across cells and seeds, persisting one record per (cell, seed)."""

from __future__ import annotations

import logging
import os
import time
import traceback
from pathlib import Path

from .config import ExperimentConfig
from .presets import RUNNERS, cells
from .store import RecordStore, ResultRecord

log = logging.getLogger(__name__)

OUTPUT_ENV = "ARCHLEAK_OUTPUT"


def output_root(cfg: ExperimentConfig | None = None) -> Path:
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "archleak-results"))


def run(cfg: ExperimentConfig, store: RecordStore | None = None,
        force: bool = False) -> list[ResultRecord]:
    """Run every (cell, seed) not already completed; returns the records written now.

    A failing seed produces a record with ``status="failed"`` and its cause; the
    remaining seeds still run.
    """
    store = store or RecordStore(output_root(cfg))
    config_hash = cfg.digest()
    runner = RUNNERS[cfg.preset]
    written = []
    for cell in cells(cfg):
        for seed in cfg.seeds:
            if not force and store.completed(config_hash, cell, seed):
                log.info("skip %s %s seed %d (done)", cfg.preset.value, cell, seed)
                continue
            stem = store.stem_for(cfg.preset.value, config_hash, cell, seed)
            t0 = time.perf_counter()
            try:
                out = runner(cfg, cell, seed, lambda name: store.artifact_path(stem, name))
                record = ResultRecord(
                    cfg.preset.value, config_hash, cell, seed,
                    out.spec.digest() if out.spec else None,
                    out.recipe.digest() if out.recipe else None,
                    out.metrics, time.perf_counter() - t0, out.artifacts, config=cfg.to_dict())
            except Exception as e:  # recorded, not raised: other seeds continue
                log.error("%s %s seed %d failed: %s", cfg.preset.value, cell, seed, e)
                record = ResultRecord(cfg.preset.value, config_hash, cell, seed, None, None, {},
                                      time.perf_counter() - t0, status="failed",
                                      error=f"{type(e).__name__}: {e}\n{traceback.format_exc()}",
                                      config=cfg.to_dict())
            store.append(record, stem)
            written.append(record)
            log.info("%s %s seed %d: %s", cfg.preset.value, cell, seed,
                     record.status if not record.ok else record.metrics)
    return written
