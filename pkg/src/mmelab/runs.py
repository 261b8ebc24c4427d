"""Run directories: train once, write metrics/summary/checkpoint/manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .data import SsdaDataset, read_dataset
from .trainer import TrainConfig, TrainResult, train, write_metrics

METRICS = "metrics.jsonl"
SUMMARY = "summary.json"
CHECKPOINT = "model.json"
MANIFEST = "manifest.json"
ABORT = "abort.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def shots_of(ds: SsdaDataset) -> int:
    counts = np.bincount(ds.labeled_y, minlength=ds.K)
    return int(counts.min()) if len(counts) else 0


def run_name(config: TrainConfig, shots: int) -> str:
    return f"{config.method}-{config.head_kind}-s{shots}-seed{config.seed}"


@dataclass
class RunManifest:
    run_id: str
    config: dict
    dataset_path: str
    dataset_sha256: str
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "dataset": {"path": self.dataset_path, "sha256": self.dataset_sha256},
            "artifacts": self.artifacts,
        }

    @classmethod
    def load(cls, run_dir) -> RunManifest:
        doc = json.loads((Path(run_dir) / MANIFEST).read_text(encoding="utf-8"))
        return cls(doc["run_id"], doc["config"], doc["dataset"]["path"], doc["dataset"]["sha256"], doc["artifacts"])


def resolve_dataset_path(path) -> Path:
    p = Path(path)
    return p / "dataset.csv" if p.is_dir() else p


def train_to_dir(data_path, config: TrainConfig, out_root, ds: SsdaDataset | None = None, name: str | None = None) -> tuple[Path, TrainResult]:
    """Train and write all run artifacts under ``out_root/<run name>/``."""
    data_path = resolve_dataset_path(data_path)
    if ds is None:
        ds = read_dataset(data_path)
    name = name or run_name(config, shots_of(ds))
    run_dir = Path(out_root) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    result = train(ds, config)
    write_metrics(result.records, run_dir / METRICS)
    summary = result.summary()
    (run_dir / SUMMARY).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    model_mod.save_checkpoint(result.model, run_dir / CHECKPOINT)
    manifest = RunManifest(
        run_id=name,
        config=config.to_dict(),
        dataset_path=str(data_path.resolve()),
        dataset_sha256=sha256_file(data_path),
        artifacts={"metrics": METRICS, "summary": SUMMARY, "checkpoint": CHECKPOINT},
    )
    (run_dir / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return run_dir, result
