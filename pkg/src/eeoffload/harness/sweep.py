"""Run the full edge/cloud pipeline over a grid of distortion cells.

For every (kind, level) cell the test split is distorted once; then for each
mode and network profile every image goes through :class:`EdgeService`
against an in-process cloud, on a fresh virtual clock. Per-sample records go
to ``trace.ndjson``, aggregates to ``results.csv``, plots to SVG.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import data
from ..classifier import DistortionClassifier
from ..distortion import Kind
from ..model import EarlyExitModel, ExitTaken, InferenceResult
from ..runtime.netem import VirtualClock
from ..runtime.services import CloudService, EdgeReply, EdgeService, InProcessTransport, Mode
from . import metrics
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

DECIMALS = 6


def fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.{DECIMALS}f}"


def csv_columns(exit_ids: Sequence[int]) -> list[str]:
    cols = ["kind", "level", "profile", "mode", "n", "accuracy", "accuracy_ci95",
            "on_device", "on_device_ci95"]
    for e in exit_ids:
        cols += [f"exit{e}_n", f"exit{e}_accuracy"]
    cols += ["fallback_n", "latency_ms", "latency_ms_ci95", "classifier_ms", "kind_match"]
    return cols


def true_kind(kind: Kind, level: int) -> Kind:
    return Kind.PRISTINE if level == 0 else Kind(kind)


def trace_record(kind: Kind, level: int, profile: str, mode: Mode, index: int, label: int,
                 reply: EdgeReply) -> dict:
    r = reply.result
    return {"kind": kind.value, "level": level, "profile": profile, "mode": mode.value,
            "index": index, "label": int(label), "pred": r.predicted_class, "conf": r.confidence,
            "exit": r.exit_taken.value, "exit_id": r.exit_id, "offloaded": r.offloaded,
            "selected": reply.kind.value, "latency": reply.latency.as_dict()}


def aggregate(kind: Kind, level: int, profile: str, mode: Mode, exit_ids: Sequence[int],
              results: Sequence[InferenceResult], labels: Sequence[int], replies: Sequence[EdgeReply]) -> dict:
    n = len(results)
    correct = [float(r.predicted_class == int(y)) for r, y in zip(results, labels)]
    acc, acc_ci = metrics.mean_ci(correct)
    local = [float(not r.offloaded) for r in results]
    ond, ond_ci = metrics.mean_ci(local)
    lat, lat_ci = metrics.mean_ci([rep.latency.total_ms for rep in replies])
    clf_ms, _ = metrics.mean_ci([rep.latency.classifier_ms for rep in replies])
    want = true_kind(kind, level)
    row = {"kind": kind.value, "level": str(level), "profile": profile, "mode": mode.value, "n": str(n),
           "accuracy": fmt(acc), "accuracy_ci95": fmt(acc_ci),
           "on_device": fmt(ond), "on_device_ci95": fmt(ond_ci)}
    for e in exit_ids:
        row[f"exit{e}_n"] = str(metrics.exit_point_count(results, e))
        row[f"exit{e}_accuracy"] = fmt(metrics.exit_point_accuracy(results, labels, e))
    row["fallback_n"] = str(sum(1 for r in results if r.exit_taken is ExitTaken.FALLBACK))
    row["latency_ms"] = fmt(lat)
    row["latency_ms_ci95"] = fmt(lat_ci)
    row["classifier_ms"] = fmt(clf_ms)
    row["kind_match"] = fmt(sum(1 for rep in replies if rep.kind is want) / n)
    return row


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class SweepOutput:
    rows: list[dict]
    columns: list[str]
    csv_path: Path
    trace_path: Path
    figures: list[Path]


def load_test_split(cfg: ExperimentConfig) -> data.LabeledDataset:
    splits = data.load_dataset(cfg.dataset, seed=cfg.dataset_seed, classes=cfg.classes, per_class=cfg.per_class)
    test = splits.test
    if cfg.limit is not None:
        test = test.subset(np.arange(min(cfg.limit, len(test))))
    return test


def run_sweep(cfg: ExperimentConfig, model: EarlyExitModel | None = None,
              classifier: DistortionClassifier | None = None, test: data.LabeledDataset | None = None,
              plots: bool = True, progress: Callable[[str], None] | None = None) -> SweepOutput:
    """Evaluate every (kind, level, mode, profile) cell and write the outputs."""
    if model is None:
        if not Path(cfg.model).is_file():
            raise ConfigError(f"model checkpoint {cfg.model!r} not found")
        model = EarlyExitModel.load(cfg.model)
    if classifier is None and Mode.EXPERT in cfg.modes:
        if not Path(cfg.classifier).is_file():
            raise ConfigError(f"classifier checkpoint {cfg.classifier!r} not found")
        classifier = DistortionClassifier.load(cfg.classifier)
    for mode in cfg.modes:
        need = {Kind.PRISTINE, *cfg.kinds} if mode is Mode.EXPERT else {mode.fixed_kind}
        if not need <= set(model.kinds):
            raise ConfigError(f"model lacks the branch sets needed by mode {mode.value}")
    model.finalize()
    test = test if test is not None else load_test_split(cfg)
    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.ndjson"
    exit_ids = model.exit_ids
    columns = csv_columns(exit_ids)
    cloud = CloudService(model)
    rows = []
    with open(trace_path, "w") as trace:
        for kind, level in cfg.cells():
            ds = test if level == 0 else data.distort_dataset(test, kind, level, cfg.seed)
            for mode in cfg.modes:
                for p_idx, profile in enumerate(cfg.profiles):
                    transport = InProcessTransport(cloud)
                    edge = EdgeService(model, transport, profile, cfg.p_tar, mode, classifier,
                                       clock=VirtualClock(), jitter_ms=cfg.jitter_ms,
                                       seed=_cell_seed(cfg.seed, kind, level, p_idx))
                    replies = [edge.handle(img) for img in ds.images]
                    results = [rep.result for rep in replies]
                    for i, (y, rep) in enumerate(zip(ds.labels, replies)):
                        trace.write(json.dumps(trace_record(kind, level, profile.name, mode, i, y, rep)) + "\n")
                    rows.append(aggregate(kind, level, profile.name, mode, exit_ids, results, ds.labels, replies))
                    msg = (f"{kind.value} {level} {profile.name} {mode.value}: acc {rows[-1]['accuracy']} "
                           f"on-device {rows[-1]['on_device']} latency {rows[-1]['latency_ms']} ms")
                    log.info(msg)
                    if progress is not None:
                        progress(msg)
    csv_path = out_dir / "results.csv"
    write_csv(csv_path, rows, columns)
    figures = []
    if plots:
        from .plots import write_figures
        figures = write_figures(csv_path, out_dir)
    return SweepOutput(rows, columns, csv_path, trace_path, figures)


def _cell_seed(seed: int, kind: Kind, level: int, profile_index: int) -> int:
    return int(np.random.SeedSequence([seed, kind.code, level, profile_index]).generate_state(1)[0])
