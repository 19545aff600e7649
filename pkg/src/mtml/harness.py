"""Experiment grid: specs, execution with resumable per-run files, and reports.

A grid is a list of ``ExperimentSpec`` rows grouped as experiment
families 1 to 7. ``run`` executes every (spec, seed) pair whose
result file is missing or stale, then rebuilds the aggregate CSV, the epochs
table and the text report from the files on disk.
"""

from __future__ import annotations

import csv
import fnmatch
import hashlib
import io
import json
import logging
import os
import platform
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .network import save_checkpoint
from .objectives import evaluate
from .tasks import TASK_IDS, make_splits, make_world, splits_digest
from .trainers import FINETUNE_MODES, RunReport, TrainConfig, finetune, meta_train, train_mtl, train_single

log = logging.getLogger(__name__)

PARADIGMS = ("single", "mtl", "mtl_finetune", "mtml", "mtml_finetune")
CSV_COLUMNS = ("exp_id", "paradigm", "seed", "task", "metric", "value", "epochs_total", "epochs_finetune")


@dataclass(frozen=True)
class DataConfig:
    world_seed: int = 0
    n_train: int = 1024
    n_val: int = 256
    n_test: int = 512
    d_in: int = 8
    d_z: int = 16
    noise: float = 0.0

    def splits(self):
        world = make_world(self.world_seed, d_in=self.d_in, d_z=self.d_z, noise=self.noise)
        return make_splits(world, (self.n_train, self.n_val, self.n_test), seed=self.world_seed)


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    paradigm: str
    trained_tasks: Tuple[str, ...]
    added_tasks: Tuple[str, ...] = ()
    finetune_mode: Optional[str] = None
    label: str = ""

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.added_tasks and not self.paradigm.endswith("_finetune"):
            raise ValueError(f"spec {self.id}: added tasks need a finetune paradigm")
        if self.paradigm.endswith("_finetune") and not self.added_tasks:
            raise ValueError(f"spec {self.id}: finetune paradigm without added tasks")
        if self.paradigm == "single" and len(self.trained_tasks) != 1:
            raise ValueError(f"spec {self.id}: single-task spec needs exactly one task")
        if self.finetune_mode is not None and self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"spec {self.id}: unknown finetune mode {self.finetune_mode!r}")

    def describe(self) -> str:
        text = ", ".join(self.trained_tasks)
        if self.added_tasks:
            text += " (+ " + ", ".join(self.added_tasks) + ")"
        return text

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trained_tasks"] = list(self.trained_tasks)
        d["added_tasks"] = list(self.added_tasks)
        return d


@dataclass
class GridManifest:
    specs: List[ExperimentSpec]
    out_dir: Path
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: Tuple[int, ...] = (0, 1, 2)
    created_at: str = ""

    def __post_init__(self):
        ids = [s.id for s in self.specs]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate experiment ids {dupes}")
        self.out_dir = Path(self.out_dir)
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def settings(self) -> dict:
        """Everything that can change a number in the report."""
        return {"train": self.train.to_dict(), "data": asdict(self.data), "version": __version__}

    @property
    def config_hash(self) -> str:
        return _hash(self.settings())

    def run_hash(self, spec: ExperimentSpec, seed: int) -> str:
        return _hash({"settings": self.settings(), "spec": spec.to_dict(), "seed": seed})

    def select(self, pattern: Optional[str]) -> List[ExperimentSpec]:
        return [s for s in self.specs if matches(s.id, pattern)]


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def matches(exp_id: str, pattern: Optional[str]) -> bool:
    """``"4"`` selects the whole family 4.x, ``"4.3"`` one spec, globs like ``"[67].*"`` work too."""
    if not pattern:
        return True
    for pat in pattern.split(","):
        pat = pat.strip()
        if exp_id == pat or exp_id.startswith(pat + ".") or fnmatch.fnmatchcase(exp_id, pat):
            return True
    return False


def _id_key(exp_id: str):
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"[.]", exp_id))


def default_specs() -> List[ExperimentSpec]:
    T1, T2, T3, T4 = TASK_IDS
    out = [ExperimentSpec(f"1.{i + 1}", "single", (t,), label="single task") for i, t in enumerate(TASK_IDS)]
    out += [
        ExperimentSpec("2.1", "mtl", (T1, T2)),
        ExperimentSpec("2.2", "mtl", (T1, T2, T3)),
        ExperimentSpec("2.3", "mtl", TASK_IDS),
        ExperimentSpec("3.1", "mtl_finetune", (T1, T2), (T3,)),
        ExperimentSpec("3.2", "mtl_finetune", (T1, T2), (T3, T4)),
        ExperimentSpec("3.3", "mtl_finetune", (T1, T2, T3), (T4,)),
        ExperimentSpec("4.1", "mtml_finetune", (T1, T2), (T3,)),
        ExperimentSpec("4.2", "mtml_finetune", (T1, T2), (T3, T4)),
        ExperimentSpec("4.3", "mtml_finetune", (T1, T2, T3), (T4,)),
        ExperimentSpec("4.4", "mtml", TASK_IDS),
    ]
    for i, left in enumerate(TASK_IDS):
        rest = tuple(t for t in TASK_IDS if t != left)
        out.append(ExperimentSpec(f"5.{i + 1}", "mtl", rest, label=f"leave out {left}"))
        out.append(ExperimentSpec(f"6.{i + 1}", "mtl_finetune", rest, (left,), label=f"add left-out {left}"))
        out.append(ExperimentSpec(f"7.{i + 1}", "mtml_finetune", rest, (left,), label=f"add left-out {left}"))
    return sorted(out, key=lambda s: _id_key(s.id))


def default_grid(out_dir="runs", train: Optional[TrainConfig] = None, data: Optional[DataConfig] = None, seeds: Sequence[int] = (0, 1, 2)) -> GridManifest:
    return GridManifest(default_specs(), Path(out_dir), train or TrainConfig(), data or DataConfig(), tuple(seeds))


# ---------------------------------------------------------------------------
# execution


def execute(spec: ExperimentSpec, seed: int, cfg: TrainConfig, splits) -> RunReport:
    """Train one (spec, seed) pair; the returned report carries the final params."""
    mode = spec.finetune_mode or cfg.finetune_mode
    trained, added = spec.trained_tasks, spec.added_tasks
    if spec.paradigm == "single":
        report = train_single(trained[0], splits, cfg, seed)
    elif spec.paradigm == "mtl":
        report = train_mtl(trained, splits, cfg, seed)
    elif spec.paradigm == "mtl_finetune":
        report = train_mtl(trained, splits, cfg, seed, evaluate_test=False)
        if not report.failed:
            report = finetune(report.params, trained, added, mode, splits, cfg, seed, report=report)
    else:
        if len(trained) == 2 and not cfg.allow_two_sources:
            # 4.1 and 4.2 meta-train on two sources, which needs the override
            cfg = TrainConfig(**{**cfg.to_dict(), "allow_two_sources": True})
        p, report = meta_train(trained, splits, cfg, seed)
        if not report.failed:
            if not added:
                # no new task: record the meta-trained state, then a short all-parameter fine-tune
                report.pre_finetune_test = evaluate(p, splits[2], trained, cfg.specs)
                mode = "all_params"
            report = finetune(p, trained, added, mode, splits, cfg, seed, report=report)
    report.paradigm = spec.paradigm
    return report


def _run_path(out: Path, spec_id: str, seed: int) -> Path:
    return out / "runs" / f"{spec_id}_s{seed}.json"


def _is_current(path: Path, run_hash: str) -> bool:
    if not path.exists():
        return False
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError):
        return False
    return doc.get("run_hash") == run_hash


def _job(args) -> Tuple[str, int, bool]:
    spec, seed, train_dict, data, out, run_hash = args
    cfg = TrainConfig(**train_dict)
    splits = data.splits()
    try:
        report = execute(spec, seed, cfg, splits)
    except Exception as exc:  # one broken run must not take the grid down
        log.exception("run %s seed %d raised", spec.id, seed)
        report = RunReport(spec.paradigm, spec.trained_tasks, seed, splits_digest(splits))
        report.failed, report.error = True, f"{type(exc).__name__}: {exc}"
    doc = {"exp_id": spec.id, "spec": spec.to_dict(), "run_hash": run_hash, "report": report.to_dict()}
    if report.params is not None and not report.failed:
        ckpt = out / "checkpoints" / f"{spec.id}_s{seed}"
        save_checkpoint(report.params, cfg.net, ckpt, seed=seed)
        doc["checkpoint"] = str(ckpt.relative_to(out))
    path = _run_path(out, spec.id, seed)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return spec.id, seed, report.failed


@dataclass
class RunSummary:
    executed: List[Tuple[str, int]]
    skipped: List[Tuple[str, int]]
    failed: List[Tuple[str, int]]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def run(manifest: GridManifest, pattern: Optional[str] = None, force: bool = False, jobs: int = 1) -> RunSummary:
    """Run every selected (spec, seed) that lacks a current result, then rebuild the outputs."""
    out = manifest.out_dir
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    specs = manifest.select(pattern)
    if not specs:
        raise ValueError(f"filter {pattern!r} matches no experiment")
    todo, skipped = [], []
    train_dict = manifest.train.to_dict()
    for spec in specs:
        for seed in manifest.seeds:
            h = manifest.run_hash(spec, seed)
            if not force and _is_current(_run_path(out, spec.id, seed), h):
                skipped.append((spec.id, seed))
            else:
                todo.append((spec, seed, train_dict, manifest.data, out, h))
    log.info("%d runs to execute, %d up to date", len(todo), len(skipped))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, todo))
    else:
        results = [_job(a) for a in todo]
    write_manifest(manifest)
    write_outputs(out)
    runs = load_runs(out)
    executed = [(i, s) for i, s, _ in results]
    failed = [k for k in executed + skipped if runs[k]["report"]["failed"]]
    return RunSummary(executed, skipped, sorted(failed, key=lambda k: (_id_key(k[0]), k[1])))


def write_manifest(manifest: GridManifest) -> None:
    doc = {
        "config_hash": manifest.config_hash,
        "created_at": manifest.created_at,
        "seeds": list(manifest.seeds),
        "settings": manifest.settings(),
        "specs": [s.to_dict() for s in manifest.specs],
        "versions": {"mtml": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (manifest.out_dir / "MANIFEST.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# outputs


def load_runs(out: Path) -> Dict[Tuple[str, int], dict]:
    runs = {}
    for path in sorted((Path(out) / "runs").glob("*.json")):
        doc = json.loads(path.read_text())
        runs[(doc["exp_id"], doc["report"]["seed"])] = doc
    return runs


def _ordered(runs: Mapping) -> List[Tuple[Tuple[str, int], dict]]:
    return sorted(runs.items(), key=lambda kv: (_id_key(kv[0][0]), kv[0][1]))


def aggregate_rows(runs: Mapping) -> List[tuple]:
    rows = []
    for (exp_id, seed), doc in _ordered(runs):
        rep = doc["report"]
        if rep["failed"]:
            continue
        for task in sorted(rep["test"]):
            for metric in sorted(rep["test"][task]):
                value = rep["test"][task][metric]
                rows.append((exp_id, rep["paradigm"], seed, task, metric, repr(float(value)), rep["epochs_total"], rep["epochs_finetune"]))
    return rows


def aggregate_csv(runs: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(aggregate_rows(runs))
    return buf.getvalue()


def summary_table(runs: Mapping) -> Dict[Tuple[str, str, str], Tuple[float, float, int]]:
    """(exp_id, task, metric) -> (mean, sample std, n) over completed seeds."""
    values: Dict[Tuple[str, str, str], List[float]] = {}
    for (exp_id, _), doc in _ordered(runs):
        rep = doc["report"]
        if rep["failed"]:
            continue
        for task, metrics in rep["test"].items():
            for metric, v in metrics.items():
                values.setdefault((exp_id, task, metric), []).append(float(v))
    return {k: (statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0, len(v)) for k, v in values.items()}


def epochs_table(runs: Mapping) -> List[dict]:
    per: Dict[str, dict] = {}
    for (exp_id, _), doc in _ordered(runs):
        rep = doc["report"]
        if rep["failed"]:
            continue
        row = per.setdefault(exp_id, {"exp_id": exp_id, "paradigm": rep["paradigm"], "unit": rep["epoch_unit"], "train": [], "finetune": []})
        row["train"].append(rep["epochs_total"])
        row["finetune"].append(rep["epochs_finetune"])
    return [per[k] for k in sorted(per, key=_id_key)]


def _pm(values: Sequence[float], digits: int = 1) -> str:
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


HEADLINE = (
    ("T1", "accuracy"),
    ("T2", "mae"),
    ("T3", "cosine_sim"),
    ("T3", "angular_mean_deg"),
    ("T3", "angular_median_deg"),
    ("T3", "pct_within_11_25"),
    ("T4", "mae"),
)

_SPARK = "▁▂▃▄▅▆▇█"


def sparkline(values: Sequence[float], width: int = 40) -> str:
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        return ""
    if vals.size > width:
        idx = np.linspace(0, vals.size - 1, width).round().astype(int)
        vals = vals[idx]
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-15:
        return _SPARK[0] * vals.size
    return "".join(_SPARK[int(round((v - lo) / (hi - lo) * (len(_SPARK) - 1)))] for v in vals)


def render_report(out: Path) -> str:
    runs = load_runs(out)
    if not runs:
        return "no completed runs\n"
    specs = {doc["exp_id"]: doc["spec"] for doc in runs.values()}
    table = summary_table(runs)
    lines = ["# Results (test split, mean ± std over seeds)", ""]
    header = ["exp", "tasks"] + [f"{t} {m}" for t, m in HEADLINE]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for exp_id in sorted(specs, key=_id_key):
        spec = specs[exp_id]
        desc = ", ".join(spec["trained_tasks"]) + (" (+ " + ", ".join(spec["added_tasks"]) + ")" if spec["added_tasks"] else "")
        cells = [exp_id, desc]
        for task, metric in HEADLINE:
            hit = table.get((exp_id, task, metric))
            # tasks the experiment never trained stay blank
            cells.append("" if hit is None else f"{hit[0]:.3f} ± {hit[1]:.3f}")
        lines.append("| " + " | ".join(cells) + " |")

    lines += ["", "# Epochs (train vs fine-tune)", "", "| exp | paradigm | unit | train | finetune |", "|---|---|---|---|---|"]
    for row in epochs_table(runs):
        lines.append(f"| {row['exp_id']} | {row['paradigm']} | {row['unit']} | {_pm(row['train'])} | {_pm(row['finetune'])} |")

    lines += ["", "# Validation loss curves", ""]
    for (exp_id, seed), doc in _ordered(runs):
        rep = RunReport.from_dict(doc["report"])
        for phase in ("train", "finetune"):
            for task in TASK_IDS:
                curve = rep.val_curve(task, phase)
                if curve:
                    lines.append(f"{exp_id:>4} s{seed} {phase:<8} {task} {sparkline(curve)} {curve[-1]:.4f}")

    failed = [(k, d["report"]["error"]) for k, d in _ordered(runs) if d["report"]["failed"]]
    lines += ["", "# Failures", ""]
    lines += [f"- {k[0]} seed {k[1]}: {err}" for k, err in failed] or ["none"]
    return "\n".join(lines) + "\n"


def write_outputs(out: Path) -> None:
    """Rebuild aggregate CSV, summary CSV, epochs table and report from the run files."""
    out = Path(out)
    runs = load_runs(out)
    (out / "aggregate.csv").write_text(aggregate_csv(runs))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("exp_id", "task", "metric", "mean", "std", "n"))
    for (exp_id, task, metric), (mean, std, n) in sorted(summary_table(runs).items(), key=lambda kv: (_id_key(kv[0][0]), kv[0][1], kv[0][2])):
        w.writerow((exp_id, task, metric, repr(mean), repr(std), n))
    (out / "summary.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("exp_id", "paradigm", "unit", "train_mean", "train_std", "finetune_mean", "finetune_std"))
    for row in epochs_table(runs):
        tr, ft = row["train"], row["finetune"]
        w.writerow((row["exp_id"], row["paradigm"], row["unit"], statistics.fmean(tr), statistics.stdev(tr) if len(tr) > 1 else 0.0,
                    statistics.fmean(ft), statistics.stdev(ft) if len(ft) > 1 else 0.0))
    (out / "epochs.csv").write_text(buf.getvalue())
    (out / "report.md").write_text(render_report(out))
