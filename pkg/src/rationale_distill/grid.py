"""Ablation grids over seeds, and mean (± std) reporting.

A grid is a list of cells; each cell is one row of a results table (one
method under one configuration) run once per seed on a shared dataset.
Teachers are trained once per (configuration, seed) and reused by every
cell that distils from them.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Mode
from .distill import DistillConfig, StudentInit, Variant
from .harness import Hyper, Method, RunConfig, TrainedRun, train_student, train_teacher, train_vanilla

log = logging.getLogger(__name__)

VARIANT_NAMES = {Variant.IN: "Student (In)", Variant.OUT: "Student (Out)", Variant.IN_OUT: "Student (In+Out)"}


@dataclass
class Cell:
    group: str
    name: str
    config: RunConfig
    required: bool = True

    @property
    def key(self) -> tuple[str, str]:
        return (self.group, self.name)


@dataclass
class CellResult:
    cell: Cell
    seeds: list[int] = field(default_factory=list)
    dev: list[float] = field(default_factory=list)
    test: list[float] = field(default_factory=list)
    logs: list = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def teacher_config(config: RunConfig) -> RunConfig:
    """The teacher a student or teacher-initialised cell depends on."""
    return RunConfig(method=Method.KNIFE_TEACHER, mode=Mode.IR_O,
                     distill=DistillConfig(teacher_bottleneck=config.distill.teacher_bottleneck),
                     preset=config.teacher_preset, hyper=config.hyper, train_fraction=config.train_fraction,
                     ftr_type=config.ftr_type)


def _teacher_key(config: RunConfig, seed: int) -> tuple:
    return (config.teacher_preset, config.ftr_type, config.distill.teacher_bottleneck, config.train_fraction,
            config.hyper, seed)


class TeacherCache:
    """Trained teachers keyed by everything that affects their training."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.runs: dict[tuple, TrainedRun] = {}

    def get(self, config: RunConfig, seed: int) -> TrainedRun:
        key = _teacher_key(config, seed)
        if key not in self.runs:
            self.runs[key] = train_teacher(teacher_config(config), self.dataset, seed)
        return self.runs[key]


def run_cell(cell: Cell, dataset: Dataset, seed: int, teachers: TeacherCache) -> TrainedRun:
    cfg = cell.config
    if cfg.method is Method.KNIFE_TEACHER:
        return teachers.get(cfg, seed)
    if cfg.method is Method.KNIFE_STUDENT:
        return train_student(cfg, dataset, teachers.get(cfg, seed).model, seed)
    if cfg.method is Method.VANILLA_TEACHER_INIT:
        return train_vanilla(cfg, dataset, seed, teacher=teachers.get(cfg, seed).model)
    return train_vanilla(cfg, dataset, seed)


def run_grid(cells: Sequence[Cell], dataset: Dataset, seeds: Sequence[int] = (0, 1, 2),
             teachers: TeacherCache | None = None,
             on_run: Callable[[Cell, int, TrainedRun], None] | None = None) -> list[CellResult]:
    """Run every cell for every seed.  A failing cell is recorded and skipped."""
    teachers = teachers or TeacherCache(dataset)
    results = []
    for cell in cells:
        res = CellResult(cell)
        for seed in seeds:
            try:
                run = run_cell(cell, dataset, seed, teachers)
            except Exception as exc:  # a broken cell must not stop the grid
                log.error("cell %s / %s seed %d failed: %s", cell.group, cell.name, seed, exc)
                res.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
                break
            res.seeds.append(seed)
            res.dev.append(run.dev_acc)
            res.test.append(run.test_acc)
            res.logs.append(run.log)
            if on_run is not None:
                on_run(cell, seed, run)
            log.info("%s / %s seed %d: dev %.4f test %.4f", cell.group, cell.name, seed, run.dev_acc, run.test_acc)
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# grid definitions


def _student(variant: Variant, base: RunConfig, **distill) -> RunConfig:
    return replace(base, method=Method.KNIFE_STUDENT, mode=Mode.I_O,
                   distill=DistillConfig(variant=variant, **distill))


def _teacher(base: RunConfig, bottleneck: bool = True) -> RunConfig:
    return replace(base, method=Method.KNIFE_TEACHER, mode=Mode.IR_O,
                   distill=DistillConfig(teacher_bottleneck=bottleneck))


def main_grid(base: RunConfig) -> list[Cell]:
    """Baselines, students and teacher under one architecture."""
    g = base.preset
    cells = [Cell(g, f"Vanilla ({m.value})", replace(base, method=Method.VANILLA, mode=m)) for m in Mode]
    cells.append(Cell(g, "Vanilla (teacher init)", replace(base, method=Method.VANILLA_TEACHER_INIT, mode=Mode.I_O)))
    cells += [Cell(g, VARIANT_NAMES[v], _student(v, base)) for v in Variant]
    cells.append(Cell(g, "Teacher", _teacher(base)))
    return cells


def cross_dim_grid(base: RunConfig) -> list[Cell]:
    """Distilling a wider teacher into a narrower, randomly initialised student.
    Student (In) is omitted by default, matching the architecture-transfer rows."""
    base = replace(base, preset="large->base")
    g = base.preset
    cells = [Cell(g, "Vanilla (I->O)", replace(base, method=Method.VANILLA, mode=Mode.I_O))]
    cells += [Cell(g, VARIANT_NAMES[v], _student(v, base, student_init=StudentInit.RANDOM))
              for v in (Variant.OUT, Variant.IN_OUT)]
    cells.append(Cell(g, "Teacher", _teacher(base)))
    return cells


def ftr_type_grid(base: RunConfig) -> list[Cell]:
    cells = []
    for ftr_type in ("replace", "shuffle", "gold"):
        b = replace(base, ftr_type=ftr_type)
        cells += [Cell(VARIANT_NAMES[v], ftr_type.capitalize(), _student(v, b)) for v in Variant]
        cells.append(Cell("Teacher", ftr_type.capitalize(), _teacher(b)))
    return cells


def bottleneck_grid(base: RunConfig) -> list[Cell]:
    cells = []
    for on in (False, True):
        label = "Yes" if on else "No"
        cells.append(Cell("Student (In)", label, _student(Variant.IN, base, teacher_bottleneck=on)))
        cells.append(Cell("Teacher", label, _teacher(base, bottleneck=on)))
    return cells


def task_loss_grid(base: RunConfig) -> list[Cell]:
    return [Cell(VARIANT_NAMES[v], "Yes" if use else "No", _student(v, base, use_task_loss=use))
            for use in (True, False) for v in Variant]


GRIDS: dict[str, Callable[[RunConfig], list[Cell]]] = {
    "main": main_grid,
    "cross_dim": cross_dim_grid,
    "ftr_type": ftr_type_grid,
    "bottleneck": bottleneck_grid,
    "task_loss": task_loss_grid,
}


# ---------------------------------------------------------------------------
# reporting

RUN_COLUMNS = ("group", "name", "seed", "dev_acc", "test_acc", "error")


def runs_to_csv(results: Sequence[CellResult]) -> str:
    """One row per (cell, seed); a failed cell adds a row with its error."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for r in results:
        for s, d, t in zip(r.seeds, r.dev, r.test):
            w.writerow([r.cell.group, r.cell.name, s, repr(d), repr(t), ""])
        if r.failed:
            w.writerow([r.cell.group, r.cell.name, "", "", "", r.error])
    return buf.getvalue()


@dataclass
class Summary:
    group: str
    name: str
    dev: list[float]
    test: list[float]
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def summaries_from_results(results: Sequence[CellResult]) -> list[Summary]:
    return [Summary(r.cell.group, r.cell.name, list(r.dev), list(r.test), r.error) for r in results]


def summaries_from_csv(text: str) -> list[Summary]:
    out: dict[tuple[str, str], Summary] = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (row["group"], row["name"])
        s = out.setdefault(key, Summary(*key, [], []))
        if row["error"]:
            s.error = row["error"]
        else:
            s.dev.append(float(row["dev_acc"]))
            s.test.append(float(row["test_acc"]))
    return list(out.values())


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample standard deviation (n - 1); std is None for one value."""
    if not values:
        raise ValueError("need at least one value")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else None)


def format_cell(values: Sequence[float]) -> str:
    """Accuracies as percentages: ``61.00 (±1.00)``, or ``61.00`` for one seed."""
    m, s = mean_std(values)
    return f"{100 * m:.2f}" if s is None else f"{100 * m:.2f} (±{100 * s:.2f})"


def _best_in_group(summaries: Sequence[Summary], metric: str) -> set[tuple[str, str]]:
    best: dict[str, float] = {}
    for s in summaries:
        vals = getattr(s, metric)
        if vals:
            best[s.group] = max(best.get(s.group, -math.inf), float(np.mean(vals)))
    return {(s.group, s.name) for s in summaries
            if getattr(s, metric) and float(np.mean(getattr(s, metric))) == best[s.group]}


def report(summaries: Sequence[Summary], fmt: str = "text") -> str:
    """Mean (± sample std) accuracy per cell; ``*`` marks the best mean in its group."""
    order = {g: i for i, g in reversed(list(enumerate(s.group for s in summaries)))}
    summaries = sorted(summaries, key=lambda s: order[s.group])  # stable: rows keep grid order
    best_dev = _best_in_group(summaries, "dev")
    best_test = _best_in_group(summaries, "test")
    rows = []
    for s in summaries:
        key = (s.group, s.name)
        if s.failed or not s.dev:
            rows.append((s.group, s.name, len(s.dev), "FAILED", "FAILED", "", ""))
            continue
        rows.append((s.group, s.name, len(s.dev), format_cell(s.dev), format_cell(s.test),
                     "*" if key in best_dev else "", "*" if key in best_test else ""))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "name", "n_seeds", "dev_mean", "dev_std", "test_mean", "test_std",
                    "best_dev", "best_test", "status"])
        for s in summaries:
            if s.failed or not s.dev:
                w.writerow([s.group, s.name, len(s.dev), "", "", "", "", "", "", "failed"])
                continue
            dm, ds = mean_std(s.dev)
            tm, ts = mean_std(s.test)
            key = (s.group, s.name)
            w.writerow([s.group, s.name, len(s.dev), f"{100 * dm:.2f}", "" if ds is None else f"{100 * ds:.2f}",
                        f"{100 * tm:.2f}", "" if ts is None else f"{100 * ts:.2f}",
                        int(key in best_dev), int(key in best_test), "ok"])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ("group", "name", "seeds", "dev acc", "test acc")
    body = [(g, n, str(k), d + (" *" if bd else ""), t + (" *" if bt else "")) for g, n, k, d, t, bd, bt in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["# accuracy in %, mean (± sample std, n-1) over seeds; * = best mean in group"]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines) + "\n"


def save_grid(path, results: Sequence[CellResult]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "runs.csv").write_text(runs_to_csv(results))
    summaries = summaries_from_results(results)
    (path / "report.txt").write_text(report(summaries))
    (path / "report.csv").write_text(report(summaries, "csv"))
    with open(path / "metrics.csv", "w") as f:
        for r in results:
            for run_log in r.logs:
                f.write(run_log.to_csv(header=(f.tell() == 0)))


def hyper_from(mapping: dict) -> Hyper:
    defaults = Hyper()
    return Hyper(lr=float(mapping.get("lr", defaults.lr)),
                 batch_size=int(mapping.get("batch_size", defaults.batch_size)),
                 epochs=int(mapping.get("epochs", defaults.epochs)),
                 patience=int(mapping.get("patience", defaults.patience)))
