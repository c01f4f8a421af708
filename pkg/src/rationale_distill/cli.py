"""Command-line entry point: ``python -m rationale_distill <command>``.

Every command accepts ``--config FILE``, an INI file whose sections
(``[data]``, ``[run]``, ``[hyper]``, ``[distill]``, ``[grid]``) hold
``key = value`` defaults; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .checkpoint import read_keyvalue
from .data import Dataset, DatasetSpec, Mode, TaskKind, generate_dataset
from .distill import DistillConfig, StudentInit, Variant
from .grid import GRIDS, TeacherCache, report, run_grid, save_grid, summaries_from_csv, summaries_from_results
from .harness import (
    Hyper,
    Method,
    Protocol,
    RunConfig,
    evaluate,
    load_run_model,
    run_metadata,
    save_run,
    train_student,
    train_teacher,
    train_vanilla,
)

log = logging.getLogger("rationale_distill")

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"not a boolean: {text!r}") from None


def parse_seeds(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(s) for s in text)
    return tuple(int(s) for s in str(text).replace(",", " ").split())


def read_config(path) -> dict[str, str]:
    """Flatten an INI file into ``{key: value}`` (section names are only grouping)."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    out = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            out[key.replace("-", "_")] = value
    return out


class Settings:
    """Command-line values layered over config-file values layered over defaults."""

    def __init__(self, args: argparse.Namespace):
        self.file = read_config(args.config) if args.config else {}
        self.args = vars(args)

    def get(self, key: str, default=None, convert=None):
        value = self.args.get(key)
        if value is None:
            value = self.file.get(key)
        if value is None:
            return default
        return convert(value) if convert else value


def hyper_from(s: Settings) -> Hyper:
    d = Hyper()
    return Hyper(lr=s.get("lr", d.lr, float), batch_size=s.get("batch_size", d.batch_size, int),
                 epochs=s.get("epochs", d.epochs, int), patience=s.get("patience", d.patience, int))


def run_config_from(s: Settings, method: Method, mode: Mode | str) -> RunConfig:
    distill = DistillConfig(
        variant=s.get("variant", Variant.IN_OUT, Variant),
        use_task_loss=s.get("use_task_loss", False, parse_bool),
        teacher_bottleneck=s.get("bottleneck", True, parse_bool),
        student_init=s.get("student_init", StudentInit.FROM_TEACHER, StudentInit),
    )
    return RunConfig(method=method, mode=mode, distill=distill, preset=s.get("preset", "base"),
                     seeds=s.get("seeds", (0, 1, 2), parse_seeds), hyper=hyper_from(s),
                     dataset=s.get("data"), train_fraction=s.get("train_fraction", 1.0, float),
                     ftr_type=s.get("ftr_type", "gold"))


def _dataset(s: Settings) -> Dataset:
    path = s.get("data")
    if path is None:
        raise SystemExit("error: --data is required (or data = ... in the config file)")
    return Dataset.load(path)


def _finish(run, out, config: RunConfig, seed: int) -> None:
    if out:
        save_run(out, run, run_metadata(config, seed))
    print(f"dev_acc={run.dev_acc:.4f} test_acc={run.test_acc:.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(s: Settings) -> int:
    d = DatasetSpec()
    spec = DatasetSpec(
        n_train=s.get("n_train", d.n_train, int), n_dev=s.get("n_dev", d.n_dev, int),
        n_test=s.get("n_test", d.n_test, int), n_facts=s.get("n_facts", d.n_facts, int),
        n_choices=s.get("n_choices", d.n_choices, int), task_kind=s.get("task_kind", d.task_kind, TaskKind),
        ambiguous_fraction=s.get("ambiguous_fraction", d.ambiguous_fraction, float),
        attributes_per_subject=s.get("attributes_per_subject", d.attributes_per_subject, int),
    )
    ds = generate_dataset(spec, seed=s.get("seed", 0, int))
    ds.save(s.get("out"))
    print(f"wrote {len(ds.train)}/{len(ds.dev)}/{len(ds.test)} instances, {len(ds.vocab)} tokens to {s.get('out')}")
    return 0


def cmd_train_teacher(s: Settings) -> int:
    config = run_config_from(s, Method.KNIFE_TEACHER, Mode.IR_O)
    seed = s.get("seed", 0, int)
    _finish(train_teacher(config, _dataset(s), seed), s.get("out"), config, seed)
    return 0


def _teacher_meta(path) -> dict[str, str]:
    meta_path = Path(path) / "run.txt"
    return read_keyvalue(meta_path) if meta_path.exists() else {}


def cmd_train_student(s: Settings) -> int:
    teacher_dir = s.get("teacher")
    meta = _teacher_meta(teacher_dir)
    if meta.get("method", Method.KNIFE_TEACHER.value) != Method.KNIFE_TEACHER.value:
        raise SystemExit(f"error: {teacher_dir} does not hold a teacher run")
    # the student inherits how its teacher was trained unless told otherwise
    for key, meta_key in (("bottleneck", "teacher_bottleneck"), ("ftr_type", "ftr_type")):
        if s.get(key) is None and meta_key in meta:
            s.file[key] = meta[meta_key]
    if s.get("preset") is None and "preset" in meta and s.get("student_init") != StudentInit.RANDOM.value:
        s.file["preset"] = meta["preset"]
    config = run_config_from(s, Method.KNIFE_STUDENT, Mode.I_O)
    seed = s.get("seed", 0, int)
    teacher = load_run_model(teacher_dir)
    _finish(train_student(config, _dataset(s), teacher, seed), s.get("out"), config, seed)
    return 0


def cmd_train_vanilla(s: Settings) -> int:
    teacher_dir = s.get("teacher_init")
    method = Method.VANILLA_TEACHER_INIT if teacher_dir else Method.VANILLA
    config = run_config_from(s, method, Mode.parse(s.get("mode", "I->O")))
    seed = s.get("seed", 0, int)
    teacher = load_run_model(teacher_dir) if teacher_dir else None
    _finish(train_vanilla(config, _dataset(s), seed, teacher=teacher), s.get("out"), config, seed)
    return 0


def cmd_eval(s: Settings) -> int:
    model_dir = s.get("model")
    meta = _teacher_meta(model_dir)
    mode = Mode.parse(s.get("mode", meta.get("mode", "I->O")))
    if meta.get("method") == Method.VANILLA.value and mode is Mode.IR_O:
        mode = Mode.I_O  # IR->O baselines are evaluated without rationales
    protocol = s.get("protocol", Protocol.GENERATION if mode.generative else Protocol.SCORING, Protocol)
    bottleneck = s.get("bottleneck", parse_bool(meta.get("teacher_bottleneck", "true")), parse_bool)
    ds = _dataset(s)
    split = s.get("split", "test")
    acc = evaluate(load_run_model(model_dir), ds.split(split), ds.vocab, protocol, mode, bottleneck)
    print(f"{split}_acc={acc:.4f}")
    return 0


def cmd_grid(s: Settings) -> int:
    name = s.get("grid", "main")
    if name not in GRIDS:
        raise SystemExit(f"error: unknown grid {name!r}; choose from {', '.join(GRIDS)}")
    base = run_config_from(s, Method.VANILLA, Mode.I_O)
    cells = GRIDS[name](base)
    ds = _dataset(s)
    results = run_grid(cells, ds, base.seeds, TeacherCache(ds))
    out = s.get("out")
    if out:
        save_grid(out, results)
    print(report(summaries_from_results(results)), end="")
    failed = [r.cell for r in results if r.failed and r.cell.required]
    for cell in failed:
        print(f"FAILED: {cell.group} / {cell.name}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(s: Settings) -> int:
    path = Path(s.get("runs"))
    if path.is_dir():
        path = path / "runs.csv"
    summaries = summaries_from_csv(path.read_text())
    print(report(summaries, s.get("format", "text")), end="")
    return 1 if any(x.failed for x in summaries) else 0


# ---------------------------------------------------------------------------
# argument parsing


def _run_flags(p: argparse.ArgumentParser, *, teacher: bool = False) -> None:
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--out", help="directory for the checkpoint, metrics and result")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["base", "large", "large->base"])
    p.add_argument("--ftr-type", dest="ftr_type", choices=["gold", "replace", "shuffle"])
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    if teacher:
        p.add_argument("--bottleneck", type=parse_bool, help="hide rationale states from the decoder (default yes)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rationale_distill", description="Train and evaluate rationale-distilled students, baselines and teachers.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic fact-lookup dataset")
    p.add_argument("--out", required=False)
    p.add_argument("--seed", type=int)
    for flag in ("n-train", "n-dev", "n-test", "n-facts", "n-choices", "attributes-per-subject"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)
    p.add_argument("--ambiguous-fraction", dest="ambiguous_fraction", type=float)
    p.add_argument("--task-kind", dest="task_kind", choices=[k.value for k in TaskKind])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the rationale-conditioned teacher (IR->O)")
    _run_flags(p, teacher=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="distil a trained teacher into an x-only student")
    _run_flags(p, teacher=True)
    p.add_argument("--teacher", help="teacher run directory")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--use-task-loss", dest="use_task_loss", type=parse_bool)
    p.add_argument("--student-init", dest="student_init", choices=[i.value for i in StudentInit])
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("train-vanilla", help="train a baseline without distillation")
    _run_flags(p)
    p.add_argument("--mode", help="I->O, IR->O, I->OR or I->RO")
    p.add_argument("--teacher-init", dest="teacher_init", help="initialise from this teacher run (I->O only)")
    p.set_defaults(func=cmd_train_vanilla)

    p = sub.add_parser("eval", help="accuracy of a saved run on a split")
    p.add_argument("--data")
    p.add_argument("--model", required=False, help="run directory")
    p.add_argument("--split", choices=["train", "dev", "test"])
    p.add_argument("--mode")
    p.add_argument("--protocol", choices=[x.value for x in Protocol])
    p.add_argument("--bottleneck", type=parse_bool)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an ablation grid over seeds")
    _run_flags(p)
    p.add_argument("--grid", choices=list(GRIDS))
    p.add_argument("--seeds", help="comma-separated, default 0,1,2")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="mean (± std) table from a grid's runs.csv")
    p.add_argument("runs", help="grid output directory or its runs.csv")
    p.add_argument("--format", choices=["text", "csv"])
    p.set_defaults(func=cmd_report)

    for action in sub.choices.values():
        action.add_argument("--config", help="INI file with default values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    settings = Settings(args)
    required = {"gen-data": "out", "eval": "model", "train-student": "teacher"}.get(args.command)
    if required and settings.get(required) is None:
        raise SystemExit(f"error: --{required} is required (or {required} = ... in the config file)")
    return args.func(settings)


if __name__ == "__main__":
    sys.exit(main())
