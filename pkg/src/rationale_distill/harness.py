"""Training and evaluation orchestration.

Every run is a pure function of (dataset, config, seed): the seed fixes the
parameter initialisation of randomly initialised models and the minibatch
order.  Runs keep the parameters with the best dev accuracy (early stopping
with patience) and report dev/test accuracy of those parameters.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, read_keyvalue, save_arrays, write_keyvalue
from .data import Dataset, Mode, TaskInstance, corrupt_replace, corrupt_shuffle, parse_generated_label, subsample_train
from .distill import (
    ConfigurationError,
    DistillConfig,
    LossBundle,
    LossWeights,
    Projection,
    StudentInit,
    init_student,
    kd_in_loss_batch,
    kd_out_loss_batch,
    total_loss,
)
from .model import (
    END_ID,
    PAD_ID,
    SEP_ID,
    START_ID,
    ExternalHead,
    ModelConfig,
    Segment,
    Seq2SeqLM,
    greedy_decode_batch,
    load_model,
    preset,
    save_model,
)
from .optim import Adam
from .scoring import (
    CandidateBatch,
    batch_task_loss,
    build_encoder_input,
    pad_encoder_inputs,
    score_batch,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


class Method(str, Enum):
    VANILLA = "vanilla"
    VANILLA_TEACHER_INIT = "vanilla_teacher_init"
    KNIFE_STUDENT = "knife_student"
    KNIFE_TEACHER = "knife_teacher"


class Protocol(str, Enum):
    SCORING = "scoring"
    GENERATION = "generation"


@dataclass(frozen=True)
class Hyper:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    patience: int = 5


@dataclass
class RunConfig:
    method: Method = Method.VANILLA
    mode: Mode = Mode.I_O
    distill: DistillConfig = field(default_factory=DistillConfig)
    preset: str = "base"
    seeds: tuple[int, ...] = (0, 1, 2)
    hyper: Hyper = field(default_factory=Hyper)
    dataset: str | None = None
    train_fraction: float = 1.0
    ftr_type: str = "gold"

    def __post_init__(self):
        self.method = Method(self.method)
        self.mode = Mode.parse(self.mode)
        if not 0 < self.train_fraction <= 1:
            raise ConfigurationError("train_fraction must lie in (0, 1]")

    @property
    def teacher_preset(self) -> str:
        return self.preset.split("->")[0]

    @property
    def student_preset(self) -> str:
        return self.preset.split("->")[-1]


# ---------------------------------------------------------------------------
# encoded instances


@dataclass
class Encoded:
    x: list[int]
    candidates: list[list[int]]
    gold: int
    ftr: list[int] | None = None


def encode_instances(instances: Sequence[TaskInstance], vocab, with_ftr: bool) -> list[Encoded]:
    """Token ids for each instance; the rationale field is read only if asked."""
    out = []
    for inst in instances:
        ftr = vocab.encode(inst.ftr) if with_ftr else None
        out.append(Encoded(vocab.encode(inst.question), [vocab.encode(c) for c in inst.candidates],
                           inst.gold_index, ftr))
    return out


@dataclass
class Batch:
    enc_ids: np.ndarray
    enc_seg: np.ndarray
    cands: CandidateBatch
    gold: np.ndarray
    n_x: np.ndarray


def make_batch(items: Sequence[Encoded], with_ftr: bool) -> Batch:
    rows = [build_encoder_input(e.x, e.ftr if with_ftr else None) for e in items]
    ids, seg = pad_encoder_inputs(rows)
    return Batch(ids, seg, CandidateBatch.build([e.candidates for e in items]),
                 np.array([e.gold for e in items], dtype=np.int64),
                 np.array([len(e.x) for e in items], dtype=np.int64))


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


# ---------------------------------------------------------------------------
# evaluation


def scoring_accuracy(model: Seq2SeqLM, items: Sequence[Encoded], with_ftr: bool, bottleneck: bool,
                     batch_size: int = 128) -> float:
    if not items:
        return 0.0
    correct = 0
    with T.no_grad():
        for sl in _batches(len(items), batch_size):
            b = make_batch(items[sl], with_ftr)
            pred = score_batch(model, b.enc_ids, b.enc_seg, b.cands, bottleneck).predictions()
            correct += int((pred == b.gold).sum())
    return correct / len(items)


def generation_accuracy(model: Seq2SeqLM, items: Sequence[Encoded], mode: Mode, max_len: int,
                        batch_size: int = 128) -> float:
    if not items:
        return 0.0
    correct = 0
    with T.no_grad():
        for sl in _batches(len(items), batch_size):
            chunk = items[sl]
            b = make_batch(chunk, False)
            memory = model.encode_batch(b.enc_ids, b.enc_seg)
            outs = greedy_decode_batch(model, memory, b.enc_seg != Segment.PAD, max_len)
            for e, toks in zip(chunk, outs):
                correct += int(parse_generated_label(toks, e.candidates, mode) == e.gold)
    return correct / len(items)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunLog:
    run_id: str
    weights: tuple[float, float, float]
    bottleneck: bool | None
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    kd_in_evaluations: int = 0
    kd_out_evaluations: int = 0

    COLUMNS = ("run_id", "step", "loss_task", "loss_kd_in", "loss_kd_out", "dev_acc")

    def add_row(self, step: int, losses: dict[str, float | None], dev_acc: float) -> None:
        self.rows.append({"run_id": self.run_id, "step": step, "loss_task": losses.get("task"),
                          "loss_kd_in": losses.get("kd_in"), "loss_kd_out": losses.get("kd_out"),
                          "dev_acc": dev_acc})

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        buf.write(f"# run_id={self.run_id} lambda_task={self.weights[0]} lambda_kd_in={self.weights[1]} "
                  f"lambda_kd_out={self.weights[2]} bottleneck={self.bottleneck}\n")
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in self.COLUMNS])
        return buf.getvalue()


@dataclass
class TrainedRun:
    model: Seq2SeqLM
    log: RunLog
    dev_acc: float
    test_acc: float
    projection: Projection | None = None


# ---------------------------------------------------------------------------
# teacher targets


@dataclass
class TeacherTargets:
    x_states: list[np.ndarray]          # per instance (n_x, d_t)
    dec_states: list[list[np.ndarray]]  # per instance, per candidate (n_y, d_t)


def teacher_targets(teacher: Seq2SeqLM, items: Sequence[Encoded], bottleneck: bool,
                    batch_size: int = 128) -> TeacherTargets:
    """Teacher task-input and task-output states for every instance (no gradient)."""
    xs, decs = [], []
    with T.no_grad():
        for sl in _batches(len(items), batch_size):
            chunk = items[sl]
            b = make_batch(chunk, True)
            scored = score_batch(teacher, b.enc_ids, b.enc_seg, b.cands, bottleneck)
            enc = scored.enc_states.data
            dec = scored.dec_states.data
            lengths = b.cands.lengths
            row = 0
            for i, e in enumerate(chunk):
                xs.append(enc[i, : len(e.x)].copy())
                per = []
                for _ in e.candidates:
                    per.append(dec[row, : lengths[row]].copy())
                    row += 1
                decs.append(per)
    return TeacherTargets(xs, decs)


def _stack_teacher(tt: TeacherTargets, idx: Sequence[int], cands: CandidateBatch) -> tuple[np.ndarray, np.ndarray]:
    d = tt.x_states[idx[0]].shape[1]
    lx = max(tt.x_states[i].shape[0] for i in idx)
    xs = np.zeros((len(idx), lx, d))
    for k, i in enumerate(idx):
        xs[k, : tt.x_states[i].shape[0]] = tt.x_states[i]
    dec = np.zeros(cands.dec_in.shape + (d,))
    row = 0
    for i in idx:
        for states in tt.dec_states[i]:
            dec[row, : states.shape[0]] = states
            row += 1
    return xs, dec


# ---------------------------------------------------------------------------
# training loops


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()


def fit_scoring(model: Seq2SeqLM, train: list[Encoded], dev_eval, weights: LossWeights, *,
                with_ftr: bool, bottleneck: bool, hyper: Hyper, seed: int, run_log: RunLog,
                teacher: TeacherTargets | None = None, projection: Projection | None = None) -> float:
    """Minimise the weighted loss over teacher-forced candidate scores.

    ``dev_eval(model) -> accuracy`` drives model selection.  Returns the best
    dev accuracy; the model is left holding the best parameters.
    """
    lam_task, lam_in, lam_out = weights.as_tuple()
    if (lam_in or lam_out) and teacher is None:
        raise ConfigurationError("distillation weights need teacher targets")
    params = dict(model.params)
    if projection is not None:
        params.update(projection.params())
    opt = Adam(params, lr=hyper.lr)
    rng = np.random.default_rng(seed)
    best = dev_eval(model)
    snap = _snapshot(params)
    run_log.add_row(0, {}, best)
    stale = 0
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        count = 0
        for sl in _batches(len(order), hyper.batch_size):
            idx = order[sl]
            b = make_batch([train[i] for i in idx], with_ftr)
            scored = score_batch(model, b.enc_ids, b.enc_seg, b.cands, bottleneck)
            bundle = LossBundle()
            if lam_task:
                bundle.task = batch_task_loss(scored, b.gold)
            if lam_in or lam_out:
                t_x, t_dec = _stack_teacher(teacher, idx, b.cands)
                if lam_in:
                    bundle.kd_in = kd_in_loss_batch(scored.enc_states, t_x, b.n_x,
                                                    projection.enc if projection else None)
                    run_log.kd_in_evaluations += 1
                if lam_out:
                    bundle.kd_out = kd_out_loss_batch(scored.dec_states, t_dec, b.cands,
                                                      projection.dec if projection else None)
                    run_log.kd_out_evaluations += 1
            loss = total_loss(bundle, weights)
            opt.zero_grad()
            T.backward(loss)
            opt.step(allow_missing=True)
            step += 1
            count += 1
            for k, v in bundle.values().items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
        acc = dev_eval(model)
        run_log.add_row(step, {k: v / count for k, v in sums.items()}, acc)
        log.debug("%s epoch %d: dev %.4f", run_log.run_id, epoch, acc)
        if acc > best:
            best, snap, stale = acc, _snapshot(params), 0
            run_log.best_epoch = epoch
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    _restore(params, snap)
    return best


def _generation_rows(items: Sequence[Encoded], targets: Sequence[list[int]]):
    t = max(len(tg) for tg in targets) + 1
    dec_in = np.full((len(items), t), PAD_ID, dtype=np.int64)
    labels = np.full((len(items), t), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(items), t), dtype=bool)
    for i, tg in enumerate(targets):
        seq = list(tg) + [END_ID]
        dec_in[i, 0] = START_ID
        dec_in[i, 1: len(seq)] = seq[:-1]
        labels[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return dec_in, labels, mask


def generation_target(e: Encoded, mode: Mode) -> list[int]:
    y = e.candidates[e.gold]
    return y + [SEP_ID] + e.ftr if mode is Mode.I_OR else e.ftr + [SEP_ID] + y


def fit_generation(model: Seq2SeqLM, train: list[Encoded], dev_eval, mode: Mode, *, hyper: Hyper,
                   seed: int, run_log: RunLog) -> float:
    """Token-level cross-entropy on the concatenated label/rationale target."""
    opt = Adam(model.params, lr=hyper.lr)
    rng = np.random.default_rng(seed)
    best = dev_eval(model)
    snap = _snapshot(model.params)
    run_log.add_row(0, {}, best)
    stale = step = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for sl in _batches(len(order), hyper.batch_size):
            chunk = [train[i] for i in order[sl]]
            b = make_batch(chunk, False)
            dec_in, labels, mask = _generation_rows(chunk, [generation_target(e, mode) for e in chunk])
            memory = model.encode_batch(b.enc_ids, b.enc_seg)
            _, logits = model.decode_batch(dec_in, memory, b.enc_seg != Segment.PAD)
            lp = T.gather_logprob(logits, labels)
            loss = T.scale(T.sum_all(lp * Tensor(mask.astype(float))), -1.0 / mask.sum())
            opt.zero_grad()
            T.backward(loss)
            opt.step(allow_missing=True)
            total += loss.item()
            count += 1
            step += 1
        acc = dev_eval(model)
        run_log.add_row(step, {"task": total / count}, acc)
        log.debug("%s epoch %d: dev %.4f", run_log.run_id, epoch, acc)
        if acc > best:
            best, snap, stale = acc, _snapshot(model.params), 0
            run_log.best_epoch = epoch
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    _restore(model.params, snap)
    return best


# ---------------------------------------------------------------------------
# public run entry points


def prepare_dataset(dataset: Dataset, config: RunConfig, seed: int) -> Dataset:
    """Apply rationale corruption and the low-resource subsample (training split only)."""
    ftr_type = config.ftr_type.lower()
    if ftr_type == "replace":
        dataset = corrupt_replace(dataset, seed=10_000 + seed)
    elif ftr_type == "shuffle":
        dataset = corrupt_shuffle(dataset, seed=10_000 + seed)
    elif ftr_type != "gold":
        raise ConfigurationError(f"unknown FTR type {config.ftr_type!r}")
    return subsample_train(dataset, config.train_fraction, seed=20_000 + seed)


def _model_config(name: str, dataset: Dataset) -> ModelConfig:
    return preset(name, len(dataset.vocab), max_seq_len=64)


def train_teacher(config: RunConfig, dataset: Dataset, seed: int, run_id: str | None = None) -> TrainedRun:
    """Rationale-conditioned teacher, task loss only; evaluated with rationales."""
    if config.mode is not Mode.IR_O:
        raise ConfigurationError("the teacher is trained in IR->O mode")
    ds = prepare_dataset(dataset, config, seed)
    bottleneck = config.distill.teacher_bottleneck
    model = Seq2SeqLM(_model_config(config.teacher_preset, dataset), seed=seed)
    train = encode_instances(ds.train, ds.vocab, True)
    dev = encode_instances(ds.dev, ds.vocab, True)
    test = encode_instances(ds.test, ds.vocab, True)
    weights = LossWeights.teacher()
    run_log = RunLog(run_id or f"teacher-{config.ftr_type}-b{int(bottleneck)}-s{seed}", weights.as_tuple(), bottleneck)
    dev_acc = fit_scoring(model, train, lambda m: scoring_accuracy(m, dev, True, bottleneck), weights,
                          with_ftr=True, bottleneck=bottleneck, hyper=config.hyper, seed=seed, run_log=run_log)
    return TrainedRun(model, run_log, dev_acc, scoring_accuracy(model, test, True, bottleneck))


def train_student(config: RunConfig, dataset: Dataset, teacher: Seq2SeqLM, seed: int,
                  run_id: str | None = None) -> TrainedRun:
    """Distil the teacher's hidden states into a student that reads ``x`` only."""
    dc = config.distill
    weights = dc.loss_weights()
    student_cfg = _model_config(config.student_preset, dataset)
    if student_cfg.vocab_size != teacher.config.vocab_size:
        raise ConfigurationError("teacher vocabulary does not match the dataset")
    if dc.student_init is StudentInit.FROM_TEACHER and student_cfg != teacher.config:
        raise ConfigurationError("FROM_TEACHER initialisation needs the teacher's architecture")
    ds = prepare_dataset(dataset, config, seed)
    student, projection = init_student(teacher, dc, student_cfg, seed=seed)
    targets = None
    if weights.lambda_kd_in or weights.lambda_kd_out:
        targets = teacher_targets(teacher, encode_instances(ds.train, ds.vocab, True), dc.teacher_bottleneck)
    train = encode_instances(ds.train, ds.vocab, False)
    dev = encode_instances(ds.dev, ds.vocab, False)
    test = encode_instances(ds.test, ds.vocab, False)
    run_log = RunLog(run_id or f"student-{dc.variant.value}-s{seed}", weights.as_tuple(), dc.teacher_bottleneck)
    dev_acc = fit_scoring(student, train, lambda m: scoring_accuracy(m, dev, False, False), weights,
                          with_ftr=False, bottleneck=False, hyper=config.hyper, seed=seed, run_log=run_log,
                          teacher=targets, projection=projection)
    return TrainedRun(student, run_log, dev_acc, scoring_accuracy(student, test, False, False), projection)


def train_vanilla(config: RunConfig, dataset: Dataset, seed: int, teacher: Seq2SeqLM | None = None,
                  run_id: str | None = None) -> TrainedRun:
    """Baselines without distillation.

    I->O and IR->O minimise the task loss (IR->O reads rationales in training
    only, with no bottleneck, and is evaluated on ``x`` alone); I->OR and I->RO
    learn to generate label and rationale and are scored by greedy decoding.
    """
    mode = config.mode
    ds = prepare_dataset(dataset, config, seed)
    cfg = _model_config(config.student_preset, dataset)
    if config.method is Method.VANILLA_TEACHER_INIT:
        if teacher is None:
            raise ConfigurationError("teacher-initialised baseline needs a teacher")
        if mode is not Mode.I_O:
            raise ConfigurationError("teacher-initialised baseline runs in I->O mode")
        model = teacher.clone()
    else:
        model = Seq2SeqLM(cfg, seed=seed)
    dev = encode_instances(ds.dev, ds.vocab, False)
    test = encode_instances(ds.test, ds.vocab, False)
    weights = LossWeights.teacher()
    run_log = RunLog(run_id or f"vanilla-{mode.value}-s{seed}", weights.as_tuple(), None)
    if mode.generative:
        train = encode_instances(ds.train, ds.vocab, True)
        max_len = max(len(generation_target(e, mode)) for e in train) + 2
        dev_eval = lambda m: generation_accuracy(m, dev, mode, max_len)  # noqa: E731
        dev_acc = fit_generation(model, train, dev_eval, mode, hyper=config.hyper, seed=seed, run_log=run_log)
        return TrainedRun(model, run_log, dev_acc, generation_accuracy(model, test, mode, max_len))
    with_ftr = mode is Mode.IR_O
    train = encode_instances(ds.train, ds.vocab, with_ftr)
    dev_acc = fit_scoring(model, train, lambda m: scoring_accuracy(m, dev, False, False), weights,
                          with_ftr=with_ftr, bottleneck=False, hyper=config.hyper, seed=seed, run_log=run_log)
    return TrainedRun(model, run_log, dev_acc, scoring_accuracy(model, test, False, False))


def evaluate(model: Seq2SeqLM, instances: Sequence[TaskInstance], vocab, protocol: Protocol | str,
             mode: Mode | str = Mode.I_O, bottleneck: bool = True, max_len: int = 32) -> float:
    """Accuracy on a split.  Only the IR->O scoring protocol reads rationales."""
    protocol = Protocol(protocol)
    mode = Mode.parse(mode)
    if (protocol is Protocol.GENERATION) != mode.generative:
        raise ConfigurationError(f"protocol {protocol.value} does not match mode {mode.value}")
    if protocol is Protocol.GENERATION:
        return generation_accuracy(model, encode_instances(instances, vocab, False), mode, max_len)
    with_ftr = mode is Mode.IR_O
    return scoring_accuracy(model, encode_instances(instances, vocab, with_ftr), with_ftr, bottleneck and with_ftr)


# ---------------------------------------------------------------------------
# persistence of trained runs


def run_metadata(config: RunConfig, seed: int) -> dict:
    """Settings a later stage (a student, a report) needs to know about a run."""
    w = config.distill.loss_weights() if config.method is Method.KNIFE_STUDENT else LossWeights.teacher()
    return {"method": config.method.value, "mode": config.mode.value, "preset": config.preset, "seed": seed,
            "ftr_type": config.ftr_type, "train_fraction": config.train_fraction,
            "teacher_bottleneck": config.distill.teacher_bottleneck, "variant": config.distill.variant.value,
            "lambda_task": w.lambda_task, "lambda_kd_in": w.lambda_kd_in, "lambda_kd_out": w.lambda_kd_out,
            "lr": config.hyper.lr, "batch_size": config.hyper.batch_size, "epochs": config.hyper.epochs,
            "patience": config.hyper.patience}


def save_run(path, run: TrainedRun, metadata: dict | None = None) -> None:
    path = Path(path)
    save_model(path, run.model)
    extra = {}
    if run.projection is not None:
        extra.update({k: v.data for k, v in run.projection.params().items()})
        extra["head.embedding"] = run.model.head.embedding.data
    if extra:
        save_arrays(path / "extra", extra)
    (path / "metrics.csv").write_text(run.log.to_csv())
    write_keyvalue(path / "result.txt", {"dev_acc": repr(run.dev_acc), "test_acc": repr(run.test_acc)})
    if metadata is not None:
        write_keyvalue(path / "run.txt", metadata)


def load_run_model(path) -> Seq2SeqLM:
    path = Path(path)
    model = load_model(path)
    if (path / "extra").exists():
        arrays = load_arrays(path / "extra")
        proj = Projection.from_params({k: Tensor(v, requires_grad=True) for k, v in arrays.items()
                                       if k.startswith("projection.")})
        model.head = ExternalHead(proj.dec.weight, proj.dec.bias, arrays["head.embedding"])
    return model


def read_result(path) -> dict[str, float]:
    return {k: float(v) for k, v in read_keyvalue(Path(path) / "result.txt").items()}
