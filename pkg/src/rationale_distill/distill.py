"""Hidden-state distillation from a rationale-conditioned teacher.

The teacher reads ``[x, r]`` but its decoder may only attend to the
task-input positions (the bottleneck), so whatever it learned from the
rationale has to live in its task-input states and its decoder states.  The
student reads ``x`` alone and is trained to reproduce those states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import (
    START_ID,
    EncoderOutput,
    ExternalHead,
    ModelConfig,
    Seq2SeqLM,
    build_bottleneck_mask,
    decode,
    encode,
)
from .scoring import AlignmentError, CandidateBatch, LabelScore, build_encoder_input, normalize, score_label
from .tensor import ShapeError, Tensor


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


class Variant(str, Enum):
    IN = "in"
    OUT = "out"
    IN_OUT = "in_out"

    @property
    def uses_in(self) -> bool:
        return self in (Variant.IN, Variant.IN_OUT)

    @property
    def uses_out(self) -> bool:
        return self in (Variant.OUT, Variant.IN_OUT)


class StudentInit(str, Enum):
    FROM_TEACHER = "from_teacher"
    RANDOM = "random"


@dataclass(frozen=True)
class LossWeights:
    lambda_task: float = 0.0
    lambda_kd_in: float = 0.0
    lambda_kd_out: float = 0.0

    def __post_init__(self):
        w = self.as_tuple()
        if any(x < 0 for x in w):
            raise ConfigurationError("loss weights must be non-negative")
        if not sum(w) > 0:
            raise ConfigurationError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_task, self.lambda_kd_in, self.lambda_kd_out)

    @classmethod
    def teacher(cls) -> LossWeights:
        return cls(1.0, 0.0, 0.0)

    @classmethod
    def for_variant(cls, variant: Variant, use_task_loss: bool = False) -> LossWeights:
        variant = Variant(variant)
        return cls(
            1.0 if use_task_loss else 0.0,
            1.0 if variant.uses_in else 0.0,
            1.0 if variant.uses_out else 0.0,
        )


@dataclass
class ProjectionParams:
    weight: Tensor   # (d_student, d_teacher)
    bias: Tensor     # (d_teacher,)

    @classmethod
    def init(cls, d_student: int, d_teacher: int, rng: np.random.Generator) -> ProjectionParams:
        w = rng.normal(0.0, 1.0 / math.sqrt(d_student), size=(d_student, d_teacher))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(d_teacher), requires_grad=True))

    @classmethod
    def identity(cls, d: int) -> ProjectionParams:
        return cls(Tensor(np.eye(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))


@dataclass
class Projection:
    """Separate student-to-teacher maps for encoder and decoder states."""

    enc: ProjectionParams
    dec: ProjectionParams

    def params(self) -> dict[str, Tensor]:
        return {
            "projection.enc.weight": self.enc.weight,
            "projection.enc.bias": self.enc.bias,
            "projection.dec.weight": self.dec.weight,
            "projection.dec.bias": self.dec.bias,
        }

    @classmethod
    def from_params(cls, p: dict[str, Tensor]) -> Projection:
        return cls(ProjectionParams(p["projection.enc.weight"], p["projection.enc.bias"]),
                   ProjectionParams(p["projection.dec.weight"], p["projection.dec.bias"]))


@dataclass
class DistillConfig:
    variant: Variant = Variant.IN_OUT
    use_task_loss: bool = False
    teacher_bottleneck: bool = True
    student_init: StudentInit = StudentInit.FROM_TEACHER
    weights: LossWeights | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.student_init = StudentInit(self.student_init)

    def loss_weights(self) -> LossWeights:
        return self.weights or LossWeights.for_variant(self.variant, self.use_task_loss)


@dataclass
class LossBundle:
    """Loss components; ``None`` marks a component that was not evaluated."""

    task: Tensor | None = None
    kd_in: Tensor | None = None
    kd_out: Tensor | None = None

    def values(self) -> dict[str, float | None]:
        return {k: (None if v is None else v.item())
                for k, v in (("task", self.task), ("kd_in", self.kd_in), ("kd_out", self.kd_out))}


# ---------------------------------------------------------------------------
# distances

def mse_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-row mean squared error over the last axis."""
    diff = a - b
    return T.scale(T.sum_last(diff * diff), 1.0 / a.shape[-1])


Distance = Callable[[Tensor, Tensor], Tensor]


def project_states(states: Tensor, projection: ProjectionParams) -> Tensor:
    if states.shape[-1] != projection.weight.shape[0]:
        raise ShapeError(
            f"projection expects width {projection.weight.shape[0]}, states have {states.shape[-1]}")
    return T.add_bias(states @ projection.weight, projection.bias)


def _maybe_project(states: Tensor, proj: ProjectionParams | None) -> Tensor:
    return states if proj is None else project_states(states, proj)


# ---------------------------------------------------------------------------
# single-instance forwards and losses

def _instance_tokens(instance, vocab):
    if vocab is None:
        return instance.question, instance.candidates
    return vocab.encode(instance.question), [vocab.encode(c) for c in instance.candidates]


def _forward(model: Seq2SeqLM, x, candidates, ftr, bottleneck_on: bool):
    ids, seg = build_encoder_input(x, ftr)
    enc = encode(ids, seg, model)
    mask = build_bottleneck_mask(seg, bottleneck_on)
    decs = []
    rhos = []
    for y in candidates:
        dec = decode([START_ID] + list(y[:-1]), enc, mask, model)
        decs.append(dec)
        rhos.append(score_label(dec, y))
    rho = T.concat([T.reshape(r, (1,)) for r in rhos])
    prob = normalize(rho)
    score = LabelScore(rho.data.copy(), prob.data.copy(), int(np.argmax(rho.data)))
    return enc, decs, score


def teacher_forward(teacher: Seq2SeqLM, instance, bottleneck_on: bool = True, vocab=None):
    """Encode ``[x, r]`` and teacher-force every candidate through the masked decoder."""
    ftr = getattr(instance, "ftr", None)
    if not ftr:
        raise DataError("teacher needs an instance with a rationale")
    x, cands = _instance_tokens(instance, vocab)
    r = vocab.encode(ftr) if vocab is not None else ftr
    return _forward(teacher, x, cands, r, bottleneck_on)


def student_forward(student: Seq2SeqLM, instance, vocab=None):
    """Encode ``x`` only; the rationale field is never read."""
    x, cands = _instance_tokens(instance, vocab)
    return _forward(student, x, cands, None, False)


def kd_in_loss(student_enc: EncoderOutput, teacher_enc: EncoderOutput,
               projection: ProjectionParams | None = None, distance: Distance = mse_distance) -> Tensor:
    n_x = student_enc.n_x
    if n_x != teacher_enc.n_x:
        raise AlignmentError(f"student has {n_x} task-input positions, teacher {teacher_enc.n_x}")
    s = _maybe_project(student_enc.task_input_states, projection)
    t = teacher_enc.task_input_states.detach()
    if s.shape != t.shape:
        raise AlignmentError(f"state shapes {s.shape} and {t.shape} differ")
    return T.mean_all(distance(s, t))


def kd_out_loss(student_decs: Sequence, teacher_decs: Sequence,
                projection: ProjectionParams | None = None, distance: Distance = mse_distance) -> Tensor:
    if len(student_decs) != len(teacher_decs) or not student_decs:
        raise AlignmentError("candidate counts differ")
    terms = []
    for sd, td in zip(student_decs, teacher_decs):
        s = _maybe_project(sd.states, projection)
        t = td.states.detach()
        if s.shape != t.shape:
            raise AlignmentError(f"decoder state shapes {s.shape} and {t.shape} differ")
        terms.append(T.reshape(T.mean_all(distance(s, t)), (1,)))
    return T.mean_all(T.concat(terms))


def total_loss(bundle: LossBundle, weights: LossWeights) -> Tensor:
    """Weighted sum of the evaluated components; zero-weight terms are skipped."""
    total = None
    for w, comp, name in zip(weights.as_tuple(), (bundle.task, bundle.kd_in, bundle.kd_out),
                             ("task", "kd_in", "kd_out")):
        if w == 0:
            continue
        if comp is None:
            raise ConfigurationError(f"weight on {name} loss but it was not evaluated")
        term = comp if w == 1 else T.scale(comp, w)
        total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("all loss weights are zero")
    return total


# ---------------------------------------------------------------------------
# batched losses (training path)

def kd_in_loss_batch(student_enc: Tensor, teacher_x_states: np.ndarray, n_x: np.ndarray,
                     projection: ProjectionParams | None = None, distance: Distance = mse_distance) -> Tensor:
    """Batch mean of per-instance ``kd_in_loss``.

    ``student_enc`` is (B, L, d_s); ``teacher_x_states`` (B, Lx, d_t) holds the
    teacher's task-input states left-aligned; ``n_x`` (B,) are true lengths.
    """
    lx = teacher_x_states.shape[1]
    s = _maybe_project(student_enc[:, :lx], projection)
    if s.shape != teacher_x_states.shape:
        raise AlignmentError(f"state shapes {s.shape} and {teacher_x_states.shape} differ")
    n_x = np.asarray(n_x)
    b = n_x.shape[0]
    w = (np.arange(lx)[None, :] < n_x[:, None]) / (n_x[:, None] * b)
    return T.sum_all(distance(s, Tensor(teacher_x_states)) * Tensor(w))


def kd_out_loss_batch(student_dec: Tensor, teacher_dec: np.ndarray, cands: CandidateBatch,
                      projection: ProjectionParams | None = None, distance: Distance = mse_distance) -> Tensor:
    """Batch mean of per-instance ``kd_out_loss`` (mean over candidates of
    mean over label positions)."""
    s = _maybe_project(student_dec, projection)
    if s.shape != teacher_dec.shape:
        raise AlignmentError(f"decoder state shapes {s.shape} and {teacher_dec.shape} differ")
    n_cands = np.bincount(cands.owner)
    b = n_cands.shape[0]
    w = cands.token_mask / (cands.lengths[:, None] * n_cands[cands.owner][:, None] * b)
    return T.sum_all(distance(s, Tensor(teacher_dec)) * Tensor(w))


# ---------------------------------------------------------------------------
# student construction

def init_student(teacher: Seq2SeqLM, config: DistillConfig, student_config: ModelConfig | None = None,
                 seed: int = 0) -> tuple[Seq2SeqLM, Projection | None]:
    """Build the student (and a projection when widths differ).

    FROM_TEACHER copies the teacher's parameters; RANDOM draws fresh ones and,
    across widths, scores tokens through the decoder projection followed by
    the teacher's embedding table.
    """
    student_config = student_config or teacher.config
    if config.student_init is StudentInit.FROM_TEACHER:
        if student_config != teacher.config:
            raise ConfigurationError("FROM_TEACHER needs identical student and teacher configs")
        return teacher.clone(), None
    student = Seq2SeqLM(student_config, seed=seed)
    if student_config.d_model == teacher.config.d_model:
        return student, None
    if student_config.vocab_size != teacher.config.vocab_size:
        raise ConfigurationError("student and teacher must share a vocabulary")
    rng = np.random.default_rng(seed + 7919)
    ds, dt = student_config.d_model, teacher.config.d_model
    proj = Projection(ProjectionParams.init(ds, dt, rng), ProjectionParams.init(ds, dt, rng))
    student.head = ExternalHead(proj.dec.weight, proj.dec.bias, teacher.params["embed.tokens"].data)
    return student, proj
