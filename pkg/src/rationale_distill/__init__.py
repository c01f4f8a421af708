"""Distilling free-text-rationale knowledge from a bottlenecked teacher LM
into an input-only student by hidden-state alignment.

The autograd engine, the encoder-decoder LM and the training harness are all
plain numpy.
"""
from .data import Dataset, DatasetSpec, Mode, TaskInstance, TaskKind, Vocabulary, generate_dataset
from .distill import (
    ConfigurationError,
    DistillConfig,
    LossBundle,
    LossWeights,
    Projection,
    StudentInit,
    Variant,
    init_student,
    kd_in_loss,
    kd_out_loss,
    student_forward,
    teacher_forward,
    total_loss,
)
from .harness import Hyper, Method, Protocol, RunConfig, TrainedRun, evaluate, train_student, train_teacher, train_vanilla
from .model import ModelConfig, Seq2SeqLM, load_model, preset, save_model
from .scoring import LabelScore, classify, normalize, task_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "Dataset", "DatasetSpec", "DistillConfig", "Hyper", "LabelScore", "LossBundle",
    "LossWeights", "Method", "Mode", "ModelConfig", "Projection", "Protocol", "RunConfig", "Seq2SeqLM",
    "StudentInit", "TaskInstance", "TaskKind", "TrainedRun", "Variant", "Vocabulary", "classify", "evaluate",
    "generate_dataset", "init_student", "kd_in_loss", "kd_out_loss", "load_model", "normalize", "preset",
    "save_model", "student_forward", "task_loss", "teacher_forward", "total_loss", "train_student",
    "train_teacher", "train_vanilla",
]
