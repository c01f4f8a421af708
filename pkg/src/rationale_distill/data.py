"""Synthetic fact-lookup tasks with free-text rationales.

A hidden table maps each subject to an attribute.  A question names a
subject; the candidates are attributes; the rationale states the needed fact
in words.  For a configurable share of subjects the attribute is redrawn per
instance, so the question alone cannot determine the answer and only the
rationale carries it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import END_ID, PAD_ID, SEP_ID, START_ID, UNK_ID, Segment

RESERVED = ("<pad>", "<s>", "</s>", "<sep>", "<unk>")
assert [PAD_ID, START_ID, END_ID, SEP_ID, UNK_ID] == list(range(len(RESERVED)))


class GenerationError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


class ModeError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def build(cls, words) -> Vocabulary:
        seen = dict.fromkeys(RESERVED)
        for w in words:
            seen.setdefault(w)
        return cls(list(seen))

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(RESERVED), len(self.tokens))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls(Path(path).read_text().splitlines())


@dataclass
class TaskInstance:
    question: list[str]
    candidates: list[list[str]]
    gold_index: int
    ftr: list[str]

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise GenerationError("need at least two candidates")
        if not 0 <= self.gold_index < len(self.candidates):
            raise GenerationError("gold index out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> TaskInstance:
        d = json.loads(line)
        return cls(d["question"], d["candidates"], d["gold_index"], d["ftr"])


class TaskKind(str, Enum):
    MULTI_CHOICE = "multi_choice"
    YES_NO = "yes_no"


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    n_facts: int = 256
    n_choices: int = 4
    task_kind: TaskKind = TaskKind.MULTI_CHOICE
    ambiguous_fraction: float = 0.1
    attributes_per_subject: int = 4

    def validate(self) -> None:
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise GenerationError("split sizes must be non-negative")
        kind = TaskKind(self.task_kind)
        n_choices = 2 if kind is TaskKind.YES_NO else self.n_choices
        if not self.n_facts >= n_choices >= 2:
            raise GenerationError("need n_facts >= n_choices >= 2")
        if self.attributes_per_subject < 1:
            raise GenerationError("attributes_per_subject must be positive")
        if n_choices - 1 + self.attributes_per_subject > len(ATTRIBUTES):
            raise GenerationError(f"only {len(ATTRIBUTES)} attributes to draw answers and distractors from")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise GenerationError("ambiguous_fraction must lie in [0, 1]")


@dataclass
class Dataset:
    train: list[TaskInstance]
    dev: list[TaskInstance]
    test: list[TaskInstance]
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[TaskInstance]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name in ("train", "dev", "test"):
            (path / f"{name}.jsonl").write_text("".join(i.to_json() + "\n" for i in self.split(name)))
        self.vocab.save(path / "vocab.txt")
        (path / "meta.json").write_text(json.dumps(self.meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> Dataset:
        path = Path(path)

        def read(name):
            return [TaskInstance.from_json(line) for line in (path / f"{name}.jsonl").read_text().splitlines() if line]

        meta_path = path / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(read("train"), read("dev"), read("test"), Vocabulary.load(path / "vocab.txt"), meta)


# ---------------------------------------------------------------------------
# generation

_BASE_COLORS = ["red", "blue", "green", "yellow", "black", "white", "purple", "orange",
                "silver", "golden", "brown", "grey"]
ATTRIBUTES = ([[c] for c in _BASE_COLORS]
              + [["dark", c] for c in ("red", "blue", "green", "purple", "brown", "grey")]
              + [["light", c] for c in ("blue", "green", "yellow", "purple", "brown", "grey")])

_SYLLABLES = ["ba", "ko", "ri", "mu", "te", "la", "zi", "po", "ne", "fa", "du", "gi", "so", "ve", "hu", "ya"]

# question phrasings per split; every split draws from the same filler words
QUESTION_TEMPLATES = {
    "train": [
        "what color is the {s} ?",
        "which color does the {s} have ?",
        "the {s} is what color ?",
        "tell me the color of the {s} .",
        "what is the color of the {s} ?",
        "name the color that the {s} has .",
    ],
    "dev": [
        "the color of the {s} is what ?",
        "which is the color of the {s} ?",
    ],
    "test": [
        "what color does the {s} have ?",
        "tell me what color the {s} is .",
    ],
}
YES_NO_TEMPLATES = {
    "train": ["is the {s} {a} ?", "is the color of the {s} {a} ?", "does the {s} have {a} color ?"],
    "dev": ["the {s} is {a} , is it ?"],
    "test": ["is it true the {s} is {a} ?"],
}
FTR_FIXED = ["a {s} can be {a} .", "every {s} comes in {a} ."]
FTR_VARIABLE = ["this {s} was painted {a} .", "this {s} is {a} today ."]

FILLER = sorted({w for group in (QUESTION_TEMPLATES, YES_NO_TEMPLATES) for ts in group.values()
                 for t in ts for w in t.split() if not w.startswith("{")}
                | {w for t in FTR_FIXED + FTR_VARIABLE for w in t.split() if not w.startswith("{")}
                | {"yes", "no", ",", "or"})


def subject_names(n: int) -> list[str]:
    names = []
    for a in _SYLLABLES:
        for b in _SYLLABLES:
            names.append(a + b)
    if n > len(names):
        raise GenerationError(f"at most {len(names)} subjects supported")
    return names[:n]


def _fill(template: str, s: str, a: Sequence[str] = ()) -> list[str]:
    out = []
    for w in template.split():
        if w == "{s}":
            out.append(s)
        elif w == "{a}":
            out.extend(a)
        else:
            out.append(w)
    return out


def _attribute_list(ids: Sequence[int]) -> list[str]:
    """``red``, ``red or blue``, ``red , blue or green`` ..."""
    words = [list(ATTRIBUTES[i]) for i in ids]
    out = words[0]
    for k, w in enumerate(words[1:], start=2):
        out = out + ([","] if k < len(words) else ["or"]) + w
    return out


def generate_dataset(spec: DatasetSpec, seed: int = 0) -> Dataset:
    """Build train/dev/test splits for a fact-lookup task.  Pure in (spec, seed).

    A fixed subject owns ``attributes_per_subject`` attributes; each question
    has exactly one of them among its candidates, and the rationale lists all
    of them, so a label reveals less about the subject than its rationale.
    """
    spec.validate()
    kind = TaskKind(spec.task_kind)
    rng = np.random.default_rng(seed)
    subjects = subject_names(spec.n_facts)
    n_attr = len(ATTRIBUTES)
    m = spec.attributes_per_subject
    table = np.stack([rng.permutation(n_attr)[:m] for _ in range(spec.n_facts)])
    n_amb = int(round(spec.ambiguous_fraction * spec.n_facts))
    ambiguous = np.zeros(spec.n_facts, dtype=bool)
    ambiguous[rng.permutation(spec.n_facts)[:n_amb]] = True

    def make(split: str) -> TaskInstance:
        s = int(rng.integers(spec.n_facts))
        if ambiguous[s]:
            owned = [int(rng.integers(n_attr))]
            ftr = _fill(FTR_VARIABLE[int(rng.integers(len(FTR_VARIABLE)))], subjects[s], _attribute_list(owned))
        else:
            owned = [int(a) for a in rng.permutation(table[s])]
            ftr = _fill(FTR_FIXED[int(rng.integers(len(FTR_FIXED)))], subjects[s], _attribute_list(owned))
        attr = owned[int(rng.integers(len(owned)))]
        if kind is TaskKind.YES_NO:
            asked = attr if rng.random() < 0.5 else int(rng.choice([a for a in range(n_attr) if a not in owned]))
            templates = YES_NO_TEMPLATES[split]
            q = _fill(templates[int(rng.integers(len(templates)))], subjects[s], ATTRIBUTES[asked])
            return TaskInstance(q, [["yes"], ["no"]], 0 if asked == attr else 1, ftr)
        others = rng.permutation([a for a in range(n_attr) if a not in owned])[: spec.n_choices - 1]
        order = rng.permutation(spec.n_choices)
        choice_ids = [attr] + [int(o) for o in others]
        choice_ids = [choice_ids[i] for i in order]
        templates = QUESTION_TEMPLATES[split]
        q = _fill(templates[int(rng.integers(len(templates)))], subjects[s])
        return TaskInstance(q, [list(ATTRIBUTES[c]) for c in choice_ids], int(np.flatnonzero(order == 0)[0]), ftr)

    splits = {name: [make(name) for _ in range(n)]
              for name, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test))}
    words = FILLER + subjects + sorted({w for a in ATTRIBUTES for w in a})
    meta = {"seed": seed, **{k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(spec).items()},
            "ambiguous_subjects": [subjects[i] for i in np.flatnonzero(ambiguous)]}
    return Dataset(splits["train"], splits["dev"], splits["test"], Vocabulary.build(words), meta)


# ---------------------------------------------------------------------------
# reference solvers

ATTRIBUTE_WORDS = frozenset(w for a in ATTRIBUTES for w in a)
YES_NO = [["yes"], ["no"]]


def _attribute_words(tokens: Sequence[str]) -> list[str]:
    return [w for w in tokens if w in ATTRIBUTE_WORDS]


def _attribute_runs(tokens: Sequence[str]) -> list[list[str]]:
    """Maximal runs of attribute words: ``dark red , blue`` -> [[dark, red], [blue]]."""
    runs: list[list[str]] = []
    current: list[str] = []
    for w in list(tokens) + [""]:
        if w in ATTRIBUTE_WORDS:
            current.append(w)
        elif current:
            runs.append(current)
            current = []
    return runs


def rationale_oracle(instance: TaskInstance) -> int:
    """Read the stated attributes off the rationale and match them to a candidate."""
    stated = _attribute_runs(instance.ftr)
    if instance.candidates == YES_NO:
        return 0 if _attribute_words(instance.question) in stated else 1
    for i, c in enumerate(instance.candidates):
        if c in stated:
            return i
    return -1


class QuestionFrequencyOracle:
    """Answer from the question alone: the attribute most often gold for the
    same subject in training."""

    def __init__(self, train: Sequence[TaskInstance], subjects: Sequence[str]):
        self.subjects = set(subjects)
        self.counts: dict[tuple[str, tuple[str, ...]], int] = {}
        for inst in train:
            if inst.candidates == YES_NO:
                if inst.gold_index != 0:
                    continue
                attr = tuple(_attribute_words(inst.question))
            else:
                attr = tuple(inst.candidates[inst.gold_index])
            key = (self._subject(inst), attr)
            self.counts[key] = self.counts.get(key, 0) + 1

    def _subject(self, inst: TaskInstance) -> str:
        return next(w for w in inst.question if w in self.subjects)

    def predict(self, inst: TaskInstance) -> int:
        s = self._subject(inst)
        if inst.candidates == YES_NO:
            seen = {a: c for (subj, a), c in self.counts.items() if subj == s}
            if not seen:
                return 1
            best = max(sorted(seen), key=seen.get)
            return 0 if best == tuple(_attribute_words(inst.question)) else 1
        scores = [self.counts.get((s, tuple(c)), 0) for c in inst.candidates]
        return int(np.argmax(scores))


def accuracy_of(predict, instances: Sequence[TaskInstance]) -> float:
    if not instances:
        return 0.0
    return float(np.mean([predict(i) == i.gold_index for i in instances]))


# ---------------------------------------------------------------------------
# corruption (training split only)

def corrupt_replace(dataset: Dataset, seed: int) -> Dataset:
    """Replace every rationale token by a uniformly drawn non-reserved token."""
    rng = np.random.default_rng(seed)
    content = dataset.vocab.tokens[len(RESERVED):]
    train = [replace(inst, ftr=[content[int(rng.integers(len(content)))] for _ in inst.ftr])
             for inst in dataset.train]
    return replace(dataset, train=train, meta={**dataset.meta, "ftr_type": "replace"})


def corrupt_shuffle(dataset: Dataset, seed: int, max_tries: int = 100) -> Dataset:
    """Permute rationales across training instances, preferring a derangement."""
    n = len(dataset.train)
    if n < 2:
        raise CorruptionError("shuffling needs at least two training instances")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    for _ in range(max_tries - 1):
        if not (perm == np.arange(n)).any():
            break
        perm = rng.permutation(n)
    train = [replace(inst, ftr=list(dataset.train[int(j)].ftr)) for inst, j in zip(dataset.train, perm)]
    return replace(dataset, train=train, meta={**dataset.meta, "ftr_type": "shuffle"})


def subsample_train(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep the first ceil(fraction * n) training instances of a seeded shuffle."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    order = np.random.default_rng(seed).permutation(len(dataset.train))
    k = max(1, math.ceil(fraction * len(dataset.train)))
    return replace(dataset, train=[dataset.train[int(i)] for i in order[:k]])


# ---------------------------------------------------------------------------
# input/output modes

class Mode(str, Enum):
    I_O = "I->O"
    IR_O = "IR->O"
    I_OR = "I->OR"
    I_RO = "I->RO"

    @classmethod
    def parse(cls, text) -> Mode:
        if isinstance(text, Mode):
            return text
        norm = str(text).strip().upper().replace("→", "->")
        if norm in cls.__members__:
            return cls[norm]
        for m in cls:
            if m.value == norm.replace(" ", ""):
                return m
        raise ModeError(f"unknown mode {text!r}")

    @property
    def generative(self) -> bool:
        return self in (Mode.I_OR, Mode.I_RO)


@dataclass
class ModeEncoding:
    mode: Mode
    encoder_input: list[int]
    segment: list[int]
    decoder_target: list[int] | None = None
    candidates: list[list[int]] | None = None


def encode_for_mode(instance: TaskInstance, mode, vocab: Vocabulary) -> ModeEncoding:
    mode = Mode.parse(mode)
    x = vocab.encode(instance.question)
    if mode is Mode.IR_O:
        r = vocab.encode(instance.ftr)
        ids = x + [SEP_ID] + r
        seg = [int(Segment.TASK_INPUT)] * len(x) + [int(Segment.FTR)] * (len(r) + 1)
    else:
        ids, seg = x, [int(Segment.TASK_INPUT)] * len(x)
    cands = [vocab.encode(c) for c in instance.candidates]
    if not mode.generative:
        return ModeEncoding(mode, ids, seg, None, cands)
    y = cands[instance.gold_index]
    r = vocab.encode(instance.ftr)
    target = y + [SEP_ID] + r if mode is Mode.I_OR else r + [SEP_ID] + y
    return ModeEncoding(mode, ids, seg, target, cands)


def parse_generated_label(tokens: Sequence[int], candidates: Sequence[Sequence[int]], mode) -> int | None:
    """Index of the candidate spelled out by a generated sequence, or None."""
    mode = Mode.parse(mode)
    if not mode.generative:
        raise ModeError("label parsing applies to generative modes only")
    toks = list(tokens)
    if END_ID in toks:
        toks = toks[: toks.index(END_ID)]
    if SEP_ID in toks:
        if mode is Mode.I_OR:
            seg = toks[: toks.index(SEP_ID)]
        else:
            seg = toks[len(toks) - toks[::-1].index(SEP_ID):]
    else:
        seg = toks
    for i, c in enumerate(candidates):
        if list(c) == seg:
            return i
    return None
