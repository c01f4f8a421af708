from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from rationale_distill.data import (
    RESERVED,
    CorruptionError,
    Dataset,
    DatasetSpec,
    GenerationError,
    Mode,
    ModeError,
    QuestionFrequencyOracle,
    TaskInstance,
    TaskKind,
    Vocabulary,
    accuracy_of,
    corrupt_replace,
    corrupt_shuffle,
    encode_for_mode,
    generate_dataset,
    parse_generated_label,
    rationale_oracle,
    subject_names,
    subsample_train,
)
from rationale_distill.model import END_ID, SEP_ID, Segment

SMALL = DatasetSpec(n_train=300, n_dev=80, n_test=80, n_facts=40, attributes_per_subject=2, ambiguous_fraction=0.3)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(SMALL, seed=0)


def test_deterministic(ds, tmp_path):
    again = generate_dataset(SMALL, seed=0)
    ds.save(tmp_path / "a")
    again.save(tmp_path / "b")
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = generate_dataset(SMALL, seed=1)
    assert [i.to_json() for i in other.train] != [i.to_json() for i in ds.train]


def test_round_trip(ds, tmp_path):
    ds.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert back.vocab == ds.vocab
    assert back.meta == ds.meta
    for name in ("train", "dev", "test"):
        assert back.split(name) == ds.split(name)


def test_invalid_specs():
    for bad in (dict(n_facts=3, n_choices=4), dict(n_choices=1), dict(ambiguous_fraction=1.5),
                dict(attributes_per_subject=0), dict(attributes_per_subject=22)):
        with pytest.raises(GenerationError):
            generate_dataset(replace(SMALL, **bad))
    with pytest.raises(GenerationError):
        subject_names(10_000)
    with pytest.raises(GenerationError):
        TaskInstance(["q"], [["a"]], 0, ["r"])


@pytest.mark.parametrize("kind", list(TaskKind))
def test_rationale_oracle_is_perfect(kind):
    data = generate_dataset(replace(SMALL, task_kind=kind), seed=3)
    for split in ("train", "dev", "test"):
        assert accuracy_of(rationale_oracle, data.split(split)) == 1.0


def test_question_only_oracle_is_worse(ds):
    oracle = QuestionFrequencyOracle(ds.train, subject_names(SMALL.n_facts))
    for split in ("dev", "test"):
        assert accuracy_of(oracle.predict, ds.split(split)) < accuracy_of(rationale_oracle, ds.split(split))


def test_instances_well_formed(ds):
    for inst in ds.train + ds.dev + ds.test:
        assert len(inst.candidates) == SMALL.n_choices
        assert len({tuple(c) for c in inst.candidates}) == SMALL.n_choices
        assert inst.ftr
        assert all(ds.vocab.index.get(w) is not None for w in inst.question + inst.ftr)


def test_splits_disjoint_in_phrasing(ds):
    def frames(split):
        subjects = set(subject_names(SMALL.n_facts))
        return {tuple("_" if w in subjects else w for w in i.question) for i in ds.split(split)}

    assert not frames("train") & frames("dev")
    assert not frames("train") & frames("test")
    assert not frames("dev") & frames("test")


def test_vocabulary():
    v = Vocabulary.build(["b", "a", "b"])
    assert v.tokens[: len(RESERVED)] == list(RESERVED)
    assert v.encode(["a", "zzz"]) == [v.index["a"], RESERVED.index("<unk>")]
    assert v.decode(v.encode(["a", "b"])) == ["a", "b"]
    with pytest.raises(ValueError):
        Vocabulary(["x"] + list(RESERVED))


def test_corrupt_replace(ds):
    bad = corrupt_replace(ds, seed=0)
    reserved = set(RESERVED)
    for a, b in zip(ds.train, bad.train):
        assert len(a.ftr) == len(b.ftr)
        assert (a.question, a.candidates, a.gold_index) == (b.question, b.candidates, b.gold_index)
        assert not reserved & set(b.ftr)
    assert bad.dev == ds.dev and bad.test == ds.test


def test_corrupt_replace_overlap_matches_chance(ds):
    n_content = len(ds.vocab) - len(RESERVED)
    overlaps = []
    for seed in range(5):
        bad = corrupt_replace(ds, seed)
        same = sum(x == y for a, b in zip(ds.train, bad.train) for x, y in zip(a.ftr, b.ftr))
        overlaps.append(same / sum(len(a.ftr) for a in ds.train))
    assert abs(np.mean(overlaps) - 1 / n_content) < 2.5 / n_content


def test_corrupt_shuffle(ds):
    bad = corrupt_shuffle(ds, seed=0)
    assert Counter(tuple(i.ftr) for i in bad.train) == Counter(tuple(i.ftr) for i in ds.train)
    assert all(a.question == b.question and a.gold_index == b.gold_index for a, b in zip(ds.train, bad.train))
    assert bad.dev == ds.dev and bad.test == ds.test
    # identity of position, not text: identical rationales may coincide by chance
    two = replace(ds, train=ds.train[:2])
    swapped = corrupt_shuffle(two, seed=0)
    assert swapped.train[0].ftr == ds.train[1].ftr and swapped.train[1].ftr == ds.train[0].ftr
    with pytest.raises(CorruptionError):
        corrupt_shuffle(replace(ds, train=ds.train[:1]), seed=0)


@pytest.mark.parametrize("corrupt", [corrupt_replace, corrupt_shuffle])
def test_corruption_commutes_with_splits(ds, corrupt):
    whole = corrupt(ds, seed=4)
    train_only = corrupt(replace(ds, dev=[], test=[]), seed=4)
    assert whole.train == train_only.train
    assert whole.dev == ds.dev and whole.test == ds.test


def test_subsample(ds):
    sub = subsample_train(ds, 0.1, seed=0)
    assert len(sub.train) == 30
    assert sub.train == subsample_train(ds, 0.1, seed=0).train
    assert all(i in ds.train for i in sub.train)
    assert sub.dev == ds.dev
    with pytest.raises(ValueError):
        subsample_train(ds, 0.0, seed=0)


def test_mode_parse():
    assert Mode.parse("I->O") is Mode.I_O
    assert Mode.parse("IR→O") is Mode.IR_O
    assert Mode.parse("i_ro") is Mode.I_RO
    with pytest.raises(ModeError):
        Mode.parse("O->I")


def test_encode_for_mode(ds):
    inst, v = ds.train[0], ds.vocab
    x, r, y = v.encode(inst.question), v.encode(inst.ftr), v.encode(inst.candidates[inst.gold_index])
    io = encode_for_mode(inst, "I->O", v)
    assert io.encoder_input == x and set(io.segment) == {Segment.TASK_INPUT}
    assert len(io.candidates) == len(inst.candidates)
    iro = encode_for_mode(inst, "IR->O", v)
    assert iro.encoder_input == x + [SEP_ID] + r
    assert iro.segment == [Segment.TASK_INPUT] * len(x) + [Segment.FTR] * (len(r) + 1)
    assert encode_for_mode(inst, "I->OR", v).decoder_target == y + [SEP_ID] + r
    target = encode_for_mode(inst, "I->RO", v).decoder_target
    assert target[0] == r[0] and target[-1] == y[-1]


def test_parse_generated_label():
    cands = [[10], [11, 12]]
    assert parse_generated_label([11, 12, SEP_ID, 7, 7, END_ID], cands, "I->OR") == 1
    assert parse_generated_label([7, 8, SEP_ID, 10, END_ID], cands, "I->RO") == 0
    assert parse_generated_label([7, SEP_ID, 8, SEP_ID, 11, 12], cands, "I->RO") == 1
    assert parse_generated_label([7, 8, 9], cands, "I->OR") is None
    assert parse_generated_label([10], cands, "I->RO") == 0
    with pytest.raises(ModeError):
        parse_generated_label([10], cands, "I->O")
