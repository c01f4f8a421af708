import numpy as np
import pytest

from rationale_distill import tensor as T
from rationale_distill.data import TaskInstance, Vocabulary
from rationale_distill.distill import (
    ConfigurationError,
    DataError,
    DistillConfig,
    LossBundle,
    LossWeights,
    ProjectionParams,
    StudentInit,
    Variant,
    init_student,
    kd_in_loss,
    kd_in_loss_batch,
    kd_out_loss,
    kd_out_loss_batch,
    project_states,
    student_forward,
    teacher_forward,
    total_loss,
)
from rationale_distill.model import DecoderOutput, EncoderOutput, ModelConfig, Seq2SeqLM
from rationale_distill.scoring import AlignmentError, CandidateBatch
from rationale_distill.tensor import ShapeError, Tensor

VOCAB = Vocabulary.build(["what", "is", "the", "bako", "?", "red", "dark", "blue", "every", "."])
INSTANCE = TaskInstance(["what", "is", "the", "bako", "?"], [["red"], ["dark", "blue"]], 0,
                        ["every", "bako", "is", "red", "."])
CFG = ModelConfig(vocab_size=len(VOCAB), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16,
                  max_seq_len=16)


def enc_out(rows, n_r=0):
    rows = np.asarray(rows, dtype=float)
    seg = np.array([0] * (len(rows) - n_r) + [1] * n_r)
    return EncoderOutput(Tensor(rows, requires_grad=True), seg)


def dec_out(rows):
    rows = np.asarray(rows, dtype=float)
    return DecoderOutput(Tensor(rows, requires_grad=True), Tensor(np.zeros((len(rows), 3))))


def test_kd_in_examples():
    assert kd_in_loss(enc_out([[1.0, 0.0]]), enc_out([[0.0, 1.0]])).item() == 1.0
    s, t = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert kd_in_loss(enc_out(s), enc_out(s)).item() == 0.0
    base = kd_in_loss(enc_out(s), enc_out(t)).item()
    assert kd_in_loss(enc_out(2 * s), enc_out(2 * t)).item() == pytest.approx(4 * base, rel=1e-14)
    with pytest.raises(AlignmentError):
        kd_in_loss(enc_out(s), enc_out(t[:2]))


def test_kd_in_ignores_teacher_rationale_rows():
    s = np.random.default_rng(1).normal(size=(3, 4))
    t = np.random.default_rng(2).normal(size=(5, 4))
    a = kd_in_loss(enc_out(s), enc_out(t, n_r=2)).item()
    t[3:] += 100.0
    assert kd_in_loss(enc_out(s), enc_out(t, n_r=2)).item() == a


def test_kd_out_examples():
    s1, s2 = np.zeros((1, 2)), np.zeros((2, 2))
    t1 = np.full((1, 2), np.sqrt(0.2))
    t2 = np.full((2, 2), np.sqrt(0.6))
    loss = kd_out_loss([dec_out(s1), dec_out(s2)], [dec_out(t1), dec_out(t2)]).item()
    assert loss == pytest.approx(0.4, abs=1e-15)
    assert kd_out_loss([dec_out(s1), dec_out(s2)], [dec_out(s1), dec_out(s2)]).item() == 0.0
    swapped = kd_out_loss([dec_out(s2), dec_out(s1)], [dec_out(t2), dec_out(t1)]).item()
    assert swapped == pytest.approx(loss, abs=1e-15)
    with pytest.raises(AlignmentError):
        kd_out_loss([dec_out(s1)], [dec_out(t1), dec_out(t2)])
    with pytest.raises(AlignmentError):
        kd_out_loss([dec_out(s1)], [dec_out(t2)])


def test_batched_losses_match_single():
    rng = np.random.default_rng(4)
    s_enc = rng.normal(size=(2, 6, 4))
    t_x = rng.normal(size=(2, 4, 4))
    n_x = np.array([4, 2])
    t_x[1, 2:] = 0.0
    batch = kd_in_loss_batch(Tensor(s_enc), t_x, n_x).item()
    single = np.mean([kd_in_loss(enc_out(s_enc[b, :n]), enc_out(t_x[b, :n])).item() for b, n in enumerate(n_x)])
    assert batch == pytest.approx(single, abs=1e-14)

    cands = CandidateBatch.build([[[5], [6, 7]], [[5, 6, 7]]])
    s_dec = rng.normal(size=(3, 3, 4))
    t_dec = rng.normal(size=(3, 3, 4))
    batch = kd_out_loss_batch(Tensor(s_dec), t_dec, cands).item()
    per_inst = []
    for b, rows in enumerate(([0, 1], [2])):
        n = [cands.lengths[r] for r in rows]
        per_inst.append(kd_out_loss([dec_out(s_dec[r, :k]) for r, k in zip(rows, n)],
                                    [dec_out(t_dec[r, :k]) for r, k in zip(rows, n)]).item())
    assert batch == pytest.approx(np.mean(per_inst), abs=1e-14)


def test_total_loss_examples():
    bundle = LossBundle(Tensor(1.0), Tensor(2.0), Tensor(3.0))
    assert total_loss(bundle, LossWeights(1, 1, 1)).item() == 6.0
    assert total_loss(bundle, LossWeights.teacher()).item() == 1.0
    assert total_loss(bundle, LossWeights.for_variant("in_out")).item() == 5.0
    assert total_loss(bundle, LossWeights(0.5, 0.0, 2.0)).item() == 0.5 + 6.0
    assert total_loss(LossBundle(kd_in=Tensor(2.0)), LossWeights.for_variant(Variant.IN)).item() == 2.0
    with pytest.raises(ConfigurationError):
        total_loss(LossBundle(kd_in=Tensor(2.0)), LossWeights.for_variant(Variant.OUT))
    with pytest.raises(ConfigurationError):
        LossWeights(0, 0, 0)
    with pytest.raises(ConfigurationError):
        LossWeights(-1, 1, 0)


def test_default_weights():
    assert LossWeights.for_variant(Variant.IN).as_tuple() == (0, 1, 0)
    assert LossWeights.for_variant(Variant.OUT).as_tuple() == (0, 0, 1)
    assert LossWeights.for_variant(Variant.IN_OUT, use_task_loss=True).as_tuple() == (1, 1, 1)
    assert DistillConfig(variant="out").loss_weights().as_tuple() == (0, 0, 1)


def test_projection():
    states = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    same = project_states(states, ProjectionParams.identity(4))
    np.testing.assert_array_equal(same.data, states.data)
    proj = ProjectionParams.init(4, 7, np.random.default_rng(1))
    assert project_states(states, proj).shape == (3, 7)
    with pytest.raises(ShapeError):
        project_states(Tensor(np.zeros((3, 5))), proj)
    T.backward(kd_in_loss(enc_out(states.data), enc_out(np.ones((3, 7))), projection=proj))
    assert np.abs(proj.weight.grad).max() > 0 and np.abs(proj.bias.grad).max() > 0


def test_forwards():
    teacher = Seq2SeqLM(CFG, seed=0)
    enc, decs, score = teacher_forward(teacher, INSTANCE, vocab=VOCAB)
    assert (enc.n_x, enc.n_r) == (5, 6)
    assert [d.states.shape[0] for d in decs] == [1, 2]
    with pytest.raises(DataError):
        teacher_forward(teacher, TaskInstance(INSTANCE.question, INSTANCE.candidates, 0, []), vocab=VOCAB)

    s_enc, _, s_score = student_forward(teacher, INSTANCE, vocab=VOCAB)
    other = TaskInstance(INSTANCE.question, INSTANCE.candidates, 0, ["every", "bako", "is", "blue", "."])
    s_enc2, _, s_score2 = student_forward(teacher, other, vocab=VOCAB)
    assert s_enc.n_x == 5 and s_enc.n_r == 0
    assert s_enc.states.data.tobytes() == s_enc2.states.data.tobytes()
    assert s_score.rho.tobytes() == s_score2.rho.tobytes()
    assert abs(s_score.prob.sum() - 1) < 1e-12


def test_teacher_with_empty_rationale_equals_student_at_init():
    teacher = Seq2SeqLM(CFG, seed=0)
    student, proj = init_student(teacher, DistillConfig())
    assert proj is None
    with T.no_grad():
        from rationale_distill.distill import _forward

        x, cands = VOCAB.encode(INSTANCE.question), [VOCAB.encode(c) for c in INSTANCE.candidates]
        _, _, t_score = _forward(teacher, x, cands, None, True)
        _, _, s_score = student_forward(student, INSTANCE, vocab=VOCAB)
    np.testing.assert_array_equal(t_score.rho, s_score.rho)


def test_student_step_leaves_teacher_unchanged():
    teacher = Seq2SeqLM(CFG, seed=0)
    teacher.freeze()
    before = teacher.checksum()
    student, _ = init_student(teacher, DistillConfig(variant="in_out"))
    assert all(student.params[k] is not teacher.params[k] for k in teacher.params)
    with T.no_grad():
        t_enc, t_decs, _ = teacher_forward(teacher, INSTANCE, vocab=VOCAB)
    s_enc, s_decs, _ = student_forward(student, INSTANCE, vocab=VOCAB)
    loss = total_loss(LossBundle(kd_in=kd_in_loss(s_enc, t_enc), kd_out=kd_out_loss(s_decs, t_decs)),
                      DistillConfig(variant="in_out").loss_weights())
    T.backward(loss)
    assert loss.item() > 0
    assert any(np.abs(p.grad).max() > 0 for p in student.params.values() if p.grad is not None)
    assert all(p.grad is None for p in teacher.params.values())
    assert teacher.checksum() == before


def test_init_student_errors_and_cross_dim():
    teacher = Seq2SeqLM(CFG, seed=0)
    small = ModelConfig(vocab_size=len(VOCAB), d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=8,
                        max_seq_len=16)
    with pytest.raises(ConfigurationError):
        init_student(teacher, DistillConfig(), small)
    student, proj = init_student(teacher, DistillConfig(student_init=StudentInit.RANDOM), small, seed=1)
    assert proj is not None and proj.enc.weight.shape == (8, 16) and proj.dec.weight.shape == (8, 16)
    teacher_storage = {id(p.data) for p in teacher.params.values()}
    assert not teacher_storage & {id(p.data) for p in student.params.values()}
    assert student.head.embedding.data is teacher.params["embed.tokens"].data
    _, decs, score = student_forward(student, INSTANCE, vocab=VOCAB)
    assert decs[0].logits.shape == (1, len(VOCAB))
    assert abs(score.prob.sum() - 1) < 1e-12
