# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Quickstart: teacher, student, baseline
#
# A small synthetic fact-lookup dataset, a rationale-conditioned teacher,
# and a student that only ever sees the question.  Sizes are cut down so
# the whole notebook runs in a few minutes on one core.

# %%
import numpy as np

from rationale_distill import tensor as T
from rationale_distill.data import DatasetSpec, generate_dataset
from rationale_distill.distill import DistillConfig
from rationale_distill.harness import Hyper, RunConfig, train_student, train_teacher, train_vanilla
from rationale_distill.model import Segment, build_bottleneck_mask
from rationale_distill.scoring import CandidateBatch, build_encoder_input, classify
from rationale_distill.tensor import Tensor

# %% [markdown]
# ## Data
#
# Each subject owns a few attributes.  The rationale lists all of them;
# the label reveals only one per question.

# %%
spec = DatasetSpec(n_train=600, n_dev=150, n_test=150, n_facts=64)
ds = generate_dataset(spec, seed=0)
inst = ds.train[0]
print("question :", " ".join(inst.question))
print("rationale:", " ".join(inst.ftr))
print("choices  :", [" ".join(c) for c in inst.candidates], "gold", inst.gold_index)

# %% [markdown]
# ## Teacher
#
# The teacher reads question and rationale, but its decoder can only
# attend to question positions.

# %%
hyper = Hyper(epochs=15, patience=3)
teacher = train_teacher(RunConfig(method="knife_teacher", mode="IR->O", hyper=hyper), ds, seed=0)
print(f"teacher (with rationales): dev {teacher.dev_acc:.3f} test {teacher.test_acc:.3f}")

# %% [markdown]
# The bottleneck in action: wrecking the rationale-position encoder states
# leaves the decoder's logits untouched.

# %%
x, r = ds.vocab.encode(inst.question), ds.vocab.encode(inst.ftr)
ids, seg = build_encoder_input(x, r)
seg = np.array(seg)
with T.no_grad():
    memory = teacher.model.encode_batch(np.array([ids]), seg[None]).data
    noisy = memory.copy()
    noisy[0, seg == Segment.FTR] += 10.0
    cb = CandidateBatch.build([[ds.vocab.encode(inst.candidates[0])]])
    vis = build_bottleneck_mask(seg, True).visible[None, :]
    _, a = teacher.model.decode_batch(cb.dec_in, Tensor(memory), vis)
    _, b = teacher.model.decode_batch(cb.dec_in, Tensor(noisy), vis)
print("max logit change under the bottleneck:", np.abs(a.data - b.data).max())

# %% [markdown]
# ## Student and baseline

# %%
student = train_student(RunConfig(method="knife_student", distill=DistillConfig(variant="in_out"), hyper=hyper),
                        ds, teacher.model, seed=0)
vanilla = train_vanilla(RunConfig(mode="I->O", hyper=hyper), ds, seed=0)
print(f"student In+Out : test {student.test_acc:.3f}")
print(f"vanilla I->O   : test {vanilla.test_acc:.3f}")

# %% [markdown]
# Scoring one question with the student: ρ per choice and the normalised
# probabilities.

# %%
q = ds.test[0]
score = classify(student.model, ds.vocab.encode(q.question), [ds.vocab.encode(c) for c in q.candidates])
for c, rho, p in zip(q.candidates, score.rho, score.prob):
    print(f"{' '.join(c):>14}  rho {rho:7.3f}  P {p:.3f}")
print("gold:", " ".join(q.candidates[q.gold_index]))

# %% [markdown]
# The run log records which losses were on.

# %%
print(student.log.to_csv().splitlines()[0])
print(hyper)
