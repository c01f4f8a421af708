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
# # A small ablation grid
#
# Rationale corruption against the gold rationale, two seeds, reduced
# dataset.  The full-size version is `rationale_distill grid --grid ftr_type`.

# %%
from rationale_distill.data import DatasetSpec, generate_dataset
from rationale_distill.grid import TeacherCache, ftr_type_grid, report, run_grid, summaries_from_results
from rationale_distill.harness import Hyper, RunConfig

# %%
ds = generate_dataset(DatasetSpec(n_train=400, n_dev=100, n_test=100, n_facts=48), seed=0)
base = RunConfig(hyper=Hyper(epochs=10, patience=3))
cells = [c for c in ftr_type_grid(base) if c.group in ("Student (In)", "Teacher")]
print(len(cells), "cells:", [c.key for c in cells])

# %%
results = run_grid(cells, ds, seeds=(0, 1), teachers=TeacherCache(ds))
print(report(summaries_from_results(results)))

# %% [markdown]
# The same table as CSV, for a spreadsheet.

# %%
print(report(summaries_from_results(results), fmt="csv"))
