"""Teacher-forced candidate scoring.

Each candidate label is fed to the decoder behind the start token; its score
``rho`` is the mean log-probability of its tokens.  Scores are turned into a
distribution over candidates with a softmax, and the task loss is the
cross-entropy of that distribution against the gold candidate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import (
    PAD_ID,
    START_ID,
    DecoderOutput,
    Segment,
    SEP_ID,
    Seq2SeqLM,
    _bottleneck_visible,
)
from .tensor import Tensor


class AlignmentError(ValueError):
    """Decoder rows do not line up with label tokens (or states across models)."""


class LabelError(IndexError):
    pass


@dataclass
class LabelScore:
    rho: np.ndarray
    prob: np.ndarray
    predicted_index: int


@dataclass
class TargetDistribution:
    one_hot: np.ndarray

    @classmethod
    def for_gold(cls, gold_index: int, n: int) -> TargetDistribution:
        if not 0 <= gold_index < n:
            raise LabelError(f"gold index {gold_index} outside {n} candidates")
        v = np.zeros(n)
        v[gold_index] = 1.0
        return cls(v)

    @property
    def gold_index(self) -> int:
        return int(np.argmax(self.one_hot))


def build_encoder_input(x: Sequence[int], ftr: Sequence[int] | None = None) -> tuple[list[int], list[int]]:
    """``x`` alone, or ``x SEP r`` with the separator tagged as rationale."""
    ids = list(x)
    seg = [Segment.TASK_INPUT] * len(ids)
    if ftr is not None:
        ids += [SEP_ID] + list(ftr)
        seg += [Segment.FTR] * (len(ftr) + 1)
    return ids, [int(s) for s in seg]


def pad_encoder_inputs(rows: Sequence[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(ids) for ids, _ in rows)
    ids = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    seg = np.full((len(rows), length), int(Segment.PAD), dtype=np.int64)
    for i, (r_ids, r_seg) in enumerate(rows):
        ids[i, : len(r_ids)] = r_ids
        seg[i, : len(r_seg)] = r_seg
    return ids, seg


@dataclass
class CandidateBatch:
    """All candidates of a group of instances flattened into decoder rows."""

    dec_in: np.ndarray       # (N, T) start-shifted label tokens
    targets: np.ndarray      # (N, T) label tokens, PAD beyond each label
    token_mask: np.ndarray   # (N, T) True on label positions
    owner: np.ndarray        # (N,) instance of each row
    slot_index: np.ndarray   # (B, C) row index per candidate slot, N for empty
    slot_mask: np.ndarray    # (B, C) True where the slot is empty

    @property
    def n_rows(self) -> int:
        return self.dec_in.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.token_mask.sum(axis=1)

    @classmethod
    def build(cls, candidates: Sequence[Sequence[Sequence[int]]]) -> CandidateBatch:
        flat = [(b, list(y)) for b, ys in enumerate(candidates) for y in ys]
        if any(len(y) == 0 for _, y in flat):
            raise AlignmentError("empty candidate label")
        n = len(flat)
        t = max(len(y) for _, y in flat)
        dec_in = np.full((n, t), PAD_ID, dtype=np.int64)
        targets = np.full((n, t), PAD_ID, dtype=np.int64)
        token_mask = np.zeros((n, t), dtype=bool)
        owner = np.empty(n, dtype=np.int64)
        for i, (b, y) in enumerate(flat):
            dec_in[i, 0] = START_ID
            dec_in[i, 1: len(y)] = y[:-1]
            targets[i, : len(y)] = y
            token_mask[i, : len(y)] = True
            owner[i] = b
        c = max(len(ys) for ys in candidates)
        slot_index = np.full((len(candidates), c), n, dtype=np.int64)
        row = 0
        for b, ys in enumerate(candidates):
            slot_index[b, : len(ys)] = np.arange(row, row + len(ys))
            row += len(ys)
        return cls(dec_in, targets, token_mask, owner, slot_index, slot_index == n)

    def token_weights(self) -> np.ndarray:
        """1/n_y on each label position: summing log-probs with these gives rho."""
        return self.token_mask / self.lengths[:, None]


@dataclass
class ScoredBatch:
    enc_states: Tensor   # (B, L, d)
    dec_states: Tensor   # (N, T, d)
    logits: Tensor       # (N, T, V)
    rho: Tensor          # (N,)
    log_prob: Tensor     # (B, C) log P(y_i | x); -inf on empty slots
    cands: CandidateBatch

    def label_scores(self) -> list[LabelScore]:
        rho = self.rho.data
        lp = self.log_prob.data
        out = []
        for b in range(lp.shape[0]):
            keep = ~self.cands.slot_mask[b]
            r = rho[self.cands.slot_index[b, keep]]
            p = np.exp(lp[b, keep])
            out.append(LabelScore(r, p, int(np.argmax(r))))
        return out

    def predictions(self) -> np.ndarray:
        return np.array([s.predicted_index for s in self.label_scores()], dtype=np.int64)


def rho_from_logits(logits: Tensor, cands: CandidateBatch) -> Tensor:
    lp = T.gather_logprob(logits, cands.targets)
    return T.sum_last(lp * Tensor(cands.token_weights()))


def candidate_log_probs(rho: Tensor, cands: CandidateBatch) -> Tensor:
    padded = T.concat([rho, Tensor(np.zeros(1))], axis=0)
    return T.log_softmax_last(T.take(padded, cands.slot_index, axis=0), cands.slot_mask)


def score_batch(model: Seq2SeqLM, enc_ids: np.ndarray, enc_seg: np.ndarray,
                cands: CandidateBatch, bottleneck_on: bool) -> ScoredBatch:
    """One encoder pass per instance, one teacher-forced decode per candidate."""
    enc = model.encode_batch(enc_ids, enc_seg)
    memory = T.take(enc, cands.owner, axis=0)
    visible = _bottleneck_visible(enc_seg, bottleneck_on)[cands.owner]
    dec_states, logits = model.decode_batch(cands.dec_in, memory, visible)
    rho = rho_from_logits(logits, cands)
    return ScoredBatch(enc, dec_states, logits, rho, candidate_log_probs(rho, cands), cands)


def batch_task_loss(scored: ScoredBatch, gold: Sequence[int]) -> Tensor:
    """Mean cross-entropy against the gold candidate over the batch."""
    gold = np.asarray(gold, dtype=np.int64)
    b, c = scored.log_prob.shape
    if gold.shape != (b,) or (gold < 0).any() or (gold >= c).any() or scored.cands.slot_mask[np.arange(b), gold].any():
        raise LabelError("gold index out of range")
    picked = T.take_last(scored.log_prob, gold[:, None])
    return T.scale(T.sum_all(picked), -1.0 / b)


# ---------------------------------------------------------------------------
# single-instance API


def score_label(dec: DecoderOutput, y_tokens: Sequence[int]) -> Tensor:
    """Mean log-probability of ``y_tokens`` under teacher-forced decoder logits."""
    y = [t for t in y_tokens if t != PAD_ID]
    if len(y) == 0:
        raise AlignmentError("label has no tokens")
    if dec.logits.shape[0] != len(y):
        raise AlignmentError(f"{dec.logits.shape[0]} decoder rows for a {len(y)}-token label")
    return T.mean_all(T.gather_logprob(dec.logits, y))


def normalize(rho) -> Tensor:
    r = rho if isinstance(rho, Tensor) else Tensor(rho)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need a vector of at least two candidate scores")
    if not np.isfinite(r.data).all():
        raise FloatingPointError("candidate scores must be finite")
    return T.softmax_last(r)


def task_loss(prob: Tensor, target: TargetDistribution | int) -> Tensor:
    gold = target if isinstance(target, int) else target.gold_index
    if not 0 <= gold < prob.shape[0]:
        raise LabelError(f"gold index {gold} outside {prob.shape[0]} candidates")
    return T.neg(T.log(prob[gold]))


def classify(model: Seq2SeqLM, x_tokens: Sequence[int], candidates: Sequence[Sequence[int]],
             ftr_tokens: Sequence[int] | None = None, bottleneck_on: bool = True) -> LabelScore:
    if len(candidates) < 2:
        raise ValueError("need at least two candidates")
    ids, seg = pad_encoder_inputs([build_encoder_input(x_tokens, ftr_tokens)])
    with T.no_grad():
        scored = score_batch(model, ids, seg, CandidateBatch.build([candidates]), bottleneck_on)
    return scored.label_scores()[0]
