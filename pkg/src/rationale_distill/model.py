"""Small encoder-decoder transformer with injectable cross-attention masks.

Pre-norm residual blocks, learned absolute positions, GELU feed-forward,
shared token embedding for encoder, decoder and the (tied) output head.
All forward passes are batched internally; the single-sequence helpers
:func:`encode`, :func:`decode` and :func:`greedy_decode` wrap them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, read_keyvalue, save_arrays, write_keyvalue
from .tensor import DegenerateMaskError, ShapeError, Tensor

PAD_ID, START_ID, END_ID, SEP_ID, UNK_ID = 0, 1, 2, 3, 4


class Segment(IntEnum):
    TASK_INPUT = 0
    FTR = 1
    PAD = 2


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{f.name: int(d[f.name]) for f in fields(cls) if f.name in d})


PRESETS = {
    "base": dict(d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=128),
    "large": dict(d_model=128, n_heads=4, n_enc_layers=3, n_dec_layers=3, d_ff=256),
}


def preset(name: str, vocab_size: int, max_seq_len: int = 64, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, **{**PRESETS[name], **overrides})


@dataclass
class EncoderOutput:
    states: Tensor
    segment: np.ndarray

    @property
    def n_x(self) -> int:
        return int((self.segment == Segment.TASK_INPUT).sum())

    @property
    def n_r(self) -> int:
        return int((self.segment == Segment.FTR).sum())

    @property
    def task_input_states(self) -> Tensor:
        return self.states[: self.n_x]

    @property
    def ftr_states(self) -> Tensor:
        return self.states[self.n_x: self.n_x + self.n_r]


@dataclass
class DecoderOutput:
    states: Tensor
    logits: Tensor


@dataclass
class CrossAttnMask:
    visible: np.ndarray


def build_bottleneck_mask(segment: Sequence[int], bottleneck_on: bool) -> CrossAttnMask:
    seg = np.asarray(segment, dtype=np.int64)
    if seg.size == 0 or not (seg == Segment.TASK_INPUT).any():
        raise DegenerateMaskError("cross-attention mask needs at least one task-input position")
    if bottleneck_on:
        visible = seg == Segment.TASK_INPUT
    else:
        visible = seg != Segment.PAD
    return CrossAttnMask(visible)


def _bottleneck_visible(segment: np.ndarray, bottleneck_on: bool) -> np.ndarray:
    seg = np.asarray(segment)
    return seg == Segment.TASK_INPUT if bottleneck_on else seg != Segment.PAD


class ExternalHead:
    """Output head borrowed from another model: project, then score against a
    frozen embedding table (used when student and teacher widths differ)."""

    def __init__(self, weight: Tensor, bias: Tensor, embedding: np.ndarray):
        self.weight = weight
        self.bias = bias
        self.embedding = Tensor(embedding)  # shares storage, never trained here

    def __call__(self, states: Tensor) -> Tensor:
        h = T.add_bias(states @ self.weight, self.bias)
        scale = self.embedding.shape[1] ** -0.5
        return T.scale(h @ T.transpose(self.embedding), scale)


class Seq2SeqLM:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.head: ExternalHead | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def clone(self) -> Seq2SeqLM:
        other = Seq2SeqLM(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                        for k, v in self.params.items()})
        return other

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    # ---- building blocks
    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"])

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, hidden: np.ndarray) -> Tensor:
        n, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h

        def heads(x, t, name):
            return T.transpose(T.reshape(x @ self.params[f"{prefix}.{name}"], (n, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, tq, "wq"), heads(xkv, tk, "wk"), heads(xkv, tk, "wv")
        scores = T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(dh))
        probs = T.softmax_last(scores, np.broadcast_to(hidden[:, None, :, :], scores.shape))
        ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (n, tq, d))
        return ctx @ self.params[f"{prefix}.wo"]

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        hid = T.gelu(T.add_bias(x @ p[prefix + ".w1"], p[prefix + ".b1"]))
        return T.add_bias(hid @ p[prefix + ".w2"], p[prefix + ".b2"])

    def _embed(self, ids: np.ndarray, table: str) -> Tensor:
        b, length = ids.shape
        if length > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence of length {length} exceeds max_seq_len={self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise T.VocabularyError("token id outside vocabulary")
        tok = T.take(self.params["embed.tokens"], ids, axis=0)
        pos = T.take(self.params[table], np.broadcast_to(np.arange(length), (b, length)), axis=0)
        return tok + pos

    # ---- batched passes
    def encode_batch(self, ids: np.ndarray, segment: np.ndarray) -> Tensor:
        """Final encoder states, shape (B, L, d_model)."""
        ids = np.asarray(ids, dtype=np.int64)
        segment = np.asarray(segment, dtype=np.int64)
        if ids.shape != segment.shape:
            raise ShapeError(f"ids {ids.shape} and segment {segment.shape} differ")
        pad = segment == Segment.PAD
        if pad.all(axis=-1).any():
            raise DegenerateMaskError("encoder input consisting only of padding")
        hidden = np.broadcast_to(pad[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        x = self._embed(ids, "embed.enc_positions")
        for i in range(self.config.n_enc_layers):
            pre = f"encoder.layer{i}"
            x = x + self._self_attn(pre + ".attn", self._ln(x, pre + ".ln1"), hidden)
            x = x + self._ffn(self._ln(x, pre + ".ln2"), pre + ".ffn")
        return self._ln(x, "encoder.final_ln")

    def _self_attn(self, prefix: str, x: Tensor, hidden: np.ndarray) -> Tensor:
        return self._attention(prefix, x, x, hidden)

    def decode_batch(self, dec_ids: np.ndarray, memory: Tensor, visible: np.ndarray) -> tuple[Tensor, Tensor]:
        """Teacher-forced decoder pass.

        ``dec_ids`` (N, T) start with the start token and are right-padded with
        PAD; ``memory`` (N, L, d) are encoder states; ``visible`` (N, L) marks
        encoder positions the cross-attention may read.  Returns final decoder
        states (N, T, d) and logits (N, T, V).
        """
        dec_ids = np.asarray(dec_ids, dtype=np.int64)
        visible = np.asarray(visible, dtype=bool)
        n, t = dec_ids.shape
        if memory.shape[0] != n or visible.shape != memory.shape[:2]:
            raise ShapeError(f"mask {visible.shape} does not match encoder states {memory.shape[:2]}")
        if not visible.any(axis=-1).all():
            raise DegenerateMaskError("cross-attention mask hides every encoder position")
        pad = dec_ids == PAD_ID
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        self_hidden = causal[None, :, :] | pad[:, None, :]
        cross_hidden = np.broadcast_to(~visible[:, None, :], (n, t, visible.shape[1]))
        x = self._embed(dec_ids, "embed.dec_positions")
        for i in range(self.config.n_dec_layers):
            pre = f"decoder.layer{i}"
            x = x + self._self_attn(pre + ".self_attn", self._ln(x, pre + ".ln1"), self_hidden)
            x = x + self._attention(pre + ".cross_attn", self._ln(x, pre + ".ln2"), memory, cross_hidden)
            x = x + self._ffn(self._ln(x, pre + ".ln3"), pre + ".ffn")
        states = self._ln(x, "decoder.final_ln")
        return states, self.lm_head(states)

    def lm_head(self, states: Tensor) -> Tensor:
        if self.head is not None:
            return self.head(states)
        emb = self.params["embed.tokens"]
        return T.scale(states @ T.transpose(emb), self.config.d_model ** -0.5)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, ff = config.d_model, config.d_ff
    params: dict[str, np.ndarray] = {}
    resid_scale = 1.0 / math.sqrt(2 * (config.n_enc_layers + config.n_dec_layers))

    def lin(fan_in, fan_out, s=1.0):
        return rng.normal(0.0, s / math.sqrt(fan_in), size=(fan_in, fan_out))

    def ln(prefix):
        params[prefix + ".gain"] = np.ones(d)
        params[prefix + ".bias"] = np.zeros(d)

    def attn(prefix):
        for w in ("wq", "wk", "wv"):
            params[f"{prefix}.{w}"] = lin(d, d)
        params[f"{prefix}.wo"] = lin(d, d, resid_scale)

    def ffn(prefix):
        params[prefix + ".w1"] = lin(d, ff)
        params[prefix + ".b1"] = np.zeros(ff)
        params[prefix + ".w2"] = lin(ff, d, resid_scale)
        params[prefix + ".b2"] = np.zeros(d)

    params["embed.tokens"] = rng.normal(0.0, 1.0, size=(config.vocab_size, d))
    params["embed.enc_positions"] = rng.normal(0.0, 0.1, size=(config.max_seq_len, d))
    params["embed.dec_positions"] = rng.normal(0.0, 0.1, size=(config.max_seq_len, d))
    for i in range(config.n_enc_layers):
        pre = f"encoder.layer{i}"
        ln(pre + ".ln1")
        attn(pre + ".attn")
        ln(pre + ".ln2")
        ffn(pre + ".ffn")
    ln("encoder.final_ln")
    for i in range(config.n_dec_layers):
        pre = f"decoder.layer{i}"
        ln(pre + ".ln1")
        attn(pre + ".self_attn")
        ln(pre + ".ln2")
        attn(pre + ".cross_attn")
        ln(pre + ".ln3")
        ffn(pre + ".ffn")
    ln("decoder.final_ln")
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# single-sequence API


def encode(input_ids: Sequence[int], segment: Sequence[int], model: Seq2SeqLM) -> EncoderOutput:
    if len(input_ids) != len(segment):
        raise ShapeError("input_ids and segment lengths differ")
    if len(input_ids) > model.config.max_seq_len:
        raise SequenceLengthError(f"input of length {len(input_ids)} exceeds max_seq_len")
    seg = np.asarray(segment, dtype=np.int64)
    states = model.encode_batch(np.asarray([input_ids]), seg[None, :])
    return EncoderOutput(T.reshape(states, states.shape[1:]), seg)


def decode(target_ids: Sequence[int], enc: EncoderOutput, mask: CrossAttnMask, model: Seq2SeqLM) -> DecoderOutput:
    visible = np.asarray(mask.visible, dtype=bool)
    if visible.shape[0] != enc.states.shape[0]:
        raise ShapeError(f"mask length {visible.shape[0]} != encoder length {enc.states.shape[0]}")
    if not target_ids or target_ids[0] != START_ID:
        raise ValueError("decoder input must begin with the start token")
    memory = T.reshape(enc.states, (1,) + enc.states.shape)
    states, logits = model.decode_batch(np.asarray([target_ids]), memory, visible[None, :])
    return DecoderOutput(T.reshape(states, states.shape[1:]), T.reshape(logits, logits.shape[1:]))


def greedy_decode_batch(model: Seq2SeqLM, memory: Tensor, visible: np.ndarray, max_len: int) -> list[list[int]]:
    """Argmax decoding without caching; each output stops at (and includes) END."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    n = memory.shape[0]
    seqs = np.full((n, 1), START_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out: list[list[int]] = [[] for _ in range(n)]
    with T.no_grad():
        for _ in range(max_len):
            if seqs.shape[1] > model.config.max_seq_len:
                break
            _, logits = model.decode_batch(seqs, memory, visible)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            for i in np.flatnonzero(~done):
                out[i].append(int(nxt[i]))
                if nxt[i] == END_ID:
                    done[i] = True
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def greedy_decode(enc: EncoderOutput, mask: CrossAttnMask, model: Seq2SeqLM, max_len: int) -> list[int]:
    memory = T.reshape(enc.states, (1,) + enc.states.shape)
    return greedy_decode_batch(model, memory, np.asarray(mask.visible, dtype=bool)[None, :], max_len)[0]


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: Seq2SeqLM) -> None:
    path = Path(path)
    save_arrays(path, {k: v.data for k, v in model.params.items()})
    write_keyvalue(path / "config.txt", model.config.to_dict())


def load_model(path) -> Seq2SeqLM:
    path = Path(path)
    config = ModelConfig.from_dict(read_keyvalue(path / "config.txt"))
    arrays = load_arrays(path)
    return Seq2SeqLM(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
