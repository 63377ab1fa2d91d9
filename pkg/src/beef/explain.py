"""Explanation heads: cause classification, non-fusion baselines, and an
attention-LSTM sentence generator."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ops
from .fusion import BlockFusion, FusionConfig
from .nn import MLP, Linear, Module, xavier_uniform, zeros
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "classify_cause",
    "explain_loss",
    "explain_loss_from_logits",
    "BASELINE_VARIANTS",
    "MultiHeadBaseline",
    "baseline_multihead",
    "DecisionOnlyExplainer",
    "Vocabulary",
    "DecodeConfig",
    "LSTMCell",
    "lstm_cell",
    "additive_attention",
    "LanguageExplainer",
    "generate_explanation",
    "sequence_loss",
    "equally_spaced",
]

LOG_FLOOR = 1e-12


def classify_cause(m: Tensor, v: Tensor, fusion) -> Tensor:
    """Cause distribution ``softmax(fusion(m, v))`` (vector or row batch)."""
    logits = fusion(m, v)
    return ops.softmax(logits, axis=logits.ndim - 1)


def _label_mask(labels, n_classes: int, shape: tuple[int, ...], dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match predictions {shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"cause label outside [0, {n_classes})")
    mask = np.zeros(shape, dtype=dtype)
    np.put_along_axis(mask, labels[..., None], 1.0, axis=-1)
    return mask


def explain_loss(p_seq: Tensor, cause) -> tuple[Tensor, bool]:
    """``-(1/T) sum_t log p_t[c]`` over a window of distributions ``(T, d_c)``.

    ``cause`` is one class index for the whole window or one per frame.
    Probabilities below 1e-12 are clamped; the returned flag reports it.
    """
    if p_seq.ndim == 1:
        p_seq = p_seq.reshape(1, p_seq.shape[0])
    if p_seq.ndim != 2:
        raise ShapeError(f"explain_loss expects (T, d_c) distributions, got {p_seq.shape}")
    T, d_c = p_seq.shape
    labels = np.broadcast_to(np.asarray(cause, dtype=np.int64), (T,))
    mask = _label_mask(labels, d_c, p_seq.shape, p_seq.dtype)
    picked = ops.sum(ops.mul(p_seq, ops.constant(mask, like=p_seq)), axis=1)
    logp, clamped = ops.clamped_log(picked, LOG_FLOOR)
    return ops.scale(ops.sum(logp), -1.0 / T), clamped


def explain_loss_from_logits(logits: Tensor, labels) -> Tensor:
    """Same objective evaluated through ``log_softmax`` (stable for training)."""
    if logits.ndim != 2:
        raise ShapeError(f"expected (N, d_c) logits, got {logits.shape}")
    mask = _label_mask(labels, logits.shape[1], logits.shape, logits.dtype)
    logp = ops.log_softmax(logits, axis=1)
    return ops.scale(ops.sum(ops.mul(logp, ops.constant(mask, like=logits))), -1.0 / logits.shape[0])


BASELINE_VARIANTS = ("last_layer", "last_layer_plus_blinker", "layer3_mlp")


class MultiHeadBaseline(Module):
    """Cause head that never sees the decision vector.

    ``last_layer``: linear on ``r``; ``last_layer_plus_blinker``: linear on
    ``[r ; g]``; ``layer3_mlp``: two-layer perceptron on a pooled mid-level tap.
    """

    def __init__(self, variant: str, feature_dim: int, n_classes: int, rng: np.random.Generator,
                 goal_dim: int = 0, hidden_dim: int = 128):
        if variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown baseline {variant!r}; expected one of {BASELINE_VARIANTS}")
        if variant == "last_layer_plus_blinker" and goal_dim < 1:
            raise ValueError("blinker baseline needs goal_dim >= 1")
        self.variant = variant
        in_dim = feature_dim + (goal_dim if variant == "last_layer_plus_blinker" else 0)
        self.in_dim = in_dim
        if variant == "layer3_mlp":
            self.head = MLP(in_dim, hidden_dim, n_classes, rng)
        else:
            self.head = Linear(in_dim, n_classes, rng)

    def logits(self, features: Tensor, goal: Tensor | None = None) -> Tensor:
        if self.variant == "last_layer_plus_blinker":
            if goal is None:
                raise ValueError("blinker baseline needs the goal embedding")
            features = ops.concat([features, goal], axis=features.ndim - 1)
        if features.shape[-1] != self.in_dim:
            raise ShapeError(
                f"{self.variant} head expects features of width {self.in_dim}, got {features.shape}"
            )
        return self.head(features)

    def __call__(self, features: Tensor, goal: Tensor | None = None) -> Tensor:
        return baseline_multihead(features, self, goal)


def baseline_multihead(features: Tensor, head: MultiHeadBaseline, goal: Tensor | None = None) -> Tensor:
    logits = head.logits(features, goal)
    return ops.softmax(logits, axis=logits.ndim - 1)


class DecisionOnlyExplainer(Module):
    """Post-hoc explainer reading only the (detached) decision vector."""

    def __init__(self, dim_m: int, n_classes: int, rng: np.random.Generator, hidden_dim: int = 128):
        self.head = MLP(dim_m, hidden_dim, n_classes, rng)

    def logits(self, m: Tensor) -> Tensor:
        return self.head(ops.detach(m))

    def __call__(self, m: Tensor) -> Tensor:
        logits = self.logits(m)
        return ops.softmax(logits, axis=logits.ndim - 1)


# ----------------------------------------------------------------------------
# Natural-language explanations


class Vocabulary:
    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
    MAX_LEN = 20

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(self.RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid token {token!r}")
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sentences: Sequence[str]) -> "Vocabulary":
        tokens = sorted({w for s in sentences for w in s.lower().split()})
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: str | Sequence[str]) -> list[int]:
        """Token ids ending in eos; content is capped at 20 tokens."""
        words = sentence.lower().split() if isinstance(sentence, str) else list(sentence)
        if len(words) > self.MAX_LEN:
            raise ValueError(f"sentence has {len(words)} tokens; the limit is {self.MAX_LEN}")
        return [self.stoi.get(w, self.UNK) for w in words] + [self.EOS]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise ValueError(f"token id {i} out of range")
            if i == self.EOS:
                break
            if i in (self.PAD, self.BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if tuple(lines[:4]) != cls.RESERVED:
            raise ValueError(f"{path}: vocabulary must start with the reserved header {cls.RESERVED}")
        return cls([ln for ln in lines[4:] if ln])


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    max_len: int = 20
    seed: int | None = None

    def validate(self) -> "DecodeConfig":
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"decode mode must be greedy or temperature, got {self.mode!r}")
        if self.mode == "temperature":
            if not self.temperature > 0:
                raise ValueError(f"temperature must be > 0, got {self.temperature}")
            if self.seed is None:
                raise ValueError("temperature decoding requires a seed")
        if not 1 <= self.max_len <= Vocabulary.MAX_LEN:
            raise ValueError(f"max_len must be in [1, {Vocabulary.MAX_LEN}]")
        return self

    @classmethod
    def from_temperature(cls, temperature: float | None, seed: int | None = None) -> "DecodeConfig":
        """``None`` or 0 means greedy, matching the usual T=0 convention."""
        if temperature is None or temperature == 0:
            return cls(mode="greedy", seed=seed)
        return cls(mode="temperature", temperature=temperature, seed=0 if seed is None else seed)

    def to_dict(self) -> dict:
        return asdict(self)


def equally_spaced(n_frames: int, count: int = 20) -> np.ndarray:
    """Indices of ``count`` equally spaced frames (repeats when too few frames)."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    return np.round(np.linspace(0, n_frames - 1, count)).astype(np.int64)


class LSTMCell(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        fan_in = in_dim + hidden
        self.W = Parameter(xavier_uniform(rng, (4 * hidden, fan_in), fan_in, 4 * hidden))
        b = zeros((4 * hidden,))
        b[hidden: 2 * hidden] = 1.0  # forget-gate bias
        self.b = Parameter(b)
        self.in_dim, self.hidden = in_dim, hidden


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: LSTMCell) -> tuple[Tensor, Tensor]:
    """Gates (input, forget, output, candidate) from one projection of ``[x ; h]``."""
    if x.ndim != 2 or x.shape[1] != w.in_dim or h.shape != c.shape or h.shape[1] != w.hidden:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs cell {w.in_dim}/{w.hidden}")
    H = w.hidden
    z = ops.linear_map(ops.concat([x, h], axis=1), w.W, w.b)
    i = ops.sigmoid(z[:, 0:H])
    f = ops.sigmoid(z[:, H: 2 * H])
    o = ops.sigmoid(z[:, 2 * H: 3 * H])
    g = ops.tanh(z[:, 3 * H:])
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def additive_attention(keys: Tensor, projected_keys: Tensor, query: Tensor, W_q: Tensor,
                       w_a: Tensor) -> tuple[Tensor, Tensor]:
    """Score ``w_a . tanh(K' + W_q q)`` per frame, softmax, weighted sum of keys.

    keys: (N, F, D); projected_keys: (N, F, A); query: (N, H).
    Returns (context (N, D), weights (N, F)).
    """
    n, F, A = projected_keys.shape
    q = ops.linear_map(query, W_q)
    scores = ops.einsum("nfa,a->nf", ops.tanh(ops.add(projected_keys, ops.broadcast_to(q, (n, F, A), axis=1))), w_a)
    alpha = ops.softmax(scores, axis=1)
    context = ops.einsum("nf,nfd->nd", alpha, keys)
    return context, alpha


class LanguageExplainer(Module):
    """Per-frame BLOCK fusion of (decision, perception) features, additive
    attention over the fused frames, and an LSTM over tokens."""

    def __init__(self, dim_decision: int, dim_perception: int, vocab_size: int,
                 rng: np.random.Generator, fused_dim: int = 32, proj_dim: int = 60,
                 block_count: int = 5, hidden: int = 32, embed_dim: int = 32, attn_dim: int = 32):
        self.fusion = BlockFusion(
            FusionConfig(kind="block", dim_m=dim_decision, dim_v=dim_perception, dim_out=fused_dim,
                         proj_dim=proj_dim, block_count=block_count),
            rng,
        )
        self.embed = Parameter(xavier_uniform(rng, (vocab_size, embed_dim), vocab_size, embed_dim))
        self.W_k = Parameter(xavier_uniform(rng, (attn_dim, fused_dim), fused_dim, attn_dim))
        self.W_q = Parameter(xavier_uniform(rng, (attn_dim, hidden), hidden, attn_dim))
        self.w_a = Parameter(xavier_uniform(rng, (attn_dim,), attn_dim, 1))
        self.init_h = Linear(fused_dim, hidden, rng)
        self.init_c = Linear(fused_dim, hidden, rng)
        self.lstm = LSTMCell(fused_dim + embed_dim, hidden, rng)
        self.out = Linear(hidden, vocab_size, rng)
        self.vocab_size = vocab_size
        self.hidden = hidden

    def encode_frames(self, decision: Tensor, perception: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Fuse each frame; returns (keys, projected keys, h0, c0)."""
        if decision.ndim == 2:
            decision = decision.reshape((1,) + decision.shape)
            perception = perception.reshape((1,) + perception.shape)
        if decision.ndim != 3 or perception.ndim != 3 or decision.shape[:2] != perception.shape[:2]:
            raise ShapeError(
                f"frame features must be (N, F, .) with matching N, F; got {decision.shape}, {perception.shape}"
            )
        n, F = decision.shape[:2]
        if F < 1:
            raise ValueError("empty frame feature sequence")
        fused = self.fusion(decision.reshape(n * F, decision.shape[2]),
                            perception.reshape(n * F, perception.shape[2]))
        keys = fused.reshape(n, F, fused.shape[1])
        pk = ops.linear_map(fused, self.W_k).reshape(n, F, self.W_k.shape[0])
        mean_key = ops.mean(keys, axis=1)
        h0 = ops.tanh(self.init_h(mean_key))
        c0 = self.init_c(mean_key)
        return keys, pk, h0, c0

    def step(self, keys, pk, h, c, prev_ids) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """One decoding step; returns (vocabulary logits, h, c, attention weights)."""
        context, alpha = additive_attention(keys, pk, h, self.W_q, self.w_a)
        emb = ops.take_rows(self.embed, prev_ids)
        h, c = lstm_cell(ops.concat([context, emb], axis=1), h, c, self.lstm)
        return self.out(h), h, c, alpha


def _teacher_forcing(token_seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    L = max(len(s) for s in token_seqs)
    n = len(token_seqs)
    inputs = np.full((n, L), Vocabulary.PAD, dtype=np.int64)
    targets = np.full((n, L), Vocabulary.PAD, dtype=np.int64)
    mask = np.zeros((n, L))
    for i, s in enumerate(token_seqs):
        s = list(s)
        if not s or s[-1] != Vocabulary.EOS:
            raise ValueError("token sequences must end in eos")
        inputs[i, 0] = Vocabulary.BOS
        inputs[i, 1: len(s)] = s[:-1]
        targets[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return inputs, targets, mask


def sequence_loss(model: LanguageExplainer, decision: Tensor, perception: Tensor,
                  token_seqs: Sequence[Sequence[int]]) -> Tensor:
    """Teacher-forced token cross-entropy, averaged over non-pad positions."""
    keys, pk, h, c = model.encode_frames(decision, perception)
    n = keys.shape[0]
    if len(token_seqs) != n:
        raise ShapeError(f"{len(token_seqs)} sentences for {n} feature sequences")
    inputs, targets, mask = _teacher_forcing(token_seqs)
    V = model.vocab_size
    total = None
    for t in range(inputs.shape[1]):
        logits, h, c, _ = model.step(keys, pk, h, c, inputs[:, t])
        onehot = np.zeros((n, V))
        onehot[np.arange(n), targets[:, t]] = mask[:, t]
        term = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), ops.constant(onehot, like=logits)))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, -1.0 / mask.sum())


def generate_explanation(model: LanguageExplainer, decision: Tensor, perception: Tensor,
                         cfg: DecodeConfig | None = None, return_attention: bool = False):
    """Decode one sentence as token ids; the list always ends in eos, which is
    appended when ``max_len`` content tokens are produced without one.

    Greedy mode takes the argmax and ignores the seed; temperature mode
    samples from ``softmax(logits / T)`` with a generator seeded from the config.
    """
    cfg = (cfg or DecodeConfig()).validate()
    if decision.ndim != 2:
        raise ShapeError(f"expected one (F, dim) feature sequence, got {decision.shape}")
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "temperature" else None
    keys, pk, h, c = model.encode_frames(decision, perception)
    prev = np.array([Vocabulary.BOS])
    ids: list[int] = []
    attention = []
    for _ in range(cfg.max_len):
        logits, h, c, alpha = model.step(keys, pk, h, c, prev)
        attention.append(alpha.numpy()[0])
        row = logits.numpy()[0].astype(np.float64)
        if cfg.mode == "greedy" or cfg.temperature < 1e-6:
            tok = int(np.argmax(row))
        else:
            probs = ops.softmax(Tensor(row, dtype=np.float64), cfg.temperature).numpy()
            tok = int(rng.choice(len(probs), p=probs / probs.sum()))
        if tok == Vocabulary.EOS:
            break
        ids.append(tok)
        prev = np.array([tok])
    ids.append(Vocabulary.EOS)
    return (ids, np.stack(attention)) if return_attention else ids
