"""Finite-difference check of every differentiable operation at toy sizes.

Each case builder takes a generator and returns ``(f, inputs)`` for
:func:`beef.gradcheck.grad_check`.  Cases are built in 64-bit mode; seeds
whose forward pass puts a ReLU input within ``MIN_RELU_MARGIN`` of the kink
are skipped because central differences straddle the kink there.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, Conv2Plus1D, GoalEmbedding, space_time_avg_pool
from .decoder import ControlHead, GRUCell, TrajectoryDecoder, drive_loss, gru_cell
from .explain import (
    DecisionOnlyExplainer,
    LanguageExplainer,
    LSTMCell,
    MultiHeadBaseline,
    additive_attention,
    classify_cause,
    explain_loss,
    explain_loss_from_logits,
    lstm_cell,
    sequence_loss,
)
from .fusion import FUSION_KINDS, FusionConfig, make_fusion
from .gradcheck import grad_check, relu_margin
from .tensor import Tensor, precision

__all__ = ["CASES", "MIN_RELU_MARGIN", "TOLERANCE", "CaseResult", "build_case", "run_case", "run_suite"]

TOLERANCE = 1e-6
EPS = 1e-5
MIN_RELU_MARGIN = 5 * EPS

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list]]


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _conv_block(rng, residual: bool):
    cin, cout = (4, 4) if residual else (3, 4)
    ss, ts = (1, 1) if residual else (2, 2)
    stage = Conv2Plus1D(cin, cout, ss, ts, 3, 3, residual, rng)
    x = _t(rng, 2, 4, 5, 5, cin)
    return (lambda: stage(x)), [x] + stage.parameters()


def _encode(rng):
    cfg = BackboneConfig(channels=(4, 4, 5), spatial_strides=(2, 1, 2), temporal_strides=(1, 2, 1),
                         residual=True, goal_dim=2)
    bb = Backbone(cfg, rng)
    clip = _t(rng, 2, 4, 3, 6, 6)

    def f():
        enc = bb.encode(clip, taps=(2,))
        return ops.concat([enc.r, space_time_avg_pool(enc.taps[2])], axis=1)

    return f, [clip] + bb.parameters()


def _pool(rng):
    a = _t(rng, 2, 3, 4, 4, 5)
    return (lambda: space_time_avg_pool(a)), [a]


def _embed(rng):
    emb = GoalEmbedding(4, rng)
    return (lambda: emb([0, 2, 1, 2, 0])), emb.parameters()


def _gru(rng):
    cell = GRUCell(5, 4, rng)
    x, h = _t(rng, 3, 5), _t(rng, 3, 4)
    return (lambda: gru_cell(x, h, cell)), [x, h] + cell.parameters()


def _decode_trajectory(rng):
    dec = TrajectoryDecoder(6 + 3, 4, 4, rng)
    r, g = _t(rng, 2, 6), _t(rng, 2, 3)
    return (lambda: dec(r, g)[1]), [r, g] + dec.parameters()


def _decode_control(rng):
    head = ControlHead(6 + 3, rng)
    r, g = _t(rng, 2, 6), _t(rng, 2, 3)
    return (lambda: head(r, g)), [r, g] + head.parameters()


def _fusion(kind: str) -> Case:
    def build(rng):
        cfg = FusionConfig(kind=kind, dim_m=5, dim_v=4, dim_out=3, proj_dim=6, block_count=3,
                           rank=2, hidden_dim=6)
        fusion = make_fusion(cfg, rng)
        m, v = _t(rng, 3, 5), _t(rng, 3, 4)
        return (lambda: fusion(m, v)), [m, v] + fusion.parameters()

    return build


def _cause_head(rng):
    fusion = make_fusion(FusionConfig(kind="block", dim_m=5, dim_v=4, dim_out=3, proj_dim=6,
                                      block_count=3), rng)
    m, v = _t(rng, 3, 5), _t(rng, 3, 4)
    return (lambda: classify_cause(m, v, fusion)), [m, v] + fusion.parameters()


def _multihead(rng):
    head = MultiHeadBaseline("last_layer_plus_blinker", 5, 3, rng, goal_dim=2, hidden_dim=6)
    feats, goal = _t(rng, 3, 5), _t(rng, 3, 2)
    return (lambda: head.logits(feats, goal)), [feats, goal] + head.parameters()


def _decision_only(rng):
    head = DecisionOnlyExplainer(5, 3, rng, hidden_dim=6)
    m = _t(rng, 3, 5)
    # m reaches the head detached, so only the head's own weights carry gradient.
    return (lambda: head.logits(m)), head.parameters()


def _lstm(rng):
    cell = LSTMCell(5, 4, rng)
    x, h, c = _t(rng, 3, 5), _t(rng, 3, 4), _t(rng, 3, 4)

    def f():
        h2, c2 = lstm_cell(x, h, c, cell)
        return ops.concat([h2, c2], axis=1)

    return f, [x, h, c] + cell.parameters()


def _attention(rng):
    keys, pk, q = _t(rng, 2, 4, 3), _t(rng, 2, 4, 5), _t(rng, 2, 6)
    W_q, w_a = _t(rng, 5, 6, scale=0.5), _t(rng, 5)

    def f():
        context, alpha = additive_attention(keys, pk, q, W_q, w_a)
        return ops.concat([context, alpha], axis=1)

    return f, [keys, pk, q, W_q, w_a]


def _language_head(rng):
    model = LanguageExplainer(5, 4, 7, rng, fused_dim=4, proj_dim=6, block_count=3, hidden=4,
                              embed_dim=3, attn_dim=3)
    dec, per = _t(rng, 2, 3, 5), _t(rng, 2, 3, 4)
    tokens = [[4, 5, 2], [6, 2]]
    return (lambda: sequence_loss(model, dec, per, tokens)), [dec, per] + model.parameters()


def _drive_loss(rng):
    pred, target = _t(rng, 3, 4, 2), _t(rng, 3, 4, 2)
    return (lambda: drive_loss(pred, target)), [pred, target]


def _explain_loss(rng):
    z = _t(rng, 4, 5)
    labels = rng.integers(5, size=4)
    return (lambda: explain_loss(ops.softmax(z, axis=1), labels)[0]), [z]


def _explain_loss_logits(rng):
    z = _t(rng, 4, 5)
    labels = rng.integers(5, size=4)
    return (lambda: explain_loss_from_logits(z, labels)), [z]


CASES: dict[str, Case] = {
    "conv2plus1d_block": lambda rng: _conv_block(rng, False),
    "conv2plus1d_block_residual": lambda rng: _conv_block(rng, True),
    "encode": _encode,
    "space_time_avg_pool": _pool,
    "embed_goal": _embed,
    "gru_cell": _gru,
    "decode_trajectory": _decode_trajectory,
    "decode_control": _decode_control,
    **{f"fuse_{k}": _fusion(k) for k in FUSION_KINDS},
    "classify_cause": _cause_head,
    "baseline_multihead": _multihead,
    "decision_only_head": _decision_only,
    "lstm_cell": _lstm,
    "additive_attention": _attention,
    "language_head_sequence_loss": _language_head,
    "drive_loss": _drive_loss,
    "explain_loss": _explain_loss,
    "explain_loss_from_logits": _explain_loss_logits,
}


@dataclass
class CaseResult:
    name: str
    max_error: float
    seeds: list
    skipped_seeds: list
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def build_case(name: str, seed: int):
    """Build one case in 64-bit mode; returns ``(f, inputs, relu margin)``."""
    with precision(np.float64):
        f, inputs = CASES[name](np.random.default_rng(seed))
        margin = relu_margin(f)
    return f, inputs, margin


def run_case(name: str, seeds: int = 3, max_coords: int | None = 12, max_tries: int = 200) -> CaseResult:
    """Check ``seeds`` kink-safe seeds of one case; returns the worst error."""
    start = time.perf_counter()
    worst, used, skipped = 0.0, [], []
    seed = 0
    while len(used) < seeds:
        if seed >= max_tries:
            raise RuntimeError(f"{name}: no kink-safe seed among the first {max_tries}")
        f, inputs, margin = build_case(name, seed)
        if margin < MIN_RELU_MARGIN:
            skipped.append(seed)
        else:
            with precision(np.float64):
                worst = max(worst, grad_check(f, inputs, eps=EPS, max_coords=max_coords, seed=seed))
            used.append(seed)
        seed += 1
    return CaseResult(name, worst, used, skipped, time.perf_counter() - start)


def run_suite(seeds: int = 3, max_coords: int | None = 12, names=None) -> list[CaseResult]:
    return [run_case(n, seeds, max_coords) for n in (names or CASES)]
