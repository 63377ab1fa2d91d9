"""Driving model with an attached explanation head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, GoalEmbedding, space_time_avg_pool
from .decoder import ControlHead, TrajectoryDecoder, drive_loss
from .explain import (
    BASELINE_VARIANTS,
    DecisionOnlyExplainer,
    MultiHeadBaseline,
    explain_loss_from_logits,
)
from .fusion import FusionConfig, make_fusion
from .nn import Module
from .tensor import Tensor

__all__ = ["EXPLAINERS", "ModelConfig", "BeefModel", "ModelOutput", "joint_loss"]

# "driver_only" attaches nothing; fusion kinds read (m_t, v^L); baselines never see m_t.
EXPLAINERS = ("driver_only", "bilinear", "block", "mutan", "mlb", "mfb", "cat_mlp",
              "decision_only") + BASELINE_VARIANTS


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    K: int = 13
    past: int = 6
    decoder_hidden: int = 32
    output: str = "trajectory"  # or "control" (end-to-end head)
    explainer: str = "block"
    tap_layer: int = 3
    n_classes: int = 7
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decision_includes_past: bool = True
    head_hidden: int = 128
    # Fixed input standardization; defaults are the rendered-world pixel statistics.
    pixel_mean: float = 0.35
    pixel_std: float = 0.2

    def validate(self) -> "ModelConfig":
        self.backbone.validate()
        if self.explainer not in EXPLAINERS:
            raise ValueError(f"unknown explainer {self.explainer!r}; expected one of {EXPLAINERS}")
        if self.output not in ("trajectory", "control"):
            raise ValueError(f"output must be trajectory or control, got {self.output!r}")
        if not 1 <= self.tap_layer <= self.backbone.stages:
            raise ValueError(f"tap_layer {self.tap_layer} outside 1..{self.backbone.stages}")
        if self.K < 1 or not 0 <= self.past < self.K:
            raise ValueError("need K >= 1 and 0 <= past < K")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not self.pixel_std > 0:
            raise ValueError("pixel_std must be > 0")
        return self

    @property
    def decision_dim(self) -> int:
        if self.output == "control":
            return 2
        return 2 * (self.K if self.decision_includes_past else self.K - self.past)

    def resolved_fusion(self) -> FusionConfig:
        """Fusion config with the input/output sizes implied by the model."""
        f = FusionConfig(**self.fusion.to_dict())
        f.kind = self.explainer
        f.dim_m = self.decision_dim
        f.dim_v = self.backbone.channels[self.tap_layer - 1]
        f.dim_out = self.n_classes
        return f.validate()

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "K": self.K,
            "past": self.past,
            "decoder_hidden": self.decoder_hidden,
            "output": self.output,
            "explainer": self.explainer,
            "tap_layer": self.tap_layer,
            "n_classes": self.n_classes,
            "fusion": self.fusion.to_dict(),
            "decision_includes_past": self.decision_includes_past,
            "head_hidden": self.head_hidden,
            "pixel_mean": self.pixel_mean,
            "pixel_std": self.pixel_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        if "backbone" in d:
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if "fusion" in d:
            d["fusion"] = FusionConfig(**d["fusion"])
        return cls(**d).validate()


@dataclass
class ModelOutput:
    prediction: Tensor  # (N, K, 2) trajectory or (N, 2) control
    decision: Tensor  # m_t, (N, dim_m)
    logits: Tensor | None
    r: Tensor
    pooled_tap: Tensor


class BeefModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = c = config.validate()
        self.backbone = Backbone(c.backbone, rng)
        self.goal = GoalEmbedding(c.backbone.goal_dim, rng)
        in_dim = c.backbone.out_dim + c.backbone.goal_dim
        if c.output == "trajectory":
            self.decoder = TrajectoryDecoder(in_dim, c.decoder_hidden, c.K, rng)
        else:
            self.decoder = ControlHead(in_dim, rng)
        self.head = self._make_head(rng)

    def _make_head(self, rng):
        c = self.config
        if c.explainer == "driver_only":
            return None
        if c.explainer == "decision_only":
            return DecisionOnlyExplainer(c.decision_dim, c.n_classes, rng, c.head_hidden)
        if c.explainer in BASELINE_VARIANTS:
            if c.explainer == "layer3_mlp":
                width = c.backbone.channels[c.tap_layer - 1]
            else:
                width = c.backbone.out_dim
            return MultiHeadBaseline(c.explainer, width, c.n_classes, rng,
                                     goal_dim=c.backbone.goal_dim, hidden_dim=c.head_hidden)
        return make_fusion(c.resolved_fusion(), rng)

    def explanation_parameters(self) -> list:
        return [] if self.head is None else self.head.parameters()

    def normalize(self, clips: Tensor) -> Tensor:
        c = self.config
        shift = ops.constant(np.full(clips.shape, -c.pixel_mean), like=clips)
        return ops.scale(ops.add(clips, shift), 1.0 / c.pixel_std)

    def decision_and_pool(self, clips: Tensor, goals, layer: int) -> tuple[Tensor, Tensor]:
        """Decision vector and the pooled activation of any backbone layer."""
        c = self.config
        enc = self.backbone.encode(self.normalize(clips), taps=(layer,))
        g = self.goal(np.asarray(goals))
        if c.output == "trajectory":
            m = self.decoder(enc.r, g)[1]
            if not c.decision_includes_past:
                m = m[:, 2 * c.past:]
        else:
            m = self.decoder(enc.r, g)
        return m, space_time_avg_pool(enc.taps[layer])

    def forward(self, clips: Tensor, goals, with_explanation: bool = True) -> ModelOutput:
        c = self.config
        enc = self.backbone.encode(self.normalize(clips), taps=(c.tap_layer,))
        g = self.goal(np.asarray(goals))
        v = space_time_avg_pool(enc.taps[c.tap_layer])
        if c.output == "trajectory":
            pred, m = self.decoder(enc.r, g)
            if not c.decision_includes_past:
                m = m[:, 2 * c.past:]
        else:
            pred = self.decoder(enc.r, g)
            m = pred
        logits = None
        if with_explanation and self.head is not None:
            if c.explainer == "decision_only":
                logits = self.head.logits(m)
            elif c.explainer in BASELINE_VARIANTS:
                feats = v if c.explainer == "layer3_mlp" else enc.r
                logits = self.head.logits(feats, g)
            else:
                logits = self.head(m, v)
        return ModelOutput(pred, m, logits, enc.r, v)


def joint_loss(drive: Tensor, explain: Tensor | None, lambda_explain: float) -> Tensor:
    """``L_drive + lambda * L_explain``; lambda = 0 returns ``L_drive`` itself."""
    if lambda_explain < 0:
        raise ValueError("lambda_explain must be >= 0")
    if lambda_explain == 0 or explain is None:
        return drive
    return ops.add(drive, ops.scale(explain, lambda_explain))


def model_losses(model: BeefModel, out: ModelOutput, batch: dict, lambda_explain: float):
    """Return (joint, drive, explain-or-None) for a batch dict from the world."""
    dtype = out.prediction.dtype
    if model.config.output == "trajectory":
        target = Tensor(batch["trajectories"], dtype=dtype)
    else:
        target = Tensor(batch["controls"], dtype=dtype)
    drive = drive_loss(out.prediction, target)
    explain = None
    if out.logits is not None:
        explain = explain_loss_from_logits(out.logits, batch["labels"])
    return joint_loss(drive, explain, lambda_explain), drive, explain
