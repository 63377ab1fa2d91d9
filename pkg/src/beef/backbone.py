"""Spatio-temporal (2+1)D encoder and goal embedding.

Activations are channel-last: ``(N, t, h, w, d)``.  Clips come in as
``(N, T+1, C, H, W)`` (or a single ``(T+1, C, H, W)`` clip) and are transposed
once at the entrance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .nn import Module, he_uniform, xavier_uniform, zeros
from .ops import conv_output_size
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "GOALS",
    "BackboneConfig",
    "LayerActivation",
    "EncoderOutput",
    "Conv2Plus1D",
    "Backbone",
    "GoalEmbedding",
    "conv2plus1d_block",
    "space_time_avg_pool",
    "goal_index",
]

GOALS = ("left", "straight", "right")


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 24, 32, 32)
    spatial_strides: tuple[int, ...] = (2, 2, 2, 2, 1)
    temporal_strides: tuple[int, ...] = (1, 2, 2, 2, 1)
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    residual: bool = True
    goal_dim: int = 16

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.spatial_strides = tuple(self.spatial_strides)
        self.temporal_strides = tuple(self.temporal_strides)

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def out_dim(self) -> int:
        return self.channels[-1]

    def validate(self) -> "BackboneConfig":
        s = self.stages
        if s < 2:
            raise ValueError("backbone needs at least 2 stages so a mid-level tap exists")
        if len(self.spatial_strides) != s or len(self.temporal_strides) != s:
            raise ValueError("stride lists must have one entry per stage")
        if min(self.channels) < 1 or self.in_channels < 1 or self.goal_dim < 1:
            raise ValueError("channel counts and goal_dim must be >= 1")
        if min(self.spatial_strides + self.temporal_strides) < 1:
            raise ValueError("strides must be >= 1")
        if self.spatial_kernel < 1 or self.temporal_kernel < 1:
            raise ValueError("kernel sizes must be >= 1")
        return self

    def stage_shapes(self, clip_len: int, height: int, width: int) -> list[tuple[int, int, int, int]]:
        """(t, h, w, d) after every stage, by the stride formula."""
        ks, kt = self.spatial_kernel, self.temporal_kernel
        t, h, w = clip_len, height, width
        shapes = []
        for c, ss, ts in zip(self.channels, self.spatial_strides, self.temporal_strides):
            h = conv_output_size(h, ks, ss, ks // 2)
            w = conv_output_size(w, ks, ss, ks // 2)
            t = conv_output_size(t, kt, ts, kt // 2)
            shapes.append((t, h, w, c))
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown backbone config fields {sorted(unknown)}")
        return cls(**d).validate()


@dataclass(frozen=True)
class LayerActivation:
    layer: int
    value: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(frozen=True)
class EncoderOutput:
    r: Tensor
    taps: dict[int, LayerActivation] = field(default_factory=dict)


class Conv2Plus1D(Module):
    """Spatial (1 x k x k) conv, ReLU, temporal (k x 1 x 1) conv, ReLU."""

    def __init__(self, in_ch: int, out_ch: int, spatial_stride: int, temporal_stride: int,
                 ks: int, kt: int, residual: bool, rng: np.random.Generator):
        self.conv_s = Module()
        self.conv_s.weight = Parameter(
            he_uniform(rng, (1, ks, ks, in_ch, out_ch), ks * ks * in_ch)
        )
        self.conv_s.bias = Parameter(zeros((out_ch,)))
        self.conv_t = Module()
        self.conv_t.weight = Parameter(
            he_uniform(rng, (kt, 1, 1, out_ch, out_ch), kt * out_ch)
        )
        self.conv_t.bias = Parameter(zeros((out_ch,)))
        self.spatial_stride = spatial_stride
        self.temporal_stride = temporal_stride
        self.residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        return conv2plus1d_block(x, self)


def conv2plus1d_block(x: Tensor, stage: Conv2Plus1D) -> Tensor:
    """One factorized stage on a batch ``(N, t, h, w, d)`` or a single ``(t, h, w, d)``."""
    single = x.ndim == 4
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 5:
        raise ShapeError(f"expected activation (N, t, h, w, d), got {x.shape}")
    ks = stage.conv_s.weight.shape[1]
    kt = stage.conv_t.weight.shape[0]
    ss, ts = stage.spatial_stride, stage.temporal_stride
    y = ops.conv3d(x, stage.conv_s.weight, stage.conv_s.bias, (1, ss, ss), (0, ks // 2, ks // 2))
    y = ops.relu(y)
    y = ops.conv3d(y, stage.conv_t.weight, stage.conv_t.bias, (ts, 1, 1), (kt // 2, 0, 0))
    y = ops.relu(y)
    if stage.residual and y.shape == x.shape:
        y = ops.add(y, x)
    return y.reshape(y.shape[1:]) if single else y


def space_time_avg_pool(a: Tensor | LayerActivation) -> Tensor:
    """Mean over (t, h, w); works on ``(t,h,w,d)`` or batched ``(N,t,h,w,d)``."""
    value = a.value if isinstance(a, LayerActivation) else a
    if value.ndim == 4:
        return ops.mean(value, axis=(0, 1, 2))
    if value.ndim == 5:
        return ops.mean(value, axis=(1, 2, 3))
    raise ShapeError(f"expected rank-4 or rank-5 activation, got {value.shape}")


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config.validate()
        c = config
        chans = (c.in_channels,) + c.channels
        self._stages = []
        for i in range(c.stages):
            stage = Conv2Plus1D(chans[i], chans[i + 1], c.spatial_strides[i], c.temporal_strides[i],
                                c.spatial_kernel, c.temporal_kernel, c.residual, rng)
            setattr(self, f"stage{i + 1}", stage)
            self._stages.append(stage)

    def encode(self, clip: Tensor, taps=()) -> EncoderOutput:
        """Run all stages; return the pooled final stage ``r`` and tapped activations."""
        taps = set(taps)
        bad = [L for L in taps if not 1 <= L <= self.config.stages]
        if bad:
            raise ValueError(f"tap layers {bad} outside 1..{self.config.stages}")
        single = clip.ndim == 4
        if single:
            clip = clip.reshape((1,) + clip.shape)
        if clip.ndim != 5 or clip.shape[2] != self.config.in_channels:
            raise ShapeError(
                f"clip must be (N, T+1, {self.config.in_channels}, H, W), got {clip.shape}"
            )
        if clip.shape[1] < 2:
            raise ShapeError("clip needs at least two frames")
        x = ops.transpose(clip, (0, 1, 3, 4, 2))
        tapped = {}
        for i, stage in enumerate(self._stages, start=1):
            x = stage(x)
            if i in taps:
                value = x.reshape(x.shape[1:]) if single else x
                tapped[i] = LayerActivation(i, value)
        r = space_time_avg_pool(x)
        if single:
            r = r.reshape(r.shape[1:])
        return EncoderOutput(r, tapped)


def goal_index(goal) -> int:
    if isinstance(goal, (int, np.integer)):
        if not 0 <= int(goal) < len(GOALS):
            raise ValueError(f"unknown goal id {goal}")
        return int(goal)
    try:
        return GOALS.index(goal)
    except ValueError:
        raise ValueError(f"unknown goal token {goal!r}; expected one of {GOALS}") from None


class GoalEmbedding(Module):
    """Three-row embedding table for {left, straight, right}."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.table = Parameter(xavier_uniform(rng, (len(GOALS), dim), len(GOALS), dim))

    def __call__(self, goals) -> Tensor:
        if isinstance(goals, (str, int, np.integer)):
            return ops.take_rows(self.table, [goal_index(goals)]).reshape(self.table.shape[1])
        return ops.take_rows(self.table, [goal_index(g) for g in np.asarray(goals).tolist()])

    embed_goal = __call__
