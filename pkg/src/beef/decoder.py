"""Goal-conditioned trajectory decoding and the end-to-end control head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Linear, Module, xavier_uniform, zeros
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "Trajectory",
    "ControlCommand",
    "GRUCell",
    "gru_cell",
    "TrajectoryDecoder",
    "ControlHead",
    "decode_trajectory",
    "decode_control",
    "drive_loss",
    "flatten_trajectory",
    "unflatten_trajectory",
]


@dataclass
class Trajectory:
    """K ego-frame positions (x lateral, y forward) in meters."""

    points: np.ndarray
    past: int = 6
    future: int = 6
    rate_hz: float = 3.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ShapeError(f"trajectory points must be (K, 2), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("trajectory has non-finite points")

    @property
    def K(self) -> int:
        return self.points.shape[0]

    def decision_vector(self) -> np.ndarray:
        return flatten_trajectory(self.points)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "seconds_before": self.past / self.rate_hz,
            "seconds_after": self.future / self.rate_hz,
            "rate_hz": self.rate_hz,
        }


@dataclass
class ControlCommand:
    acceleration: float
    course_change: float

    def __post_init__(self):
        if not (np.isfinite(self.acceleration) and np.isfinite(self.course_change)):
            raise ValueError("control command must be finite")


def flatten_trajectory(points: np.ndarray) -> np.ndarray:
    """(K, 2) -> (2K,) with m[2k] = x_k, m[2k+1] = y_k."""
    points = np.asarray(points)
    return points.reshape(points.shape[:-2] + (-1,))


def unflatten_trajectory(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.shape[-1] % 2:
        raise ShapeError(f"decision vector length {m.shape[-1]} is odd")
    return m.reshape(m.shape[:-1] + (m.shape[-1] // 2, 2))


class GRUCell(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        fan_in = in_dim + hidden
        self.W_r = Parameter(xavier_uniform(rng, (hidden, fan_in), fan_in, hidden))
        self.b_r = Parameter(zeros((hidden,)))
        self.W_z = Parameter(xavier_uniform(rng, (hidden, fan_in), fan_in, hidden))
        self.b_z = Parameter(zeros((hidden,)))
        self.W_h = Parameter(xavier_uniform(rng, (hidden, fan_in), fan_in, hidden))
        self.b_h = Parameter(zeros((hidden,)))
        self.in_dim, self.hidden = in_dim, hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self)


def gru_cell(x: Tensor, h: Tensor, w: GRUCell) -> Tensor:
    """Standard GRU update; ``x`` and ``h`` are vectors or row batches."""
    if x.ndim != h.ndim or x.shape[-1] != w.in_dim or h.shape[-1] != w.hidden:
        raise ShapeError(
            f"gru_cell: x {x.shape} / h {h.shape} vs in_dim {w.in_dim}, hidden {w.hidden}"
        )
    axis = x.ndim - 1
    xh = ops.concat([x, h], axis=axis)
    r = ops.sigmoid(ops.linear_map(xh, w.W_r, w.b_r))
    z = ops.sigmoid(ops.linear_map(xh, w.W_z, w.b_z))
    xrh = ops.concat([x, ops.mul(r, h)], axis=axis)
    h_tilde = ops.tanh(ops.linear_map(xrh, w.W_h, w.b_h))
    # (1 - z) * h + z * h~  ==  h + z * (h~ - h)
    return ops.add(h, ops.mul(z, ops.sub(h_tilde, h)))


class TrajectoryDecoder(Module):
    """GRU fed the same ``[r ; g]`` at each of K steps, linear (x, y) head."""

    def __init__(self, in_dim: int, hidden: int, K: int, rng: np.random.Generator):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.gru = GRUCell(in_dim, hidden, rng)
        self.head = Linear(hidden, 2, rng)
        self.K = K

    def __call__(self, r: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        return decode_trajectory(r, g, self, self.K)


def decode_trajectory(r: Tensor, g: Tensor, weights: TrajectoryDecoder, K: int) -> tuple[Tensor, Tensor]:
    """Return (trajectory (.., K, 2), decision vector (.., 2K))."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if r.ndim != g.ndim:
        raise ShapeError(f"r {r.shape} and g {g.shape} must have the same rank")
    axis = r.ndim - 1
    inp = ops.concat([r, g], axis=axis)
    hidden = weights.gru.hidden
    h_shape = (hidden,) if r.ndim == 1 else (r.shape[0], hidden)
    h = ops.constant(np.zeros(h_shape), like=r)
    points = []
    for _ in range(K):
        h = gru_cell(inp, h, weights.gru)
        points.append(weights.head(h))
    traj = ops.stack(points, axis=axis)
    m = traj.reshape(traj.shape[:-2] + (2 * K,))
    return traj, m


class ControlHead(Module):
    """Single projection from ``[r ; g]`` to (acceleration, course change)."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.proj = Linear(in_dim, 2, rng)

    def __call__(self, r: Tensor, g: Tensor) -> Tensor:
        return decode_control(r, g, self)


def decode_control(r: Tensor, g: Tensor, weights: ControlHead) -> Tensor:
    if r.ndim != g.ndim:
        raise ShapeError(f"r {r.shape} and g {g.shape} must have the same rank")
    return weights.proj(ops.concat([r, g], axis=r.ndim - 1))


def drive_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all coordinates (2K per trajectory, 2 per control)."""
    if pred.shape != target.shape:
        raise ShapeError(f"drive_loss: prediction {pred.shape} vs target {target.shape}")
    return ops.mse(pred, target)
