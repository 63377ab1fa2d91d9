"""Deterministic top-down driving world with per-frame cause labels.

The ego car drives along a three-lane road.  Each episode is one scenario:
free driving (optionally with a blinker-announced lane change and a
distractor object), one of four stop causes, a parked vehicle to swerve
around, or a crossing vehicle to yield to.  All stop causes use the same
deceleration profile and place their object at the same offset from the stop
point, so two stop episodes with equal speed and onset have identical expert
trajectories and label timing: only the pixels tell them apart.

World units are meters; ``x`` is lateral (left negative), ``y`` forward.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .backbone import GOALS

__all__ = [
    "CAUSES",
    "STOP_CAUSES",
    "DISTRACTORS",
    "WorldConfig",
    "Scene",
    "Episode",
    "Dataset",
    "generate",
    "make_scene",
    "split",
    "sentence_for",
    "SENTENCE_TEMPLATES",
    "sample_index",
    "make_batch",
    "save_dataset",
    "load_dataset",
]

CAUSES = (
    "none",
    "red_light",
    "stop_sign",
    "crossing_pedestrian",
    "congestion",
    "parked_vehicle",
    "crossing_vehicle",
)
STOP_CAUSES = ("red_light", "stop_sign", "crossing_pedestrian", "congestion")
DISTRACTORS = ("green_light", "sidewalk_pedestrian", "shoulder_car", "adjacent_traffic")

LANE_WIDTH = 3.5
ROAD_HALF = 1.5 * LANE_WIDTH  # 5.25
SIDEWALK_HALF = 7.0
VIEW_X = 8.0  # lateral half-width of the view
VIEW_BACK = 4.0  # meters behind the ego shown at the bottom
VIEW_FAR = 20.0  # meters ahead shown at the top
STOP_FRAMES = 6  # linear deceleration to standstill
OBJECT_OFFSET = 4.0  # cause object sits this far past the stop point
SWERVE_RAMP = 8.0
SWERVE_LEAD = 12.0

COLORS = {
    "grass": (0.25, 0.45, 0.25),
    "sidewalk": (0.62, 0.62, 0.60),
    "road": (0.20, 0.20, 0.22),
    "marking": (0.92, 0.92, 0.92),
    "edge": (0.90, 0.85, 0.45),
    "ego": (0.20, 0.80, 0.90),
    "car": (0.20, 0.30, 0.95),
    "housing": (0.08, 0.08, 0.08),
    "red": (1.00, 0.05, 0.05),
    "green": (0.05, 1.00, 0.10),
    "sign": (0.85, 0.05, 0.10),
    "white": (1.00, 1.00, 1.00),
    "pedestrian": (1.00, 0.60, 0.10),
}

SENTENCE_TEMPLATES = {
    "red_light": (
        "because the light is red",
        "since the light is red",
        "because the traffic light is red",
    ),
    "stop_sign": (
        "because there is a stop sign",
        "since there is a stop sign",
        "because of the stop sign",
    ),
    "crossing_pedestrian": (
        "because a pedestrian is crossing",
        "since a pedestrian is crossing the road",
        "because a person is crossing the road",
    ),
    "congestion": (
        "because the traffic ahead is stopped",
        "since traffic is stopped ahead",
        "because of the traffic jam ahead",
    ),
    "parked_vehicle": (
        "because a car is parked in the lane",
        "to pass the parked car",
        "since a parked car blocks the lane",
    ),
    "crossing_vehicle": (
        "because a car is crossing",
        "since a car is crossing the road",
        "to yield to the crossing car",
    ),
}


@dataclass
class WorldConfig:
    image_size: tuple[int, int] = (32, 32)
    clip_len: int = 16
    episode_frames: int = 40
    rate_hz: float = 3.0
    past: int = 6
    future: int = 6
    cause_mix: dict = field(default_factory=lambda: {
        "none": 0.25, "red_light": 0.125, "stop_sign": 0.125, "crossing_pedestrian": 0.125,
        "congestion": 0.125, "parked_vehicle": 0.125, "crossing_vehicle": 0.125,
    })
    noise_sigma: float = 0.02
    episodes: int = 200
    seed: int = 0
    speed_range: tuple[float, float] = (3.0, 5.0)
    distractor_prob: float = 0.75
    lane_change_prob: float = 0.4
    sentence_variation: bool = True

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.speed_range = tuple(self.speed_range)

    @property
    def K(self) -> int:
        return self.past + 1 + self.future

    def validate(self) -> "WorldConfig":
        unknown = set(self.cause_mix) - set(CAUSES)
        if unknown:
            raise ValueError(f"cause_mix has unknown causes {sorted(unknown)}")
        w = np.array(list(self.cause_mix.values()), dtype=float)
        if w.size == 0 or (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError("cause_mix weights must be finite, non-negative and not all zero")
        h, wd = self.image_size
        if h < 8 or wd < 8:
            raise ValueError("image_size must be at least 8x8")
        if self.clip_len < 2:
            raise ValueError("clip_len must be >= 2")
        if self.episode_frames < max(self.clip_len + self.future, 32):
            raise ValueError(
                f"episode_frames must be >= max(clip_len + future, 32), got {self.episode_frames}"
            )
        if self.rate_hz <= 0 or self.past < 0 or self.future < 0:
            raise ValueError("rate_hz must be > 0 and past/future >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must satisfy 0 < low <= high")
        for name in ("distractor_prob", "lane_change_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["speed_range"] = list(self.speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown world config fields {sorted(unknown)}")
        return cls(**d).validate()


@dataclass(frozen=True)
class Scene:
    """Everything needed to re-create one episode."""

    index: int
    cause: str
    v0: float
    t_on: int  # frame at which the maneuver starts
    lane_change: tuple[int, int] | None = None  # (blinker frame, -1 left / +1 right)
    distractor: tuple[str, float, float] | None = None  # (kind, world y, side)
    sentence_choice: int = 0
    noise_seed: int = 0


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _episode_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def make_scene(config: WorldConfig, index: int) -> Scene:
    """Draw the scenario for episode ``index`` from its own seeded stream."""
    rng = _episode_rng(config.seed, index, 0)
    names = list(config.cause_mix)
    w = np.array([config.cause_mix[n] for n in names], dtype=float)
    cause = names[int(rng.choice(len(names), p=w / w.sum()))]
    v0 = float(rng.uniform(*config.speed_range))
    F = config.episode_frames
    # Maneuvers start late enough that the object enters view after the first
    # full clip is available, and early enough to finish inside the episode.
    t_on = int(rng.integers(F // 2 + 2, F // 2 + 9))
    lane_change = None
    distractor = None
    if cause == "none":
        if rng.uniform() < config.lane_change_prob:
            lane_change = (int(rng.integers(config.clip_len - 4, F - 12)), int(rng.choice([-1, 1])))
        if rng.uniform() < config.distractor_prob:
            kind = DISTRACTORS[int(rng.integers(len(DISTRACTORS)))]
            ahead = float(rng.uniform(8.0, 60.0))
            side = float(rng.choice([-1.0, 1.0]))
            if kind == "adjacent_traffic" and lane_change is not None:
                side = float(-lane_change[1])
            distractor = (kind, ahead, side)
    n_templates = len(SENTENCE_TEMPLATES.get(cause, ("",)))
    srng = _episode_rng(config.seed, index, 1)
    choice = int(srng.integers(n_templates)) if config.sentence_variation else 0
    noise_seed = int(_episode_rng(config.seed, index, 2).integers(2**31))
    return Scene(index, cause, v0, t_on, lane_change, distractor, choice, noise_seed)


def sentence_for(cause: str, choice: int = 0) -> str:
    """Template justification for a labeled segment; ``choice`` picks a synonym."""
    if cause not in SENTENCE_TEMPLATES:
        raise ValueError(f"no sentence for unlabeled segment (cause {cause!r})")
    options = SENTENCE_TEMPLATES[cause]
    return options[choice % len(options)]


class _Canvas:
    """Area-coverage rasteriser for axis-aligned rectangles in world units."""

    def __init__(self, height: int, width: int, y_ego: float):
        self.h, self.w = height, width
        self.sx = 2 * VIEW_X / width
        self.sy = (VIEW_FAR + VIEW_BACK) / height
        self.y_top = y_ego + VIEW_FAR
        self.img = np.empty((height, width, 3))

    @staticmethod
    def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
        edges = np.arange(n, dtype=float)
        return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)

    def rect(self, x0: float, x1: float, y0: float, y1: float, color) -> None:
        """Fill world rectangle [x0, x1] x [y0, y1] (y upward) with ``color``."""
        c0 = (x0 + VIEW_X) / self.sx
        c1 = (x1 + VIEW_X) / self.sx
        r0 = (self.y_top - y1) / self.sy
        r1 = (self.y_top - y0) / self.sy
        if c1 <= 0 or r1 <= 0 or c0 >= self.w or r0 >= self.h:
            return
        a = np.outer(self._coverage(r0, r1, self.h), self._coverage(c0, c1, self.w))
        self.img += a[..., None] * (np.asarray(color) - self.img)

    def box(self, cx: float, cy: float, width: float, length: float, color) -> None:
        self.rect(cx - width / 2, cx + width / 2, cy - length / 2, cy + length / 2, color)


class Episode:
    """One generated episode; kinematics eager, pixels rendered on first use."""

    def __init__(self, scene: Scene, config: WorldConfig):
        self.scene = scene
        self.config = config
        self._simulate()

    # -- kinematics -----------------------------------------------------
    def _simulate(self) -> None:
        c, s = self.config, self.scene
        dt = 1.0 / c.rate_hz
        F = c.episode_frames
        f = np.arange(-c.past, F + c.future)
        v = np.full(f.shape, s.v0)
        if s.cause in STOP_CAUSES:
            u = (f - s.t_on) / STOP_FRAMES
            v = s.v0 * np.clip(1.0 - u, 0.0, 1.0)
        elif s.cause == "crossing_vehicle":
            d = f - s.t_on
            ramp = np.interp(d, [0, 4, 7, 11], [1.0, 0.3, 0.3, 1.0])
            v = s.v0 * ramp
        y = np.concatenate([[0.0], np.cumsum(0.5 * dt * (v[1:] + v[:-1]))])
        x = np.zeros_like(y)
        on = s.t_on + c.past  # index of t_on in the extended arrays
        anchor = None
        end = F
        if s.cause in STOP_CAUSES:
            stop_y = y[-1]
            anchor = stop_y + OBJECT_OFFSET
        elif s.cause == "parked_vehicle":
            anchor = y[on] + SWERVE_LEAD
            rel = y - anchor
            up = _smoothstep((rel + SWERVE_LEAD) / SWERVE_RAMP)
            down = _smoothstep((rel - (SWERVE_LEAD - SWERVE_RAMP)) / SWERVE_RAMP)
            x = -LANE_WIDTH * (up - down)
            back = np.nonzero(rel >= SWERVE_LEAD)[0]
            end = int(back[0]) - c.past if back.size else F
        elif s.cause == "crossing_vehicle":
            anchor = y[on] + 10.0
            end = s.t_on + 11
        if s.lane_change is not None:
            t_b, side = s.lane_change
            x = x + side * LANE_WIDTH * _smoothstep((f - (t_b + 3)) / 6.0)
        self._f = f
        self._x, self._y, self._v = x, y, v
        self.anchor = anchor
        self.y_stop = float(y[-1]) if s.cause in STOP_CAUSES else None

        labels = np.zeros(F, dtype=np.int64)
        if anchor is not None:
            ego = y[c.past: c.past + F]
            seen = np.nonzero(anchor - ego <= VIEW_FAR - 0.5)[0]
            self.t_visible = int(seen[0]) if seen.size else F
            labels[self.t_visible: max(end, self.t_visible)] = CAUSES.index(s.cause)
        else:
            self.t_visible = None
        self.labels = labels

        goals = np.full(F, GOALS.index("straight"), dtype=np.int64)
        if s.lane_change is not None:
            t_b, side = s.lane_change
            goals[max(t_b, 0): min(t_b + 9, F)] = GOALS.index("left" if side < 0 else "right")
        self.goals = goals

    @property
    def n_frames(self) -> int:
        return self.config.episode_frames

    @property
    def positions(self) -> np.ndarray:
        """Ego (x, y) for frames 0..F-1."""
        p = self.config.past
        return np.stack([self._x, self._y], axis=1)[p: p + self.n_frames]

    @property
    def speeds(self) -> np.ndarray:
        p = self.config.past
        return self._v[p: p + self.n_frames].copy()

    @cached_property
    def trajectories(self) -> np.ndarray:
        """(F, K, 2) expert positions at t-past..t+future in the ego frame at t."""
        c = self.config
        pts = np.stack([self._x, self._y], axis=1)
        out = np.empty((self.n_frames, c.K, 2))
        for t in range(self.n_frames):
            i = t + c.past
            out[t] = pts[i - c.past: i + c.future + 1] - pts[i]
        return out

    @cached_property
    def controls(self) -> np.ndarray:
        """(F, 2): acceleration (m/s^2) and course change (degrees) per frame."""
        c = self.config
        dt = 1.0 / c.rate_hz
        dx, dy = np.diff(self._x), np.diff(self._y)
        heading = np.degrees(np.arctan2(dx, np.maximum(dy, 1e-9)))
        accel = np.diff(self._v) / dt
        course = np.concatenate([[0.0], np.diff(heading)])
        i = np.arange(c.past, c.past + self.n_frames)
        return np.stack([accel[i], course[i]], axis=1)

    @property
    def sentence(self) -> str | None:
        if self.scene.cause == "none":
            return None
        return sentence_for(self.scene.cause, self.scene.sentence_choice)

    def labeled_frames(self) -> np.ndarray:
        return np.nonzero(self.labels > 0)[0]

    # -- rendering ------------------------------------------------------
    def _objects(self, t: int, canvas: _Canvas) -> None:
        s, c = self.scene, self.config
        dt = 1.0 / c.rate_hz
        a = self.anchor
        if s.cause in ("red_light", "stop_sign"):
            canvas.rect(-ROAD_HALF, ROAD_HALF, self.y_stop + 2.2, self.y_stop + 2.7, COLORS["marking"])
        if s.cause == "red_light":
            _traffic_light(canvas, 6.1, a, red=True)
        elif s.cause == "stop_sign":
            canvas.box(6.1, a, 1.6, 1.6, COLORS["sign"])
            canvas.box(6.1, a, 0.6, 0.6, COLORS["white"])
        elif s.cause == "crossing_pedestrian":
            walked = 1.2 * dt * max(t - self.t_visible, 0)
            canvas.box(max(6.1 - walked, -6.1), a, 0.9, 0.9, COLORS["pedestrian"])
        elif s.cause == "congestion":
            for lane in (-1, 0, 1):
                canvas.box(lane * LANE_WIDTH, a + 1.0 + 1.5 * (lane % 2), 2.0, 4.2, COLORS["car"])
                canvas.box(lane * LANE_WIDTH, a + 7.0 + 1.5 * (lane % 2), 2.0, 4.2, COLORS["car"])
        elif s.cause == "parked_vehicle":
            canvas.box(0.0, a, 2.0, 4.2, COLORS["car"])
        elif s.cause == "crossing_vehicle":
            t_cross = s.t_on + 5
            speed = 7.0 / max((t_cross - self.t_visible) * dt, dt)
            xc = 7.0 - speed * dt * (t - self.t_visible)
            if t >= self.t_visible - 2:
                canvas.box(xc, a, 4.2, 2.0, COLORS["car"])

        if s.distractor is not None:
            kind, ahead, side = s.distractor
            ydist = self._y[c.past] + ahead
            if kind == "green_light":
                canvas.rect(-ROAD_HALF, ROAD_HALF, ydist - 4.0 + 2.2, ydist - 4.0 + 2.7, COLORS["marking"])
                _traffic_light(canvas, 6.1, ydist, red=False)
            elif kind == "sidewalk_pedestrian":
                canvas.box(side * 6.1, ydist, 0.9, 0.9, COLORS["pedestrian"])
            elif kind == "shoulder_car":
                canvas.box(side * 6.1, ydist, 1.8, 4.2, COLORS["car"])
            elif kind == "adjacent_traffic":
                y_now = self._y[t + c.past]
                canvas.box(side * LANE_WIDTH, y_now + ahead % 12.0 - 2.0, 2.0, 4.2, COLORS["car"])

    def render_frame(self, t: int) -> np.ndarray:
        """Noise-free (H, W, 3) image of frame ``t``."""
        h, w = self.config.image_size
        x_ego, y_ego = self._x[t + self.config.past], self._y[t + self.config.past]
        canvas = _Canvas(h, w, y_ego)
        canvas.img[:] = COLORS["grass"]
        canvas.rect(-SIDEWALK_HALF, SIDEWALK_HALF, y_ego - 50, y_ego + 50, COLORS["sidewalk"])
        canvas.rect(-ROAD_HALF, ROAD_HALF, y_ego - 50, y_ego + 50, COLORS["road"])
        for xe in (-ROAD_HALF, ROAD_HALF):
            canvas.rect(xe - 0.15, xe + 0.15, y_ego - 50, y_ego + 50, COLORS["edge"])
        first = math.floor((y_ego - VIEW_BACK) / 4.0) * 4.0
        for y0 in np.arange(first - 4.0, y_ego + VIEW_FAR + 4.0, 4.0):
            for xl in (-LANE_WIDTH / 2, LANE_WIDTH / 2):
                canvas.rect(xl - 0.15, xl + 0.15, y0, y0 + 2.0, COLORS["marking"])
        self._objects(t, canvas)
        canvas.box(x_ego, y_ego, 1.8, 4.0, COLORS["ego"])
        return canvas.img

    @cached_property
    def frames(self) -> np.ndarray:
        """(F, 3, H, W) float32 frames in [0, 1], observation noise included."""
        imgs = np.stack([self.render_frame(t) for t in range(self.n_frames)])
        sigma = self.config.noise_sigma
        if sigma > 0:
            rng = np.random.default_rng(self.scene.noise_seed)
            imgs = imgs + rng.normal(0.0, sigma, size=imgs.shape)
        return np.clip(imgs, 0.0, 1.0).transpose(0, 3, 1, 2).astype(np.float32)

    def clip(self, t: int, length: int | None = None) -> np.ndarray:
        """Frames ``t-length+1 .. t`` (earlier indices clamp to frame 0)."""
        length = length or self.config.clip_len
        if not 0 <= t < self.n_frames:
            raise IndexError(f"frame {t} outside 0..{self.n_frames - 1}")
        idx = np.clip(np.arange(t - length + 1, t + 1), 0, None)
        return self.frames[idx]

    def valid_frames(self) -> np.ndarray:
        """Frames with a full clip behind them and a full future horizon."""
        c = self.config
        return np.arange(c.clip_len - 1, self.n_frames - c.future)

    def release(self) -> None:
        """Drop cached pixels (they are re-rendered identically on demand)."""
        self.__dict__.pop("frames", None)


def _traffic_light(canvas: _Canvas, x: float, y: float, red: bool) -> None:
    canvas.box(x, y, 1.2, 2.6, COLORS["housing"])
    if red:
        canvas.box(x, y + 0.7, 0.9, 0.9, COLORS["red"])
    else:
        canvas.box(x, y - 0.7, 0.9, 0.9, COLORS["green"])


class Dataset:
    def __init__(self, config: WorldConfig, episodes: list[Episode]):
        self.config = config
        self.episodes = episodes

    def __len__(self) -> int:
        return len(self.episodes)

    def __getitem__(self, i: int) -> Episode:
        return self.episodes[i]

    def sentences(self) -> list[str]:
        return [e.sentence for e in self.episodes if e.sentence is not None]

    def vocabulary(self):
        from .explain import Vocabulary

        tokens = set()
        for cause, options in SENTENCE_TEMPLATES.items():
            for o in options:
                tokens.update(o.split())
        return Vocabulary(sorted(tokens))

    def cause_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CAUSES}
        for e in self.episodes:
            counts[e.scene.cause] += 1
        return counts


def generate(config: WorldConfig) -> Dataset:
    """Build ``config.episodes`` episodes; deterministic in ``config.seed``."""
    config.validate()
    return Dataset(config, [Episode(make_scene(config, i), config) for i in range(config.episodes)])


def split(n_or_dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[int]]:
    """Partition episode indices into train/val/test by a seeded permutation."""
    n = len(n_or_dataset) if not isinstance(n_or_dataset, int) else n_or_dataset
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    parts = {
        "train": perm[:n_train],
        "val": perm[n_train: n_train + n_val],
        "test": perm[n_train + n_val:],
    }
    return {k: sorted(int(i) for i in v) for k, v in parts.items()}


def sample_index(dataset: Dataset, episode_ids: Sequence[int], stride: int = 1,
                 labeled_only: bool = False) -> np.ndarray:
    """(episode, frame) pairs over the valid frames of the given episodes."""
    rows = []
    for i in episode_ids:
        ep = dataset[i]
        frames = ep.valid_frames()[::stride]
        if labeled_only:
            frames = frames[ep.labels[frames] > 0]
        rows.extend((i, int(t)) for t in frames)
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def make_batch(dataset: Dataset, pairs: np.ndarray) -> dict[str, np.ndarray]:
    """Stack clips and targets for (episode, frame) pairs."""
    eps = [dataset[int(i)] for i in pairs[:, 0]]
    ts = [int(t) for t in pairs[:, 1]]
    return {
        "clips": np.stack([e.clip(t) for e, t in zip(eps, ts)]),
        "goals": np.array([e.goals[t] for e, t in zip(eps, ts)], dtype=np.int64),
        "trajectories": np.stack([e.trajectories[t] for e, t in zip(eps, ts)]),
        "controls": np.stack([e.controls[t] for e, t in zip(eps, ts)]),
        "labels": np.array([e.labels[t] for e, t in zip(eps, ts)], dtype=np.int64),
    }


def _content_hash(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def save_dataset(dataset: Dataset, out_dir: str | os.PathLike,
                 splits: dict[str, list[int]] | None = None, split_seed: int = 0) -> Path:
    """Write manifest.json, one container per episode, sentences and vocabulary."""
    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    splits = splits or split(len(dataset), seed=split_seed)
    files = []
    sentences = []
    for ep in dataset.episodes:
        path = out / "episodes" / f"ep{ep.scene.index:05d}.beef"
        container.save(path, {
            "frames": ep.frames,
            "labels": ep.labels,
            "goals": ep.goals,
            "trajectories": ep.trajectories,
            "speeds": ep.speeds,
            "controls": ep.controls,
            "scene": container.encode_json(asdict(ep.scene)),
        })
        ep.release()
        files.append(path)
        if ep.sentence is not None:
            labeled = ep.labeled_frames()
            sentences.append({
                "clip_id": ep.scene.index,
                "cause": ep.scene.cause,
                "start": int(labeled[0]),
                "end": int(labeled[-1]),
                "reference": ep.sentence,
            })
    with open(out / "sentences.jsonl", "w", encoding="utf-8") as fh:
        for row in sentences:
            fh.write(json.dumps(row) + "\n")
    dataset.vocabulary().save(out / "vocab.txt")
    manifest = {
        "format": "beef-synthworld/1",
        "config": dataset.config.to_dict(),
        "splits": splits,
        "vocabulary": "vocab.txt",
        "sentences": "sentences.jsonl",
        "episodes": [str(p.relative_to(out)) for p in files],
        "content_hash": _content_hash(files),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return out / "manifest.json"


def load_dataset(path: str | os.PathLike, verify: bool = True) -> tuple[Dataset, dict]:
    """Re-create a dataset from its manifest; pixels come from the containers."""
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}") from None
    config = WorldConfig.from_dict(manifest["config"])
    episodes = []
    for rel in manifest["episodes"]:
        entries = container.load(root / rel)
        scene_d = container.decode_json(entries["scene"])
        for key in ("lane_change", "distractor"):
            if scene_d[key] is not None:
                scene_d[key] = tuple(scene_d[key])
        ep = Episode(Scene(**scene_d), config)
        if verify and not np.array_equal(ep.labels, entries["labels"]):
            raise ValueError(f"{rel}: stored labels disagree with the regenerated scene")
        ep.__dict__["frames"] = entries["frames"].astype(np.float32)
        episodes.append(ep)
    return Dataset(config, episodes), manifest


def scene_with(scene: Scene, **changes) -> Scene:
    """Copy of ``scene`` with fields replaced (used to build matched pairs)."""
    return replace(scene, **changes)
