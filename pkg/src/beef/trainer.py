"""Joint training of the driving and explanation objectives, checkpoints,
evaluation and multi-seed experiment grids."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .explain import LanguageExplainer, Vocabulary, equally_spaced, sequence_loss
from .metrics import MetricReport, accuracy, mae, mean_ap, mse, per_class_ap
from .model import BeefModel, ModelConfig, model_losses
from .synthworld import CAUSES, Dataset, make_batch, sample_index
from .tensor import NonFiniteError, Parameter, Tape, Tensor, no_record

__all__ = [
    "Adam",
    "adam_step",
    "TrainConfig",
    "PRESETS",
    "TrainResult",
    "train",
    "build_model",
    "evaluate",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "run_experiment",
    "EXPERIMENT_KINDS",
    "FUSION_ROWS",
    "BASELINE_ROWS",
    "table_to_csv",
    "LanguageConfig",
    "FeatureScaler",
    "language_features",
    "train_language",
    "save_language",
    "load_language",
]

log = logging.getLogger(__name__)


def adam_step(params: np.ndarray, grads: np.ndarray, moments: tuple[np.ndarray, np.ndarray],
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, (m, v))."""
    if t < 1:
        raise ValueError("Adam step counter t must be >= 1")
    if params.shape != grads.shape:
        raise ValueError(f"param {params.shape} and grad {grads.shape} differ")
    if not np.isfinite(grads).all():
        raise NonFiniteError("non-finite gradient")
    m, v = moments
    m = beta1 * m + (1 - beta1) * grads
    v = beta2 * v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), (m, v)


class Adam:
    """Adam over named parameters; a step with any non-finite gradient is skipped whole."""

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, clip: float | None = None) -> dict:
        info = {"skipped": False, "clipped": False}
        for n, p in self.params:
            if not np.isfinite(p.grad).all():
                info["skipped"] = True
                info["reason"] = f"non-finite gradient in {n}"
                return info
        scale = 1.0
        if clip is not None:
            norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in self.params)))
            if norm > clip:
                scale = clip / norm
                info["clipped"] = True
                info["grad_norm"] = norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr / (1 - b1 ** self.t)
        vcorr = 1.0 / (1 - b2 ** self.t)
        for n, p in self.params:
            g = p.grad if scale == 1.0 else p.grad * scale
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v * vcorr)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= step
            p.data -= denom
        return info


PRESETS = {
    "desk": {"iterations": 3000, "batch_size": 8, "lr": 3e-4},
    "hdd-paper": {"iterations": 70000, "batch_size": 12, "lr": 1e-4},
    "bddx-paper": {"batch_size": 32, "lr": 3e-4},
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_explain: float = 1.0
    lr: float = 3e-4
    batch_size: int = 8
    iterations: int = 3000
    seed: int = 0
    schedule: str = "joint"  # or "pretrain_then_joint"
    pretrain_iterations: int = 0
    eval_every: int = 0
    eval_stride: int = 2
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    grad_clip: float | None = None
    log_every: int = 1
    labeled_only: bool = False

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.lambda_explain < 0:
            raise ValueError("lambda_explain must be >= 0")
        if self.schedule not in ("joint", "pretrain_then_joint"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 when set")
        if self.eval_stride < 1 or self.log_every < 1:
            raise ValueError("eval_stride and log_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "lambda_explain": self.lambda_explain,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "seed": self.seed,
            "schedule": self.schedule,
            "pretrain_iterations": self.pretrain_iterations,
            "eval_every": self.eval_every,
            "eval_stride": self.eval_stride,
            "checkpoint_every": self.checkpoint_every,
            "checkpoint_path": self.checkpoint_path,
            "grad_clip": self.grad_clip,
            "log_every": self.log_every,
            "labeled_only": self.labeled_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            d = {**PRESETS[preset], **d}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d).validate()


@dataclass
class TrainResult:
    model: BeefModel
    optimizer: Adam
    log: list[dict]
    status: str  # "ok" or "aborted"
    iteration: int
    rng: np.random.Generator

    def log_text(self) -> str:
        return "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.log)


def _model_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def build_model(config: TrainConfig) -> BeefModel:
    return BeefModel(config.model, _model_rng(config.seed))


def train(config: TrainConfig, dataset: Dataset, train_ids: Sequence[int],
          eval_ids: Sequence[int] | None = None, log_path: str | os.PathLike | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded training loop; see :class:`TrainConfig` for the knobs.

    A non-finite loss stops training (status ``"aborted"``); the last
    checkpoint written before the incident is left untouched.
    """
    config.validate()
    model = build_model(config)
    opt = Adam(model.named_parameters(), config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    pairs = sample_index(dataset, train_ids, labeled_only=config.labeled_only)
    if len(pairs) == 0:
        raise ValueError("no training frames in the given episodes")
    log_rows: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(row: dict) -> None:
        log_rows.append(row)
        if log_fh:
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
        if on_log:
            on_log(row)

    status = "ok"
    it = 0
    try:
        for it in range(1, config.iterations + 1):
            lam = config.lambda_explain
            if config.schedule == "pretrain_then_joint" and it <= config.pretrain_iterations:
                lam = 0.0
            pick = pairs[rng.integers(len(pairs), size=config.batch_size)]
            batch = make_batch(dataset, pick)
            model.zero_grad()
            tape = Tape()
            try:
                with tape:
                    out = model.forward(Tensor(batch["clips"]), batch["goals"],
                                        with_explanation=lam > 0)
                    loss, drive, expl = model_losses(model, out, batch, lam)
            except NonFiniteError as exc:
                emit({"iteration": it, "event": "abort", "reason": str(exc)})
                status = "aborted"
                break
            tape.backward(loss)
            info = opt.step(config.grad_clip)
            if info["skipped"]:
                emit({"iteration": it, "event": "skipped_step", "reason": info["reason"]})
            if info["clipped"]:
                emit({"iteration": it, "event": "grad_clipped", "grad_norm": info["grad_norm"]})
            if it % config.log_every == 0 or it == config.iterations:
                row = {"iteration": it, "loss": float(loss.item()), "drive": float(drive.item())}
                if expl is not None:
                    row["explain"] = float(expl.item())
                emit(row)
            if config.eval_every and eval_ids is not None and it % config.eval_every == 0:
                report = evaluate(model, dataset, eval_ids, stride=config.eval_stride)
                emit({"iteration": it, "event": "eval", "mAP": report.mAP,
                      "drive_mse": report.drive_mse, "cause_accuracy": report.cause_accuracy})
            if config.checkpoint_every and config.checkpoint_path and it % config.checkpoint_every == 0:
                save_checkpoint(config.checkpoint_path, model, opt, config, it, rng)
    finally:
        if log_fh:
            log_fh.close()
    if status == "ok" and config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model, opt, config, it, rng)
    return TrainResult(model, opt, log_rows, status, it, rng)


def predict(model: BeefModel, dataset: Dataset, pairs: np.ndarray, batch_size: int = 32) -> dict:
    """Forward pass without recording; returns probabilities, predictions and targets."""
    probs, preds, targets, labels = [], [], [], []
    key = "trajectories" if model.config.output == "trajectory" else "controls"
    with no_record():
        for s in range(0, len(pairs), batch_size):
            batch = make_batch(dataset, pairs[s: s + batch_size])
            out = model.forward(Tensor(batch["clips"]), batch["goals"])
            if out.logits is not None:
                z = out.logits.numpy().astype(np.float64)
                z = np.exp(z - z.max(axis=1, keepdims=True))
                probs.append(z / z.sum(axis=1, keepdims=True))
            preds.append(out.prediction.numpy())
            targets.append(batch[key])
            labels.append(batch["labels"])
    return {
        "probs": np.concatenate(probs) if probs else None,
        "predictions": np.concatenate(preds),
        "targets": np.concatenate(targets),
        "labels": np.concatenate(labels),
    }


def evaluate(model: BeefModel, dataset: Dataset, episode_ids: Sequence[int], stride: int = 2,
             batch_size: int = 32) -> MetricReport:
    """Per-frame cause AP (one-vs-rest, causes only) and driving errors."""
    pairs = sample_index(dataset, episode_ids, stride=stride)
    if len(pairs) == 0:
        raise ValueError("no evaluation frames")
    res = predict(model, dataset, pairs, batch_size)
    report = MetricReport(
        drive_mse=mse(res["predictions"], res["targets"]),
        drive_mae=mae(res["predictions"], res["targets"]),
    )
    if res["probs"] is not None:
        labels = res["labels"]
        n_classes = res["probs"].shape[1]
        names = list(CAUSES[1:n_classes])
        aps = per_class_ap(res["probs"], labels, range(1, n_classes), names)
        report.per_class_ap = aps
        # With no positive frame for any cause, every class is skipped and mAP stays None.
        report.mAP = mean_ap(aps) if any(a is not None for a in aps.values()) else None
        report.accuracy = accuracy(res["probs"], labels)
        caused = labels > 0
        if caused.any():
            report.cause_accuracy = accuracy(res["probs"][caused], labels[caused])
    return report


# -- checkpoints --------------------------------------------------------


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path, model: BeefModel, opt: Adam, config: TrainConfig, iteration: int,
                    rng: np.random.Generator | None = None) -> None:
    entries = {}
    for name, p in model.named_parameters():
        entries[f"param/{name}"] = p.data
    for name, _ in opt.params:
        entries[f"adam.m/{name}"] = opt.m[name]
        entries[f"adam.v/{name}"] = opt.v[name]
    meta = {
        "iteration": iteration,
        "adam_t": opt.t,
        "config": config.to_dict(),
        "rng_state": _rng_state_json(rng) if rng is not None else None,
    }
    entries["meta"] = container.encode_json(meta)
    container.save(path, entries)


def load_checkpoint(path) -> tuple[BeefModel, Adam, TrainConfig, dict]:
    entries = container.load(path)
    if "meta" not in entries:
        raise ValueError(f"{path}: not a checkpoint (no meta entry)")
    meta = container.decode_json(entries["meta"])
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config)
    state = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    model.load_state_dict(state)
    opt = Adam(model.named_parameters(), config.lr)
    opt.t = meta["adam_t"]
    for name, _ in opt.params:
        opt.m[name] = np.array(entries[f"adam.m/{name}"])
        opt.v[name] = np.array(entries[f"adam.v/{name}"])
    return model, opt, config, meta


def restore_rng(meta: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    if meta.get("rng_state") is not None:
        rng.bit_generator.state = meta["rng_state"]
    return rng


# -- experiments --------------------------------------------------------

EXPERIMENT_KINDS = ("layer_sweep", "fusion_comparison", "baseline_grid")
FUSION_ROWS = ("cat_mlp", "mlb", "mfb", "mutan", "bilinear", "block", "layer3_mlp")
BASELINE_ROWS = ("driver_only", "last_layer", "last_layer_plus_blinker", "layer3_mlp",
                 "decision_only", "block")


def _cells(kind: str, base: TrainConfig, layers: Sequence[int], rows: Sequence[str] | None):
    if kind == "layer_sweep":
        for L in layers:
            cfg = copy.deepcopy(base)
            cfg.model.tap_layer = L
            yield f"L{L}", cfg
    elif kind in ("fusion_comparison", "baseline_grid"):
        default = FUSION_ROWS if kind == "fusion_comparison" else BASELINE_ROWS
        for name in rows or default:
            cfg = copy.deepcopy(base)
            cfg.model.explainer = name
            if name == "driver_only":
                cfg.lambda_explain = 0.0
            yield name, cfg
    else:
        raise ValueError(f"unknown experiment kind {kind!r}; expected one of {EXPERIMENT_KINDS}")


def run_experiment(kind: str, base: TrainConfig, dataset: Dataset, splits: dict,
                   seeds: Sequence[int] = (0, 1, 2), layers: Sequence[int] = (1, 2, 3, 4, 5),
                   rows: Sequence[str] | None = None, eval_split: str = "test",
                   progress: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate every cell of the grid with the same seed set.

    Returns ``{"kind", "rows": [...], "runs": [...]}`` where each row holds the
    mean and standard deviation over seeds of mAP and driver MSE.
    """
    base.validate()
    runs = []
    table = []
    for cell, cfg in _cells(kind, base, layers, rows):
        per_seed = []
        for seed in seeds:
            cfg_s = copy.deepcopy(cfg)
            cfg_s.seed = int(seed)
            cfg_s.checkpoint_path = None
            result = train(cfg_s, dataset, splits["train"])
            report = evaluate(result.model, dataset, splits[eval_split], stride=cfg_s.eval_stride)
            run = {"cell": cell, "seed": int(seed), "status": result.status, **report.to_dict()}
            runs.append(run)
            per_seed.append(report)
            if progress:
                progress(f"{kind} {cell} seed={seed} mAP={report.mAP} mse={report.drive_mse:.4f}")
        row = {"cell": cell, "seeds": len(per_seed)}
        for key in ("mAP", "drive_mse", "cause_accuracy"):
            vals = [getattr(r, key) for r in per_seed if getattr(r, key) is not None]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{key}_std"] = float(np.std(vals)) if vals else None
        table.append(row)
    return {"kind": kind, "base": base.to_dict(), "seeds": [int(s) for s in seeds],
            "rows": table, "runs": runs}


def table_to_csv(result: dict) -> str:
    rows = result["rows"]
    buf = io.StringIO()
    keys = ["cell", "seeds", "mAP_mean", "mAP_std", "drive_mse_mean", "drive_mse_std",
            "cause_accuracy_mean", "cause_accuracy_std"]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})
    return buf.getvalue()


def write_experiment(result: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j = out / f"{result['kind']}.json"
    c = out / f"{result['kind']}.csv"
    j.write_text(json.dumps(result, indent=2, sort_keys=True))
    c.write_text(table_to_csv(result))
    return j, c


# -- language head ------------------------------------------------------


@dataclass
class LanguageConfig:
    iterations: int = 2000
    lr: float = 3e-3
    batch_size: int = 50
    seed: int = 0
    frames: int = 20
    tap_layer: int = 2
    fused_dim: int = 32
    proj_dim: int = 60
    block_count: int = 5
    hidden: int = 32
    embed_dim: int = 32
    attn_dim: int = 32
    log_every: int = 100

    def validate(self) -> "LanguageConfig":
        if self.iterations < 0 or self.batch_size < 1 or not self.lr > 0 or self.frames < 1:
            raise ValueError("language config needs iterations >= 0, batch_size >= 1, lr > 0, frames >= 1")
        if self.tap_layer < 1:
            raise ValueError("tap_layer must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown language config fields {sorted(unknown)}")
        return cls(**d).validate()


def language_features(model: BeefModel, episode, count: int = 20, layer: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Decision vectors and pooled ``layer`` features at ``count`` equally spaced valid frames."""
    valid = episode.valid_frames()
    frames = valid[equally_spaced(len(valid), count)]
    clips = np.stack([episode.clip(int(t)) for t in frames])
    goals = np.array([episode.goals[int(t)] for t in frames], dtype=np.int64)
    with no_record():
        m, v = model.decision_and_pool(Tensor(clips), goals, layer)
    return m.numpy().copy(), v.numpy().copy()


def build_language_model(config: LanguageConfig, dim_decision: int, dim_perception: int,
                         vocab_size: int) -> LanguageExplainer:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    return LanguageExplainer(dim_decision, dim_perception, vocab_size, rng,
                             fused_dim=config.fused_dim, proj_dim=config.proj_dim,
                             block_count=config.block_count, hidden=config.hidden,
                             embed_dim=config.embed_dim, attn_dim=config.attn_dim)


@dataclass
class FeatureScaler:
    """Per-dimension standardization of frame features, fitted on training rows."""

    d_mean: np.ndarray
    d_std: np.ndarray
    p_mean: np.ndarray
    p_std: np.ndarray

    @classmethod
    def fit(cls, decisions: np.ndarray, perceptions: np.ndarray, floor: float = 1e-6) -> "FeatureScaler":
        d = np.asarray(decisions, dtype=np.float64).reshape(-1, decisions.shape[-1])
        p = np.asarray(perceptions, dtype=np.float64).reshape(-1, perceptions.shape[-1])
        return cls(d.mean(0), d.std(0) + floor, p.mean(0), p.std(0) + floor)

    def apply(self, decisions: np.ndarray, perceptions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dtype = np.asarray(decisions).dtype
        d = (np.asarray(decisions) - self.d_mean) / self.d_std
        p = (np.asarray(perceptions) - self.p_mean) / self.p_std
        return d.astype(dtype), p.astype(dtype)


def train_language(config: LanguageConfig, decisions: np.ndarray, perceptions: np.ndarray,
                   sentences: Sequence[str], vocab: Vocabulary,
                   on_log: Callable[[dict], None] | None = None):
    """Teacher-forced training of the sentence head on fixed frame features.

    decisions: (N, F, dim_m); perceptions: (N, F, dim_v); one sentence per row.
    Features are standardized first; returns (model, scaler, log rows).
    """
    config.validate()
    decisions, perceptions = np.asarray(decisions), np.asarray(perceptions)
    if decisions.shape[:2] != perceptions.shape[:2] or decisions.shape[0] != len(sentences):
        raise ValueError("need one (F, .) decision/perception sequence per sentence")
    scaler = FeatureScaler.fit(decisions, perceptions)
    decisions, perceptions = scaler.apply(decisions, perceptions)
    tokens = [vocab.encode(s) for s in sentences]
    model = build_language_model(config, decisions.shape[2], perceptions.shape[2], len(vocab))
    opt = Adam(model.named_parameters(), config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
    n = len(sentences)
    rows = []
    for it in range(1, config.iterations + 1):
        pick = np.arange(n) if config.batch_size >= n else rng.choice(n, config.batch_size, replace=False)
        model.zero_grad()
        tape = Tape()
        with tape:
            loss = sequence_loss(model, Tensor(decisions[pick]), Tensor(perceptions[pick]),
                                 [tokens[i] for i in pick])
        tape.backward(loss)
        opt.step()
        if it % config.log_every == 0 or it == config.iterations:
            row = {"iteration": it, "loss": float(loss.item())}
            rows.append(row)
            if on_log:
                on_log(row)
    return model, scaler, rows


def save_language(path, model: LanguageExplainer, scaler: FeatureScaler, config: LanguageConfig,
                  vocab: Vocabulary) -> None:
    entries = {f"param/{k}": v for k, v in model.state_dict().items()}
    for key in ("d_mean", "d_std", "p_mean", "p_std"):
        entries[f"scaler/{key}"] = getattr(scaler, key)
    entries["meta"] = container.encode_json({"config": config.to_dict(), "vocab": vocab.itos[4:]})
    container.save(path, entries)


def load_language(path) -> tuple[LanguageExplainer, FeatureScaler, LanguageConfig, Vocabulary]:
    entries = container.load(path)
    if "meta" not in entries:
        raise ValueError(f"{path}: not a language checkpoint (no meta entry)")
    meta = container.decode_json(entries["meta"])
    config = LanguageConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    scaler = FeatureScaler(*(np.array(entries[f"scaler/{k}"]) for k in ("d_mean", "d_std", "p_mean", "p_std")))
    model = build_language_model(config, scaler.d_mean.size, scaler.p_mean.size, len(vocab))
    model.load_state_dict({k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")})
    return model, scaler, config, vocab
