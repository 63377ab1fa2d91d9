"""Command-line entry point: ``beef <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, files, configs),
2 numerical failure (gradient check above tolerance, aborted training).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

SWEEP_KINDS = {"layer": "layer_sweep", "fusion": "fusion_comparison", "baseline": "baseline_grid"}


class UsageError(Exception):
    """Validation failure reported to the user with exit code 1."""


class NumericalFailure(Exception):
    """Numerical failure reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_thread_cap() -> None:
    """Honour BEEF_THREADS by capping BLAS pools.

    numpy is imported lazily in this module so the cap is in place before
    the BLAS library starts its threads.
    """
    value = os.environ.get("BEEF_THREADS")
    if value is None:
        return
    if not value.isdigit() or int(value) < 1:
        raise UsageError(f"BEEF_THREADS must be a positive integer, got {value!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = value


def git_blob_hash(data: bytes) -> str:
    """SHA-1 of ``blob <len>\\0<data>``, the id git gives the same bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_inputs(paths: dict) -> dict:
    out = {}
    for key, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            p = p / "manifest.json"
        out[key] = {"path": str(p), "git_blob_sha1": git_blob_hash(p.read_bytes())}
    return out


def write_manifest(out_dir, argv: list[str], subcommand: str, resolved: dict, inputs: dict,
                   outputs: list[str]) -> Path:
    import numpy as np

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "beef",
        "version": __version__,
        "subcommand": subcommand,
        "argv": argv,
        "resolved_config": resolved,
        "inputs": _hash_inputs(inputs),
        "outputs": outputs,
        "env": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "BEEF_THREADS": os.environ.get("BEEF_THREADS"),
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path, what: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise UsageError(f"{what} not found: {p}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be a JSON object")
    return data


def _config(path, cls, what: str):
    data = _read_json(path, what)
    try:
        return cls.from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: invalid {what}: {exc}") from None


def _load_data(path):
    from .synthworld import load_dataset

    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise UsageError(f"dataset not found: {p} (expected a directory with manifest.json)")
    try:
        return load_dataset(p)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{p}: invalid dataset: {exc}") from None


def _load_ckpt(path):
    from .container import ContainerError
    from .trainer import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ContainerError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: invalid checkpoint: {exc}") from None


def _split_ids(manifest: dict, name: str) -> list[int]:
    splits = manifest.get("splits", {})
    if name not in splits:
        raise UsageError(f"dataset has no split {name!r}; available: {sorted(splits)}")
    return list(splits[name])


def _echo(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


# -- subcommands --------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    from .synthworld import WorldConfig, generate, save_dataset, split

    cfg = _config(args.config, WorldConfig, "world config") if args.config else WorldConfig()
    ds = generate(cfg)
    splits = split(len(ds), seed=args.split_seed)
    path = save_dataset(ds, args.out, splits=splits)
    manifest = json.loads(path.read_text())
    _echo(json.dumps({"episodes": len(ds), "cause_counts": ds.cause_counts(),
                      "content_hash": manifest["content_hash"]}, sort_keys=True))
    # The dataset manifest already records config and splits; add the run provenance next to it.
    write_run = Path(args.out) / "run"
    write_manifest(write_run, argv, "gen-data", {"world": cfg.to_dict(), "split_seed": args.split_seed},
                   {"config": args.config}, [str(path)])
    return EXIT_OK


def cmd_train(args, argv) -> int:
    import numpy as np

    from .trainer import (
        LanguageConfig,
        TrainConfig,
        evaluate,
        language_features,
        save_language,
        train,
        train_language,
    )

    cfg = _config(args.config, TrainConfig, "train config") if args.config else TrainConfig()
    lang_cfg = _config(args.language, LanguageConfig, "language config") if args.language else None
    ds, manifest = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_path = str(out / "checkpoint.beef")
    eval_split = args.eval_split
    train_ids = _split_ids(manifest, "train")
    eval_ids = _split_ids(manifest, eval_split)
    result = train(cfg, ds, train_ids, eval_ids=eval_ids, log_path=out / "log.jsonl")
    outputs = [str(out / "log.jsonl")]
    if result.status != "ok":
        write_manifest(out, argv, "train", {"train": cfg.to_dict()},
                       {"config": args.config, "data": args.data}, outputs)
        raise NumericalFailure(f"training aborted at iteration {result.iteration}; see {out / 'log.jsonl'}")
    outputs.append(cfg.checkpoint_path)
    report = evaluate(result.model, ds, eval_ids, stride=cfg.eval_stride)
    (out / "report.json").write_text(report.to_json() + "\n")
    outputs.append(str(out / "report.json"))
    resolved = {"train": cfg.to_dict(), "eval_split": eval_split}
    if lang_cfg is not None:
        eps = [ds[i] for i in train_ids if ds[i].sentence is not None]
        if not eps:
            raise UsageError("the training split has no captioned episodes for the language head")
        feats = [language_features(result.model, e, lang_cfg.frames, lang_cfg.tap_layer) for e in eps]
        lm, scaler, _ = train_language(lang_cfg, np.stack([f[0] for f in feats]),
                                       np.stack([f[1] for f in feats]), [e.sentence for e in eps],
                                       ds.vocabulary())
        save_language(out / "language.beef", lm, scaler, lang_cfg, ds.vocabulary())
        outputs.append(str(out / "language.beef"))
        resolved["language"] = lang_cfg.to_dict()
    write_manifest(out, argv, "train", resolved,
                   {"config": args.config, "language_config": args.language, "data": args.data}, outputs)
    _echo(report.to_json())
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .trainer import evaluate

    model, _, cfg, _ = _load_ckpt(args.ckpt)
    ds, manifest = _load_data(args.data)
    report = evaluate(model, ds, _split_ids(manifest, args.split), stride=args.stride)
    text = report.to_json() if args.format == "json" else report.to_csv()
    _echo(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        name = "report.json" if args.format == "json" else "report.csv"
        (out / name).write_text(text + ("\n" if not text.endswith("\n") else ""))
        write_manifest(out, argv, "eval", {"train": cfg.to_dict(), "split": args.split, "stride": args.stride},
                       {"ckpt": args.ckpt, "data": args.data}, [str(out / name)])
    return EXIT_OK


def cmd_explain(args, argv) -> int:
    import numpy as np

    from .explain import DecodeConfig, generate_explanation
    from .synthworld import CAUSES, make_batch
    from .tensor import Tensor, no_record
    from .trainer import language_features, load_language

    model, _, cfg, _ = _load_ckpt(args.ckpt)
    ds, _ = _load_data(args.data)
    if not 0 <= args.episode < len(ds):
        raise UsageError(f"--episode {args.episode} outside 0..{len(ds) - 1}")
    ep = ds[args.episode]
    valid = ep.valid_frames()
    frame = int(valid[len(valid) // 2]) if args.frame is None else args.frame
    if frame not in set(valid.tolist()):
        raise UsageError(f"--frame {frame} is not a valid frame ({int(valid[0])}..{int(valid[-1])})")
    if args.temperature is not None and args.temperature < 0:
        raise UsageError("--temperature must be >= 0")
    batch = make_batch(ds, np.array([[args.episode, frame]]))
    with no_record():
        out = model.forward(Tensor(batch["clips"]), batch["goals"])
    result = {
        "episode": args.episode,
        "frame": frame,
        "true_cause": CAUSES[int(batch["labels"][0])],
        "trajectory": out.prediction.numpy()[0].astype(np.float64).tolist(),
    }
    if out.logits is not None:
        z = out.logits.numpy()[0].astype(np.float64)
        p = np.exp(z - z.max())
        p /= p.sum()
        result["cause_distribution"] = {CAUSES[i]: float(p[i]) for i in range(len(p))}
        result["predicted_cause"] = CAUSES[int(np.argmax(p))]
    if args.language:
        if not Path(args.language).is_file():
            raise UsageError(f"language checkpoint not found: {args.language}")
        lm, scaler, lang_cfg, vocab = load_language(args.language)
        dec, per = scaler.apply(*language_features(model, ep, lang_cfg.frames, lang_cfg.tap_layer))
        decode = DecodeConfig.from_temperature(args.temperature, args.seed)
        with no_record():
            ids = generate_explanation(lm, Tensor(dec), Tensor(per), decode)
        result["sentence"] = " ".join(vocab.decode(ids))
        result["decode"] = decode.to_dict()
    text = json.dumps(result, indent=2, sort_keys=True)
    _echo(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "explanation.json").write_text(text + "\n")
        write_manifest(out, argv, "explain",
                       {"train": cfg.to_dict(), "episode": args.episode, "frame": frame,
                        "temperature": args.temperature, "seed": args.seed},
                       {"ckpt": args.ckpt, "data": args.data, "language": args.language},
                       [str(out / "explanation.json")])
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args, argv) -> int:
    from .trainer import TrainConfig, run_experiment, write_experiment

    base = _config(args.config, TrainConfig, "train config") if args.config else TrainConfig()
    ds, manifest = _load_data(args.data)
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    _split_ids(manifest, args.split)
    kind = SWEEP_KINDS[args.kind]
    rows = args.rows.split(",") if args.rows else None
    progress = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    try:
        result = run_experiment(kind, base, ds, splits, seeds=args.seeds, layers=args.layers, rows=rows,
                                eval_split=args.split, progress=progress)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    j, c = write_experiment(result, args.out)
    write_manifest(args.out, argv, "sweep",
                   {"kind": kind, "base": base.to_dict(), "seeds": args.seeds, "layers": args.layers,
                    "rows": rows, "split": args.split},
                   {"config": args.config, "data": args.data}, [str(j), str(c)])
    _echo(c.read_text())
    if any(r["status"] != "ok" for r in result["runs"]):
        raise NumericalFailure("at least one run aborted; see the JSON table")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import CASES, TOLERANCE, run_case

    names = args.ops.split(",") if args.ops else list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise UsageError(f"unknown ops {unknown}; available: {sorted(CASES)}")
    start = time.perf_counter()
    results = []
    _echo(f"{'op':32s} {'max_rel_error':>14s} {'seeds':>5s}  status")
    for name in names:
        r = run_case(name, seeds=args.seeds, max_coords=args.max_coords)
        results.append(r)
        _echo(f"{name:32s} {r.max_error:14.3e} {len(r.seeds):5d}  {'ok' if r.passed else 'FAIL'}")
    total = time.perf_counter() - start
    _echo(f"{len(results)} ops, tolerance {TOLERANCE:g}, {total:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table = [{"op": r.name, "max_error": r.max_error, "seeds": r.seeds, "skipped_seeds": r.skipped_seeds,
                  "passed": r.passed} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(table, indent=2) + "\n")
        write_manifest(out, argv, "gradcheck", {"ops": names, "seeds": args.seeds, "max_coords": args.max_coords},
                       {}, [str(out / "gradcheck.json")])
    if not all(r.passed for r in results):
        raise NumericalFailure("gradient check above tolerance")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beef", description="Driving explanations from fused decision and perception features.")
    p.add_argument("--version", action="version", version=f"beef {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic driving dataset")
    g.add_argument("--config", help="world config JSON (defaults if omitted)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--split-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a driving model with an explanation head")
    t.add_argument("--config", help="train config JSON; may name a preset under the key 'preset'")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--eval-split", default="val", choices=("train", "val", "test"))
    t.add_argument("--language", help="language-head config JSON; trains a sentence head after the driver")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--stride", type=int, default=2)
    e.add_argument("--format", default="json", choices=("json", "csv"))
    e.add_argument("--out", help="directory for the report and manifest")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="explain one frame of one episode")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--episode", type=int, required=True)
    x.add_argument("--frame", type=int, help="frame index (default: middle valid frame)")
    x.add_argument("--language", help="language checkpoint from train --language")
    x.add_argument("--temperature", type=float, help="sampling temperature; 0 or omitted means greedy")
    x.add_argument("--seed", type=int, help="sampling seed (default 0 when sampling)")
    x.add_argument("--out", help="directory for the explanation and manifest")
    x.set_defaults(func=cmd_explain)

    s = sub.add_parser("sweep", help="multi-seed experiment grid")
    s.add_argument("--kind", required=True, choices=sorted(SWEEP_KINDS))
    s.add_argument("--config", help="base train config JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    s.add_argument("--layers", type=_int_list, default=[1, 2, 3, 4, 5])
    s.add_argument("--rows", help="comma-separated explainer names (fusion/baseline sweeps)")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--verbose", action="store_true", help="progress lines on stderr")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seeds", type=int, default=3, help="kink-safe seeds per op")
    c.add_argument("--max-coords", type=int, default=12, help="coordinates probed per input tensor")
    c.add_argument("--ops", help="comma-separated subset of ops")
    c.add_argument("--out", help="directory for the JSON table and manifest")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
