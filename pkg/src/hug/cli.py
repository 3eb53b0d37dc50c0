"""Command-line entry points.

Exit status: 0 success, 1 validation failure (bad config, file or format),
2 numerical failure (diverged training, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .evaluator import (check_bound, component_exemplars, encode_set, evaluate_retrieval,
                        overall_uncertainty, uncertainty_noise_correlation)
from .modes import get_mode
from .persist import FormatError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .synthdata import gen_triplets, gen_world
from .trainer import check_distance_gradients, check_loss_gradients, train

log = logging.getLogger("hug")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
GRAD_TOL, KERNEL_TOL = 1e-4, 1e-6


class NumericalFailure(RuntimeError):
    pass


def _emit(record: dict, out=None) -> None:
    print(json.dumps(record, sort_keys=True, default=float), file=out or sys.stdout, flush=True)


def _load_config(path) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()


def _echo_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(cfg.to_text())


def _data_paths(data_dir) -> tuple[Path, Path]:
    d = Path(data_dir)
    return d / "train.hugd", d / "val.hugd"


def _load_split(data_dir, split: str):
    train_p, val_p = _data_paths(data_dir)
    path = {"train": train_p, "val": val_p}[split]
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found")
    return load_dataset(path)[1]


def _load_model(path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    text, params = load_checkpoint(path)
    return RunConfig.from_text(text, f"{path} (embedded config)"), params


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = gen_world(cfg.world(), cfg["seed.world"])
    text = cfg.to_text()
    for split, n, seed in (("train", cfg["data.n_train"], cfg["seed.data"]),
                           ("val", cfg["data.n_val"], cfg["seed.data"] + 10)):
        data = gen_triplets(world, n, cfg.noise(), seed, cfg["data.max_gallery"])
        save_dataset(out / f"{split}.hugd", data, text)
        _emit({"event": "dataset", "split": split, "n": len(data), "gallery": len(data.gallery)})
    _echo_config(cfg, out / "config.txt")
    return EXIT_OK


def _train_from(cfg: RunConfig, data_dir, log_path: Path | None = None):
    train_set = _load_split(data_dir, "train")
    val_set = _load_split(data_dir, "val")
    sink = open(log_path, "w") if log_path else None
    try:
        res = train(cfg.train(), cfg.model(), train_set, val_set,
                    on_record=(lambda r: _emit(r, sink)) if sink else None)
    finally:
        if sink:
            sink.close()
    return res


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    res = _train_from(cfg, args.data, out.with_name(out.name + ".log.jsonl"))
    save_checkpoint(out, res.params, cfg.to_text())
    _echo_config(cfg, out.with_name(out.name + ".config.txt"))
    _emit({"event": "trained", "status": res.status, **(res.val_metrics or {})})
    if res.status != "ok":
        raise NumericalFailure(f"training {res.status}; last finite parameters saved to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    data = _load_split(args.data, args.split)
    metrics = evaluate_retrieval(params, get_mode(cfg["train.mode"]), data)
    _emit({"event": "eval", "checkpoint": str(args.checkpoint), "split": args.split, **metrics})
    sweeps = {"train.lambda_cord": args.sweep_lambda_cord or cfg["eval.sweep_lambda_cord"],
              "train.lambda_fc": args.sweep_lambda_fc or cfg["eval.sweep_lambda_fc"]}
    for key, values in sweeps.items():
        for v in values:
            run = RunConfig(dict(cfg.values))
            run.set(key, float(v))
            res = _train_from(run, args.data)
            if res.status != "ok":
                raise NumericalFailure(f"sweep {key}={v}: training {res.status}")
            m = evaluate_retrieval(res.params, get_mode(run["train.mode"]), data)
            _emit({"event": "sweep", "key": key, "value": float(v), **m})
    return EXIT_OK


def cmd_check_grad(args) -> int:
    cfg = _load_config(args.config)
    errors = check_loss_gradients(cfg.model(), seed=cfg["seed.train"], max_coords=args.max_coords)
    errors["distance_kernel"] = check_distance_gradients(cfg["model.n_components"], cfg["model.dim"])
    ok = all(v < GRAD_TOL for k, v in errors.items() if k != "distance_kernel")
    ok = ok and errors["distance_kernel"] < KERNEL_TOL
    for k, v in errors.items():
        _emit({"event": "grad_check", "term": k, "max_rel_error": v})
    if not ok:
        raise NumericalFailure("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_check_bound(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    if not get_mode(cfg["train.mode"]).dynamic_weights:
        raise ConfigError("check-bound needs a full-mode (train.mode = 7) checkpoint")
    data = _load_split(args.data, args.split)
    n = min(len(data), cfg["eval.bound_samples"])
    report = check_bound(params, data.subset(np.arange(n)))
    _emit({"event": "bound", **report.as_dict()})
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    spec = get_mode(cfg["train.mode"])
    if not spec.probabilistic:
        raise ConfigError("inspect needs a probabilistic checkpoint (train.mode >= 1)")
    data = _load_split(args.data, args.split)
    enc = encode_set(params, spec, data)
    component = cfg["eval.component"] if args.component is None else args.component
    count = cfg["eval.count"] if args.count is None else args.count
    ex = component_exemplars(params, data, component, count, spec, var_r=enc.var_r)
    _emit({"event": "exemplars", "component": ex.component, "truncated": ex.truncated})
    for which, ids, labels in (("top", ex.top, ex.top_labels), ("bottom", ex.bottom, ex.bottom_labels)):
        for rank, lab in enumerate(labels):
            _emit({"event": "exemplar", "list": which, "rank": rank, **lab})
    if spec.coord_in_fusion:
        _emit({"event": "noise_correlation", **uncertainty_noise_correlation(params, data)})
    overall = overall_uncertainty(enc.var_r)
    counts, edges = np.histogram(overall, bins=args.bins)
    print("x\ty")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"{0.5 * (lo + hi):.6g}\t{int(c)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hug", description="Uncertainty-guided composed retrieval at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/val datasets into a directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one ablation mode")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics, optionally with lambda sweeps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--sweep-lambda-cord", type=float, nargs="*")
    e.add_argument("--sweep-lambda-fc", type=float, nargs="*")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check-grad", help="finite-difference check of every loss term")
    c.add_argument("--config")
    c.add_argument("--max-coords", type=int, default=6, help="coordinates probed per parameter (0: all)")
    c.set_defaults(func=cmd_check_grad)

    b = sub.add_parser("check-bound", help="dynamic vs static fusion bound terms")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--split", choices=("train", "val"), default="val")
    b.set_defaults(func=cmd_check_bound)

    i = sub.add_parser("inspect", help="component exemplars and uncertainty histogram")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split", choices=("train", "val"), default="val")
    i.add_argument("--component", type=int)
    i.add_argument("--count", type=int)
    i.add_argument("--bins", type=int, default=20)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
