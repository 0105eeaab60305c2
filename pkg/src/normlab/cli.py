"""Command-line entry point: ``normlab <subcommand> ...``.

Exit codes: 0 ok, 1 config or input error, 2 diverged training, 3 gradient
check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, load_config
from .context import ContextTable, style_transfer
from .data import load_stats
from .exceptions import NormLabError
from .experiment import build_model, prepare_data
from .gmm import GaussianMixture, save_gmm
from .report import write_report
from .suites import SCOPES, TOLERANCE, format_report, run_scope
from .training import evaluate

logger = logging.getLogger("normlab")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3


def thread_limit():
    """Cap BLAS threads from ``NORMLAB_THREADS`` when it is set."""
    value = os.environ.get("NORMLAB_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def _config_from(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.train.output_dir = args.out
    if getattr(args, "inference", None):
        cfg.train.inference = args.inference
    return cfg.validate()


def cmd_train(args) -> int:
    if args.print_defaults:
        sys.stdout.write(ExperimentConfig().to_ini())
        return EXIT_OK
    from .experiment import run_experiment
    cfg = _config_from(args)
    metrics, _, _ = run_experiment(cfg, cfg.train.output_dir)
    print(json.dumps({"status": metrics.status, "epochs": len(metrics.epoch),
                      "output_dir": cfg.train.output_dir, "message": metrics.message}))
    return EXIT_DIVERGED if metrics.status == "diverged" else EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        results = run_scope(scope, args.seed)
        print(f"# scope {scope}")
        print(format_report(results, TOLERANCE))
        ok &= all(r.passed(TOLERANCE) for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_fit_gmm(args) -> int:
    if args.input:
        X = np.load(args.input)
        X = X.reshape(X.shape[0], -1)
    else:
        cfg = _config_from(args)
        cfg.context.rule = "none"
        cfg.model.context_input = "none"
        tr = prepare_data(cfg).splits.train
        X = tr.images.reshape(len(tr), -1)
    est = GaussianMixture(args.k, max_iter=args.max_iter, tol=args.tol,
                          random_state=0 if args.seed is None else args.seed).fit(X)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_gmm(est.model_, out / "gmm.json")
    d = est.diagnostics_
    diag = {"log_likelihood": d.log_likelihood, "n_iter": d.n_iter, "converged": d.converged,
            "reseeded": d.reseeded, "monotone": d.is_monotone(1e-9), "n_samples": int(X.shape[0])}
    (out / "gmm_diagnostics.json").write_text(json.dumps(diag, indent=2))
    print(json.dumps({"k": args.k, "n_iter": d.n_iter, "final_log_likelihood": d.log_likelihood[-1],
                      "monotone": diag["monotone"]}))
    return EXIT_OK


def table_from_checkpoint(path, layer: str = "cn") -> ContextTable:
    state = checkpoint.load(path)
    prefix = f"{layer}."
    arrays = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    missing = [b for b in ContextTable.BLOCKS if b not in arrays]
    if missing:
        raise NormLabError(f"{path}: no context table under {layer!r} (missing {missing})")
    return ContextTable.from_arrays(arrays)


def read_image(path) -> tuple[np.ndarray, bool]:
    """``(C, H, W)`` float array; PNG pixels are scaled to ``[0, 1]``."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        return (arr[None] if arr.ndim == 2 else arr), False
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L" if img.mode in ("L", "I", "1") else "RGB"), dtype=np.float64) / 255.0
    return (arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)), True


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, arr)
        return
    from PIL import Image
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(u8[0] if u8.shape[0] == 1 else u8.transpose(1, 2, 0))
    img.save(path)


def cmd_style_transfer(args) -> int:
    table = table_from_checkpoint(args.checkpoint, args.layer)
    x, _ = read_image(args.input)
    raw_mean = float(x.mean())
    if args.stats:
        mean, std = load_stats(args.stats)
        x = (x - mean[:, None, None]) / std[:, None, None]
    y = style_transfer(x, args.from_ctx, args.to_ctx, table, args.epsilon)
    if args.stats:
        y = y * std[:, None, None] + mean[:, None, None]
    write_image(args.output, y)
    print(json.dumps({"from": args.from_ctx, "to": args.to_ctx, "input_mean": raw_mean,
                      "output_mean": float(y.mean()), "output": str(args.output)}))
    return EXIT_OK


def cmd_report(args) -> int:
    paths = write_report(args.runs, args.out or "report", args.metric, args.threshold, args.plot_metric)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    data = prepare_data(cfg)
    model = build_model(cfg, data.shape, data.num_classes, data.n_contexts)
    model.load_state_dict(checkpoint.load(args.checkpoint))
    split = data.splits.test
    if args.no_contexts:
        split.contexts = None
    res = evaluate(model, split, cfg.train.inference, cfg.train.batch_size)
    print(json.dumps({"inference": cfg.train.inference, **res}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normlab", description="Normalization layers lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inference=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if inference:
            sp.add_argument("--inference", choices=("cn", "cn+"))

    t = sub.add_parser("train", help="train a model from a config file")
    common(t, inference=True)
    t.add_argument("--print-defaults", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fit-gmm", help="fit a diagonal GMM to a config's training images or an .npy matrix")
    common(f)
    f.add_argument("--input")
    f.add_argument("--k", type=int, default=3)
    f.add_argument("--max-iter", type=int, default=200)
    f.add_argument("--tol", type=float, default=1e-6)
    f.set_defaults(func=cmd_fit_gmm)

    s = sub.add_parser("style-transfer", help="renormalize an image from one context to another")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--from", dest="from_ctx", type=int, required=True)
    s.add_argument("--to", dest="to_ctx", type=int, required=True)
    s.add_argument("--layer", default="cn")
    s.add_argument("--stats", help="dataset statistics sidecar used to standardize the image first")
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.set_defaults(func=cmd_style_transfer)

    r = sub.add_parser("report", help="compare run directories")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out")
    r.add_argument("--metric", default="train_acc")
    r.add_argument("--threshold", type=float, default=0.95)
    r.add_argument("--plot-metric", default="val_loss")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    common(e, inference=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--no-contexts", action="store_true", help="drop the test context assignment")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        with thread_limit():
            return args.func(args)
    except (NormLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
