"""Command-line entry point: ``sdcn gen-data | train | eval | gradcheck | describe``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import evaluation as E
from . import gradcheck
from .io import (DATA_MAGIC, MODEL_MAGIC, FormatError, describe_dataset, load_checkpoint,
                 load_dataset, read_container, save_checkpoint, save_dataset)
from .model import TrainingDiverged, decompose, describe_architecture, predict_label, train
from .sparse import dictionary_from_training_set, src_predict
from .synth import (build_test_set, build_training_set, combo_name, parse_combo,
                    select_channels)

log = logging.getLogger("sdcn")

ALL_COMBOS = ("HH", "HV", "VV", "HH-HV", "HH-VV", "HH-HV-VV")
METHOD_FLAGS = {"sdcn": "SDCN", "cnn": "CNN_only", "src-sm": "SRC_SM", "src-single": "SRC_single"}
MODE_FLAGS = {"sdcn": "sdcn", "cnn-only": "cnn_only", "two-step": "two_step"}
HISTORY_HEADER = ("epoch", "l1", "l2", "total", "accuracy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="parameter preset (default paper)")
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--threads", type=int, help="BLAS thread cap (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdcn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate training and test containers")
    _common(g)
    g.add_argument("--out-dir", type=Path, help=f"output directory (default ${C.OUT_ENV} or "
                   f"{C.DEFAULT_OUT})")
    g.add_argument("--chip", type=int)
    g.add_argument("--n-per-class", type=int)
    g.add_argument("--test-angles", type=int)
    g.add_argument("--n-grounds", type=int)
    g.add_argument("--lambda-lo", type=float)
    g.add_argument("--lambda-hi", type=float)
    g.add_argument("--ground-scale", type=float)
    g.add_argument("--correlation-length", type=float)

    t = sub.add_parser("train", help="train one model on a training container")
    _common(t)
    t.add_argument("--data", type=Path, help="training container (default <out>/train.sdcd)")
    t.add_argument("--out", type=Path, help="checkpoint path (default <out>/<mode>_<combo>.sdcn)")
    t.add_argument("--history", type=Path, help="history CSV (default next to the checkpoint)")
    t.add_argument("--mode", choices=sorted(MODE_FLAGS), default="sdcn")
    t.add_argument("--combo", default="HH-HV-VV", help="polarization combination, e.g. HH-VV")
    t.add_argument("--chip", type=int, help="center-crop chips to N x N before training")
    for name in ("d1", "d2", "filters", "fc1", "fc2", "epochs", "batch-size"):
        t.add_argument(f"--{name}", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--optimizer", choices=("sgd", "momentum", "adam"))

    e = sub.add_parser("eval", help="evaluate checkpoints and SRC baselines on a test container")
    _common(e)
    e.add_argument("--test", type=Path, help="test container (default <out>/test.sdcd)")
    e.add_argument("--train", type=Path, help="training container for the SRC dictionary "
                   "(default <out>/train.sdcd)")
    e.add_argument("--model", type=Path, action="append", default=[],
                   help="checkpoint; repeat for several models")
    e.add_argument("--methods", default="sdcn,cnn,src-sm",
                   help=f"comma list from {','.join(METHOD_FLAGS)}")
    e.add_argument("--combos", help="comma list of combos (default: those of the checkpoints)")
    e.add_argument("--out-dir", type=Path)
    e.add_argument("--k", type=int, help="SRC sparsity budget")
    e.add_argument("--tol", type=float, help="SRC relative residual tolerance")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _common(gc)
    gc.add_argument("--layers", help=f"comma list from {','.join(gradcheck.LAYERS)},conv2d")
    gc.add_argument("--cases", type=int, default=20)

    d = sub.add_parser("describe", help="print a dataset or checkpoint header")
    d.add_argument("path", type=Path)
    return ap


def _resolve(args, **overrides) -> C.RunConfig:
    try:
        return C.resolve(getattr(args, "preset", None), getattr(args, "config", None),
                         {"seed": getattr(args, "seed", None), **overrides})
    except (ValueError, FileNotFoundError) as e:
        raise UsageError(str(e))


def _out_dir(args) -> Path:
    out = getattr(args, "out_dir", None) or C.default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def center_crop(ds, n: int):
    h, w = ds.chip_shape
    if n > min(h, w):
        raise UsageError(f"--chip {n} exceeds the {h}x{w} chips in the dataset")
    if n == h == w:
        return ds
    top, left = (h - n) // 2, (w - n) // 2
    sl = np.s_[:, :, top:top + n, left:left + n]
    return replace(ds, x_tilde=ds.x_tilde[sl].copy(), x=ds.x[sl].copy())


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, chip=args.chip, n_per_class=args.n_per_class,
                   test_angles=args.test_angles, n_grounds=args.n_grounds,
                   lambda_lo=args.lambda_lo, lambda_hi=args.lambda_hi,
                   ground_scale=args.ground_scale, correlation_length=args.correlation_length)
    out = _out_dir(args)
    tr = build_training_set(cfg.n_per_class, (cfg.lambda_lo, cfg.lambda_hi), seed=cfg.seed,
                            h=cfg.chip, w=cfg.chip, n_grounds=cfg.n_grounds,
                            correlation_length=cfg.correlation_length,
                            ground_scale=cfg.ground_scale)
    save_dataset(out / "train.sdcd", tr)
    del tr
    te = build_test_set(cfg.test_lambdas, cfg.test_angles, seed=cfg.seed, h=cfg.chip, w=cfg.chip,
                        correlation_length=cfg.correlation_length, ground_scale=cfg.ground_scale)
    save_dataset(out / "test.sdcd", te)
    for name in ("train.sdcd", "test.sdcd"):
        print(describe_dataset(out / name))
        print()
    return 0


def write_history(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, f"{r.l1:.9g}", f"{r.l2:.9g}", f"{r.total:.9g}",
                        f"{r.accuracy:.9g}"])


def cmd_train(args) -> int:
    cfg = _resolve(args, d1=args.d1, d2=args.d2, filters=args.filters, fc1=args.fc1,
                   fc2=args.fc2, epochs=args.epochs, batch_size=args.batch_size,
                   gamma=args.gamma, learning_rate=args.learning_rate,
                   optimizer=args.optimizer)
    out_dir = C.default_out_dir()
    data = _require(args.data or out_dir / "train.sdcd", "training data")
    try:
        combo = parse_combo(args.combo)
    except ValueError as e:
        raise UsageError(str(e))
    ds = select_channels(load_dataset(data), combo)
    if args.chip is not None:
        ds = center_crop(ds, args.chip)
    chip = ds.chip_shape[0]
    if ds.chip_shape[0] != ds.chip_shape[1]:
        raise UsageError(f"square chips expected, got {ds.chip_shape}")
    try:
        net = cfg.network(len(combo), chip)
    except ValueError as e:
        raise UsageError(str(e))
    mode = MODE_FLAGS[args.mode]
    name = combo_name(combo)
    ckpt = args.out or out_dir / f"{args.mode}_{name}.sdcn"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    hist_path = args.history or ckpt.with_suffix(".history.csv")
    for line in describe_architecture(net):
        log.info(line)
    try:
        params, history = train(ds, net, cfg.training(), mode=mode)
    except TrainingDiverged as e:
        write_history(hist_path, e.history)
        print(f"error: training diverged ({e}); partial history in {hist_path}", file=sys.stderr)
        return 2
    save_checkpoint(ckpt, params, {"mode": mode, "combo": name, "seed": cfg.seed,
                                   "epochs": cfg.epochs, "learning_rate": cfg.learning_rate})
    write_history(hist_path, history)
    last = history[-1]
    print(f"trained {mode} on {name}: epochs={last.epoch} total={last.total:.6f} "
          f"l1={last.l1:.6f} l2={last.l2:.6f} train_acc={last.accuracy:.4f}")
    print(f"checkpoint: {ckpt}\nhistory: {hist_path}")
    return 0


def _parse_list(text: str, allowed, what: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in allowed]
    if bad or not items:
        raise UsageError(f"unknown {what} {bad or text!r}; choose from {','.join(allowed)}")
    return list(dict.fromkeys(items))


def cmd_eval(args) -> int:
    cfg = _resolve(args, k=args.k, tol=args.tol)
    methods = _parse_list(args.methods, METHOD_FLAGS, "method")
    out_dir = C.default_out_dir()
    test_path = _require(args.test or out_dir / "test.sdcd", "test data")
    models = []
    for p in args.model:
        params, extra = load_checkpoint(_require(p, "checkpoint"))
        models.append((p, params, extra))
    if args.combos:
        try:
            combos = [combo_name(parse_combo(c)) for c in args.combos.split(",") if c.strip()]
        except ValueError as e:
            raise UsageError(str(e))
    else:
        combos = list(dict.fromkeys(m[2].get("combo", "HH-HV-VV") for m in models)) or \
            ["HH-HV-VV"]

    def find_model(method, combo):
        mode = {"SDCN": "sdcn", "CNN_only": "cnn_only"}[method]
        c = len(parse_combo(combo))
        for path, params, extra in models:
            if extra.get("mode", "sdcn") != mode:
                continue
            if extra.get("combo") == combo:
                return path, params
            if params.config.channels != c and len(models) == 1:
                raise ValueError(f"checkpoint {path} expects {params.config.channels} channels "
                                 f"but combo {combo} has {c}")
        raise ValueError(f"no {mode} checkpoint for combo {combo} among --model arguments")

    test_full = load_dataset(test_path)
    dictionary_full = None
    if any(m.startswith("src") for m in methods):
        train_path = _require(args.train or out_dir / "train.sdcd", "training data")
        dictionary_full = load_dataset(train_path)

    records: list[E.EvalRecord] = []
    for combo in combos:
        test = select_channels(test_full, combo)
        for flag in methods:
            method = METHOD_FLAGS[flag]
            if method in ("SDCN", "CNN_only"):
                path, params = find_model(method, combo)
                n = params.config.chip_h
                te = center_crop(test, n) if test.chip_shape != (n, n) else test
                pred = predict_label(params, te.x_tilde)
                pred = np.atleast_1d(pred)
                records += E.accuracy_table(method, combo, pred, te.labels, te.lambdas,
                                            te.lambda_levels or None)
                if method == "SDCN":
                    records += E.snr_table(lambda xt: decompose(params, xt), te, method, combo)
            else:
                tr = select_channels(dictionary_full, combo)
                if tr.chip_shape != test.chip_shape:
                    raise ValueError(f"training chips {tr.chip_shape} and test chips "
                                     f"{test.chip_shape} differ")
                d = dictionary_from_training_set(tr)
                labels, x_bar = src_predict(d, test.x_tilde, cfg.k, cfg.tol,
                                            shared_support=(method == "SRC_SM"))
                records += E.accuracy_table(method, combo, labels, test.labels, test.lambdas,
                                            test.lambda_levels or None)
                records += E.snr_table(lambda xt: x_bar, test, method, combo)
            log.info("evaluated %s on %s", method, combo)

    out = _out_dir(args)
    E.export_csv(records, out / "results.csv")
    E.render_svg(records, out / "accuracy.svg", ["accuracy"], title="Accuracy vs noise level",
                 y_label="accuracy")
    E.render_svg(records, out / "snr.svg", ["snr_input_db", "snr_denoised_db"],
                 title="SNR of input (dashed) and denoised signals", y_label="SNR (dB)")
    for r in records:
        if r.metric == "accuracy":
            print(f"{r.method:<11} {r.combo:<9} lambda={r.lam:g} accuracy={r.value:.4f} n={r.n}")
    print(f"wrote {out / 'results.csv'}, {out / 'accuracy.svg'}, {out / 'snr.svg'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    layers = gradcheck.LAYERS if not args.layers else [s.strip() for s in args.layers.split(",")]
    try:
        results = gradcheck.run(layers, seed=cfg.seed, cases=args.cases)
    except ValueError as e:
        raise UsageError(str(e))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def describe_checkpoint(path) -> str:
    params, extra = load_checkpoint(path)
    lines = [f"file: {path}", "kind: sdcn-model"]
    lines += [f"{k}: {v}" for k, v in sorted(extra.items())]
    lines.append(f"weights: {params.n_weights}")
    lines += describe_architecture(params.config)
    return "\n".join(lines)


def cmd_describe(args) -> int:
    path = _require(args.path, "file")
    with open(path, "rb") as f:
        magic = f.read(5)
    if magic == DATA_MAGIC:
        print(describe_dataset(path))
    elif magic == MODEL_MAGIC:
        cfg, _ = read_container(path)
        if cfg.get("kind") == "sdcn-model":
            print(describe_checkpoint(path))
        else:
            print(f"file: {path}")
            print("\n".join(f"{k}: {v}" for k, v in sorted(cfg.items())))
    else:
        raise FormatError(f"{path}: unrecognized file (magic {magic!r})")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "describe": cmd_describe}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=threads or os.cpu_count() or 1):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FormatError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
