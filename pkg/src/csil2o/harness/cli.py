"""Command-line entry point: ``csil2o <subcommand> ...``.

Every subcommand writes CSV files with a header row under ``--out`` (and
``flops`` additionally prints its CSV to stdout).  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import channelgen as cg
from ..encoder import encoder_flops
from ..errors import FormatError, NonConvergenceError, NumericalError
from ..l2o import convergence_report, decode
from ..quantize import save_codebook
from .. import ndtensor as nd
from .experiments import complexity_report, fit_codebooks, multirate_eval, quantized_eval, ratio_to_m
from .model import CsiL2O, ModelConfig
from .plots import line_chart
from .training import TrainConfig, evaluate, ista_baseline_nmse, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("csil2o")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metrics_csv(path, metrics):
    _write_csv(path, ["metric", "value"], [[k, _fmt(v)] for k, v in metrics.items()])


def _fmt(v):
    if isinstance(v, float):
        return "-inf" if v == -math.inf else repr(v)
    return v


def _load_split(data, split):
    p = Path(data)
    target = p / f"{split}.clds" if p.is_dir() else p
    if not target.exists():
        raise DataError(f"dataset not found: {target}")
    try:
        return cg.load_dataset(target)
    except FormatError as exc:
        raise DataError(str(exc)) from None


def _load_model(path):
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return CsiL2O.load(path)
    except (FormatError, KeyError) as exc:
        raise DataError(str(exc)) from None


def _parse_ratio(text):
    return float(Fraction(text))


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(a):
    cfg = cg.GenConfig(
        N_c=a.nc, N_t=a.nt, N_a=a.na, n_paths=a.paths, delay_spread=a.delay_spread,
        angle_spread=a.angle_spread, seed=a.seed, fractional_delays=a.fractional_delays,
        power_decay=a.power_decay,
    )
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": a.count, "val": a.val_count, "test": a.test_count}
    metrics = {}
    for split, count in counts.items():
        ds = cg.generate(cfg, count, split)
        cg.save_dataset(ds, out / f"{split}.clds")
        metrics[f"{split}_count"] = count
    metrics["n"] = cfg.n
    _metrics_csv(out / "gen_data.csv", metrics)


def _model_config(a, n_dims):
    N_a, N_t = n_dims
    n = 2 * N_a * N_t
    M = a.m if a.m else ratio_to_m(1.0 / a.cr, n)
    G = a.g if a.g else max(1, round(51 / 256 * a.ni))
    return ModelConfig(N_a=N_a, N_t=N_t, M=M, hidden=a.hidden, w1=a.w1, w2=a.w2, N_i=a.ni, G=G,
                       learned_transform=not a.identity_transform)


def cmd_train(a):
    tr = _load_split(a.data, "train")
    va = _load_split(a.data, "val")
    mcfg = _model_config(a, (tr.config.N_a, tr.config.N_t))
    tcfg = TrainConfig(
        T_unroll=a.t_unroll, epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, beta=a.beta,
        seed=a.seed, patience=a.patience, pretrain_epochs=a.pretrain_epochs,
        clip_norm=a.clip_norm if a.clip_norm > 0 else None,
    )
    out = Path(a.out)
    res = train(tcfg, tr.matrix(), va.matrix(), mcfg, out_dir=out)
    _write_csv(out / "train_history.csv", ["epoch", "train_loss", "val_nmse_db"],
               [[h["epoch"], _fmt(h["train_loss"]), _fmt(h["val_nmse_db"])] for h in res.history])
    _metrics_csv(out / "train_summary.csv", {
        "best_epoch": res.best_epoch,
        "best_val_nmse_db": res.best_val_nmse,
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
    })
    if res.history:
        line_chart(out / "train_history.svg", [h["epoch"] for h in res.history],
                   {"validation": [h["val_nmse_db"] for h in res.history]}, "epoch", "NMSE (dB)")


def cmd_eval(a):
    model = _load_model(a.ckpt)
    te = _load_split(a.data, a.split)
    rep = evaluate(model, te.matrix(), a.iters, seed=a.seed)
    metrics = {"nmse_db": rep.nmse_db, **complexity_report(model, a.iters)}
    if a.ista:
        for lam in a.ista_lambdas:
            metrics[f"ista_nmse_db_lambda_{lam!r}"] = ista_baseline_nmse(te.matrix(), model.encoder.M, lam, a.ista_iters, a.seed)
    if not math.isfinite(rep.nmse_db) and rep.nmse_db != -math.inf:
        raise NumericalError(f"evaluation produced NMSE {rep.nmse_db}")
    out = Path(a.out)
    _metrics_csv(out / "eval.csv", metrics)
    _write_csv(out / "objective.csv", ["iteration", "objective"],
               [[i + 1, _fmt(v)] for i, v in enumerate(rep.objective)])
    line_chart(out / "objective.svg", list(range(1, len(rep.objective) + 1)), {"objective": rep.objective},
               "iteration", "objective", logy=all(v > 0 for v in rep.objective))


def cmd_decode(a):
    model = _load_model(a.ckpt)
    te = _load_split(a.data, a.split)
    H = te.matrix()[: a.count] if a.count else te.matrix()
    S = H @ model.encoder.W.data.T
    with nd.no_grad():
        x, trace = decode(model.net, model.transform, model.encoder.W, S, a.iters, seed=a.seed, lam=a.lam)
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("decode produced non-finite estimates")
    out = Path(a.out)
    _write_csv(out / "decode_trace.csv", ["iteration", "objective", "displacement", "b1_norm", "b2_norm"],
               [[i + 1, _fmt(o), _fmt(d), _fmt(b1), _fmt(b2)]
                for i, (o, d, b1, b2) in enumerate(zip(trace.objective, trace.displacement, trace.b1_norm, trace.b2_norm))])
    if a.report:
        rep = convergence_report(trace, threshold=a.threshold)
        _metrics_csv(out / "convergence.csv", {
            "iterations": rep["iterations"],
            "last_displacement": rep["last_displacement"],
            "first_below_threshold": rep["first_below"] if rep["first_below"] is not None else "none",
            "threshold": rep["threshold"],
            "last_b1_norm": rep["b1_norm"][-1],
            "last_b2_norm": rep["b2_norm"][-1],
        })
    line_chart(out / "decode_objective.svg", list(range(1, len(trace.objective) + 1)),
               {"objective": trace.objective}, "iteration", "objective",
               logy=all(v > 0 for v in trace.objective))


def cmd_quantize_eval(a):
    model = _load_model(a.ckpt)
    tr = _load_split(a.data, "train")
    te = _load_split(a.data, a.split)
    cbs = fit_codebooks(model, tr.matrix(), a.bits)
    rows = quantized_eval(model, te.matrix(), cbs, a.iters, seed=a.seed)
    out = Path(a.out)
    _write_csv(out / "quantize_eval.csv", ["ratio", "bits", "nmse_db"],
               [[_fmt(r["ratio"]), r["bits"], _fmt(r["nmse_db"])] for r in rows])
    _write_csv(out / "quantizer_mse.csv", ["B", "mse"], [[r["B"], _fmt(r["quant_mse"])] for r in rows])
    for B, cb in cbs.items():
        save_codebook(out / f"codebook_B{B}.clcb", cb)


def cmd_multirate(a):
    model = _load_model(a.ckpt)
    te = _load_split(a.data, a.split)
    n = model.cfg.n
    Ms = list(a.ms or []) + [ratio_to_m(r, n) for r in (a.ratios or [])]
    if not Ms:
        raise UsageError("multirate needs --ms or --ratios")
    bad = [M for M in Ms if not 0 < M <= n]
    if bad:
        raise UsageError(f"codeword lengths {bad} outside (0, {n}]")
    rows, violations = multirate_eval(model, te.matrix(), Ms, a.iters, seed=a.seed)
    out = Path(a.out)
    # Unquantized feedback: bits column counts a raw float64 per codeword entry.
    _write_csv(out / "multirate.csv", ["ratio", "bits", "nmse_db"],
               [[_fmt(r["ratio"]), 64 * r["M"], _fmt(r["nmse_db"])] for r in rows])
    _write_csv(out / "multirate_ordering.csv", ["smaller_M", "larger_M"], [list(v) for v in violations])
    line_chart(out / "multirate.svg", [r["ratio"] for r in rows], {"Csi-L2O": [r["nmse_db"] for r in rows]},
               "compression ratio", "NMSE (dB)")
    if any(not math.isfinite(r["nmse_db"]) and r["nmse_db"] != -math.inf for r in rows):
        raise NumericalError("non-finite NMSE in multirate evaluation")


def cmd_flops(a):
    n = 2 * a.na * a.nt
    M = a.m if a.m else ratio_to_m(1.0 / a.cr, n)
    metrics = {"encoder_flops": encoder_flops(a.na, a.nt, M), "encoder_params": M * n}
    if a.decoder:
        mcfg = ModelConfig(N_a=a.na, N_t=a.nt, M=M, hidden=a.hidden, w1=a.w1, w2=a.w2, N_i=a.ni,
                           G=min(a.ni, a.g if a.g else max(1, round(51 / 256 * a.ni))))
        rep = complexity_report(CsiL2O(mcfg), a.iters)
        metrics.update({k: v for k, v in rep.items() if k not in metrics})
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, v])
    if a.out:
        _metrics_csv(Path(a.out) / "flops.csv", metrics)


# --- parser -------------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--m", type=int, default=0, help="codeword length (overrides --cr)")
    p.add_argument("--cr", type=int, default=4, help="compression ratio denominator, M = n / cr")
    p.add_argument("--hidden", type=int, default=20)
    p.add_argument("--w1", type=int, default=32)
    p.add_argument("--w2", type=int, default=32)
    p.add_argument("--ni", type=int, default=64)
    p.add_argument("--g", type=int, default=0, help="top-G count (default round(51/256 * N_i))")


def build_parser():
    ap = _Parser(prog="csil2o", description="Learned-optimizer CSI feedback toolkit")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="synthesize train/val/test channel datasets")
    p.add_argument("--nc", type=int, default=64)
    p.add_argument("--nt", type=int, default=8)
    p.add_argument("--na", type=int, default=8)
    p.add_argument("--paths", type=int, default=3)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--val-count", type=int, default=500)
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--delay-spread", type=float, default=0.125)
    p.add_argument("--angle-spread", type=float, default=math.pi / 8)
    p.add_argument("--power-decay", type=float, default=1.0)
    p.add_argument("--fractional-delays", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train encoder, transform and learned optimizer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--t-unroll", type=int, default=10)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--pretrain-epochs", type=int, default=20)
    p.add_argument("--clip-norm", type=float, default=1.0, help="0 disables clipping")
    p.add_argument("--identity-transform", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    p.set_defaults(func=cmd_train, hidden=8)

    def common(p, split="test"):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--iters", type=int, default=10)
        p.add_argument("--split", choices=cg.SPLITS, default=split)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="NMSE and complexity of a checkpoint")
    common(p)
    p.add_argument("--ista", action="store_true", help="also report Gaussian-W ISTA baselines")
    p.add_argument("--ista-iters", type=int, default=200)
    p.add_argument("--ista-lambdas", type=float, nargs="+", default=[1e-1, 1e-2, 1e-3])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="decode a split and dump the per-iteration trace")
    common(p)
    p.add_argument("--report", action="store_true", help="also write convergence.csv")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--lam", type=float, default=0.0, help="l1 weight used in the traced objective")
    p.add_argument("--count", type=int, default=0, help="decode only the first COUNT samples")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("quantize-eval", help="Lloyd-Max quantized feedback evaluation")
    common(p)
    p.add_argument("--bits", type=int, nargs="+", default=[3, 4, 5, 6])
    p.set_defaults(func=cmd_quantize_eval)

    p = sub.add_parser("multirate", help="evaluate one checkpoint at several compression ratios")
    common(p)
    p.add_argument("--ms", type=int, nargs="+")
    p.add_argument("--ratios", type=_parse_ratio, nargs="+", help="e.g. 1/4 1/8 1/16")
    p.set_defaults(func=cmd_multirate)

    p = sub.add_parser("flops", help="exact encoder (and optionally decoder) FLOP counts")
    p.add_argument("--na", type=int, default=32)
    p.add_argument("--nt", type=int, default=32)
    p.add_argument("--decoder", action="store_true", help="also count decoder FLOPs/params")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_flops, cr=8)
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


cli = main


if __name__ == "__main__":
    sys.exit(main())
