"""Command-line front end: ``confsets <subcommand> [flags]``.

Each subcommand writes a manifest JSON next to its outputs. Failures exit
non-zero and print a one-line JSON error to stderr (also saved beside the
requested output when that location is writable).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import _kernels
from . import evaluation as ev
from . import geometry as geo
from . import pipeline as pl
from . import storage as st
from .conformal import calibrate
from .simdata import CAL, TEST, TRAIN, LabeledDataset, SimConfig, TripletSampler, generate_mixed3d
from .training import Objective, ProjectionHead, TrainConfig, train


class CliError(RuntimeError):
    pass


class UsageError(CliError):
    pass


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _seeds(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (None, None)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--objective", choices=[o.value for o in Objective], default="negvol")
    g.add_argument("--lambda", dest="lam", type=float, default=0.05)
    g.add_argument("--infonce-weight", type=float, default=1.0)
    g.add_argument("--tau", type=float, default=0.1)
    g.add_argument("--sigmoid-t", type=float, default=7.0)
    g.add_argument("--epochs", type=_nonneg_int, default=30)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.0)
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--batch-size", type=_pos_int, default=256)
    g.add_argument("--grad-clip", type=float, default=1.0)
    g.add_argument("--k", type=_pos_int, default=200)
    g.add_argument("--lr-schedule", choices=["constant", "cosine"], default="constant")
    g.add_argument("--no-negatives", action="store_true",
                   help="positive-only regime; only valid with objective vol, which implies it")


def _add_sim_flags(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--classes", type=_pos_int, default=5)
    g.add_argument("--points-per-class", type=_pos_int, default=5000)
    g.add_argument("--gaussian-classes", type=_nonneg_int, default=2)


def _add_common(p, seeds=True):
    p.add_argument("--alpha", type=float, default=0.05)
    if seeds:
        p.add_argument("--seeds", type=_seeds, default=None, help="e.g. 0-39 or 1,2,5")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_pos_int, default=None, help="worker processes (env CONFSETS_THREADS)")
    p.add_argument("--out", required=True)


def build_parser():
    ap = _Parser(prog="confsets", description="Conformal covering sets with learnable norm geometry.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate the mixed 3D benchmark")
    _add_common(p)
    _add_sim_flags(p)
    p.add_argument("--shift", type=float, default=0.0, help="translate all points along z0")
    p.add_argument("--collapse", action="store_true", help="put every class centre at the origin before shifting")

    p = sub.add_parser("train", help="train a learnable metric on train-split embeddings")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--method", choices=["single", "generalized"], default="generalized")
    p.add_argument("--train", required=True, help="train.csv or a simulate seed directory")

    p = sub.add_parser("calibrate", help="set q_hat on calibration embeddings")
    _add_common(p)
    p.add_argument("--model", help="model JSON from train (omit for baselines)")
    p.add_argument("--method", choices=["l2", "mahalanobis"], default=None)
    p.add_argument("--cal", required=True, help="cal.csv or a simulate seed directory")

    p = sub.add_parser("evaluate", help="coverage, exclusion and log-volume on test embeddings")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cal", default=None, help="calibration CSV, checked for id overlap")
    p.add_argument("--k", type=_pos_int, default=200)

    p = sub.add_parser("ood", help="anomaly scores and AUROC / FPR95 between two embedding sets")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--id", dest="id_path", required=True)
    p.add_argument("--ood", dest="ood_path", required=True)
    p.add_argument("--k", type=_pos_int, default=200)
    p.add_argument("--subtract-positive", action="store_true")

    p = sub.add_parser("sweep", help="retrain and evaluate over one hyperparameter")
    _add_common(p)
    _add_train_flags(p)
    _add_sim_flags(p)
    p.add_argument("--method", choices=["single", "generalized"], default="generalized")
    p.add_argument("--param", required=True)
    p.add_argument("--values", type=_floats, required=True)

    p = sub.add_parser("bench", help="time calibration kernels over a dimension grid")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_ints, default=[64, 128, 256, 512])
    p.add_argument("--n", type=_pos_int, default=10000, help="calibration pairs per timing")
    p.add_argument("--repeats", type=_pos_int, default=3)
    p.add_argument("--backends", default="numpy,numba")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pipeline", help="simulate, train, calibrate and evaluate every method over seeds")
    _add_common(p)
    _add_train_flags(p)
    _add_sim_flags(p)
    p.add_argument("--methods", default=",".join(pl.TABLE_METHODS))
    p.add_argument("--eval-k", type=_pos_int, default=200)
    return ap


def _seed_list(args):
    return args.seeds if getattr(args, "seeds", None) else [args.seed]


def _train_cfg(args, **kw):
    base = dict(objective=args.objective, alpha=args.alpha, lam=args.lam, lambda_infonce=args.infonce_weight,
                tau=args.tau, sigmoid_T=args.sigmoid_t, lr=args.lr, momentum=args.momentum,
                weight_decay=args.weight_decay, epochs=args.epochs, batch_size=args.batch_size,
                grad_clip=args.grad_clip, k=args.k, lr_schedule=args.lr_schedule)
    base.update(kw)
    try:
        return TrainConfig(**base)
    except Exception as e:
        raise UsageError(str(e)) from None


def _sim_cfg(args, **kw):
    try:
        return SimConfig(n_classes=args.classes, points_per_class=args.points_per_class,
                         n_gaussian_classes=min(args.gaussian_classes, args.classes), **kw)
    except Exception as e:
        raise UsageError(str(e)) from None


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(path, name):
    """A seed directory from ``simulate`` or a CSV file."""
    if os.path.isdir(path):
        path = os.path.join(path, f"{name}.csv")
    if not os.path.exists(path):
        raise CliError(f"input not found: {path}")
    return path


def _dataset(path, split_code):
    t = st.read_embeddings(path)
    return LabeledDataset(t.vectors, t.labels, np.full(t.n, split_code, dtype=np.int8), t.ids)


class Run:
    """Tracks inputs and outputs for the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = []
        self.outputs = []

    def read(self, path):
        self.inputs.append(os.fspath(path))
        return path

    def write_text(self, path, text):
        st.atomic_write_text(path, text)
        self.outputs.append(os.fspath(path))

    def write_json(self, path, obj):
        self.write_text(path, json.dumps(obj, indent=2) + "\n")

    def manifest_path(self):
        out = self.args.out
        return os.path.join(out, "manifest.json") if _is_dir_output(self.args) else out + ".manifest.json"

    def finish(self, extra=None):
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        man = {
            "subcommand": self.args.cmd,
            "argv": self.argv,
            "flags": flags,
            "seeds": _seed_list(self.args) if hasattr(self.args, "seed") else None,
            "version": __version__,
            "kernel_backend": _kernels.backend(),
            "inputs": {p: _sha256(p) for p in self.inputs},
            "outputs": {p: _sha256(p) for p in self.outputs},
        }
        if extra:
            man.update(extra)
        st.write_json(self.manifest_path(), man)


def _is_dir_output(args):
    return args.cmd in ("simulate", "pipeline")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _table(t_ids, labels, vectors):
    return st.EmbeddingTable(t_ids, labels, vectors)


def cmd_simulate(args, run):
    seeds = _seed_list(args)
    extra = {}
    if args.shift or args.collapse:
        extra = dict(offset=(float(args.shift), 0.0, 0.0), collapse_centers=bool(args.collapse))
    base = _sim_cfg(args, **extra)
    for s in seeds:
        cfg = replace(base, seed=s)
        data = generate_mixed3d(cfg)
        d = os.path.join(args.out, f"seed{s}")
        run.write_text(os.path.join(d, "all.csv"), st.embeddings_csv(_table(data.ids, data.labels, data.points)))
        for name, code in (("train", TRAIN), ("cal", CAL), ("test", TEST)):
            idx = data.indices(code)
            tab = _table([data.ids[i] for i in idx], data.labels[idx], data.points[idx])
            run.write_text(os.path.join(d, f"{name}.csv"), st.embeddings_csv(tab))
        run.write_json(os.path.join(d, "meta.json"), {"sim_config": cfg.to_dict(), "n_points": int(len(data.labels)),
                                                      "rng": "numpy PCG64 via SeedSequence([seed, purpose, ...])"})


def _history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["epoch", "phase", "lr", "loss", "train_exclusion", "train_logvol", "train_q_hat"]
    w.writerow(cols)
    for r in history:
        w.writerow([r[c] if isinstance(r[c], (int, str)) else st.fmt_float(r[c]) for c in cols])
    return buf.getvalue()


def cmd_train(args, run):
    if args.no_negatives and args.objective != "vol":
        raise UsageError(f"objective {args.objective!r} needs negatives; drop --no-negatives or use --objective vol")
    path = run.read(_resolve(args.train, "train"))
    data = _dataset(path, TRAIN)
    cfg = _train_cfg(args, seed=args.seed)
    pos_only = args.no_negatives or cfg.objective is Objective.VOL
    model = train(pl.train_sampler(data, cfg, args.seed, pos_only), cfg, args.method, positive_only=pos_only)
    mf = st.ModelFile(model.params, model.head, cfg.alpha, None, 0, ev.config_digest(cfg.to_dict()), args.seed,
                      f"train:{os.path.basename(path)}", cfg.to_dict())
    run.write_text(args.out, json.dumps(st.model_to_dict(mf), indent=2) + "\n")
    run.write_text(args.out + ".history.csv", _history_csv(model.history))
    return {"best_epoch": model.best_epoch, "selection": model.selection}


def cmd_calibrate(args, run):
    path = run.read(_resolve(args.cal, "cal"))
    data = _dataset(path, CAL)
    cal = pl.calibration_data(data, args.seed)
    if args.model:
        base = st.read_model(run.read(args.model))
        params, head = base.params, base.head or ProjectionHead.identity(data.d)
        digest, created = base.config_digest, base.created_from
        config = base.config
    elif args.method:
        params, head = pl.fit_baseline(args.method, cal, data.d), ProjectionHead.identity(data.d)
        digest, created, config = "", f"baseline:{args.method}", None
    else:
        raise UsageError("calibrate needs --model or --method")
    if params.d != data.d:
        raise CliError(f"dimension mismatch: model d={params.d}, data d={data.d}")
    cset = calibrate(params, head.apply(cal.anchors), head.apply(cal.positives), args.alpha)
    mf = st.ModelFile(params, head, args.alpha, cset.q_hat, cset.n_cal, digest, args.seed,
                      created + f"|cal:{os.path.basename(path)}", config)
    run.write_text(args.out, json.dumps(st.model_to_dict(mf), indent=2) + "\n")
    return {"q_hat": st.fmt_float(cset.q_hat), "vacuous": math.isinf(cset.q_hat)}


def cmd_evaluate(args, run):
    mf = st.read_model(run.read(args.model))
    cset = mf.calibrated_set()
    path = run.read(_resolve(args.test, "test"))
    data = _dataset(path, TEST)
    if args.cal:
        cal_tab = st.read_embeddings(run.read(_resolve(args.cal, "cal")))
        ev.assert_disjoint(cal_tab.ids, data.ids)
    head = mf.head
    res = ev.evaluate_set(cset, pl.test_batches(data, args.k, args.seed, 500), args.seed, head)
    rep = ev.aggregate([res], mf.config_digest)
    obj = rep.to_dict()
    obj["warnings"] = ["q_hat is infinite: the set is vacuous"] if res.vacuous else []
    run.write_json(args.out, obj)
    run.write_text(args.out + ".csv", ev.table_csv([(mf.kind, rep)]))


def cmd_ood(args, run):
    mf = st.read_model(run.read(args.model))
    cset = mf.calibrated_set()
    id_data = _dataset(run.read(_resolve(args.id_path, "test")), TEST)
    ood_data = _dataset(run.read(_resolve(args.ood_path, "test")), TEST)
    scores = []
    for data in (id_data, ood_data):
        s = [ev.anchor_scores(cset, b, args.subtract_positive, mf.head)
             for b in pl.test_batches(data, args.k, args.seed, 500)]
        scores.append(np.concatenate(s))
    rep = ev.ood_report(*scores)
    run.write_json(args.out, {"auroc": rep.auroc, "fpr95": rep.fpr95,
                              "id_score_mean": float(scores[0].mean()), "ood_score_mean": float(scores[1].mean()),
                              "n_id": int(scores[0].size), "n_ood": int(scores[1].size),
                              "subtract_positive": bool(args.subtract_positive)})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set", "score"])
    for name, arr in (("id", scores[0]), ("ood", scores[1])):
        for x in arr:
            w.writerow([name, st.fmt_float(x)])
    run.write_text(args.out + ".scores.csv", buf.getvalue())


def cmd_sweep(args, run):
    fld = ev.sweep_field(args.param)
    key = pl.method_key(args.method, args.objective)
    pcfg = pl.PipelineConfig(train=_train_cfg(args), sim=_sim_cfg(args), eval_k=args.k)
    runner = pl.sweep_runner(key, pcfg, _seed_list(args), args.workers)
    results = ev.sweep(runner, pcfg.train, args.param, args.values)
    run.write_text(args.out, ev.sweep_csv(fld, results))
    run.write_json(args.out + ".json", {str(v): r.to_dict() for v, r in results})


def bench_rows(dims, n, repeats, backends, seed=0):
    """Best-of-``repeats`` calibration time (distances + quantile) per backend, metric and d."""
    from .conformal import conformal_quantile

    rows = []
    prev = _kernels.backend()
    try:
        for be in backends:
            if be == "numba" and not _kernels.numba_available():
                continue
            _kernels.use(be)
            for d in dims:
                rng = np.random.default_rng([seed, d])
                a = rng.standard_normal((n, d))
                b = rng.standard_normal((n, d))
                metrics = {"generalized": geo.Generalized(rng.uniform(0.5, 1.5, d), rng.uniform(1.5, 3.0, d)),
                           "single": geo.SingleNorm(np.eye(d) + 0.01 * rng.standard_normal((d, d)), 2.5)}
                for name, P in metrics.items():
                    conformal_quantile(geo.pair_distances(P, a[:8], b[:8]), 0.05)  # warm-up / compile
                    best = math.inf
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        conformal_quantile(geo.pair_distances(P, a, b), 0.05)
                        best = min(best, time.perf_counter() - t0)
                    rows.append({"backend": be, "metric": name, "d": d, "n": n, "seconds": best})
    finally:
        _kernels.use(prev)
    return rows


def bench_slopes(rows):
    out = {}
    for be in sorted({r["backend"] for r in rows}):
        for m in ("generalized", "single"):
            pts = [(r["d"], r["seconds"]) for r in rows if r["backend"] == be and r["metric"] == m]
            if len(pts) >= 2:
                x = np.log([p[0] for p in pts])
                y = np.log([p[1] for p in pts])
                out[f"{be}/{m}"] = float(np.polyfit(x, y, 1)[0])
    return out


def cmd_bench(args, run):
    rows = bench_rows(args.dims, args.n, args.repeats, [b.strip() for b in args.backends.split(",") if b.strip()],
                      args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["backend", "metric", "d", "n", "seconds"])
    for r in rows:
        w.writerow([r["backend"], r["metric"], r["d"], r["n"], st.fmt_float(r["seconds"])])
    run.write_text(args.out, buf.getvalue())
    slopes = bench_slopes(rows)
    run.write_json(args.out + ".slopes.json", slopes)
    return {"slopes": slopes}


def cmd_pipeline(args, run):
    keys = [k.strip() for k in args.methods.split(",") if k.strip()]
    for k in keys:
        if k not in pl.METHODS:
            raise UsageError(f"unknown method {k!r}; choose from {', '.join(pl.METHODS)}")
    pcfg = pl.PipelineConfig(train=_train_cfg(args), sim=_sim_cfg(args), eval_k=args.eval_k)
    seeds = _seed_list(args)
    t0 = time.perf_counter()
    rows, notes, per = pl.run_table(seeds, keys, pcfg, args.workers)
    elapsed = time.perf_counter() - t0
    run.write_text(os.path.join(args.out, "table.csv"), ev.table_csv(rows))
    run.write_json(os.path.join(args.out, "report.json"),
                   {"config": pcfg.to_dict(), "seeds": seeds,
                    "methods": {k: r.to_dict() for k, (_, r) in zip(keys, rows)},
                    "divergence": notes})
    return {"elapsed_seconds": elapsed}


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate,
            "ood": cmd_ood, "sweep": cmd_sweep, "bench": cmd_bench, "pipeline": cmd_pipeline}


def _error_path(argv):
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--out="):
            return a.split("=", 1)[1]
    return None


def _report_error(argv, exc, code):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "argv": list(argv)}
    sys.stderr.write(json.dumps(err) + "\n")
    out = _error_path(argv)
    if out:
        target = os.path.join(out, "error.json") if os.path.isdir(out) or not os.path.splitext(out)[1] else out + ".error.json"
        try:
            st.write_json(target, err)
        except OSError:
            pass
    return code


def main(argv=None):
    from ._alloc import tune

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _report_error(argv, e, 2)
    tune()
    run = Run(args, argv)
    try:
        extra = COMMANDS[args.cmd](args, run)
        run.finish(extra)
    except UsageError as e:
        return _report_error(argv, e, 2)
    except Exception as e:  # noqa: BLE001 - every failure becomes an error JSON
        return _report_error(argv, e, 1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
