"""Command-line front end: ``mme-lab {gen,train,analyze,sweep}``.

stdout carries only ``key=value`` result lines; diagnostics go to stderr.
Exit codes: 0 success, 1 partial sweep failure, 2 usage/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .data import ShiftTaskSpec, generate, read_dataset, write_dataset
from .errors import ConfigError, MMELabError, NumericalAbort, ParseError
from .model import embed, load_checkpoint, predict_proba
from .autodiff import Tensor
from .objectives import METHODS
from .runs import ABORT, CHECKPOINT, METRICS, RunManifest, resolve_dataset_path, shots_of, train_to_dir
from .trainer import TrainConfig, read_metrics

log = logging.getLogger("mmelab")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(MMELabError):
    pass


def _out(line: str) -> None:
    print(line, flush=True)


# -- gen ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = ShiftTaskSpec(
        task=args.task,
        K=args.k,
        d=args.dim,
        n_source_per_class=args.n_source,
        n_target_per_class=args.n_target,
        rotation=args.angle,
        shift=args.shift,
        noise_sigma=args.noise,
        class_std=args.class_std,
        radius=args.radius,
        shots=args.shots,
        seed=args.seed,
    )
    ds = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    write_dataset(ds, path)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    log.info("wrote %s (%s)", path, ds.counts())
    _out(f"dataset={path}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------


def _config_from_args(args, seed=None) -> TrainConfig:
    cfg = TrainConfig(
        method=args.method,
        head_kind=args.head,
        lam=args.lam,
        T=args.temp,
        s=args.batch_size,
        lr0=args.lr,
        momentum=args.momentum,
        anneal_alpha=args.anneal_alpha,
        anneal_beta=args.anneal_beta,
        max_iters=args.max_iters,
        patience=args.patience,
        eval_every=args.eval_every,
        seed=args.seed if seed is None else seed,
        normalize_weights=args.normalize_weights,
    )
    cfg.validate()
    return cfg


def _load_data(args):
    path = resolve_dataset_path(args.data)
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    ds = read_dataset(path)
    if args.shots is not None and args.shots != shots_of(ds):
        raise UsageError(f"--shots {args.shots} does not match the dataset ({shots_of(ds)} labeled per class)")
    return path, ds


def cmd_train(args) -> int:
    config = _config_from_args(args)
    path, ds = _load_data(args)
    try:
        run_dir, result = train_to_dir(path, config, args.out, ds=ds)
    except NumericalAbort as exc:
        abort_dir = Path(args.out)
        abort_dir.mkdir(parents=True, exist_ok=True)
        (abort_dir / ABORT).write_text(json.dumps({"error": str(exc), **exc.diagnostic}, indent=2) + "\n", encoding="utf-8")
        print(f"numerical abort: {exc} {json.dumps(exc.diagnostic)}", file=sys.stderr)
        return EXIT_NUMERIC
    _out(f"run_dir={run_dir}")
    _out(f"test_acc={result.best.test_accuracy!r}")
    return EXIT_OK


# -- analyze --------------------------------------------------------------------------


def _checkpoint_and_data(args):
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    data = Path(args.data) if args.data else None
    if args.run:
        run = Path(args.run)
        ckpt = ckpt or run / CHECKPOINT
        if data is None and (run / "manifest.json").exists():
            data = Path(RunManifest.load(run).dataset_path)
    if ckpt is None or not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if data is None:
        raise UsageError("--data is required (or a run directory with a manifest)")
    data = resolve_dataset_path(data)
    if not data.is_file():
        raise UsageError(f"dataset not found: {data}")
    return load_checkpoint(ckpt), read_dataset(data)


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "entropy":
        if not args.run:
            raise UsageError("--what entropy needs --run")
        metrics = Path(args.run) / METRICS
        if not metrics.is_file():
            raise UsageError(f"metrics not found: {metrics}")
        analysis.write_curve(analysis.entropy_curve(read_metrics(metrics)), out)
    else:
        model, ds = _checkpoint_and_data(args)
        if args.what == "eig":
            report = analysis.covariance_spectrum(embed(model, ds.unlabeled_x)).to_dict()
        elif args.what == "adist":
            a, eps = analysis.proxy_a_distance(embed(model, ds.source_x), embed(model, ds.unlabeled_x), seed=args.seed)
            report = analysis.DivergenceReport(a_distance=a, domain_clf_error=eps).to_dict()
        else:
            ps = predict_proba(model, Tensor(ds.source_x)).data
            pt = predict_proba(model, Tensor(ds.unlabeled_x)).data
            h, gamma = analysis.entropy_threshold_divergence(ps, pt)
            report = analysis.DivergenceReport(h_div_estimate=h, gamma_star=gamma).to_dict()
        analysis.write_json(report, out)
    _out(f"report={out}")
    return EXIT_OK


# -- sweep ------------------------------------------------------------------------------

SWEEPABLE = {"lambda": "lam", "temp": "T", "lr": "lr0"}


def _sweep_child(job):
    data_path, cfg_dict, out_root, name = job
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        _, result = train_to_dir(data_path, cfg, out_root, name=name)
        return {"ok": True, "val": result.best.val_accuracy, "test": result.best.test_accuracy}
    except Exception as exc:  # recorded per child, sweep continues
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --values {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise UsageError("--values must be a nonempty list of finite numbers")
    return sorted(set(vals))


def max_workers() -> int:
    env = os.environ.get("MME_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"MME_LAB_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise UsageError(f"--param must be one of {sorted(SWEEPABLE)}")
    values = _parse_values(args.values)
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    path, ds = _load_data(args)
    base = _config_from_args(args)
    field_name = SWEEPABLE[args.param]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, keys = [], []
    for v in values:
        for seed in range(args.seeds):
            cfg = TrainConfig.from_dict({**base.to_dict(), field_name: v, "seed": seed})
            cfg.validate()
            name = f"{args.param}={v!r}/{cfg.method}-{cfg.head_kind}-s{shots_of(ds)}-seed{seed}"
            jobs.append((str(path), cfg.to_dict(), str(out), name))
            keys.append((v, seed))
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]

    failed = 0
    csv_path = out / "sweep.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "seed", "val_acc", "test_acc", "status"])
        for (v, seed), res in sorted(zip(keys, results), key=lambda kr: kr[0]):
            if res["ok"]:
                w.writerow([args.param, repr(v), seed, repr(res["val"]), repr(res["test"]), "ok"])
            else:
                failed += 1
                print(f"run {args.param}={v} seed={seed} failed: {res['error']}", file=sys.stderr)
                w.writerow([args.param, repr(v), seed, "", "", "failed"])
    _out(f"sweep={csv_path}")
    return EXIT_PARTIAL if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--data", required=True, help="dataset CSV or a directory holding dataset.csv")
    p.add_argument("--method", choices=METHODS, default=d.method)
    p.add_argument("--head", choices=("cosine", "linear"), default=d.head_kind)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--temp", type=float, default=d.T)
    p.add_argument("--shots", type=int, default=None, help="expected labeled target examples per class")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=d.lr0)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--batch-size", type=int, default=d.s, help="labeled batch size s (even)")
    p.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--eval-every", type=int, default=d.eval_every)
    p.add_argument("--anneal-alpha", type=float, default=d.anneal_alpha)
    p.add_argument("--anneal-beta", type=float, default=d.anneal_beta)
    p.add_argument("--normalize-weights", action="store_true", help="also l2-normalize prototype columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mme-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    spec = ShiftTaskSpec()
    g = sub.add_parser("gen", help="generate a synthetic domain-shift dataset")
    g.add_argument("--task", choices=("gauss-shift", "two-moons-shift"), default=spec.task)
    g.add_argument("--k", type=int, default=spec.K)
    g.add_argument("--dim", type=int, default=spec.d)
    g.add_argument("--angle", type=float, default=spec.rotation, help="target rotation in radians")
    g.add_argument("--shift", type=float, default=spec.shift, help="target translation magnitude")
    g.add_argument("--noise", type=float, default=spec.noise_sigma, help="extra target noise std")
    g.add_argument("--class-std", type=float, default=spec.class_std)
    g.add_argument("--radius", type=float, default=spec.radius)
    g.add_argument("--n-source", type=int, default=spec.n_source_per_class)
    g.add_argument("--n-target", type=int, default=spec.n_target_per_class)
    g.add_argument("--shots", type=int, default=spec.shots)
    g.add_argument("--seed", type=int, default=spec.seed)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="entropy curve, eigen-spectrum, A-distance or entropy-threshold divergence")
    a.add_argument("--what", choices=("entropy", "eig", "adist", "hdiv"), required=True)
    a.add_argument("--run")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="cross product of parameter values and seeds")
    s.add_argument("--param", default="lambda")
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", type=int, default=1)
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"mme-lab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"mme-lab {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
