"""Command line entry point: ``calmpde {gen-data,train,eval,export-queries,bench}``.

Exit status is 0 on success, 1 when inputs fail validation (bad config,
unknown PDE, malformed or mismatched files) and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data, training
from .config import RunConfig, build_model, load_config, preset_names
from .data import ChannelStats
from .tensor import no_record

log = logging.getLogger("calmpde")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, items: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values are JSON literals or bare strings)."""
    d = cfg.to_dict()
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} is not of the form section.key=value")
        d.setdefault(section, {})[name] = _parse_value(value)
    return RunConfig.from_dict(d)


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dataset_kwargs(section) -> dict:
    return dict(S=section.n_samples, N=section.n_points, T=section.n_timesteps, seed=section.seed,
                n_test=section.n_test, **section.params)


def _summary(ds: data.Dataset) -> str:
    m = ds.meta
    extra = {k: m[k] for k in ("nu", "speed", "angular_velocity", "irregular") if k in m}
    return (f"{m['pde']}: S={ds.n_samples} (test {ds.n_test}) T={ds.n_timesteps} N={ds.n_points} "
            f"dims={ds.mesh.positions.shape[1]} C={ds.n_channels} dt={ds.dt:.6g} {json.dumps(extra)}")


def _model_from_checkpoint(checkpoint, ds: data.Dataset | None = None):
    meta, arrays = training.load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(meta["config"])
    if ds is not None:
        errs = []
        if ds.n_channels != cfg.codec.n_channels:
            errs.append(f"checkpoint expects {cfg.codec.n_channels} channel(s), dataset has {ds.n_channels}")
        if ds.mesh.positions.shape[1] != cfg.codec.n_dims:
            errs.append(f"checkpoint expects {cfg.codec.n_dims}-D points, dataset mesh is "
                        f"{ds.mesh.positions.shape[1]}-D")
        if errs:
            raise UsageError("; ".join(errs))
    dt = meta["state"].get("dt", ds.dt if ds is not None else 1.0)
    # every tensor is overwritten by the checkpoint, so no mesh is needed to place queries
    no_prior = dataclasses.replace(cfg, codec=dataclasses.replace(cfg.codec, mesh_prior=False))
    model = build_model(no_prior, None, dt)
    training.restore(model, arrays)
    stats = ChannelStats.from_dict(meta["state"]["stats"]) if meta["state"].get("stats") else None
    return cfg, model, stats, meta


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.config:
        section = load_config(args.config).data
        kw = _dataset_kwargs(section)
        pde = args.pde or section.pde
    else:
        if not args.pde:
            raise UsageError("gen-data needs --pde or --config")
        pde, kw = args.pde, {}
    for flag, key in (("samples", "S"), ("points", "N"), ("timesteps", "T"), ("n_test", "n_test"),
                      ("seed", "seed")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    for item in args.param:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--param {item!r} is not key=value")
        kw[k] = _parse_value(v)
    try:
        ds = data.generate(pde, **kw)
    except TypeError as e:
        raise UsageError(f"bad generator argument for {pde}: {e}") from e
    size = data.save(ds, args.out)
    print(_summary(ds))
    print(f"wrote {args.out} ({size} bytes)")
    return EXIT_OK


def _prepare_training(args):
    out = Path(args.out)
    if args.resume:
        if not (out / "last.ckpt").exists():
            raise UsageError(f"nothing to resume: {out / 'last.ckpt'} is missing")
        cfg = load_config(out / "config.ini")
        if not (args.data or cfg.data.path):
            raise UsageError("the run config names no dataset; pass --data")
        data_path = Path(args.data or cfg.data.path)
    else:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.data:
            data_path = Path(args.data)
        elif cfg.data.path:
            data_path = Path(cfg.data.path)
        else:
            data_path = out / "data.calmds"
    if data_path.exists():
        ds = data.load(data_path)
    elif not args.resume and not args.data and not cfg.data.path:
        ds = data.generate(cfg.data.pde, **_dataset_kwargs(cfg.data))
        out.mkdir(parents=True, exist_ok=True)
        data.save(ds, data_path)
        log.info("generated %s", _summary(ds))
    else:
        raise UsageError(f"dataset {data_path} not found")
    cfg.data.path = str(data_path.resolve())
    cfg.check(n_points=ds.n_points, n_channels=ds.n_channels, n_dims=ds.mesh.positions.shape[1])
    if ds.n_test != cfg.data.n_test:
        log.warning("dataset holds out %d test trajectories; config says %d (dataset wins)",
                    ds.n_test, cfg.data.n_test)
    return out, cfg, ds


def cmd_train(args) -> int:
    out, cfg, ds = _prepare_training(args)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, ds.mesh, ds.dt)
    echo = cfg.to_dict()
    kwargs = {}
    if args.resume:
        meta, arrays = training.load_checkpoint(out / "last.ckpt")
        st = meta["state"]
        kwargs = dict(opt=training.restore(model, arrays, meta), start_epoch=st["epoch"],
                      best_val=st["best_val"] if st["best_val"] is not None else math.inf,
                      best_epoch=st["best_epoch"], stats=ChannelStats.from_dict(st["stats"]))
        log.info("resuming at epoch %d", st["epoch"])
    else:
        cfg.save(out / "config.ini")
    if args.init_only:
        state = dict(epoch=0, best_val=None, best_epoch=-1, dt=ds.dt,
                     stats=ChannelStats.compute(ds.train()).to_dict())
        training.save_checkpoint(out / "init.ckpt", model, None, echo, state)
        print(f"wrote untrained checkpoint {out / 'init.ckpt'}")
        return EXIT_OK
    with _threads(args.threads or cfg.run.threads):
        res = training.fit(model, ds, cfg.training, out, echo, **kwargs)
    if res.history:
        last = res.history[-1]
        print(f"epoch {last['epoch']}: train loss {last['train_loss']:.5f}, val {last['val_rel_l2']:.5f}")
    print(f"best checkpoint from epoch {res.best_epoch} (score {res.best_val:.5f}); run dir {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = data.load(args.data)
    cfg, model, stats, _ = _model_from_checkpoint(args.checkpoint, ds)
    samples = {"test": ds.test(), "train": ds.train(), "all": ds.samples}[args.split]
    if len(samples) == 0:
        raise UsageError(f"the {args.split} split is empty")
    samples = samples.astype(np.float64)
    pts = ds.mesh.positions
    input_idx = None
    if args.input_fraction < 1.0:
        if not 0 < args.input_fraction <= 1:
            raise UsageError("--input-fraction must lie in (0, 1]")
        k = max(1, int(round(args.input_fraction * ds.n_points)))
        input_idx = np.sort(np.random.default_rng(args.seed).choice(ds.n_points, k, replace=False))
    if args.identity_oracle:
        per_step = training.relative_l2_terms(samples, samples)
        mode = "identity-oracle"
    elif args.persistence:
        per_step = training.relative_l2_terms(training.persistence(samples[:, 0], ds.n_timesteps), samples)
        mode = "persistence"
    else:
        with _threads(args.threads or cfg.run.threads):
            per_step = training.evaluate(model, samples, pts, stats, input_idx).per_step
        mode = "model"
    res = training.EvalResult(per_step)
    report = Path(args.report)
    report.mkdir(parents=True, exist_ok=True)
    _write_csv(report / "per_trajectory.csv", ["trajectory", "rel_l2"],
               [[i, f"{v:.9g}"] for i, v in enumerate(res.per_trajectory)])
    _write_csv(report / "curve.csv", ["t", "rel_l2"], [[t, f"{v:.9g}"] for t, v in enumerate(res.curve)])
    summary = dict(mode=mode, split=args.split, n_trajectories=len(samples), mean_rel_l2=res.mean,
                   std_rel_l2=res.std, input_points=ds.n_points if input_idx is None else len(input_idx),
                   query_points=ds.n_points, latent_shape=list(model.latent_shape),
                   checkpoint=str(args.checkpoint), data=str(args.data))
    (report / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{mode} {args.split}: rel L2 {res.mean:.5f} +- {res.std:.5f} over {len(samples)} trajectories")
    return EXIT_OK


def cmd_export_queries(args) -> int:
    _, model, _, _ = _model_from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for role, depth, layer in model.query_layers():
        q = layer.queries.data.astype(np.float64)
        nd = q.shape[1]
        if layer.modulated:
            g, b = layer.gamma.data.astype(np.float64), layer.beta.data.astype(np.float64)
            mod = np.sqrt(((g - 1.0) ** 2).sum(1) + (b ** 2).sum(1))
        else:
            mod = np.zeros(len(q))
        coords = ["x", "y", "z"][:nd]
        rows = [[i, *[f"{c:.9g}" for c in q[i]], role, depth, f"{mod[i]:.9g}"] for i in range(len(q))]
        path = out / f"{role}_{depth}.csv"
        _write_csv(path, ["index", *coords, "role", "depth", "modulation_norm"], rows)
        print(f"{path}: {len(q)} queries")
    return EXIT_OK


def _timed(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    ds = data.load(args.data)
    cfg, model, stats, _ = _model_from_checkpoint(args.checkpoint, ds)
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    ic = ds.test()[: args.batch, 0] if ds.n_test else ds.samples[: args.batch, 0]
    ic = (stats.normalize(ic.astype(np.float64)) if stats else ic).astype(model.dtype)
    pts = ds.mesh.positions.astype(model.dtype)
    with _threads(args.threads or cfg.run.threads), no_record():
        state = model.encode(ic, pts)
        t_enc = _timed(lambda: model.encode(ic, pts), args.repeats)
        t_dec = _timed(lambda: model.decode(state, pts), args.repeats)
        grid = sorted({0, args.steps // 4, args.steps // 2, args.steps})
        t_roll = [_timed(lambda k=k: model.processor.rollout(state, k), args.repeats) for k in grid]
        t_total = _timed(lambda: model.forward(ic, pts, args.steps), args.repeats)
    slope, intercept = np.polyfit(grid, t_roll, 1) if len(grid) > 1 else (0.0, t_roll[0])
    l, d = model.latent_shape
    report = dict(batch=len(ic), steps=args.steps, n_points=ds.n_points, encode_s=t_enc, decode_s=t_dec,
                  latent_step_s=float(slope), rollout_intercept_s=float(intercept),
                  rollout_grid=grid, rollout_s=t_roll, total_s=t_total,
                  latent_tokens=l, latent_dim=d, latent_size=l * d, input_size=ds.n_points * ds.n_channels)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calmpde", description="Continuous-convolution latent PDE surrogate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--pde", help=f"one of {', '.join(sorted(data.GENERATORS))}")
    g.add_argument("--config", help="take sizes and PDE parameters from a config's [data] section")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int, help="trajectories S (train + test)")
    g.add_argument("--points", type=int, help="mesh points N")
    g.add_argument("--timesteps", type=int, help="stored timesteps T")
    g.add_argument("--n-test", type=int, dest="n_test", help="held-out trajectories")
    g.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="extra generator argument, e.g. nu=0.01")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--config", default="advection1d", help=f"config file or preset ({', '.join(preset_names())})")
    t.add_argument("--data", help="dataset file (generated from the config when omitted)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--init-only", action="store_true", help="write OUT/init.ckpt without training")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output directory for CSV and JSON")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--input-fraction", type=float, default=1.0,
                   help="encode from a random subset of the mesh; decoding stays on the full mesh")
    e.add_argument("--seed", type=int, default=0, help="seed for --input-fraction subsampling")
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--identity-oracle", action="store_true", help="score the truth against itself")
    mode.add_argument("--persistence", action="store_true", help="score the repeated initial condition")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-queries", help="write learned query positions as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_queries)

    b = sub.add_parser("bench", help="time encode, latent steps and decode")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--steps", type=int, default=20)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.add_argument("--threads", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
