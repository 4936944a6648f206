"""Desk-scale experiments: advection learning check, discretization robustness,
query-point ablation and latent compression accounting."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import data, training
from .config import RunConfig, build_model, load_config, preset_names
from .model import CalmPDE
from .tensor import no_record


def dataset_for(cfg: RunConfig) -> data.Dataset:
    d = cfg.data
    return data.generate(d.pde, S=d.n_samples, N=d.n_points, T=d.n_timesteps, seed=d.seed,
                         n_test=d.n_test, **d.params)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=seed),
                               training=dataclasses.replace(cfg.training, seed=seed))


@dataclass
class TrainedRun:
    cfg: RunConfig
    model: CalmPDE
    stats: data.ChannelStats
    initial_queries: dict[str, np.ndarray]
    seconds: float
    test: training.EvalResult

    @property
    def query_displacement(self) -> float:
        now = self.model.query_positions()
        return float(sum(np.abs(now[k] - v).sum() for k, v in self.initial_queries.items()))


def train_and_test(cfg: RunConfig, ds: data.Dataset) -> TrainedRun:
    cfg.check(n_points=ds.n_points, n_channels=ds.n_channels, n_dims=ds.mesh.positions.shape[1])
    model = build_model(cfg, ds.mesh, ds.dt)
    stats = data.ChannelStats.compute(ds.train())
    initial = model.query_positions()
    t0 = time.perf_counter()
    training.fit(model, ds, cfg.training, stats=stats)
    seconds = time.perf_counter() - t0
    res = training.evaluate(model, ds.test(), ds.mesh.positions, stats)
    return TrainedRun(cfg, model, stats, initial, seconds, res)


def persistence_error(ds: data.Dataset) -> float:
    test = ds.test().astype(np.float64)
    return training.EvalResult(training.relative_l2_terms(training.persistence(test[:, 0], ds.n_timesteps),
                                                          test)).mean


def desk_learning(config="advection1d") -> dict:
    """Train a preset from scratch and compare its test error with persistence."""
    cfg = load_config(config)
    ds = dataset_for(cfg)
    run = train_and_test(cfg, ds)
    pers = persistence_error(ds)
    return dict(config=cfg.run.name, test_rel_l2=run.test.mean, test_std=run.test.std, persistence=pers,
                ratio=pers / run.test.mean, train_seconds=run.seconds, curve=run.test.curve.tolist())


def discretization(run: TrainedRun, ds: data.Dataset, fraction: float = 0.6, seed: int = 0,
                   extra_queries: int = 256) -> dict:
    """Encode from a random ``fraction`` of the mesh, decode on the mesh plus extra points.

    Errors are measured on the mesh points of the superset decode.
    """
    rng = np.random.default_rng(seed)
    n = ds.n_points
    keep = np.sort(rng.choice(n, int(round(fraction * n)), replace=False))
    nd = ds.mesh.positions.shape[1]
    superset = np.concatenate([ds.mesh.positions, rng.uniform(size=(extra_queries, nd))])
    test = ds.test().astype(np.float64)
    model, stats = run.model, run.stats

    full = training.evaluate(model, test, ds.mesh.positions, stats)
    pred = training.predict(model, test[:, 0, keep], ds.mesh.positions[keep], ds.n_timesteps - 1,
                            superset, stats)
    sub = training.EvalResult(training.relative_l2_terms(pred[:, :, :n], test))
    with no_record():
        ic = stats.normalize(test[:2, 0]).astype(model.dtype)
        z_full = model.encode(ic, ds.mesh.positions).z.shape
        z_sub = model.encode(ic[:, keep], ds.mesh.positions[keep]).z.shape
    return dict(fraction=fraction, input_points=len(keep), query_points=len(superset),
                latent_full=list(z_full[1:]), latent_sub=list(z_sub[1:]), decoded_shape=list(pred.shape),
                full_rel_l2=full.mean, sub_rel_l2=sub.mean, ratio=sub.mean / full.mean)


ABLATION_VARIANTS = {
    "learnable+mesh_prior": dict(learnable_queries=True, mesh_prior=True),
    "fixed_random": dict(learnable_queries=False, mesh_prior=False),
}


def ablation(config="rotating2d-lite", seeds=(0, 1, 2), variants=None, keep_runs: bool = False) -> dict:
    """Train each query-point variant per seed on the same dataset."""
    variants = ABLATION_VARIANTS if variants is None else variants
    base = load_config(config)
    ds = dataset_for(base)
    rows, runs = [], {}
    for seed in seeds:
        for name, codec_kw in variants.items():
            cfg = with_seed(base, seed)
            cfg = dataclasses.replace(cfg, codec=dataclasses.replace(cfg.codec, **codec_kw))
            run = train_and_test(cfg, ds)
            rows.append(dict(seed=seed, variant=name, test_rel_l2=run.test.mean,
                             displacement=run.query_displacement, seconds=run.seconds))
            if keep_runs:
                runs[(seed, name)] = run
    out = dict(config=config, rows=rows)
    if keep_runs:
        out["runs"], out["dataset"] = runs, ds
    return out


def ablation_wins(rows: list[dict], better: str, worse: str) -> tuple[int, int]:
    by = {(r["seed"], r["variant"]): r["test_rel_l2"] for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    wins = sum(by[(s, better)] < by[(s, worse)] for s in seeds)
    return wins, len(seeds)


def compression_table(names=None) -> list[dict]:
    """Latent size ``l * d`` against ``N * N_c`` for each preset."""
    out = []
    for name in names or preset_names():
        cfg = load_config(name)
        size = cfg.codec.latent_size
        full = cfg.data.n_points * cfg.codec.n_channels
        out.append(dict(config=name, latent_tokens=cfg.codec.latent_tokens, latent_dim=cfg.codec.latent_dim,
                        latent_size=size, input_size=full, ratio=full / size, compresses=size < full))
    return out
