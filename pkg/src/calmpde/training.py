"""Loss, optimiser, curriculum rollout training, evaluation and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import tensor as tc
from .container import PayloadSizeError
from .data import ChannelStats, Dataset
from .model import CalmPDE
from .tensor import NonFiniteError, Tape, Tensor, no_record

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CALMCK01"
ZERO_NORM_GUARD = 1e-12
LOG_COLUMNS = ("epoch", "rollout_len", "train_loss", "val_rel_l2", "lr", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs_per_increment: float | None = None  # None: full length halfway through training
    max_rollout: int | None = None             # None: T - 1
    random_start: bool = True
    self_reconstruction: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    lr_schedule: str = "constant"
    n_val: int = 32
    eval_batch_size: int = 64

    def validate(self) -> list[str]:
        errs = []
        if self.epochs < 1:
            errs.append("training.epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("training.batch_size must be >= 1")
        if not self.learning_rate > 0:
            errs.append("training.learning_rate must be > 0")
        if self.epochs_per_increment is not None and not self.epochs_per_increment > 0:
            errs.append("training.epochs_per_increment must be > 0")
        if self.max_rollout is not None and self.max_rollout < 1:
            errs.append("training.max_rollout must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append("training.beta1/beta2 must lie in [0, 1)")
        if not self.eps > 0:
            errs.append("training.eps must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            errs.append("training.grad_clip must be > 0 when set")
        if self.lr_schedule not in ("constant", "cosine"):
            errs.append("training.lr_schedule must be constant or cosine")
        if self.n_val < 0:
            errs.append("training.n_val must be >= 0")
        return errs

    def increment_every(self, n_timesteps: int) -> float:
        if self.epochs_per_increment is not None:
            return self.epochs_per_increment
        return max(self.epochs / (2.0 * (n_timesteps - 1)), 1e-9)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


# ---------------------------------------------------------------------------
# loss


def _guarded(norm):
    zero = norm == 0
    if np.any(zero):
        log.warning("relative L2: %d truth slice(s) have zero norm; adding %g to the denominator",
                    int(np.sum(zero)), ZERO_NORM_GUARD)
        return norm + ZERO_NORM_GUARD * zero
    return norm


def relative_l2_terms(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-(..., t, c) ratios ``|pred - truth| / |truth|`` with the norm over points."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} vs truth {truth.shape}")
    num = np.linalg.norm(pred - truth, axis=-2)
    den = _guarded(np.linalg.norm(truth, axis=-2))
    return num / den


def relative_l2_np(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(relative_l2_terms(pred, truth).mean())


def relative_l2(pred: Tensor, truth) -> Tensor:
    """Mean over leading axes, time and channels of per-slice relative L2 (``... x T x N x C``)."""
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} vs truth {truth.shape}")
    den = _guarded(np.linalg.norm(truth.astype(np.float64), axis=-2))
    err = tc.norm(tc.sub(pred, Tensor(truth.astype(pred.dtype))), axis=-2)
    return tc.mean(tc.div(err, Tensor(den.astype(pred.dtype))))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class Adam:
    """Adam over named tensors; moments mirror parameter shapes."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: list[tuple[str, Tensor]], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


# ---------------------------------------------------------------------------
# curriculum


def curriculum_len(epoch: int, epochs_per_increment: float, max_len: int) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1 + int(math.floor(epoch / epochs_per_increment + 1e-9)), max_len)


def sample_start(n_timesteps: int, rollout_len: int, random_start: bool, rng: np.random.Generator) -> int:
    if rollout_len > n_timesteps - 1:
        raise ValueError(f"rollout length {rollout_len} does not fit a trajectory of {n_timesteps} steps")
    if not random_start:
        return 0
    return int(rng.integers(0, n_timesteps - rollout_len))


# ---------------------------------------------------------------------------
# one update


def loss_and_grads(model: CalmPDE, windows: np.ndarray, points: np.ndarray, self_reconstruction: bool = True,
                   check_finite: bool = False) -> tuple[float, dict[str, np.ndarray]]:
    """Loss on ``B x (1 + L) x N x C`` windows and gradients for every trainable tensor."""
    params = model.parameters()
    for _, p in params:
        p.grad = None
    rollout_len = windows.shape[1] - 1
    with Tape(check_finite=check_finite) as tape:
        pred = model.forward(windows[:, 0], points, rollout_len)
        if not self_reconstruction:
            pred = tc.gather_rows(pred, np.arange(1, rollout_len + 1), axis=1)
            windows = windows[:, 1:]
        loss = relative_l2(pred, windows)
    value = float(loss.data)
    if not np.isfinite(value):
        return value, {}
    tc.backward(loss, tape)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params}
    return value, grads


def diagnose_nonfinite(model: CalmPDE, windows: np.ndarray, points: np.ndarray, self_reconstruction: bool) -> str:
    for name, p in model.named_tensors():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name} holds non-finite values"
    try:
        loss_and_grads(model, windows, points, self_reconstruction, check_finite=True)
    except NonFiniteError as e:
        return f"first non-finite output from op {e.op!r} with shape {e.shape}"
    return "loss non-finite but no intermediate tensor was (zero-norm truth?)"


def train_step(model: CalmPDE, windows: np.ndarray, points: np.ndarray, cfg: TrainConfig, opt: Adam,
               lr: float | None = None) -> float:
    """Encode the first frame, roll out, decode all steps, apply one Adam update.

    ``windows`` is ``B x (1 + rollout_len) x N x C`` in normalised units.
    """
    if windows.shape[1] < 2:
        raise ValueError("rollout_len must be >= 1")
    loss, grads = loss_and_grads(model, windows, points, cfg.self_reconstruction)
    if not np.isfinite(loss):
        raise TrainingError(diagnose_nonfinite(model, windows, points, cfg.self_reconstruction))
    if cfg.grad_clip is not None:
        clip_by_norm(grads, cfg.grad_clip)
    opt.step(model.parameters(), grads, lr)
    model.confine_queries()
    return loss


def gather_windows(batch: np.ndarray, starts: np.ndarray, rollout_len: int) -> np.ndarray:
    idx = starts[:, None] + np.arange(rollout_len + 1)[None, :]
    return batch[np.arange(len(batch))[:, None], idx]


# ---------------------------------------------------------------------------
# evaluation


def predict(model: CalmPDE, ic: np.ndarray, input_points: np.ndarray, n_steps: int,
            query_points: np.ndarray | None = None, stats: ChannelStats | None = None,
            batch_size: int = 64) -> np.ndarray:
    """Physical-space predictions ``S x (1 + n_steps) x N' x C`` from physical ICs."""
    outs = []
    with no_record():
        for i in range(0, len(ic), batch_size):
            x = ic[i:i + batch_size]
            if stats is not None:
                x = stats.normalize(x)
            y = model.forward(x.astype(model.dtype), input_points, n_steps, query_points).data
            outs.append(stats.denormalize(y) if stats is not None else y)
    return np.concatenate(outs, axis=0)


def persistence(ic: np.ndarray, n_timesteps: int) -> np.ndarray:
    return np.repeat(ic[:, None], n_timesteps, axis=1)


@dataclass
class EvalResult:
    per_step: np.ndarray   # S x T x C relative L2 (t = 0 is the reconstruction)

    @property
    def per_trajectory(self) -> np.ndarray:
        return self.per_step[:, 1:].mean(axis=(1, 2))

    @property
    def mean(self) -> float:
        return float(self.per_trajectory.mean())

    @property
    def std(self) -> float:
        return float(self.per_trajectory.std())

    @property
    def curve(self) -> np.ndarray:
        return self.per_step.mean(axis=(0, 2))


def evaluate(model: CalmPDE, samples: np.ndarray, mesh_points: np.ndarray, stats: ChannelStats | None,
             input_idx: np.ndarray | None = None, batch_size: int = 64) -> EvalResult:
    """Roll out from each trajectory's first frame and score against all frames.

    ``input_idx`` restricts the encoder input to a subset of the mesh; decoding
    always happens on the full mesh.
    """
    t = samples.shape[1]
    ic = samples[:, 0]
    pts = mesh_points
    if input_idx is not None:
        ic, pts = ic[:, input_idx], mesh_points[input_idx]
    pred = predict(model, ic, pts, t - 1, mesh_points, stats, batch_size)
    return EvalResult(relative_l2_terms(pred, samples))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: CalmPDE, opt: Adam | None, config: dict, state: dict) -> int:
    arrays = {f"param/{n}": t.data for n, t in model.named_tensors()}
    if opt is not None:
        arrays.update({f"adam_m/{n}": a for n, a in opt.m.items()})
        arrays.update({f"adam_v/{n}": a for n, a in opt.v.items()})
    meta = {"config": config, "state": state,
            "optimizer": None if opt is None else {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                                                   "eps": opt.eps, "step_count": opt.step_count}}
    return container.write(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return container.read(path, CHECKPOINT_MAGIC)


def restore(model: CalmPDE, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Adam | None:
    """Copy checkpoint tensors into ``model``; returns the optimiser state if present."""
    for name, t in model.named_tensors():
        key = f"param/{name}"
        if key not in arrays:
            raise PayloadSizeError(f"checkpoint lacks tensor {name!r}")
        if arrays[key].shape != t.shape:
            raise PayloadSizeError(f"tensor {name!r}: checkpoint {arrays[key].shape} vs model {t.shape}")
        t.data = arrays[key].astype(t.dtype, copy=True)
    if not meta or not meta.get("optimizer"):
        return None
    o = meta["optimizer"]
    opt = Adam(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step_count"])
    opt.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
    return opt


# ---------------------------------------------------------------------------
# loop


def split_train_val(train: np.ndarray, n_val: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = min(n_val, len(train) - 1)
    if n_val <= 0:
        return train, train[:0]
    return train[:-n_val], train[-n_val:]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch streams make resumed runs draw the same batches as uninterrupted ones
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


@dataclass
class FitResult:
    history: list[dict]
    best_val: float
    best_epoch: int


def fit(model: CalmPDE, dataset: Dataset, cfg: TrainConfig, run_dir=None, config_echo: dict | None = None,
        stats: ChannelStats | None = None, opt: Adam | None = None, start_epoch: int = 0,
        best_val: float = math.inf, best_epoch: int = -1, epoch_callback=None) -> FitResult:
    """Curriculum training. With ``run_dir`` set, appends to ``log.csv`` and writes
    ``last.ckpt`` every epoch and ``best.ckpt`` on validation improvement."""
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    train_phys, val_phys = split_train_val(dataset.train(), cfg.n_val)
    stats = stats or ChannelStats.compute(dataset.train())
    train = stats.normalize(train_phys.astype(np.float64)).astype(model.dtype)
    points = dataset.mesh.positions.astype(model.dtype)
    n_t = dataset.n_timesteps
    max_len = min(cfg.max_rollout or n_t - 1, n_t - 1)
    every = cfg.increment_every(n_t)
    opt = opt or Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = run_dir / "log.csv" if run_dir is not None else None
    if log_path is not None and (start_epoch == 0 or not log_path.exists()):
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = epoch_rng(cfg.seed, epoch)
        length = curriculum_len(epoch, every, max_len)
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train))
        losses = []
        try:
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                starts = np.array([sample_start(n_t, length, cfg.random_start, rng) for _ in idx])
                windows = gather_windows(train[idx], starts, length)
                losses.append(train_step(model, windows, points, cfg, opt, lr))
        except TrainingError as e:
            log.error("epoch %d aborted: %s", epoch, e)
            losses.append(float("nan"))
        train_loss = float(np.mean(losses))
        val = evaluate(model, val_phys, dataset.mesh.positions, stats, batch_size=cfg.eval_batch_size).mean \
            if len(val_phys) else float("nan")
        row = dict(epoch=epoch, rollout_len=length, train_loss=train_loss, val_rel_l2=val, lr=lr,
                   seconds=time.perf_counter() - t0)
        history.append(row)
        log.info("epoch %d len %d loss %.5f val %.5f (%.1fs)", epoch, length, train_loss, val, row["seconds"])
        score = val if len(val_phys) else train_loss  # no held-out split: rank epochs by train loss
        improved = bool(np.isfinite(score) and score < best_val)
        if improved:
            best_val, best_epoch = score, epoch
        if run_dir is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in LOG_COLUMNS])
            state = dict(epoch=epoch + 1, best_val=best_val, best_epoch=best_epoch, dt=dataset.dt,
                         stats=stats.to_dict())
            save_checkpoint(run_dir / "last.ckpt", model, opt, config_echo or {}, state)
            if improved:
                save_checkpoint(run_dir / "best.ckpt", model, opt, config_echo or {}, state)
        if epoch_callback is not None:
            epoch_callback(row)
    return FitResult(history, best_val, best_epoch)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
