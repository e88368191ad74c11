"""Two-phase curriculum training with a weighted Huber objective."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DivergedTraining, ShapeMismatch, TooFewGroups
from .neural import FusionModel, OptimizerState, Standardizer, adamw_step, backward, forward
from .pipeline import PointSet, ProblemSetup, build_points

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class CurriculumPhase:
    name: str
    delta: float
    lam: float
    max_epochs: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def default_phases():
    return [CurriculumPhase("warmup", 1.0, 0.7, 200), CurriculumPhase("focus", 0.5, 0.4, 300)]


@dataclass
class TrainConfig:
    phases: list = field(default_factory=default_phases)
    batch_size: int = 512
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 3e-4
    clipnorm: float | None = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-5
    early_patience: int = 25
    early_min_delta: float = 1e-5
    finetune_epochs: int = 0
    val_fraction: float = 0.2
    seed: int = 0
    max_points_per_case: int | None = 16384
    oversample: bool = False
    oversample_threshold: float = 2.0
    jitter_frac: float = 0.25
    clean_loss_points: int = 4096
    dtype: str = "float32"

    def __post_init__(self):
        self.phases = [p if isinstance(p, CurriculumPhase) else CurriculumPhase(**p) for p in self.phases]
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# seeds

SEED_STREAMS = ("data", "init", "dropout", "batching")


def substream(root: int, name: str) -> np.random.Generator:
    """Independent generator for one named component of a run."""
    return np.random.default_rng(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]))


def derive_seed(root: int, name: str) -> int:
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# splitting and batching

def n_val_groups(n_groups: int, val_fraction: float) -> int:
    """Round-half-up of ``val_fraction * n_groups``, at least one group per side."""
    n = int(math.floor(val_fraction * n_groups + 0.5))
    return min(max(n, 1), n_groups - 1)


def group_split(cases, val_fraction: float, seed: int):
    """Split cases so that no condition value lands on both sides."""
    groups = sorted({float(c.condition) for c in cases})
    if len(groups) < 2:
        raise TooFewGroups(f"need at least two distinct conditions, got {len(groups)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(groups))
    val_groups = {groups[i] for i in perm[:n_val_groups(len(groups), val_fraction)]}
    train = [c for c in cases if float(c.condition) not in val_groups]
    val = [c for c in cases if float(c.condition) in val_groups]
    assert not ({float(c.condition) for c in train} & {float(c.condition) for c in val})
    return train, val


class Batch(NamedTuple):
    indices: np.ndarray
    jitter: np.ndarray | None


def assemble_batches(n_points: int, batch_size: int, rng, oversample_mask=None, dx=None,
                     jitter_frac: float = 0.25) -> list[Batch]:
    """Shuffled mini-batches over ``n_points``.

    With ``oversample_mask`` the flagged points appear a second time with a
    uniform x-jitter of up to ``jitter_frac * dx``; the jitter of original
    points is zero.
    """
    idx = np.arange(n_points)
    jitter = None
    if oversample_mask is not None and np.any(oversample_mask):
        dup = np.flatnonzero(oversample_mask)
        jitter = np.concatenate([np.zeros(n_points),
                                 rng.uniform(-jitter_frac, jitter_frac, dup.size) * np.asarray(dx)[dup]])
        idx = np.concatenate([idx, dup])
    order = rng.permutation(idx.size)
    out = []
    for s in range(0, idx.size, batch_size):
        sel = order[s:s + batch_size]
        out.append(Batch(idx[sel], None if jitter is None else jitter[sel]))
    return out


# ---------------------------------------------------------------------------
# objective

def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def weighted_huber(pred, target, weights, delta):
    """Weighted-mean Huber loss summed over output channels, and its gradient.

    ``loss = sum_i w_i sum_c huber(pred_ic - target_ic) / sum_i w_i``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    w = np.asarray(weights, dtype=pred.dtype).reshape(-1)
    if w.size != pred.shape[0]:
        raise ShapeMismatch(f"{w.size} weights for {pred.shape[0]} samples")
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    r = pred - target
    norm = w.sum()
    loss = float((w[:, None] * huber(r, delta)).sum() / norm)
    grad = (w / norm)[:, None] * np.clip(r, -delta, delta)
    return loss, grad.reshape(np.shape(pred))


# ---------------------------------------------------------------------------
# schedules

class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=10, min_lr=1e-5, min_delta=1e-4):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.min_lr, self.min_delta = min_lr, min_delta
        self.best = math.inf
        self.wait = 0

    def reset(self):
        self.best, self.wait = math.inf, 0

    def step(self, value) -> float:
        if value < self.best - self.min_delta:
            self.best, self.wait = value, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


class EarlyStopping:
    """Track the best value; signal a stop after ``patience`` non-improving epochs."""

    def __init__(self, patience=25, min_delta=1e-5):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def step(self, value, epoch) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_loss_clean: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: float = 0.0

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def phase_epochs(self) -> dict:
        out = {}
        for p in self.phase:
            out[p] = out.get(p, 0) + 1
        return out

    def to_csv(self, path):
        cols = ["epoch", "phase", "train_loss", "train_loss_clean", "val_loss", "best_val", "lr"]
        lines = [",".join(cols)]
        for row in zip(*(getattr(self, c) for c in cols)):
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class TrainingData:
    """Standardization-ready train/validation points plus the setup that built them."""

    train: PointSet
    val: PointSet
    setup: ProblemSetup


def fit_scalers(model: FusionModel, train: PointSet):
    model.branch_scaler = Standardizer.fit(train.branch)
    model.trunk_scaler = Standardizer.fit(train.trunk)
    model.output_scaler = Standardizer.fit(train.target)


def _evaluate(model, b, t, y, w, delta, batch_size=4096):
    total, norm = 0.0, float(w.sum())
    for s in range(0, t.shape[0], batch_size):
        out, _ = forward(model, b[s:s + batch_size], t[s:s + batch_size], "infer")
        ws = w[s:s + batch_size]
        loss, _ = weighted_huber(out, y[s:s + batch_size], ws, delta)
        total += loss * float(ws.sum())
    return total / norm


def train_curriculum(data: TrainingData, model: FusionModel, config: TrainConfig, callback=None):
    """Warmup then focus phase; returns the trained model (float64) and history.

    Standardizers are fitted on the training points when the model has none.
    Each phase restores its best-validation parameters before the next one
    starts.  Batch order and dropout/noise draws come from separate streams
    derived from ``config.seed``.
    """
    start = time.perf_counter()
    rng = substream(config.seed, "batching")
    noise_rng = substream(config.seed, "dropout")
    if model.trunk_scaler is None:
        fit_scalers(model, data.train)
    work = model.astype(config.dtype)
    dt = work.dtype
    tr, va = data.train, data.val
    b_tr = work.branch_scaler.apply(tr.branch).astype(dt)
    t_tr = work.trunk_scaler.apply(tr.trunk).astype(dt)
    y_tr = work.output_scaler.apply(tr.target).astype(dt)
    b_va = work.branch_scaler.apply(va.branch).astype(dt)
    t_va = work.trunk_scaler.apply(va.trunk).astype(dt)
    y_va = work.output_scaler.apply(va.target).astype(dt)
    clean = np.sort(rng.choice(tr.n, size=min(tr.n, config.clean_loss_points), replace=False))

    opt = OptimizerState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay,
                         config.clipnorm)
    plateau = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr,
                               config.plateau_min_delta)
    history = TrainHistory()
    over_mask = None
    if config.oversample and tr.w_dist is not None:
        over_mask = tr.w_dist > config.oversample_threshold

    def run_epoch(w_tr, delta):
        batches = assemble_batches(tr.n, config.batch_size, rng, over_mask, tr.dx, config.jitter_frac)
        total, norm = 0.0, 0.0
        for batch in batches:
            i = batch.indices
            t_b = t_tr[i]
            if batch.jitter is not None and np.any(batch.jitter):
                moved = np.flatnonzero(batch.jitter)
                t_b = t_b.copy()
                raw = tr.rebuild_trunk(i[moved], batch.jitter[moved], data.setup)
                t_b[moved] = work.trunk_scaler.apply(raw).astype(dt)
            out, cache = forward(work, b_tr[i], t_b, "train", noise_rng)
            loss, grad = weighted_huber(out, y_tr[i], w_tr[i], delta)
            grads = backward(work, cache, grad)
            adamw_step(work.params, grads, opt)
            work.version += 1
            ws = float(w_tr[i].sum())
            total += loss * ws
            norm += ws
        return total / norm

    def run_phase(name, delta, lam_key, epochs, lr_fn=None):
        w_tr = tr.weights[lam_key].astype(dt)
        w_va = va.weights[lam_key].astype(dt)
        stopper = EarlyStopping(config.early_patience, config.early_min_delta)
        plateau.reset()
        best = work.copy_params()
        for k in range(epochs):
            epoch = len(history.epoch) + 1
            if lr_fn is not None:
                opt.lr = lr_fn(k)
            train_loss = run_epoch(w_tr, delta)
            val_loss = _evaluate(work, b_va, t_va, y_va, w_va, delta)
            clean_loss = _evaluate(work, b_tr[clean], t_tr[clean], y_tr[clean], w_tr[clean], delta)
            if not math.isfinite(val_loss):
                raise DivergedTraining(f"validation loss is {val_loss} at epoch {epoch} ({name})")
            improved, stop = stopper.step(val_loss, epoch)
            if improved:
                best = work.copy_params()
            history.append(epoch=epoch, phase=name, train_loss=train_loss, train_loss_clean=clean_loss,
                           val_loss=val_loss, best_val=stopper.best, lr=opt.lr)
            if callback is not None:
                callback(history)
            if lr_fn is None:
                opt.lr = plateau.step(val_loss)
            if stop:
                break
        work.set_params(best)
        log.info("phase %s: %d epochs, best val %.4g", name, sum(p == name for p in history.phase),
                 stopper.best)

    for phase in config.phases:
        run_phase(phase.name, phase.delta, phase.name, phase.max_epochs)
    if config.finetune_epochs > 0:
        last = config.phases[-1]
        lr0, n = opt.lr, config.finetune_epochs
        cosine = (lambda k: config.min_lr + 0.5 * (lr0 - config.min_lr) * (1 + math.cos(math.pi * k / n)))
        run_phase("finetune", last.delta, last.name, n, cosine)

    trained = work.astype(np.float64)
    trained.meta = {**model.meta, "history_epochs": len(history.epoch)}
    history.seconds = time.perf_counter() - start
    return trained, history


def prepare_training_data(cases, setup: ProblemSetup, config: TrainConfig) -> TrainingData:
    """Group split, then points with one weight vector per curriculum phase."""
    rng = substream(config.seed, "data")
    train_cases, val_cases = group_split(cases, config.val_fraction, config.seed)
    lams = {p.name: p.lam for p in config.phases}
    train = build_points(train_cases, setup, lams, config.max_points_per_case, rng)
    val = build_points(val_cases, setup, lams, config.max_points_per_case, rng)
    return TrainingData(train, val, setup)
