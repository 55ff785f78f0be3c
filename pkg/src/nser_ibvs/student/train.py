"""Adam training loop with per-epoch augmentation and early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import EmptyDataset
from .data import Dataset, augment_batch
from .net import StudentNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 30
    augment_factor: int = 5
    val_fraction: float = 0.1
    frame_stride: int = 1
    seed: int = 0

    @classmethod
    def from_config(cls, cfg, seed: int = 0) -> "TrainConfig":
        st = cfg.student
        return cls(
            lr=st.lr,
            batch_size=st.batch_size,
            patience=st.patience,
            min_delta=st.min_delta,
            max_epochs=st.max_epochs,
            augment_factor=st.augment_factor,
            val_fraction=st.val_fraction,
            frame_stride=st.frame_stride,
            seed=seed,
        )

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.augment_factor < 1 or self.batch_size < 1 or self.frame_stride < 1:
            raise ValueError("augment_factor, batch_size and frame_stride must be >= 1")


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, net: StudentNet, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, layer, key, p in net.named_params():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            layer.params[key] = p - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        net.invalidate()


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stopped_early: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def split_by_episode(ds: Dataset, val_fraction: float, rng: np.random.Generator):
    eps = np.unique(ds.episode)
    n_val = int(round(len(eps) * val_fraction))
    if len(eps) > 1:
        n_val = min(max(n_val, 1), len(eps) - 1)
    else:
        n_val = 0
    val_eps = rng.choice(eps, size=n_val, replace=False) if n_val else np.array([], dtype=eps.dtype)
    is_val = np.isin(ds.episode, val_eps)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def evaluate(net: StudentNet, ds: Dataset, idx, batch_size=256) -> float:
    if len(idx) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(idx), batch_size):
        b = idx[s : s + batch_size]
        pred = net.forward(ds.inputs(b), training=False)
        total += float(np.sum((pred.astype(np.float64) - ds.y[b]) ** 2))
    return total / (len(idx) * ds.y.shape[1])


def train(ds: Dataset, cfg: TrainConfig = TrainConfig(), net: StudentNet | None = None, arch: dict | None = None):
    """Fit a student to a distillation dataset; returns (best-validation net, history).

    Each epoch presents every training frame once as-is and
    ``augment_factor - 1`` times augmented. Training stops when the
    validation loss has not improved by ``min_delta`` for ``patience``
    consecutive epochs. With ``lr == 0`` the network is left untouched,
    including its normalization statistics.
    """
    if len(ds) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    net = net or StudentNet(arch, seed=cfg.seed)
    train_idx, val_idx = split_by_episode(ds, cfg.val_fraction, rng)
    train_idx = train_idx[:: cfg.frame_stride]
    if len(val_idx) == 0:
        val_idx = train_idx
    opt = Adam(dict((n, v) for n, _, _, v in net.named_params()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    hist = TrainHistory()
    best_state = net.state()
    wait = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        frozen = net.state() if cfg.lr == 0 else None
        reps = np.repeat(train_idx, cfg.augment_factor)
        is_aug = np.tile(np.arange(cfg.augment_factor) > 0, len(train_idx))
        order = rng.permutation(len(reps))
        reps, is_aug = reps[order], is_aug[order]
        losses = []
        for s in range(0, len(reps), cfg.batch_size):
            b = reps[s : s + cfg.batch_size]
            x = ds.inputs(b)
            a = is_aug[s : s + cfg.batch_size]
            if a.any():
                x[a] = augment_batch(x[a], rng)
            loss, grads = net.backward(x, ds.y[b], training=True)
            if cfg.lr > 0:
                opt.step(net, grads)
            losses.append(loss * len(b))
        if frozen is not None:
            net.load_state(frozen)
        train_loss = float(np.sum(losses) / len(reps))
        val_loss = evaluate(net, ds, val_idx)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < hist.best_val - cfg.min_delta:
            hist.best_val, hist.best_epoch = val_loss, epoch
            best_state = net.state()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                hist.stopped_early = True
                break
    net.load_state(best_state)
    hist.seconds = time.perf_counter() - t0
    return net, hist
