"""Optimization loop: Adam, temperature annealing, plateau LR halving, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import objectives as O
from . import tensor as T
from .config import RunConfig
from .networks import HQVAE, to_rows
from .quantization import TemperatureSchedule
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1


def adam_step(params, grads, state, lr, betas=(0.9, 0.9), eps=1e-8):
    """One bias-corrected Adam update in place.

    ``state`` holds ``t`` and per-name first/second moments ``m`` and ``v``.
    Missing gradients count as zero.
    """
    b1, b2 = betas
    state["t"] = t = state.get("t", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise T.ShapeError(f"adam: gradient {g.shape} does not match parameter {name} {p.data.shape}")
        mi = m.get(name)
        if mi is None:
            mi = m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        vi = v[name]
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        p.data -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.data.dtype)


def clip_gradients(grads, max_norm):
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: None if g is None else g * scale for k, g in grads.items()}


class PlateauHalver:
    """Halve the learning rate once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience=3, factor=0.5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience, self.factor = patience, factor
        self.best = math.inf
        self.bad = 0

    def update(self, loss, lr):
        if loss < self.best:
            self.best, self.bad = loss, 0
            return lr
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return lr * self.factor
        return lr


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    cursor: int = 0  # position within the current epoch's permutation
    lr: float = 1e-3
    sigma2: float = 1.0
    best_val: float = math.inf
    bad_epochs: int = 0


def array_hash(a):
    return hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest()


class Trainer:
    """Owns model, optimizer state, RNG and logs for one run.

    ``out_dir`` (optional) receives ``metrics.csv`` and ``checkpoints/``.
    Callbacks are called as ``cb(event, trainer, info)`` with event "step" or "epoch".
    """

    def __init__(self, config: RunConfig, train_images, val_images=None, out_dir=None, callbacks=()):
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.train.precision).type
        self.train_images = np.asarray(train_images)
        self.val_images = None if val_images is None else np.asarray(val_images)
        if len(self.train_images) == 0:
            raise ValueError("empty training split")
        self._val_hash = None if self.val_images is None else array_hash(self.val_images)
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.callbacks = list(callbacks)
        tc = config.train
        with T.precision(self.dtype):
            self.model = HQVAE(config.model, rng=np.random.default_rng(tc.seed))
        self.rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 1]))
        self.params = self.model.named_parameters()
        self.adam = {"t": 0, "m": {}, "v": {}}
        self.schedule = TemperatureSchedule(tc.temperature_floor, tc.temperature_rate)
        self.state = TrainState(lr=tc.lr)
        self.halver = PlateauHalver(tc.patience)
        self.order = None
        self.history = []  # per-epoch dicts
        self._columns = None

    # logging

    def _metric_columns(self):
        cfg = self.config.model
        cols = ["step", "epoch", "total", "log_sigma"]
        n_rec = len(cfg.groups) if cfg.progressive else 1
        cols += [f"recon_{i + 1}" for i in range(n_rec)]
        per_layer = not cfg.stochastic or cfg.objective == "naive"
        n_gap = cfg.num_layers if per_layer else len(cfg.groups)
        cols += [f"gap_{i + 1}" for i in range(n_gap)]
        if cfg.stochastic:
            cols += [f"neg_entropy_{i + 1}" for i in range(cfg.num_layers)]
        cols += ["tau", "lr"]
        cols += [f"sigma2_{r + 1}" for r in range(len(cfg.groups))] if cfg.progressive else ["sigma2"]
        if cfg.stochastic:
            cols += [f"s2_{i + 1}" for i in range(cfg.num_layers)]
        return cols

    @property
    def metrics_path(self):
        return None if self.out_dir is None else self.out_dir / "metrics.csv"

    def _write_row(self, row):
        if self.metrics_path is None:
            return
        if self._columns is None:
            self._columns = self._metric_columns()
        new = not self.metrics_path.exists()
        try:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, "a", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                if new:
                    w.writerow(self._columns)
                w.writerow([_fmt(row.get(c, "")) for c in self._columns])
        except OSError as exc:
            raise OSError(f"cannot write metrics to {self.metrics_path}: {exc}") from exc

    # one step

    def _batch(self, idx):
        return Tensor(self.train_images[idx].astype(self.dtype, copy=False))

    def _init_codebooks(self, x):
        with T.no_grad():
            for li in range(self.model.config.num_layers):
                fr = self.model.encode(x, mode="hard")
                self.model.codebooks[li].kmeans_init(to_rows(fr.layers[li].zhat).data, rng=self.rng)

    def train_step(self, x):
        """Forward, loss, backward, Adam and codebook upkeep on one batch."""
        model, cfg, tc = self.model, self.config.model, self.config.train
        with T.precision(self.dtype):
            x = T.as_tensor(x)
            if cfg.kmeans_init and self.state.step == 0:
                self._init_codebooks(x)
            tau = self.schedule.tau(self.state.step)
            for p in self.params.values():
                p.grad = None
            if cfg.stochastic:
                fr = model.encode(x, mode="sample", tau=tau, rng=self.rng)
            else:
                fr = model.encode(x, mode="st")
            if cfg.progressive:
                lb = O.objective(fr, model, None, tau)
                sigma2 = lb.diagnostics["sigma2"]
            else:
                sigma2 = O.update_sigma2(O.batch_mse(x, fr.recon), tc.sigma2_floor)
                lb = O.objective(fr, model, sigma2, tau)
            T.backward(lb.total)
            grads = {k: p.grad for k, p in self.params.items()}
            if tc.grad_clip:
                grads = clip_gradients(grads, tc.grad_clip)
            adam_step(self.params, grads, self.adam, self.state.lr, tc.adam_betas, tc.adam_eps)
            if not cfg.stochastic:
                O.ema_step(fr, model)
                if cfg.codebook_reset:
                    O.reset_step(fr, model, self.rng)
            for name, p in self.params.items():
                if not np.isfinite(p.data).all():
                    raise O.NumericAbort(f"parameter {name}", "non-finite after update")
        self.schedule.step = self.state.step + 1
        self.state.sigma2 = sigma2[-1] if isinstance(sigma2, list) else sigma2
        row = {"step": self.state.step, "epoch": self.state.epoch, "total": lb.value(), "tau": tau,
               "lr": self.state.lr, **lb.parts()}
        if isinstance(sigma2, list):
            row.update({f"sigma2_{r + 1}": s for r, s in enumerate(sigma2)})
        else:
            row["sigma2"] = sigma2
        row.update({f"s2_{i + 1}": s for i, s in enumerate(lb.diagnostics.get("s2", []))})
        self.state.step += 1
        if self.state.step % tc.log_every == 0 or self.state.step == 1:
            self._write_row(row)
        for cb in self.callbacks:
            cb("step", self, row)
        return lb

    # epochs

    def validate(self):
        """Mean deterministic objective over the validation split (hard assignments)."""
        if self.val_images is None or len(self.val_images) == 0:
            return math.nan
        model = self.model
        bs = self.config.train.batch_size
        total, n = 0.0, 0
        with T.precision(self.dtype), T.no_grad():
            for i in range(0, len(self.val_images), bs):
                x = Tensor(self.val_images[i:i + bs].astype(self.dtype, copy=False))
                fr = model.encode(x, mode="hard")
                s = None if model.config.progressive else self.state.sigma2
                total += O.objective(fr, model, s, None).value() * len(x)
                n += len(x)
        if array_hash(self.val_images) != self._val_hash:
            raise RuntimeError("validation split was mutated during training")
        return total / n

    def run_epoch(self, max_steps=None):
        """Finish the current epoch; returns None if ``max_steps`` stopped it early."""
        tc = self.config.train
        n = len(self.train_images)
        if max_steps is not None and self.state.step >= max_steps:
            return None
        if self.order is None or self.state.cursor == 0:
            self.order = self.rng.permutation(n)
        while self.state.cursor < n:
            if max_steps is not None and self.state.step >= max_steps:
                return None
            idx = self.order[self.state.cursor:self.state.cursor + tc.batch_size]
            self.train_step(self._batch(idx))
            self.state.cursor += len(idx)
        self.state.cursor = 0
        self.state.epoch += 1
        val = self.validate()
        lr_before = self.state.lr
        if math.isfinite(val):
            self.state.lr = self.halver.update(val, self.state.lr)
        self.state.best_val, self.state.bad_epochs = self.halver.best, self.halver.bad
        info = {"epoch": self.state.epoch, "val": val, "lr": lr_before, "next_lr": self.state.lr}
        self.history.append(info)
        log.info("epoch %d val %.6g lr %.3g", self.state.epoch, val, lr_before)
        for cb in self.callbacks:
            cb("epoch", self, info)
        if self.out_dir is not None and tc.checkpoint_every and self.state.epoch % tc.checkpoint_every == 0:
            self.save(self.out_dir / "checkpoints" / f"epoch{self.state.epoch:04d}.ckpt")
        return info

    def fit(self, epochs=None, max_steps=None):
        """Train until ``epochs`` epochs (default from config) or ``max_steps`` global steps."""
        epochs = self.config.train.epochs if epochs is None else epochs
        while self.state.epoch < epochs:
            if self.run_epoch(max_steps) is None:
                break
        return self.state

    # checkpoints

    def save(self, path):
        arrays = dict(self.model.state_arrays())
        for name in self.params:
            if name in self.adam["m"]:
                arrays[f"adam/m/{name}"] = self.adam["m"][name]
                arrays[f"adam/v/{name}"] = self.adam["v"][name]
        if self.order is not None:
            arrays["train/order"] = self.order
        meta = {
            "config": self.config.to_dict(),
            "state": _json_safe(asdict(self.state)),
            "adam_t": self.adam["t"],
            "rng": self.rng.bit_generator.state,
            "val_hash": self._val_hash,
            "metrics_schema": METRICS_SCHEMA,
        }
        arrays["meta/json"] = ckpt.encode_json(meta)
        ckpt.save_arrays(path, arrays)
        return Path(path)

    @classmethod
    def resume(cls, path, train_images, val_images=None, out_dir=None, callbacks=()):
        arrays = ckpt.load_arrays(path)
        meta = ckpt.decode_json(arrays["meta/json"])
        config = RunConfig.from_dict(meta["config"])
        tr = cls(config, train_images, val_images, out_dir=out_dir, callbacks=callbacks)
        if meta["val_hash"] is not None and tr._val_hash != meta["val_hash"]:
            raise ckpt.CheckpointError(f"{path}: validation split differs from the one used for training")
        tr.model.load_state_arrays(arrays)
        tr.adam = {"t": meta["adam_t"],
                   "m": {k: arrays[f"adam/m/{k}"].copy() for k in tr.params if f"adam/m/{k}" in arrays},
                   "v": {k: arrays[f"adam/v/{k}"].copy() for k in tr.params if f"adam/v/{k}" in arrays}}
        tr.rng.bit_generator.state = meta["rng"]
        st = meta["state"]
        st["best_val"] = math.inf if st["best_val"] is None else st["best_val"]
        tr.state = TrainState(**st)
        tr.schedule.step = tr.state.step
        tr.halver.best, tr.halver.bad = tr.state.best_val, tr.state.bad_epochs
        tr.order = arrays["train/order"].copy() if "train/order" in arrays else None
        if tr.metrics_path is not None and tr.metrics_path.exists():
            _truncate_metrics(tr.metrics_path, tr.state.step)
        return tr


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_safe(d):
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def _truncate_metrics(path, step):
    """Drop rows logged after ``step`` (work lost when the run stopped)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(keep)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def train(config, train_images, val_images=None, out_dir=None, callbacks=()):
    """Build a Trainer and run it for ``config.train.epochs`` epochs."""
    tr = Trainer(config, train_images, val_images, out_dir=out_dir, callbacks=callbacks)
    tr.fit()
    return tr


def load_model(path):
    """Rebuild (model, RunConfig, meta) from a training checkpoint."""
    arrays = ckpt.load_arrays(path)
    if "meta/json" not in arrays:
        raise ckpt.CheckpointError(f"{path}: no run metadata in checkpoint")
    meta = ckpt.decode_json(arrays["meta/json"])
    config = RunConfig.from_dict(meta["config"])
    with T.precision(np.dtype(config.train.precision).type):
        model = HQVAE(config.model, rng=np.random.default_rng(0))
    try:
        model.load_state_arrays(arrays)
    except KeyError as exc:
        raise ckpt.CheckpointError(f"{path}: missing array {exc}") from None
    return model, config, meta
