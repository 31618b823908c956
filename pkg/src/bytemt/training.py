"""Adam with an inverse-sqrt schedule, token dropout, validation and top-k retention."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, OptimState, average_checkpoints, save_checkpoint
from .corpus import Batch
from .model import Model, ModelConfig, Params, init_params, is_trainable, label_smoothed_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 5e-4
    warmup: int = 4000
    weight_decay: float = 1e-4
    steps: int = 5000
    token_dropout: float = 0.0
    seed: int = 1
    validate_every: int = 200
    keep_top_k: int = 5
    label_smoothing: float = 0.1
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if not 0 <= self.token_dropout < 1:
            raise ValueError("token_dropout must be in [0, 1)")
        if self.steps < 0 or self.validate_every < 1 or self.keep_top_k < 1:
            raise ValueError("steps >= 0, validate_every >= 1 and keep_top_k >= 1 are required")


def lr_inverse_sqrt(step: int, peak: float = 5e-4, warmup: int = 4000) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then decay with 1/sqrt(step)."""
    if step < 1:
        raise ValueError("the schedule is defined for step >= 1")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


def adam_step(params: Params, grads: Params, state: OptimState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8,
              weight_decay: float = 0.0, frozen: Sequence[str] = ()) -> None:
    """One in-place Adam update with bias correction and coupled L2 decay."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(sorted(bad))}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name].astype(np.float64)
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m64 = b1 * m + (1.0 - b1) * g
        v64 = b2 * v + (1.0 - b2) * g * g
        update = lr * (m64 / c1) / (np.sqrt(v64 / c2) + eps)
        m[...] = m64
        v[...] = v64
        p[...] = p - update


def token_dropout(rows: np.ndarray, p_tok: float, rng: np.random.Generator, pad_mask=None) -> np.ndarray:
    """Zero whole rows with probability ``p_tok``; survivors scaled by 1/(1 - p_tok).

    ``pad_mask`` (True on PAD) rows are left alone. The model applies the
    same rule on the tape through :func:`bytemt.model.token_dropout_mask`.
    """
    if not 0 <= p_tok < 1:
        raise ValueError("p_tok must be in [0, 1)")
    if p_tok == 0:
        return rows
    keep = rng.random(rows.shape[:-1]) >= p_tok
    factor = keep / (1.0 - p_tok)
    if pad_mask is not None:
        factor = np.where(pad_mask, 1.0, factor)
    return rows * factor[..., None].astype(rows.dtype)


def batch_loss(model: Model, batch: Batch, epsilon: float, train: bool = False, rng=None,
               token_dropout: float | None = None):
    logits = model.forward(batch.src_ids, batch.src_mask, batch.tgt_in, batch.tgt_mask,
                           train=train, rng=rng, token_dropout=token_dropout)
    return label_smoothed_loss(logits, batch.tgt_out, batch.tgt_mask, model.config.vocab_size, epsilon)


def validation_loss(config: ModelConfig, params: Params, batches: Sequence[Batch], epsilon: float) -> float:
    """Token-weighted mean loss with every kind of dropout off."""
    model = Model(config, params)
    total, count = 0.0, 0
    with ag.no_grad():
        for b in batches:
            loss, n = batch_loss(model, b, epsilon)
            total += float(loss.data) * n
            count += n
    return total / count


def _global_clip(grads: Params, max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm > 0:
        for g in grads.values():
            g *= max_norm / norm


@dataclass
class MetricRecord:
    step: int
    lr: float
    train_loss: float
    valid_loss: float

    def line(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.train_loss!r}\t{self.valid_loss!r}"


@dataclass
class TrainResult:
    top: list[Checkpoint]
    log: list[MetricRecord]
    final: Checkpoint
    init_valid_loss: float
    averaged: Checkpoint | None = None
    history: list[tuple[int, float]] = field(default_factory=list)


def _snapshot(config, params, step, valid_loss, optim, meta) -> Checkpoint:
    return Checkpoint(config, {k: a.copy() for k, a in params.items()}, step, valid_loss,
                      None if optim is None else optim.copy(), dict(meta))


class TopK:
    """Keeps the k checkpoints with the smallest validation loss (ties: earlier step)."""

    def __init__(self, k: int, out_dir: Path | None = None):
        self.k = k
        self.out_dir = out_dir
        self.items: list[Checkpoint] = []

    def offer(self, ckpt: Checkpoint) -> None:
        self.items.append(ckpt)
        self.items.sort(key=lambda c: (c.valid_loss, c.step))
        evicted = self.items[self.k:]
        self.items = self.items[: self.k]
        if self.out_dir is None:
            return
        if any(c is ckpt for c in self.items):
            save_checkpoint(ckpt, self.out_dir / f"ckpt_{ckpt.step}.bin")
        for c in evicted:
            (self.out_dir / f"ckpt_{c.step}.bin").unlink(missing_ok=True)
        manifest = [f"ckpt_{c.step}.bin\t{c.valid_loss!r}" for c in self.items]
        (self.out_dir / "best_k.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def train_loop(config: ModelConfig, train_batches: Sequence[Batch], valid_batches: Sequence[Batch],
               cfg: TrainConfig, params: Params | None = None, out_dir=None,
               meta: dict[str, str] | None = None) -> TrainResult:
    """Train for ``cfg.steps`` updates, validating every ``cfg.validate_every``.

    Step 0 is validated too, so ``steps=0`` yields the initialisation
    checkpoint alone. When ``out_dir`` is given, retained checkpoints,
    ``best_k.txt`` and ``metrics.tsv`` are written there.
    """
    if not train_batches and cfg.steps > 0:
        raise ValueError("no training batches")
    if not valid_batches:
        raise ValueError("no validation batches")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        params = init_params(config, init_rng)
    params = {k: np.array(a, copy=True) for k, a in params.items()}
    meta = dict(meta or {})
    frozen = [k for k in params if not is_trainable(k, config)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_file = open(out / "metrics.tsv", "w", encoding="utf-8") if out is not None else None

    state = OptimState.zeros_like(params)
    top = TopK(cfg.keep_top_k, out)
    records: list[MetricRecord] = []

    def validate(step: int, lr: float, train_loss: float) -> float:
        vloss = validation_loss(config, params, valid_batches, cfg.label_smoothing)
        rec = MetricRecord(step, lr, train_loss, vloss)
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(rec.line() + "\n")
            metrics_file.flush()
        log.info("step %d lr %.3g train %.4f valid %.4f", step, lr, train_loss, vloss)
        if step > 0 and not math.isfinite(vloss):
            raise TrainingDiverged(f"validation loss became {vloss} at step {step}", last_good)
        top.offer(_snapshot(config, params, step, vloss, state, meta))
        return vloss

    last_good = None
    try:
        init_loss = validate(0, 0.0, float("nan"))
        last_good = top.items[0]
        order: list[int] = []
        running, running_n = 0.0, 0
        lr = 0.0
        model = Model(config, params)
        for step in range(1, cfg.steps + 1):
            if not order:
                order = order_rng.permutation(len(train_batches)).tolist()
            batch = train_batches[order.pop()]
            lr = lr_inverse_sqrt(step, cfg.peak_lr, cfg.warmup)
            model.track()
            loss, _ = batch_loss(model, batch, cfg.label_smoothing, train=True, rng=drop_rng,
                                 token_dropout=cfg.token_dropout)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}", last_good)
            loss.backward()
            grads = model.grads()
            if cfg.clip_norm > 0:
                _global_clip(grads, cfg.clip_norm)
            try:
                adam_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay, frozen)
            except FloatingPointError as err:
                raise TrainingDiverged(f"step {step}: {err}", last_good) from None
            running += value
            running_n += 1
            if step % cfg.validate_every == 0 or step == cfg.steps:
                vloss = validate(step, lr, running / running_n)
                last_good = _snapshot(config, params, step, vloss, state, meta)
                running, running_n = 0.0, 0
    finally:
        if metrics_file is not None:
            metrics_file.close()

    final = _snapshot(config, params, cfg.steps, records[-1].valid_loss, state, meta)
    averaged = average_checkpoints(top.items)
    averaged.meta.update(meta)
    if out is not None:
        save_checkpoint(final, out / "last.bin")
        save_checkpoint(averaged, out / "averaged.bin")
    return TrainResult(list(top.items), records, final, init_loss, averaged)
