"""Minibatch SGD with momentum under a cosine-decayed learning rate."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import ModelConfig, ModelParams, backward, encode, init_params, level_from_h, predict_raw
from .errors import Divergence, InputError, ZeroVariance
from .objectives import ObjectiveSpec, scalar_prediction
from .synthgen import PairSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    epochs: int = 40
    lr: float = 5.0
    batch_size: int = 50
    momentum: float = 0.9
    warmup_steps: int = 20
    clip_norm: float | None = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    skipped_batches: int = 0


def train(config: ModelConfig, data: PairSet, objective: ObjectiveSpec, schedule: Schedule,
          seed: int = 0, init: ModelParams | None = None) -> TrainResult:
    """Train from ``init`` (or a seeded initialisation) and return the final
    parameters with per-step and per-epoch loss logs.

    Deterministic for a given seed: shuffling and initialisation both derive
    from it and gradient reduction order is fixed.
    """
    if len(data) == 0:
        raise InputError("training set is empty")
    params = init.copy() if init is not None else init_params(config, seed)
    result = TrainResult(params)
    if schedule.epochs <= 0:
        return result

    rng = np.random.default_rng([seed, 1])
    n, bs = len(data), min(schedule.batch_size, len(data))
    per_epoch = math.ceil(n / bs)
    total = schedule.epochs * per_epoch
    velocity = params.zeros_like()
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = (data.real[idx], data.gen[idx], data.levels[idx])
            try:
                loss, grads = backward(params, config, batch, objective)
            except ZeroVariance:
                result.skipped_batches += 1
                result.steps.append({"step": step, "objective": objective.name, "loss": None,
                                     "skipped_batches": result.skipped_batches})
                step += 1
                continue
            except Divergence as exc:
                raise Divergence(f"loss diverged at step {step}: {exc}", step) from None
            lr = cosine_lr(step, total, schedule.lr, schedule.warmup_steps)
            if schedule.clip_norm:
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if not math.isfinite(gnorm):
                    raise Divergence(f"non-finite gradient at step {step}", step)
                if gnorm > schedule.clip_norm:
                    s = schedule.clip_norm / gnorm
                    for g in grads.values():
                        g *= s
            for k in params:
                velocity[k] *= schedule.momentum
                velocity[k] -= lr * grads[k]
                params[k] += velocity[k]
            losses.append(loss)
            result.steps.append({"step": step, "objective": objective.name, "loss": loss,
                                 "skipped_batches": result.skipped_batches})
            step += 1
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        result.epoch_losses.append(mean_loss)
        log.info("epoch %d/%d loss %.5f", epoch + 1, schedule.epochs, mean_loss)
    return result


def predict_pairs(params: ModelParams, config: ModelConfig, data: PairSet,
                  objective: ObjectiveSpec | None = None):
    """Predicted levels for every pair plus the raw similarity vectors.

    Scalar-head objectives yield a continuous level from the first token pair;
    all others use the argmax level.
    """
    vr = encode(params, config, data.real)
    vg = encode(params, config, data.gen)
    h = predict_raw(vr, vg)
    if objective is not None and objective.scalar_head:
        s_p, _ = scalar_prediction(h[:, 0], config.N, objective.tau)
    else:
        s_p = level_from_h(h).astype(np.float64)
    return s_p, h
