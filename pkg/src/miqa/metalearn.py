"""Bi-level meta-training of the quality regressor.

For each sampled task the parameters are adapted with S Adam steps on the
support set, then S more on the query set from a fresh optimizer state.
The outer step moves the shared parameters toward the mean of the adapted
ones: theta <- theta - beta * mean_i(theta - theta_i). Every gradient comes
from a fresh graph over the current parameters, so no derivative is ever
taken through an update.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from miqa import model as M
from miqa.model import ParamSet
from miqa.optimizer import (DEFAULT_EPSILON, DEFAULT_MU1, DEFAULT_MU2, DEFAULT_WEIGHT_DECAY,
                            Schedule, adam_descent, adam_init, adam_step, apply_weight_decay,
                            scheduled_rate)
from miqa.taskgen import MetaTrainingSet, Samples

log = logging.getLogger(__name__)


class MetaError(ValueError):
    pass


@dataclass
class AdamConfig:
    mu1: float = DEFAULT_MU1
    mu2: float = DEFAULT_MU2
    epsilon: float = DEFAULT_EPSILON
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    bias_correction: bool = False

    def kwargs(self):
        return asdict(self)


@dataclass
class MetaConfig:
    k: int = 5
    S: int = 6
    query_steps: int | None = None  # defaults to S
    alpha: float = 1e-4
    beta: float = 1e-2
    epochs: int = 100
    decay_factor: float = 0.8
    decay_every: int = 5
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    workers: int = 1

    @property
    def S_query(self):
        return self.S if self.query_steps is None else self.query_steps

    def validate(self, n_tasks=None):
        if self.k < 2 or (n_tasks is not None and self.k > n_tasks):
            raise MetaError(f"mini-batch size k={self.k} must satisfy 1 < k <= {n_tasks}")
        if self.S < 1 or self.S_query < 1:
            raise MetaError("adaptation steps must be at least 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise MetaError("learning rates must be positive")
        if self.epochs < 1:
            raise MetaError("need at least one epoch")
        return self


def sample_minibatch(meta_set: MetaTrainingSet, k: int, rng: np.random.Generator):
    """k distinct tasks drawn without replacement, in random order."""
    n = len(meta_set.tasks)
    if k <= 1 or k > n:
        raise MetaError(f"mini-batch size k={k} must satisfy 1 < k <= {n}")
    idx = rng.permutation(n)[:k]
    return [meta_set.tasks[i] for i in idx]


def _grad_fn(samples: Samples):
    def fn(params, step):
        return M.loss_and_grads(params, samples.images, samples.scores)
    return fn


def _adapt(theta, samples, steps, alpha, adam):
    if len(samples) == 0:
        raise MetaError("cannot adapt on an empty set")
    adam = adam or AdamConfig()
    params, _, losses = adam_descent(theta, _grad_fn(samples), steps, alpha, **adam.kwargs())
    return params, losses


def inner_adapt(theta: ParamSet, support: Samples, S: int, alpha: float,
                adam: AdamConfig | None = None) -> ParamSet:
    """theta' after S Adam steps on the support loss from zeroed moments."""
    return _adapt(theta, support, S, alpha, adam)[0]


def query_adapt(theta_prime: ParamSet, query: Samples, S: int, alpha: float,
                adam: AdamConfig | None = None) -> ParamSet:
    """theta_i after S Adam steps on the query loss, again from zeroed moments."""
    return _adapt(theta_prime, query, S, alpha, adam)[0]


def outer_update(theta: ParamSet, adapted, beta: float) -> ParamSet:
    """theta - beta * (1/k) * sum_i (theta - theta_i), summed in list order.

    Accumulation runs in float64 and the result is rounded once to the
    parameter dtype.
    """
    adapted = list(adapted)
    if not adapted:
        raise MetaError("outer update needs at least one adapted parameter set")
    for a in adapted:
        theta.require_compatible(a)
    k = len(adapted)
    out = {}
    for name, p in theta.items():
        p64 = p.astype(np.float64)
        acc = np.zeros_like(p64)
        for a in adapted:
            acc += p64 - a[name]
        out[name] = (p64 - beta * (acc / k)).astype(p.dtype)
    return theta.replace(out)


@dataclass
class TaskResult:
    task_id: str
    params: ParamSet
    support_losses: list
    query_losses: list


def adapt_task(theta, task, S, S_query, alpha, adam) -> TaskResult:
    theta_prime, sup = _adapt(theta, task.support, S, alpha, adam)
    theta_i, qry = _adapt(theta_prime, task.query, S_query, alpha, adam)
    return TaskResult(task.task_id, theta_i, sup, qry)


@dataclass
class EpochLog:
    epoch: int
    alpha: float
    beta: float
    support_loss: float
    query_loss: float
    batches: int


def meta_train(meta_set: MetaTrainingSet, config: MetaConfig, init: ParamSet | None = None,
               spec: M.BackboneSpec | None = None, callback=None):
    """Returns ``(theta, logs)``.

    Each epoch runs ceil(N / k) mini-batches; the schedule scales alpha and
    beta per epoch. The epoch's query loss is the mean first-step query loss
    over all adapted tasks (loss at theta' before query adaptation).
    """
    meta_set.validate()
    n = len(meta_set.tasks)
    config.validate(n)
    if init is None:
        init = M.build_model(spec or M.DEFAULT_SPEC, seed=config.seed)
    theta = init
    rng = np.random.default_rng([config.seed, 0x6D657461])
    alpha_sched = Schedule(config.alpha, config.decay_factor, config.decay_every)
    beta_sched = Schedule(config.beta, config.decay_factor, config.decay_every)
    batches = math.ceil(n / config.k)
    logs = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(config.epochs):
            alpha = scheduled_rate(alpha_sched, epoch)
            beta = scheduled_rate(beta_sched, epoch)
            sup_losses, qry_losses = [], []
            for _ in range(batches):
                tasks = sample_minibatch(meta_set, config.k, rng)
                args = [(theta, t, config.S, config.S_query, alpha, config.adam) for t in tasks]
                if pool is not None:
                    results = list(pool.map(lambda a: adapt_task(*a), args))
                else:
                    results = [adapt_task(*a) for a in args]
                theta = outer_update(theta, [r.params for r in results], beta)
                sup_losses += [r.support_losses[0] for r in results]
                qry_losses += [r.query_losses[0] for r in results]
            entry = EpochLog(epoch, alpha, beta, float(np.mean(sup_losses)),
                             float(np.mean(qry_losses)), batches)
            logs.append(entry)
            log.debug("epoch %d: support %.5f query %.5f", epoch, entry.support_loss,
                      entry.query_loss)
            if callback is not None:
                callback(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    return theta, logs


def pretrain(samples: Samples, epochs: int, alpha: float, *, batch_size: int = 16,
             decay_factor: float = 0.8, decay_every: int = 5, adam: AdamConfig | None = None,
             seed: int = 0, init: ParamSet | None = None, spec: M.BackboneSpec | None = None):
    """Conventional single-level Adam training over pooled images (the ablation baseline).

    One optimizer state persists across the whole run; each epoch visits every
    image once in shuffled mini-batches. Returns ``(theta, epoch_losses)``.
    """
    adam = adam or AdamConfig()
    theta = init if init is not None else M.build_model(spec or M.DEFAULT_SPEC, seed=seed)
    rng = np.random.default_rng([seed, 0x62617365])
    sched = Schedule(alpha, decay_factor, decay_every)
    state = adam_init(theta, adam.mu1, adam.mu2, adam.epsilon, adam.bias_correction)
    n = len(samples)
    history = []
    for epoch in range(epochs):
        lr = scheduled_rate(sched, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            value, grads = M.loss_and_grads(theta, samples.images[idx], samples.scores[idx])
            losses.append(value)
            if adam.weight_decay:
                grads = apply_weight_decay(grads, theta, adam.weight_decay)
            theta, state = adam_step(state, theta, grads, lr)
        history.append(float(np.mean(losses)))
    return theta, history
