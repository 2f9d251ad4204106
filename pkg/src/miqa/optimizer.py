"""Adam without bias correction, coupled L2 weight decay and a step-decay schedule.

The update is

    m <- mu1 * m + (1 - mu1) * g
    v <- mu2 * v + (1 - mu2) * g**2
    p <- p - alpha * m / (sqrt(v) + eps)

with m and v starting at zero. ``bias_correction=True`` switches to the
corrected estimates m / (1 - mu1**t), v / (1 - mu2**t) for sensitivity runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from miqa.model import ParamSet

DEFAULT_MU1 = 0.9
DEFAULT_MU2 = 0.99
DEFAULT_EPSILON = 1e-8
DEFAULT_WEIGHT_DECAY = 1e-5


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    mu1: float = DEFAULT_MU1
    mu2: float = DEFAULT_MU2
    epsilon: float = DEFAULT_EPSILON
    step_count: int = 0
    bias_correction: bool = False


def adam_init(params: ParamSet, mu1=DEFAULT_MU1, mu2=DEFAULT_MU2, epsilon=DEFAULT_EPSILON,
              bias_correction=False) -> AdamState:
    if not 0.0 <= mu1 < 1.0:
        raise OptimizerError(f"mu1 must lie in [0, 1), got {mu1}")
    if not 0.0 <= mu2 < 1.0:
        raise OptimizerError(f"mu2 must lie in [0, 1), got {mu2}")
    if not epsilon > 0:
        raise OptimizerError(f"epsilon must be positive, got {epsilon}")
    zeros = {k: np.zeros_like(a) for k, a in params.items()}
    return AdamState(zeros, {k: z.copy() for k, z in zeros.items()}, float(mu1), float(mu2),
                     float(epsilon), 0, bool(bias_correction))


def _check_grads(params: ParamSet, grads, state: AdamState | None = None):
    for name, p in params.items():
        if name not in grads:
            raise OptimizerError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if np.shape(g) != p.shape:
            raise OptimizerError(f"gradient for {name!r} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        if state is not None and state.m[name].shape != p.shape:
            raise OptimizerError(f"optimizer state for {name!r} does not mirror the parameters")


def adam_step(state: AdamState, params: ParamSet, grads, alpha: float):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if not alpha > 0:
        raise OptimizerError(f"learning rate must be positive, got {alpha}")
    if set(state.m) != set(params.names()):
        raise OptimizerError("optimizer state does not mirror the parameter set")
    _check_grads(params, grads, state)
    t = state.step_count + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        dt = p.dtype.type
        g = np.asarray(grads[name], dtype=p.dtype)
        m = dt(state.mu1) * state.m[name] + dt(1.0 - state.mu1) * g
        v = dt(state.mu2) * state.v[name] + dt(1.0 - state.mu2) * (g * g)
        if state.bias_correction:
            m_hat = m / dt(1.0 - state.mu1 ** t)
            v_hat = v / dt(1.0 - state.mu2 ** t)
        else:
            m_hat, v_hat = m, v
        new_p[name] = p - dt(alpha) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))
        new_m[name] = m
        new_v[name] = v
    return params.replace(new_p), replace(state, m=new_m, v=new_v, step_count=t)


def apply_weight_decay(grads, params: ParamSet, lam: float):
    """Coupled L2: g + lam * p for every parameter."""
    if lam < 0:
        raise OptimizerError(f"weight decay must be nonnegative, got {lam}")
    if lam == 0:
        return dict(grads)
    out = {}
    for name, p in params.items():
        out[name] = grads[name] + p.dtype.type(lam) * p
    return out


@dataclass(frozen=True)
class Schedule:
    base_rate: float
    decay_factor: float = 0.8
    decay_every: int = 5

    def __post_init__(self):
        if not self.base_rate > 0:
            raise OptimizerError("base rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise OptimizerError("decay factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise OptimizerError("decay interval must be a positive number of epochs")

    def rate(self, epoch: int) -> float:
        return scheduled_rate(self, epoch)


def scheduled_rate(schedule: Schedule, epoch: int) -> float:
    """base_rate * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise OptimizerError("epoch must be nonnegative")
    return schedule.base_rate * schedule.decay_factor ** (epoch // schedule.decay_every)


def adam_descent(params: ParamSet, grad_fn, steps: int, alpha: float, *, mu1=DEFAULT_MU1,
                 mu2=DEFAULT_MU2, epsilon=DEFAULT_EPSILON, weight_decay=0.0,
                 bias_correction=False, state: AdamState | None = None):
    """Run ``steps`` Adam updates from a fresh (or given) state.

    ``grad_fn(params, step) -> (loss, grads)`` is re-evaluated at the current
    parameters every step. Returns ``(params, state, losses)`` where ``losses``
    holds the loss seen before each update.
    """
    if steps < 1:
        raise OptimizerError("need at least one step")
    if state is None:
        state = adam_init(params, mu1, mu2, epsilon, bias_correction)
    losses = []
    for s in range(steps):
        value, grads = grad_fn(params, s)
        losses.append(value)
        if weight_decay:
            grads = apply_weight_decay(grads, params, weight_decay)
        params, state = adam_step(state, params, grads, alpha)
    return params, state, losses
