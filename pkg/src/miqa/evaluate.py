"""Fine-tuning a prior on a target task, correlation metrics and saliency maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from miqa import autodiff as ad
from miqa import model as M
from miqa.autodiff import Tensor
from miqa.metalearn import AdamConfig
from miqa.model import ParamSet
from miqa.optimizer import adam_descent
from miqa.taskgen import Samples, TargetTask


class UndefinedCorrelation(ArithmeticError):
    """A correlation over a constant vector has no value."""


class EvalError(ValueError):
    pass


def _pair(truth, predicted):
    x = np.asarray(truth, dtype=np.float64).reshape(-1)
    y = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise EvalError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise EvalError("correlation needs at least two scores")
    return x, y


def plcc(truth, predicted) -> float:
    x, y = _pair(truth, predicted)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def srocc(truth, predicted) -> float:
    """Spearman correlation; tied scores get average ranks.

    Without ties this is 1 - 6 * sum(d^2) / (N (N^2 - 1)); with ties it is the
    Pearson correlation of the rank vectors.
    """
    x, y = _pair(truth, predicted)
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelation("all scores equal")
    n = x.size
    if np.unique(x).size == n and np.unique(y).size == n:
        d = rx - ry
        return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))
    return plcc(rx, ry)


def try_metric(fn, truth, predicted):
    """``fn(truth, predicted)`` or None when the correlation is undefined."""
    try:
        return fn(truth, predicted)
    except UndefinedCorrelation:
        return None


@dataclass
class FineTuneConfig:
    P: int = 15
    alpha_f: float = 1e-5
    adam: AdamConfig = field(default_factory=AdamConfig)


def fine_tune(prior: ParamSet, task: TargetTask, P: int = 15, alpha_f: float = 1e-5,
              adam: AdamConfig | None = None, spec: M.BackboneSpec | None = None,
              return_losses=False):
    """P full-batch Adam steps on the training images, from zeroed moments."""
    if P < 1:
        raise EvalError("P must be at least 1")
    if not alpha_f > 0:
        raise EvalError("fine-tuning rate must be positive")
    if spec is not None and prior.fingerprint != spec.fingerprint():
        raise M.IncompatibleParams("prior was built for a different backbone")
    task.validate()
    adam = adam or AdamConfig()
    train = task.train

    def grad_fn(params, step):
        return M.loss_and_grads(params, train.images, train.scores)

    theta, _, losses = adam_descent(prior, grad_fn, P, alpha_f, **adam.kwargs())
    if theta.names() != prior.names() or theta.num_parameters != prior.num_parameters:
        raise AssertionError("fine-tuning changed the parameter layout")
    if return_losses:
        final, _ = grad_fn(theta, P)
        return theta, losses + [final]
    return theta


def patch_grid(size, patch):
    """Non-overlapping patch offsets covering ``size``; the last one is flush with the edge."""
    if patch > size:
        raise EvalError(f"patch {patch} larger than image extent {size}")
    starts = list(range(0, size - patch + 1, patch))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def predict_images(theta: ParamSet, images) -> np.ndarray:
    """Score (N, H, W, C) images, averaging over a patch grid when larger than the input."""
    images = np.asarray(images, dtype=np.float32)
    ph, pw = theta.spec.input_size
    h, w = images.shape[1:3]
    if (h, w) == (ph, pw):
        return M.predict(theta, images)
    ys, xs = patch_grid(h, ph), patch_grid(w, pw)
    total = np.zeros(len(images))
    for y in ys:
        for x in xs:
            total += M.predict(theta, np.ascontiguousarray(images[:, y:y + ph, x:x + pw]))
    return total / (len(ys) * len(xs))


@dataclass
class EvalReport:
    plcc: float | None
    srocc: float | None
    n: int
    predictions: np.ndarray
    truth: np.ndarray
    loss: float

    @property
    def undefined(self):
        return self.plcc is None or self.srocc is None


def evaluate_model(theta_te: ParamSet, task: TargetTask | Samples) -> EvalReport:
    test = task.test if isinstance(task, TargetTask) else task
    if len(test) < 2:
        raise EvalError("evaluation needs at least two test images")
    pred = predict_images(theta_te, test.images)
    truth = test.scores.astype(np.float64)
    return EvalReport(try_metric(plcc, truth, pred), try_metric(srocc, truth, pred), len(test),
                      pred, truth, M.loss(pred, truth))


def saliency_map(theta: ParamSet, image, forward=None) -> np.ndarray:
    """|d score / d pixel| (max over channels), scaled so the largest value is 1.

    ``forward(params, x_tensor) -> scalar tensor`` overrides the model.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise EvalError("saliency takes a single image")
        img = img[0]
    x = Tensor(img[None].astype(theta.dtype), requires_grad=True)
    fwd = forward or (lambda p, t: ad.sum_all(M.forward(p, t)))
    graph = ad.Graph(lambda t: fwd(theta, t), name="saliency")
    out = graph.forward(x)
    graph.backward(out)
    grad = np.zeros_like(x.data) if x.grad is None else x.grad
    mag = np.abs(grad[0]).max(axis=-1).astype(np.float64)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def write_pgm(path, values):
    """8-bit binary P5 of a 2-D array in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise EvalError(f"PGM needs a 2-D map, got {arr.shape}")
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
