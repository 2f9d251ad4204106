"""The quality regressor: a small strided conv stack, global average pooling
and two fully-connected layers ending in one linear output unit."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from miqa import autodiff as ad
from miqa.autodiff import Tensor


class ModelError(ValueError):
    pass


class IncompatibleParams(ModelError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Conv layers are ``(out_channels, kernel, stride)``; padding is ``kernel // 2``."""

    conv_layers: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (64, 3, 2))
    hidden: int = 64
    input_size: tuple = (32, 32)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in layer)
                                                      for layer in self.conv_layers))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    def validate(self):
        if not self.conv_layers:
            raise ModelError("backbone needs at least one conv layer")
        if self.hidden < 1 or self.in_channels < 1:
            raise ModelError("hidden width and input channels must be positive")
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ModelError(f"invalid input size {self.input_size}")
        for i, (out_c, k, s) in enumerate(self.conv_layers):
            if out_c < 1 or k < 1 or s < 1:
                raise ModelError(f"conv layer {i}: channels, kernel and stride must be positive")
            if k > h or k > w:
                raise ModelError(f"conv layer {i}: kernel {k} larger than its {h}x{w} input")
            pad = k // 2
            h = ad.conv_output_size(h, k, s, pad)
            w = ad.conv_output_size(w, k, s, pad)
        return self

    def to_dict(self):
        return {
            "conv_layers": [list(layer) for layer in self.conv_layers],
            "hidden": self.hidden,
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
        }

    def fingerprint(self) -> bytes:
        """32-byte SHA-256 of a canonical description of the architecture."""
        convs = ";".join(f"{c},{k},{s}" for c, k, s in self.conv_layers)
        text = (f"conv={convs}|hidden={self.hidden}|input={self.input_size[0]}x"
                f"{self.input_size[1]}|channels={self.in_channels}")
        return hashlib.sha256(text.encode("utf-8")).digest()

    def param_shapes(self):
        shapes = []
        c_in = self.in_channels
        for i, (c_out, k, _) in enumerate(self.conv_layers):
            shapes.append((f"conv{i}.weight", (k, k, c_in, c_out)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        shapes += [
            ("fc1.weight", (c_in, self.hidden)),
            ("fc1.bias", (self.hidden,)),
            ("fc2.weight", (self.hidden, 1)),
            ("fc2.bias", (1,)),
        ]
        return shapes


DEFAULT_SPEC = BackboneSpec()


class ParamSet:
    """Ordered, named parameter arrays tied to an architecture fingerprint.

    Treated as a value: every training routine returns a new ParamSet.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable, fingerprint: bytes = b"",
                 spec: BackboneSpec | None = None):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        self._arrays = {}
        for name, arr in items:
            if name in self._arrays:
                raise ModelError(f"duplicate parameter name {name!r}")
            self._arrays[name] = np.asarray(arr)
        self.fingerprint = bytes(fingerprint)
        self.spec = spec

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.num_parameters} values)"

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    @property
    def shapes(self):
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def num_parameters(self):
        return int(sum(v.size for v in self._arrays.values()))

    @property
    def dtype(self):
        return next(iter(self._arrays.values())).dtype

    def replace(self, arrays: Mapping[str, np.ndarray]) -> ParamSet:
        return ParamSet([(k, arrays[k]) for k in self._arrays], self.fingerprint, self.spec)

    def copy(self) -> ParamSet:
        return self.replace({k: v.copy() for k, v in self._arrays.items()})

    def astype(self, dtype) -> ParamSet:
        return self.replace({k: v.astype(dtype) for k, v in self._arrays.items()})

    def first_mismatch(self, other: ParamSet):
        """Describe the first incompatibility with ``other``, or None."""
        if self.fingerprint != other.fingerprint:
            return "architecture fingerprint"
        mine, theirs = self.names(), other.names()
        for a, b in zip(mine, theirs):
            if a != b:
                return a
            if self[a].shape != other[b].shape:
                return a
        if len(mine) != len(theirs):
            longer = mine if len(mine) > len(theirs) else theirs
            return longer[min(len(mine), len(theirs))]
        return None

    def compatible(self, other: ParamSet) -> bool:
        return self.first_mismatch(other) is None

    def require_compatible(self, other: ParamSet):
        bad = self.first_mismatch(other)
        if bad is not None:
            raise IncompatibleParams(f"parameter sets differ at {bad!r}")

    def checksum(self) -> str:
        h = hashlib.sha256(self.fingerprint)
        for name, arr in self._arrays.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equal(self, other: ParamSet) -> bool:
        """Bitwise equality of names, shapes and values."""
        return self.names() == other.names() and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.values(), other.values())
        )

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self._arrays.items()}


def build_model(spec: BackboneSpec = DEFAULT_SPEC, seed: int = 0, dtype=np.float32) -> ParamSet:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    Conv filters are (KH, KW, C_in, C_out); fully-connected weights are (in, out).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / math.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamSet(arrays, spec.fingerprint(), spec)


def _spec_of(params: ParamSet) -> BackboneSpec:
    if params.spec is None:
        raise ModelError("parameter set carries no backbone spec")
    return params.spec


def forward(params: ParamSet, images, tensors=None) -> Tensor:
    """Score a batch of channels-last (N, H, W, C) images; returns an (N,) tensor.

    ``tensors`` may supply the parameter tensors (e.g. leaves requiring grad);
    otherwise constant tensors are made from ``params``.
    """
    spec = _spec_of(params)
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[3] != spec.in_channels or tuple(x.shape[1:3]) != spec.input_size:
        raise ModelError(
            f"image batch {x.shape} does not match backbone input "
            f"({spec.input_size[0]}, {spec.input_size[1]}, {spec.in_channels})"
        )
    t = tensors if tensors is not None else params.tensors(requires_grad=False)
    for i, (_, k, s) in enumerate(spec.conv_layers):
        x = ad.conv2d(x, t[f"conv{i}.weight"], stride=s, padding=k // 2)
        x = ad.relu(ad.bias_add(x, t[f"conv{i}.bias"]))
    x = ad.global_avg_pool(x)
    x = ad.relu(ad.bias_add(ad.matmul(x, t["fc1.weight"]), t["fc1.bias"]))
    x = ad.bias_add(ad.matmul(x, t["fc2.weight"]), t["fc2.bias"])
    return ad.reshape(x, (x.shape[0],))


def predict(params: ParamSet, images) -> np.ndarray:
    """Quality scores for a batch (or a single HWC image) as a float array."""
    return forward(params, images).data.copy()


def loss(predictions, targets):
    """Mean squared error (1/M) * sum((yhat - y)^2); differentiable when given tensors."""
    if isinstance(predictions, Tensor) or isinstance(targets, Tensor):
        return ad.mse(predictions, targets)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ModelError("loss of an empty batch")
    if p.shape != y.shape:
        raise ModelError(f"predictions {p.shape} and targets {y.shape} differ in length")
    return float(np.mean((p - y) ** 2))


def loss_and_grads(params: ParamSet, images, targets):
    """Full-batch loss and its gradient w.r.t. every parameter.

    Each call records and differentiates a fresh graph, so gradients are first
    order with respect to ``params`` only.
    """
    tensors = params.tensors(requires_grad=True)
    graph = ad.Graph(lambda x: ad.mse(forward(params, x, tensors),
                                      Tensor(np.asarray(targets, dtype=params.dtype))),
                     name="loss")
    out = graph.forward(Tensor(images, dtype=params.dtype))
    graph.backward(out)
    grads = {}
    for name, t in tensors.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(out.data), grads
