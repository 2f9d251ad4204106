"""Synthetic distortion-specific quality tasks.

Base images are procedural (gradients, smoothed noise textures, shapes).
Each distortion family maps an image and a severity level to a distorted
copy; stochastic families reuse one random field across levels so the error
against the reference grows monotonically with severity. Scores come from
the full-reference surrogate ``exp(-MSE / tau)``.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

DEFAULT_TAU = 0.02


class TaskGenError(ValueError):
    pass


def _stable_hash(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode("utf-8"))


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([_stable_hash(*parts[1:]), int(parts[0]) & 0xFFFFFFFF])


@dataclass(frozen=True, eq=False)
class BaseImage:
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    generator: str
    seed: int
    index: int = 0

    @property
    def image_id(self):
        return f"base{self.index:03d}"


# ---------------------------------------------------------------- base images


def _smooth_noise(rng, h, w, c, sigma):
    field_ = rng.standard_normal((h, w, c))
    field_ = ndimage.gaussian_filter(field_, sigma=(sigma, sigma, 0), mode="wrap")
    field_ -= field_.min()
    span = field_.max()
    return field_ / span if span > 0 else np.full_like(field_, 0.5)


def _gradient(rng, h, w, c):
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, w - 1, 1)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    lo = rng.uniform(0.0, 0.4, size=c)
    hi = rng.uniform(0.6, 1.0, size=c)
    return lo + (hi - lo) * ramp[..., None]


def _shapes(rng, h, w, c):
    img = np.empty((h, w, c))
    img[:] = rng.uniform(0.2, 0.8, size=c)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=c)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.1, 0.35) * min(h, w)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.5))
        img[mask] = color
    return img


GENERATORS = ("gradient", "texture", "shapes", "mixed")


def _make_base(kind, rng, h, w, c):
    if kind == "gradient":
        img = _gradient(rng, h, w, c)
        img = 0.8 * img + 0.2 * _smooth_noise(rng, h, w, c, sigma=1.0)
    elif kind == "texture":
        img = _smooth_noise(rng, h, w, c, sigma=rng.uniform(0.7, 3.0))
    elif kind == "shapes":
        img = _shapes(rng, h, w, c)
    else:
        img = (0.4 * _gradient(rng, h, w, c) + 0.3 * _shapes(rng, h, w, c)
               + 0.3 * _smooth_noise(rng, h, w, c, sigma=rng.uniform(0.7, 2.0)))
    return np.clip(img, 0.0, 1.0)


def gen_base_images(count: int, resolution=(32, 32), seed: int = 0, channels: int = 3):
    """``count`` procedural images cycling through the four generators."""
    if count < 1:
        raise TaskGenError(f"image count must be positive, got {count}")
    h, w = resolution
    out = []
    for i in range(count):
        kind = GENERATORS[i % len(GENERATORS)]
        rng = _rng(seed, "base", i)
        out.append(BaseImage(_make_base(kind, rng, h, w, channels), kind, seed, i))
    return out


# ---------------------------------------------------------------- distortions


@dataclass(frozen=True)
class DistortionFamily:
    name: str
    levels: tuple  # one parameter per level, mildest first

    def __post_init__(self):
        if self.name not in _OPERATORS:
            raise TaskGenError(f"unknown distortion family {self.name!r}")
        if len(self.levels) < 3:
            raise TaskGenError(f"{self.name}: need at least 3 severity levels")
        increasing = _OPERATORS[self.name][1]
        vals = [float(np.ravel(lv)[0]) for lv in self.levels]
        ordered = all((b > a) if increasing else (b < a) for a, b in zip(vals, vals[1:]))
        if not ordered:
            raise TaskGenError(f"{self.name}: severity grid must be strictly ordered")

    @property
    def num_levels(self):
        return len(self.levels)


def _gaussian_noise(img, sigma, rng):
    return img + sigma * rng.standard_normal(img.shape)


def _gaussian_blur(img, sigma, rng):
    # exact Gaussian on the symmetric extension: frequency response exp(-(sigma*w)^2/2)
    if sigma == 0:
        return img.copy()
    h, w = img.shape[:2]
    wy = np.pi * np.arange(h) / h
    wx = np.pi * np.arange(w) / w
    resp = np.exp(-0.5 * sigma ** 2 * (wy[:, None] ** 2 + wx[None, :] ** 2))
    coef = sfft.dctn(img, type=2, axes=(0, 1), norm="ortho")
    return sfft.idctn(coef * resp[..., None], type=2, axes=(0, 1), norm="ortho")


def _brighten(img, offset, rng):
    return img + offset


def _darken(img, offset, rng):
    return img - offset


def _contrast(img, factor, rng):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return mean + factor * (img - mean)


def _quantize(img, steps, rng):
    steps = int(steps)
    return np.round(img * steps) / steps


def _impulse(img, fraction, rng):
    u = rng.random(img.shape[:2])
    salt = rng.random(img.shape[:2]) < 0.5
    out = img.copy()
    hit = u < fraction
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _jitter(img, fraction, rng):
    h, w = img.shape[:2]
    u = rng.random((h, w))
    dy = rng.integers(-2, 3, size=(h, w))
    dx = rng.integers(-2, 3, size=(h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    sy = np.clip(yy + dy, 0, h - 1)
    sx = np.clip(xx + dx, 0, w - 1)
    out = img.copy()
    hit = u < fraction
    out[hit] = img[sy[hit], sx[hit]]
    return out


# name -> (operator, parameter increases with severity)
_OPERATORS = {
    "gaussian-noise": (_gaussian_noise, True),
    "gaussian-blur": (_gaussian_blur, True),
    "brighten": (_brighten, True),
    "darken": (_darken, True),
    "contrast-change": (_contrast, False),
    "quantization": (_quantize, False),
    "impulse-noise": (_impulse, True),
    "jitter": (_jitter, True),
}

FAMILY_NAMES = tuple(_OPERATORS)

DEFAULT_LEVELS = {
    "gaussian-noise": (0.02, 0.05, 0.1, 0.16, 0.25),
    "gaussian-blur": (0.5, 0.9, 1.4, 2.2, 3.5),
    "brighten": (0.03, 0.07, 0.12, 0.18, 0.28),
    "darken": (0.03, 0.07, 0.12, 0.18, 0.28),
    "contrast-change": (0.85, 0.7, 0.5, 0.3, 0.1),
    "quantization": (32, 16, 8, 4, 2),
    "impulse-noise": (0.005, 0.015, 0.04, 0.08, 0.16),
    "jitter": (0.05, 0.15, 0.3, 0.55, 0.9),
}


def default_families(names: Sequence[str] | None = None):
    names = FAMILY_NAMES if names is None else names
    return [DistortionFamily(n, DEFAULT_LEVELS[n]) for n in names]


def get_family(name: str) -> DistortionFamily:
    if name not in DEFAULT_LEVELS:
        raise TaskGenError(f"unknown distortion family {name!r}")
    return DistortionFamily(name, DEFAULT_LEVELS[name])


def apply_distortion(image, family: DistortionFamily | str, level: int, seed: int | None = None):
    """Distorted copy of ``image`` (BaseImage or HxWxC array), clamped to [0, 1].

    Stochastic families draw one random field per (image seed, image index,
    family), shared by all levels.
    """
    if isinstance(family, str):
        family = get_family(family)
    if not 0 <= level < family.num_levels:
        raise TaskGenError(f"{family.name}: level {level} outside 0..{family.num_levels - 1}")
    if isinstance(image, BaseImage):
        pixels = image.pixels
        key = (image.seed if seed is None else seed, image.index)
    else:
        pixels = np.asarray(image, dtype=np.float64)
        key = (0 if seed is None else seed, 0)
    op = _OPERATORS[family.name][0]
    rng = _rng(key[0], "distort", key[1], family.name)
    return np.clip(op(pixels, family.levels[level], rng), 0.0, 1.0)


def distortion_parameter(name, value):
    """A one-level family wrapping an arbitrary parameter, for direct operator use."""
    op = _OPERATORS[name][0]
    return lambda img, rng=None: np.clip(op(np.asarray(img, dtype=np.float64), value,
                                            rng or np.random.default_rng(0)), 0.0, 1.0)


def pseudo_mos(reference, distorted, tau: float = DEFAULT_TAU) -> float:
    """exp(-MSE / tau): 1 for identical images, strictly decreasing in MSE."""
    ref = np.asarray(reference, dtype=np.float64)
    dis = np.asarray(distorted, dtype=np.float64)
    if ref.shape != dis.shape:
        raise TaskGenError(f"shape mismatch: {ref.shape} vs {dis.shape}")
    if not tau > 0:
        raise TaskGenError("tau must be positive")
    mse = float(np.mean((ref - dis) ** 2))
    return math.exp(-mse / tau)


def normalize_scores(scores, score_range):
    lo, hi = score_range
    if not hi > lo:
        raise TaskGenError(f"invalid score range {score_range}")
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < lo) or np.any(s > hi):
        raise TaskGenError(f"score outside declared range [{lo}, {hi}]")
    return (s - lo) / (hi - lo)


def crop_patch(pixels, size, rng):
    """Uniformly placed ``size`` crop of an (H, W, ...) array."""
    h, w = pixels.shape[:2]
    ph, pw = size
    if ph > h or pw > w:
        raise TaskGenError(f"patch {ph}x{pw} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    return pixels[top: top + ph, left: left + pw]


# ---------------------------------------------------------------- tasks


@dataclass(eq=False)
class Samples:
    """Images (N, H, W, C float32) with normalized scores and string ids."""

    images: np.ndarray
    scores: np.ndarray
    ids: tuple

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.scores = np.asarray(self.scores, dtype=np.float32).reshape(-1)
        self.ids = tuple(self.ids)
        if not (len(self.images) == len(self.scores) == len(self.ids)):
            raise TaskGenError("images, scores and ids differ in length")

    def __len__(self):
        return len(self.scores)

    def pairs(self):
        return list(zip(self.images, self.scores))

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.scores for p in parts]),
                   tuple(i for p in parts for i in p.ids))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.images[idx], self.scores[idx], tuple(self.ids[i] for i in idx))


class TaskError(ValueError):
    pass


@dataclass(eq=False)
class DistortionTask:
    task_id: str
    support: Samples
    query: Samples

    def validate(self):
        if len(self.support) == 0 or len(self.query) == 0:
            raise TaskError(f"task {self.task_id!r}: support and query must be non-empty")
        if set(self.support.ids) & set(self.query.ids):
            raise TaskError(f"task {self.task_id!r}: support and query share images")
        for part in (self.support, self.query):
            if np.any(part.scores < 0) or np.any(part.scores > 1) or not np.all(np.isfinite(part.scores)):
                raise TaskError(f"task {self.task_id!r}: scores must lie in [0, 1]")
        return self


@dataclass(eq=False)
class MetaTrainingSet:
    tasks: list

    def validate(self):
        if len(self.tasks) < 2:
            raise TaskError("meta-training needs at least two tasks")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise TaskError("task ids must be unique")
        for t in self.tasks:
            t.validate()
        return self

    def __len__(self):
        return len(self.tasks)

    def pooled(self) -> Samples:
        return Samples.concat(s for t in self.tasks for s in (t.support, t.query))


@dataclass(eq=False)
class TargetTask:
    family: str
    train: Samples
    test: Samples
    score_range: tuple = (0.0, 1.0)

    def validate(self):
        if len(self.train) == 0:
            raise TaskError("target task has no training images")
        if set(self.train.ids) & set(self.test.ids):
            raise TaskError("target train and test share images")
        return self


def as_model_image(pixels):
    return np.ascontiguousarray(pixels, dtype=np.float32)


def scored_images(family: DistortionFamily, bases, tau=DEFAULT_TAU) -> Samples:
    """Every (base, level) pair of a family with its pseudo-MOS."""
    images, scores, ids = [], [], []
    for b in bases:
        for lv in range(family.num_levels):
            dis = apply_distortion(b, family, lv)
            images.append(as_model_image(dis))
            scores.append(pseudo_mos(b.pixels, dis, tau))
            ids.append(f"{family.name}/{b.image_id}_l{lv}")
    return Samples(np.stack(images), np.asarray(scores), ids)


def _split_bases(bases, fraction, rng):
    if not 0 < fraction < 1:
        raise TaskGenError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(bases)
    n_first = int(round(fraction * n))
    if n_first < 1 or n_first > n - 1:
        raise TaskGenError(f"{n} base images cannot be split {fraction:g}/{1 - fraction:g} "
                           "into two non-empty sets")
    order = rng.permutation(n)
    return [bases[i] for i in sorted(order[:n_first])], [bases[i] for i in sorted(order[n_first:])]


def build_task(family: DistortionFamily, bases, support_fraction: float, rng,
               tau: float = DEFAULT_TAU) -> DistortionTask:
    """Split at the base-image level so no content appears on both sides."""
    sup, qry = _split_bases(list(bases), support_fraction, rng)
    return DistortionTask(family.name, scored_images(family, sup, tau),
                          scored_images(family, qry, tau)).validate()


def build_target(family: DistortionFamily, bases, train_fraction: float, rng,
                 tau: float = DEFAULT_TAU) -> TargetTask:
    tr, te = _split_bases(list(bases), train_fraction, rng)
    return TargetTask(family.name, scored_images(family, tr, tau),
                      scored_images(family, te, tau)).validate()


def lodo_split(families, held_out: str, bases, seed: int = 0, support_fraction: float = 0.5,
               train_fraction: float = 0.5, tau: float = DEFAULT_TAU):
    """Meta-training tasks from every family but ``held_out``, plus its target task."""
    families = list(families)
    names = [f.name for f in families]
    if len(families) < 3:
        raise TaskGenError("leave-one-out needs at least three families")
    if held_out not in names:
        raise TaskGenError(f"held-out family {held_out!r} not among {names}")
    tasks = []
    for f in families:
        if f.name == held_out:
            continue
        tasks.append(build_task(f, bases, support_fraction, _rng(seed, "split", f.name), tau))
    target_family = families[names.index(held_out)]
    target = build_target(target_family, bases, train_fraction,
                          _rng(seed, "target", held_out), tau)
    return MetaTrainingSet(tasks).validate(), target


def random_split(samples: Samples, train_fraction: float = 0.8, seed: int = 0,
                 family: str = "all", score_range=(0.0, 1.0)) -> TargetTask:
    """Random image-level train/test split of a pool of scored images."""
    n = len(samples)
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise TaskGenError(f"cannot split {n} images at fraction {train_fraction}")
    order = _rng(seed, "random-split", family).permutation(n)
    return TargetTask(family, samples.subset(np.sort(order[:n_train])),
                      samples.subset(np.sort(order[n_train:])), tuple(score_range)).validate()


# ---------------------------------------------------------------- export / import


def write_ppm(path, pixels):
    """Binary P6, 8-bit; ``pixels`` is (H, W, 3) in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise TaskGenError(f"PPM needs (H, W, 3) pixels, got {arr.shape}")
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TaskGenError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pnm(path):
    """Read a binary P5/P6 file into (H, W, C) floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise TaskGenError(f"{path}: unsupported image format {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise TaskGenError(f"{path}: only 8-bit images are supported")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * c, offset=pos)
    return data.reshape(h, w, c).astype(np.float64) / 255.0


MANIFEST_HEADER = ("image", "family", "severity", "score")


def export_tasks(out_dir, families, bases, tau: float = DEFAULT_TAU):
    """Write one folder of PPMs per family plus ``scores.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for fam in families:
        (out / fam.name).mkdir(exist_ok=True)
        for b in bases:
            for lv in range(fam.num_levels):
                dis = apply_distortion(b, fam, lv)
                rel = f"{fam.name}/{b.image_id}_l{lv}.ppm"
                write_ppm(out / rel, dis)
                rows.append((rel, fam.name, str(lv), f"{pseudo_mos(b.pixels, dis, tau):.9f}"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    writer.writerows(rows)
    (out / "scores.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    return out / "scores.csv"


@dataclass
class ManifestRow:
    image: str
    family: str
    severity: int
    score: float


def read_manifest(path, score_range=(0.0, 1.0)):
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise TaskGenError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise TaskGenError(f"{path}:{lineno}: expected 4 fields")
            rows.append(ManifestRow(rec[0], rec[1], int(rec[2]), float(rec[3])))
    scores = normalize_scores([r.score for r in rows], score_range) if rows else []
    for r, s in zip(rows, scores):
        r.score = float(s)
    return rows


def load_task_dir(root, score_range=(0.0, 1.0), source: str | None = None):
    """Load an exported (or real) task directory as ``{task_id: Samples}``.

    Scores are normalized from ``score_range``. With ``source`` set, task ids
    become ``source/family``.
    """
    root = Path(root)
    rows = read_manifest(root / "scores.csv", score_range)
    groups: dict = {}
    for r in rows:
        pixels = read_pnm(root / r.image)
        if pixels.shape[2] == 1:
            pixels = np.repeat(pixels, 3, axis=2)
        key = f"{source}/{r.family}" if source else r.family
        groups.setdefault(key, []).append((as_model_image(pixels), r.score, r.image))
    return {k: Samples(np.stack([g[0] for g in v]), [g[1] for g in v], [g[2] for g in v])
            for k, v in groups.items()}


def split_loaded(samples: Samples, task_id: str, support_fraction: float, seed: int = 0):
    """Support/query split of loaded images, grouping ids that share a base prefix."""
    groups: dict = {}
    for i, image_id in enumerate(samples.ids):
        stem = Path(image_id).stem
        groups.setdefault(stem.rsplit("_l", 1)[0], []).append(i)
    keys = sorted(groups)
    sup_keys, qry_keys = _split_bases(keys, support_fraction, _rng(seed, "loaded", task_id))
    sup = [i for k in sup_keys for i in groups[k]]
    qry = [i for k in qry_keys for i in groups[k]]
    return DistortionTask(task_id, samples.subset(sup), samples.subset(qry)).validate()
