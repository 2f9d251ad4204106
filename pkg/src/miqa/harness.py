"""Experiment orchestration: configuration, the evaluation protocols,
checkpoint persistence and results tables."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from miqa import evaluate as E
from miqa import metalearn as ML
from miqa import model as M
from miqa import taskgen as tg
from miqa.model import BackboneSpec, ParamSet

log = logging.getLogger(__name__)

PROTOCOLS = ("lodo", "random-split", "ablation", "sweep")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class TaskConfig:
    families: tuple = tg.FAMILY_NAMES
    bases: int = 8
    resolution: tuple = (32, 32)
    tau: float = tg.DEFAULT_TAU
    support_fraction: float = 0.5
    train_fraction: float = 0.5
    levels: dict = field(default_factory=dict)  # per-family severity overrides
    data_dir: str | None = None  # exported or real task directory instead of generated images
    score_range: tuple = (0.0, 1.0)

    def family_objects(self):
        return [tg.DistortionFamily(n, tuple(self.levels.get(n, tg.DEFAULT_LEVELS[n])))
                for n in self.families]


@dataclass
class ExperimentConfig:
    """Everything that determines a run. Defaults are the published hyperparameters."""

    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    meta: ML.MetaConfig = field(default_factory=ML.MetaConfig)
    finetune: E.FineTuneConfig = field(default_factory=E.FineTuneConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    protocol: str = "lodo"
    seeds: tuple = (0, 1, 2, 3, 4)
    out: str = "results"
    held_out: tuple | None = None  # None: every family in turn
    baseline_batch: int = 16
    sweep_k: tuple = (2, 3, 5, 7)
    sweep_S: tuple = (1, 3, 6, 9)
    random_split_images: int = 40
    workers: int = 1
    record_time: bool = False
    cache_dir: str | None = None

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(self.tasks.families) < 3:
            raise ConfigError("need at least three distortion families")
        unknown = [f for f in (self.held_out or ()) if f not in self.tasks.families]
        if unknown:
            raise ConfigError(f"held-out families {unknown} are not configured")
        if self.baseline_batch < 1 or self.workers < 1:
            raise ConfigError("baseline batch size and workers must be positive")
        if self.finetune.P < 1 or not self.finetune.alpha_f > 0:
            raise ConfigError("fine-tuning needs P >= 1 and a positive rate")
        if not (self.meta.alpha > 0 and self.meta.beta > 0):
            raise ConfigError("learning rates must be positive")
        if self.meta.epochs < 1 or self.meta.S < 1:
            raise ConfigError("epochs and S must be at least 1")
        self.backbone.validate()
        self.tasks.family_objects()
        return self

    @property
    def held_out_families(self):
        return tuple(self.held_out) if self.held_out else tuple(self.tasks.families)

    def to_dict(self):
        d = {
            "backbone": self.backbone.to_dict(),
            "meta": asdict(self.meta),
            "finetune": asdict(self.finetune),
            "tasks": asdict(self.tasks),
        }
        for key in ("protocol", "seeds", "held_out", "baseline_batch", "sweep_k", "sweep_S",
                    "random_split_images"):
            d[key] = getattr(self, key)
        return d

    def digest(self) -> bytes:
        """32-byte hash of every field that affects results (not out/workers/timing)."""
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode("utf-8")).digest()


def desk_config(**overrides) -> ExperimentConfig:
    """Desk-scale preset for the synthetic 8-family study.

    The published rates barely move a 65k-parameter network in 30 epochs over
    a few dozen images, so alpha and alpha_f are raised tenfold (keeping their
    ratio) and the outer step takes the full mean of the adapted parameters.
    """
    cfg = ExperimentConfig()
    cfg.meta = replace(cfg.meta, alpha=1e-3, beta=1.0, epochs=30)
    cfg.finetune = replace(cfg.finetune, alpha_f=1e-4)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _split_list(text, convert=str):
    return tuple(convert(p.strip()) for p in text.split(",") if p.strip())


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_layers(text):
    layers = []
    for part in _split_list(text):
        bits = part.lower().split("x")
        if len(bits) != 3:
            raise ConfigError(f"conv layer {part!r} must be channels x kernel x stride")
        layers.append(tuple(int(b) for b in bits))
    return tuple(layers)


def _parse_size(text):
    bits = text.lower().replace(",", "x").split("x")
    if len(bits) != 2:
        raise ConfigError(f"size {text!r} must look like 32x32")
    return (int(bits[0]), int(bits[1]))


_SECTIONS = {
    "experiment": {
        "protocol": str, "seeds": lambda t: _split_list(t, int), "out": str,
        "held_out": _split_list, "workers": int, "record_time": _parse_bool,
        "baseline_batch": int, "sweep_k": lambda t: _split_list(t, int),
        "sweep_S": lambda t: _split_list(t, int), "random_split_images": int,
        "cache_dir": str,
    },
    "backbone": {"conv_layers": _parse_layers, "hidden": int, "input_size": _parse_size,
                 "in_channels": int},
    "meta": {"k": int, "S": int, "query_steps": int, "alpha": float, "beta": float,
             "epochs": int, "decay_factor": float, "decay_every": int},
    "adam": {"mu1": float, "mu2": float, "epsilon": float, "weight_decay": float,
             "bias_correction": _parse_bool},
    "finetune": {"P": int, "alpha_f": float},
    "tasks": {"families": _split_list, "bases": int, "resolution": _parse_size, "tau": float,
              "support_fraction": float, "train_fraction": float, "data_dir": str,
              "score_range": lambda t: _split_list(t, float)},
}


def config_from_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse an INI document; absent keys keep the values of ``base`` (defaults)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base if base is not None else ExperimentConfig()
    backbone = cfg.backbone.to_dict()
    meta, adam = asdict(cfg.meta), asdict(cfg.meta.adam)
    finetune = {"P": cfg.finetune.P, "alpha_f": cfg.finetune.alpha_f}
    tasks = asdict(cfg.tasks)
    experiment = {}
    targets = {"experiment": experiment, "backbone": backbone, "meta": meta, "adam": adam,
               "finetune": finetune, "tasks": tasks}
    for section in parser.sections():
        if section == "levels":
            for name, value in parser.items(section):
                tasks["levels"][name] = _split_list(value, float)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            conv = _SECTIONS[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                targets[section][key] = conv(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    meta.pop("adam")
    adam_cfg = ML.AdamConfig(**adam)
    out = replace(
        cfg,
        backbone=BackboneSpec(tuple(backbone["conv_layers"]), backbone["hidden"],
                              tuple(backbone["input_size"]), backbone["in_channels"]),
        meta=ML.MetaConfig(**meta, adam=adam_cfg),
        finetune=E.FineTuneConfig(finetune["P"], finetune["alpha_f"], adam_cfg),
        tasks=TaskConfig(**{**tasks, "families": tuple(tasks["families"]),
                            "resolution": tuple(tasks["resolution"]),
                            "score_range": tuple(tasks["score_range"])}),
        **experiment,
    )
    return out.validate()


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if path is None:
        return (base or ExperimentConfig()).validate()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_text(text, base)


def config_to_text(cfg: ExperimentConfig) -> str:
    """INI rendering that ``config_from_text`` reads back to an equal config."""
    fmt = lambda seq: ", ".join(str(v) for v in seq)
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    p["experiment"] = {
        "protocol": cfg.protocol, "seeds": fmt(cfg.seeds), "out": cfg.out,
        "workers": str(cfg.workers), "record_time": str(cfg.record_time).lower(),
        "baseline_batch": str(cfg.baseline_batch), "sweep_k": fmt(cfg.sweep_k),
        "sweep_S": fmt(cfg.sweep_S), "random_split_images": str(cfg.random_split_images),
    }
    if cfg.held_out:
        p["experiment"]["held_out"] = fmt(cfg.held_out)
    if cfg.cache_dir:
        p["experiment"]["cache_dir"] = cfg.cache_dir
    b = cfg.backbone
    p["backbone"] = {
        "conv_layers": fmt("x".join(str(v) for v in layer) for layer in b.conv_layers),
        "hidden": str(b.hidden), "input_size": "x".join(map(str, b.input_size)),
        "in_channels": str(b.in_channels),
    }
    m = cfg.meta
    p["meta"] = {"k": str(m.k), "S": str(m.S), "alpha": repr(m.alpha), "beta": repr(m.beta),
                 "epochs": str(m.epochs), "decay_factor": repr(m.decay_factor),
                 "decay_every": str(m.decay_every)}
    if m.query_steps is not None:
        p["meta"]["query_steps"] = str(m.query_steps)
    a = m.adam
    p["adam"] = {"mu1": repr(a.mu1), "mu2": repr(a.mu2), "epsilon": repr(a.epsilon),
                 "weight_decay": repr(a.weight_decay),
                 "bias_correction": str(a.bias_correction).lower()}
    p["finetune"] = {"P": str(cfg.finetune.P), "alpha_f": repr(cfg.finetune.alpha_f)}
    t = cfg.tasks
    p["tasks"] = {"families": fmt(t.families), "bases": str(t.bases),
                  "resolution": "x".join(map(str, t.resolution)), "tau": repr(t.tau),
                  "support_fraction": repr(t.support_fraction),
                  "train_fraction": repr(t.train_fraction), "score_range": fmt(t.score_range)}
    if t.data_dir:
        p["tasks"]["data_dir"] = t.data_dir
    if t.levels:
        p["levels"] = {k: fmt(v) for k, v in t.levels.items()}
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoints


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


MAGIC = b"MIQA"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamSet
    fingerprint: bytes
    config_hash: bytes = b"\0" * 32
    epoch: int = 0


def encode_checkpoint(params: ParamSet, config_hash: bytes = b"\0" * 32, epoch: int = 0) -> bytes:
    """Header, tensors (name, rank, u32 dims, f32 payload, all little-endian), then a
    trailer holding the 32-byte config hash and a u32 epoch."""
    if len(params.fingerprint) != 32:
        raise CheckpointError("parameter set has no 32-byte architecture fingerprint")
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION), params.fingerprint,
           struct.pack("<I", len(params))]
    for name, arr in params.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32, got {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(bytes(config_hash) + struct.pack("<I", epoch))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"corrupt checkpoint: truncated in {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, spec: BackboneSpec | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpoint("corrupt checkpoint: bad magic bytes")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
    fingerprint = r.take(32, "fingerprint")
    if spec is not None and fingerprint != spec.fingerprint():
        raise FingerprintMismatch("checkpoint was written for a different backbone")
    (count,) = r.unpack("<I", "tensor count")
    arrays = []
    for i in range(count):
        (n,) = r.unpack("<H", f"tensor {i} name")
        try:
            name = r.take(n, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpoint(f"corrupt checkpoint: tensor {i} name is not UTF-8") from None
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"{name} payload"), dtype="<f4")
        arrays.append((name, data.astype(np.float32).reshape(dims)))
    config_hash = r.take(32, "config hash")
    (epoch,) = r.unpack("<I", "epoch")
    if r.pos != len(buf):
        raise CorruptCheckpoint("corrupt checkpoint: trailing bytes")
    try:
        params = ParamSet(arrays, fingerprint, spec)
    except M.ModelError as exc:
        raise CorruptCheckpoint(f"corrupt checkpoint: {exc}") from None
    if spec is not None:
        expected = spec.param_shapes()
        if [(k, tuple(v.shape)) for k, v in params.items()] != expected:
            raise FingerprintMismatch("checkpoint tensors do not match the backbone layout")
    return Checkpoint(params, fingerprint, config_hash, epoch)


def save_checkpoint(params: ParamSet, path, config_hash: bytes = b"\0" * 32, epoch: int = 0):
    data = encode_checkpoint(params, config_hash, epoch)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None
    return path


def read_checkpoint(path, spec: BackboneSpec | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf, spec)


def load_checkpoint(path, spec: BackboneSpec = M.DEFAULT_SPEC) -> ParamSet:
    """Parameters from ``path``, verified against ``spec``."""
    return read_checkpoint(path, spec).params


# ---------------------------------------------------------------- results


RESULTS_HEADER = ("run_id", "seed", "protocol", "unit", "phase", "plcc", "srocc", "loss",
                  "wall_ms")


@dataclass
class Row:
    run_id: str
    seed: int | str
    protocol: str
    unit: str
    phase: str
    plcc: float | None
    srocc: float | None
    loss: float | None
    wall_ms: int = 0

    def sort_key(self):
        seed = (0, self.seed, "") if isinstance(self.seed, int) else (1, 0, str(self.seed))
        # aggregate units sort after the per-unit rows
        unit = (1, self.unit) if self.unit == "mean" else (0, self.unit)
        return (self.run_id, seed, unit, self.phase)

    def fields(self):
        num = lambda v: "undefined" if v is None else f"{v:.9f}"
        return [self.run_id, str(self.seed), self.protocol, self.unit, self.phase,
                num(self.plcc), num(self.srocc), num(self.loss), str(int(self.wall_ms))]


class ResultsTable:
    """Append-only rows; optionally mirrored line by line to a stream file."""

    def __init__(self, stream=None):
        self.rows: list[Row] = []
        self._stream = None
        if stream is not None:
            self._stream = open(stream, "w", encoding="utf-8", newline="")
            self._stream.write(",".join(RESULTS_HEADER) + "\n")
            self._stream.flush()

    def append(self, row: Row):
        self.rows.append(row)
        if self._stream is not None:
            self._stream.write(",".join(row.fields()) + "\n")
            self._stream.flush()

    def extend(self, rows):
        for r in rows:
            self.append(r)

    def close(self):
        if self._stream is not None:
            self._stream.close()
            self._stream = None

    def __len__(self):
        return len(self.rows)

    def sorted_rows(self):
        return sorted(self.rows, key=Row.sort_key)

    def select(self, **match):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def render_results(table: ResultsTable) -> str:
    if not len(table):
        raise ValueError("refusing to emit an empty results table")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for row in table.sorted_rows():
        writer.writerow(row.fields())
    return buf.getvalue()


def emit_results(table: ResultsTable, path):
    text = render_results(table)
    try:
        Path(path).write_bytes(text.encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return Path(path)


def read_results(path) -> list[dict]:
    """Parse an emitted CSV; numeric fields become floats, 'undefined' becomes None."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            for key in ("plcc", "srocc", "loss"):
                rec[key] = None if rec[key] == "undefined" else float(rec[key])
            rec["seed"] = int(rec["seed"]) if rec["seed"].isdigit() else rec["seed"]
            rec["wall_ms"] = int(rec["wall_ms"])
            rows.append(rec)
    return rows


def metric_mean(values):
    """Mean correlation where an undefined value counts as 0 (no rank information)."""
    values = list(values)
    if not values:
        return None
    return float(np.mean([0.0 if v is None else v for v in values]))


def aggregate(rows) -> list[Row]:
    """Per (run_id, seed, phase): the mean over units; then per (run_id, phase): the
    mean of those seed means, with seed 'all'."""
    groups: dict = {}
    for r in rows:
        if r.unit == "mean" or r.phase == "invalid":
            continue
        groups.setdefault((r.run_id, r.protocol, r.seed, r.phase), []).append(r)
    per_seed = []
    for (run_id, protocol, seed, phase), members in sorted(groups.items(),
                                                            key=lambda kv: str(kv[0])):
        members.sort(key=Row.sort_key)
        losses = [m.loss for m in members if m.loss is not None]
        per_seed.append(Row(run_id, seed, protocol, "mean", phase,
                            metric_mean(m.plcc for m in members),
                            metric_mean(m.srocc for m in members),
                            float(np.mean(losses)) if losses else None,
                            sum(m.wall_ms for m in members)))
    overall: dict = {}
    for r in per_seed:
        overall.setdefault((r.run_id, r.protocol, r.phase), []).append(r)
    out = list(per_seed)
    for (run_id, protocol, phase), members in overall.items():
        members.sort(key=Row.sort_key)
        losses = [m.loss for m in members if m.loss is not None]
        out.append(Row(run_id, "all", protocol, "mean", phase,
                       metric_mean(m.plcc for m in members),
                       metric_mean(m.srocc for m in members),
                       float(np.mean(losses)) if losses else None,
                       sum(m.wall_ms for m in members)))
    return out


# ---------------------------------------------------------------- task construction


def _bases(cfg: ExperimentConfig, seed: int):
    return tg.gen_base_images(cfg.tasks.bases, cfg.tasks.resolution, seed=seed,
                              channels=cfg.backbone.in_channels)


def _loaded_tasks(cfg: ExperimentConfig):
    return tg.load_task_dir(cfg.tasks.data_dir, cfg.tasks.score_range)


def lodo_tasks(cfg: ExperimentConfig, seed: int, held_out: str):
    """(MetaTrainingSet, TargetTask) for one held-out family."""
    if cfg.tasks.data_dir:
        loaded = _loaded_tasks(cfg)
        if held_out not in loaded:
            raise tg.TaskGenError(f"no images for held-out family {held_out!r}")
        tasks = [tg.split_loaded(s, name, cfg.tasks.support_fraction, seed)
                 for name, s in sorted(loaded.items()) if name != held_out]
        split = tg.split_loaded(loaded[held_out], held_out, cfg.tasks.train_fraction, seed)
        target = tg.TargetTask(held_out, split.support, split.query, cfg.tasks.score_range)
        return tg.MetaTrainingSet(tasks).validate(), target.validate()
    return tg.lodo_split(cfg.tasks.family_objects(), held_out, _bases(cfg, seed), seed,
                         cfg.tasks.support_fraction, cfg.tasks.train_fraction, cfg.tasks.tau)


def random_split_tasks(cfg: ExperimentConfig, seed: int):
    """Meta-training on every family; the target pool has one image per fresh base
    image, each with a random family and severity, split 80/20 at random."""
    families = cfg.tasks.family_objects()
    bases = _bases(cfg, seed)
    rng = np.random.default_rng([seed, 0x73706C74])
    tasks = [tg.build_task(f, bases, cfg.tasks.support_fraction, rng, cfg.tasks.tau)
             for f in families]
    pool = tg.gen_base_images(cfg.random_split_images, cfg.tasks.resolution,
                              seed=seed + 1_000_003, channels=cfg.backbone.in_channels)
    images, scores, ids = [], [], []
    for b in pool:
        fam = families[int(rng.integers(len(families)))]
        lv = int(rng.integers(fam.num_levels))
        dis = tg.apply_distortion(b, fam, lv)
        images.append(tg.as_model_image(dis))
        scores.append(tg.pseudo_mos(b.pixels, dis, cfg.tasks.tau))
        ids.append(f"{fam.name}/{b.image_id}_l{lv}")
    target = tg.random_split(tg.Samples(np.stack(images), scores, ids), 0.8, seed)
    return tg.MetaTrainingSet(tasks).validate(), target


def split_checksum(meta: tg.MetaTrainingSet, target: tg.TargetTask) -> str:
    h = hashlib.sha256()
    for part in [s for t in meta.tasks for s in (t.support, t.query)] + [target.train,
                                                                        target.test]:
        h.update("|".join(part.ids).encode("utf-8"))
        h.update(part.images.tobytes())
        h.update(part.scores.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- single runs


@dataclass
class Job:
    protocol: str
    seed: int
    unit: str
    k: int | None = None
    S: int | None = None

    @property
    def run_id(self):
        if self.protocol == "sweep":
            return f"sweep/k{self.k}-S{self.S}"
        return self.protocol


@dataclass
class JobResult:
    job: Job
    rows: list
    training_log: list  # (run_id, seed, unit, arm, epoch, alpha, beta, support, query)
    audit: dict


def _timed(cfg, fn, *args, **kwargs):
    start = time.perf_counter()
    value = fn(*args, **kwargs)
    ms = int(round((time.perf_counter() - start) * 1000)) if cfg.record_time else 0
    return value, ms


def _eval_rows(cfg, job, phase_prefix, prior, target, train_ms):
    rows = []
    spec = cfg.backbone
    report, ms = _timed(cfg, E.evaluate_model, prior, target)
    rows.append(Row(job.run_id, job.seed, job.protocol, job.unit, f"{phase_prefix}prior",
                    report.plcc, report.srocc, report.loss, train_ms + ms))
    (tuned, ms2) = _timed(cfg, E.fine_tune, prior, target, cfg.finetune.P, cfg.finetune.alpha_f,
                          cfg.finetune.adam, spec)
    if tuned.num_parameters != prior.num_parameters:
        raise AssertionError("fine-tuning changed the parameter count")
    report, ms3 = _timed(cfg, E.evaluate_model, tuned, target)
    rows.append(Row(job.run_id, job.seed, job.protocol, job.unit, f"{phase_prefix}finetuned",
                    report.plcc, report.srocc, report.loss, ms2 + ms3))
    return rows, tuned


def _prior_cache_path(cfg, job, meta_cfg):
    if not cfg.cache_dir:
        return None, None
    key = json.dumps({"backbone": cfg.backbone.to_dict(), "meta": asdict(meta_cfg),
                      "tasks": asdict(cfg.tasks), "seed": job.seed, "unit": job.unit,
                      "protocol": "random-split" if job.protocol == "random-split" else "lodo",
                      "random_split_images": cfg.random_split_images},
                     sort_keys=True, default=list)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return Path(cfg.cache_dir) / f"prior-{digest.hex()[:24]}.ckpt", digest


def _meta_prior(cfg, job, meta_set, meta_cfg):
    """Meta-trained prior (from the cache when a matching checkpoint exists)."""
    path, digest = _prior_cache_path(cfg, job, meta_cfg)
    if path is not None and path.exists():
        ck = read_checkpoint(path, cfg.backbone)
        if ck.config_hash == digest:
            return ck.params, [], 0
    init = M.build_model(cfg.backbone, seed=job.seed)
    (theta, logs), ms = _timed(cfg, ML.meta_train, meta_set, meta_cfg, init)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(theta, path, digest, meta_cfg.epochs)
    return theta, logs, ms


def _log_entries(job, arm, logs):
    return [(job.run_id, job.seed, job.unit, arm, e.epoch, e.alpha, e.beta, e.support_loss,
             e.query_loss) for e in logs]


def run_job(cfg: ExperimentConfig, job: Job) -> JobResult:
    start = time.perf_counter()
    res = _run_job(cfg, job)
    if cfg.record_time:
        res.audit["job_ms"] = int(round((time.perf_counter() - start) * 1000))
    return res


def _run_job(cfg: ExperimentConfig, job: Job) -> JobResult:
    if job.protocol == "random-split":
        meta_set, target = random_split_tasks(cfg, job.seed)
    else:
        meta_set, target = lodo_tasks(cfg, job.seed, job.unit)
    audit = {"split": split_checksum(meta_set, target)}
    meta_cfg = replace(cfg.meta, seed=job.seed)
    if job.protocol == "sweep":
        meta_cfg = replace(meta_cfg, k=job.k, S=job.S)
        if not 1 < job.k <= len(meta_set.tasks):
            row = Row(job.run_id, job.seed, job.protocol, job.unit, "invalid", None, None, None)
            audit["invalid"] = f"k={job.k} outside 1 < k <= {len(meta_set.tasks)}"
            return JobResult(job, [row], [], audit)
    theta, logs, ms = _meta_prior(cfg, job, meta_set, meta_cfg)
    rows, tuned = _eval_rows(cfg, job, "", theta, target, ms)
    training = _log_entries(job, "meta", logs)
    audit["meta_params"] = theta.num_parameters
    audit["meta_checksum"] = theta.checksum()
    if job.protocol == "ablation":
        init = M.build_model(cfg.backbone, seed=job.seed)
        (base, history), ms = _timed(
            cfg, ML.pretrain, meta_set.pooled(), cfg.meta.epochs, cfg.meta.alpha,
            batch_size=cfg.baseline_batch, decay_factor=cfg.meta.decay_factor,
            decay_every=cfg.meta.decay_every, adam=cfg.meta.adam, seed=job.seed, init=init)
        if base.num_parameters != theta.num_parameters:
            raise AssertionError("ablation arms differ in parameter count")
        more, _ = _eval_rows(cfg, job, "baseline-", base, target, ms)
        rows += more
        scratch, _ = _eval_rows(cfg, job, "scratch-", init, target, 0)
        rows += scratch
        audit["baseline_params"] = base.num_parameters
        audit["baseline_checksum"] = base.checksum()
        training += [(job.run_id, job.seed, job.unit, "baseline", e, float("nan"), float("nan"),
                      loss, float("nan")) for e, loss in enumerate(history)]
    return JobResult(job, rows, training, audit)


def _worker_init():
    threadpool_limits(1)


def _run_job_isolated(cfg, job):
    with threadpool_limits(1):
        return run_job(cfg, job)


def plan_jobs(cfg: ExperimentConfig, k_values=None, S_values=None) -> list[Job]:
    jobs = []
    for seed in cfg.seeds:
        if cfg.protocol == "random-split":
            jobs.append(Job("random-split", seed, f"split{seed}"))
            continue
        for fam in cfg.held_out_families:
            if cfg.protocol == "sweep":
                for k in (k_values or cfg.sweep_k):
                    for S in (S_values or cfg.sweep_S):
                        jobs.append(Job("sweep", seed, fam, k, S))
            else:
                jobs.append(Job(cfg.protocol, seed, fam))
    return jobs


def _job_key(job: Job):
    return (job.run_id, job.seed, job.unit)


TRAINING_LOG_HEADER = ("run_id", "seed", "unit", "arm", "epoch", "alpha", "beta",
                       "support_loss", "query_loss")


def _render_training_log(entries):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAINING_LOG_HEADER)
    num = lambda v: "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.9g}"
    for e in sorted(entries, key=lambda e: (e[0], e[1], e[2], e[3], e[4])):
        writer.writerow([e[0], e[1], e[2], e[3], e[4]] + [num(v) for v in e[5:]])
    return buf.getvalue()


@dataclass
class RunOutput:
    table: ResultsTable
    results_path: Path | None
    audit: dict
    training_log: list


def run_protocol(cfg: ExperimentConfig, k_values=None, S_values=None, write=True) -> RunOutput:
    """Run every job of ``cfg.protocol``; rows stream to ``results.partial.csv`` as
    jobs finish and the sorted table (with aggregates) goes to ``results.csv``."""
    cfg.validate()
    jobs = plan_jobs(cfg, k_values, S_values)
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_to_text(cfg), encoding="utf-8")
    partial = out / "results.partial.csv" if write else None
    table = ResultsTable(partial)
    results: dict = {}
    try:
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(cfg.workers, initializer=_worker_init) as pool:
                futures = {pool.submit(run_job, cfg, j): j for j in jobs}
                for fut in as_completed(futures):
                    res = fut.result()
                    results[_job_key(res.job)] = res
                    table.extend(res.rows)
        else:
            for j in jobs:
                res = _run_job_isolated(cfg, j)
                results[_job_key(j)] = res
                table.extend(res.rows)
                log.info("%s seed %d %s done", j.run_id, j.seed, j.unit)
    finally:
        table.close()
    final = ResultsTable()
    ordered = [results[k] for k in sorted(results, key=lambda k: (k[0], k[1], k[2]))]
    for res in ordered:
        final.extend(res.rows)
    final.extend(aggregate(final.rows))
    audit = {f"{r.job.run_id}|{r.job.seed}|{r.job.unit}": r.audit for r in ordered}
    training = [e for r in ordered for e in r.training_log]
    path = None
    if write:
        path = emit_results(final, out / "results.csv")
        (out / "training_log.csv").write_bytes(_render_training_log(training).encode("utf-8"))
        (out / "audit.json").write_text(json.dumps(audit, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
        partial.unlink()
    return RunOutput(final, path, audit, training)


def _with_protocol(cfg, protocol):
    if cfg.protocol != protocol:
        raise ConfigError(f"config protocol is {cfg.protocol!r}, expected {protocol!r}")
    return cfg


def run_lodo(cfg: ExperimentConfig, **kw) -> RunOutput:
    return run_protocol(_with_protocol(cfg, "lodo"), **kw)


def run_random_split(cfg: ExperimentConfig, **kw) -> RunOutput:
    return run_protocol(_with_protocol(cfg, "random-split"), **kw)


def run_ablation(cfg: ExperimentConfig, **kw) -> RunOutput:
    return run_protocol(_with_protocol(cfg, "ablation"), **kw)


def run_sweep(cfg: ExperimentConfig, k_values=None, S_values=None, **kw) -> RunOutput:
    return run_protocol(_with_protocol(cfg, "sweep"), k_values, S_values, **kw)


def paired_difference(table: ResultsTable | list, phase_a="finetuned",
                      phase_b="baseline-finetuned", metric="srocc"):
    """Per-seed mean of metric(phase_a) - metric(phase_b) over paired units."""
    rows = table.rows if isinstance(table, ResultsTable) else table
    by_key = {}
    for r in rows:
        if r.unit != "mean" and r.phase in (phase_a, phase_b):
            by_key[(r.seed, r.unit, r.phase)] = getattr(r, metric)
    diffs = {}
    for (seed, unit, phase), value in by_key.items():
        if phase != phase_a:
            continue
        if (seed, unit, phase_b) not in by_key:
            raise ValueError(f"unpaired row for seed {seed}, unit {unit}")
        other = by_key[(seed, unit, phase_b)]
        diffs.setdefault(seed, []).append((0.0 if value is None else value)
                                          - (0.0 if other is None else other))
    return {seed: float(np.mean(v)) for seed, v in sorted(diffs.items())}
