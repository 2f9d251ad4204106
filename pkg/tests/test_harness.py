import struct
from dataclasses import replace

import numpy as np
import pytest

from miqa import harness as H
from miqa import model as M

TINY = M.BackboneSpec(conv_layers=((4, 3, 2), (8, 3, 2)), hidden=8)


def tiny(out, protocol="lodo", **kw):
    kw = {"seeds": (0, 1), "held_out": ("darken", "jitter"), **kw}
    cfg = H.desk_config(protocol=protocol, out=str(out), **kw)
    cfg.backbone = TINY
    cfg.meta = replace(cfg.meta, epochs=2)
    cfg.tasks = replace(cfg.tasks, bases=4)
    return cfg


# ---------------------------------------------------------------- config


def test_defaults_are_published_values():
    cfg = H.ExperimentConfig()
    m = cfg.meta
    assert (m.alpha, m.beta, m.epochs, m.k, m.S) == (1e-4, 1e-2, 100, 5, 6)
    assert (m.decay_factor, m.decay_every) == (0.8, 5)
    assert (m.adam.mu1, m.adam.mu2, m.adam.epsilon, m.adam.weight_decay) == (0.9, 0.99, 1e-8, 1e-5)
    assert (cfg.finetune.P, cfg.finetune.alpha_f) == (15, 1e-5)
    assert cfg.finetune.adam.weight_decay == 1e-5
    assert len(cfg.seeds) == 5


def test_empty_config_reproduces_defaults():
    assert H.config_from_text("").digest() == H.ExperimentConfig().digest()


def test_config_roundtrip():
    cfg = tiny("x", protocol="sweep")
    cfg.tasks.levels["darken"] = (0.1, 0.2, 0.3)
    cfg.meta = replace(cfg.meta, query_steps=3)
    back = H.config_from_text(H.config_to_text(cfg))
    assert back == cfg and back.digest() == cfg.digest()


def test_config_overrides_and_errors():
    cfg = H.config_from_text("[meta]\nS = 3\n[adam]\nbias_correction = yes\n"
                             "[experiment]\nseeds = 4, 9\n")
    assert cfg.meta.S == 3 and cfg.meta.adam.bias_correction and cfg.seeds == (4, 9)
    assert cfg.finetune.adam.bias_correction
    for text in ["[meta]\nfoo = 1\n", "[nosuch]\n", "[meta]\nk = five\n", "no header",
                 "[experiment]\nprotocol = other\n", "[tasks]\nfamilies = darken, jitter\n",
                 "[experiment]\nheld_out = sepia\n"]:
        with pytest.raises(H.ConfigError):
            H.config_from_text(text)


def test_shipped_desk_config_matches_preset():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
    assert H.load_config(path).digest() == H.desk_config(protocol="ablation").digest()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    theta = M.build_model(seed=3)
    digest = b"\x07" * 32
    H.save_checkpoint(theta, tmp_path / "a.ckpt", digest, 12)
    ck = H.read_checkpoint(tmp_path / "a.ckpt", M.DEFAULT_SPEC)
    assert ck.params.equal(theta) and ck.config_hash == digest and ck.epoch == 12
    assert H.load_checkpoint(tmp_path / "a.ckpt").spec == M.DEFAULT_SPEC


def test_checkpoint_layout_is_documented_format(tmp_path):
    theta = M.ParamSet({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, b"F" * 32)
    raw = H.encode_checkpoint(theta, b"H" * 32, 5)
    expected = (b"MIQA" + struct.pack("<H", 1) + b"F" * 32 + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2) + struct.pack("<2I", 2, 3)
                + np.arange(6, dtype="<f4").tobytes() + b"H" * 32 + struct.pack("<I", 5))
    assert raw == expected


def test_truncated_checkpoint_is_corrupt(tmp_path):
    raw = H.encode_checkpoint(M.build_model(TINY))
    for cut in (2, 10, 60, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(H.CorruptCheckpoint):
            H.read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(H.CorruptCheckpoint):
        H.read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "t.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(H.CorruptCheckpoint):
        H.read_checkpoint(tmp_path / "t.ckpt")


def test_version_and_fingerprint_errors(tmp_path):
    raw = bytearray(H.encode_checkpoint(M.build_model(TINY)))
    H.save_checkpoint(M.build_model(TINY), tmp_path / "tiny.ckpt")
    with pytest.raises(H.FingerprintMismatch):
        H.load_checkpoint(tmp_path / "tiny.ckpt", M.DEFAULT_SPEC)
    raw[4:6] = struct.pack("<H", 2)
    (tmp_path / "v2.ckpt").write_bytes(bytes(raw))
    with pytest.raises(H.VersionMismatch):
        H.load_checkpoint(tmp_path / "v2.ckpt", TINY)
    errors = {H.CorruptCheckpoint, H.VersionMismatch, H.FingerprintMismatch}
    assert len(errors) == 3 and all(issubclass(e, H.CheckpointError) for e in errors)


def test_checkpoint_rejects_float64():
    with pytest.raises(H.CheckpointError):
        H.encode_checkpoint(M.build_model(TINY, dtype=np.float64))


# ---------------------------------------------------------------- results


def _row(**kw):
    base = dict(run_id="lodo", seed=0, protocol="lodo", unit="darken", phase="finetuned",
                plcc=0.5, srocc=0.25, loss=0.1, wall_ms=0)
    base.update(kw)
    return H.Row(**base)


def test_emit_results_format_and_order(tmp_path):
    table = H.ResultsTable()
    table.extend([_row(seed=1), _row(unit="blur", srocc=None), _row(unit="mean"),
                  _row(seed="all", unit="mean")])
    path = H.emit_results(table, tmp_path / "r.csv")
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == "run_id,seed,protocol,unit,phase,plcc,srocc,loss,wall_ms"
    assert lines[1] == "lodo,0,lodo,blur,finetuned,0.500000000,undefined,0.100000000,0"
    assert [ln.split(",")[1:4] for ln in lines[2:]] == [
        ["0", "lodo", "mean"], ["1", "lodo", "darken"], ["all", "lodo", "mean"]]
    assert H.emit_results(table, tmp_path / "r2.csv").read_bytes() == raw


def test_empty_table_rejected(tmp_path):
    with pytest.raises(ValueError):
        H.emit_results(H.ResultsTable(), tmp_path / "r.csv")


def test_metric_round_trip_at_nine_decimals(tmp_path):
    rng = np.random.default_rng(0)
    table = H.ResultsTable()
    values = rng.uniform(-1, 1, size=(50, 2))
    for i, (p, s) in enumerate(values):
        table.append(_row(unit=f"u{i:02d}", plcc=float(p), srocc=float(s)))
    back = H.read_results(H.emit_results(table, tmp_path / "r.csv"))
    for rec, (p, s) in zip(back, values):
        assert abs(rec["plcc"] - p) <= 1e-9 and abs(rec["srocc"] - s) <= 1e-9


def test_aggregate_treats_undefined_as_zero():
    rows = [_row(unit="a", srocc=0.6), _row(unit="b", srocc=None), _row(unit="c", srocc=0.3),
            _row(seed=1, unit="a", srocc=0.2)]
    agg = {(r.seed, r.unit): r for r in H.aggregate(rows)}
    assert agg[(0, "mean")].srocc == pytest.approx(0.3)
    assert agg[(1, "mean")].srocc == pytest.approx(0.2)
    assert agg[("all", "mean")].srocc == pytest.approx(0.25)


def test_stream_file_receives_rows(tmp_path):
    table = H.ResultsTable(tmp_path / "s.csv")
    table.append(_row())
    assert (tmp_path / "s.csv").read_text().count("\n") == 2
    table.close()


# ---------------------------------------------------------------- protocols


def test_lodo_rows_and_aggregates_recomputed_from_csv(tmp_path):
    out = H.run_lodo(tiny(tmp_path))
    recs = H.read_results(out.results_path)
    family_rows = [r for r in recs if r["unit"] != "mean"]
    assert len(family_rows) == 2 * 2 * 2  # families x seeds x phases
    for seed in (0, 1):
        for phase in ("prior", "finetuned"):
            fam = [r for r in family_rows if r["seed"] == seed and r["phase"] == phase]
            agg = [r for r in recs if r["seed"] == seed and r["unit"] == "mean"
                   and r["phase"] == phase][0]
            expected = np.mean([0.0 if r["srocc"] is None else r["srocc"] for r in fam])
            assert abs(agg["srocc"] - expected) <= 2e-9
    assert (tmp_path / "training_log.csv").exists()
    assert not (tmp_path / "results.partial.csv").exists()
    assert H.load_config(tmp_path / "config.ini").digest() == tiny(tmp_path).digest()


def test_identical_runs_are_byte_identical(tmp_path):
    a = H.run_lodo(tiny(tmp_path / "a"))
    b = H.run_lodo(tiny(tmp_path / "b"))
    for name in ("results.csv", "training_log.csv", "audit.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.audit == b.audit


def test_process_workers_match_serial(tmp_path):
    serial = H.run_lodo(tiny(tmp_path / "s"))
    parallel = H.run_lodo(replace(tiny(tmp_path / "p"), workers=2))
    assert serial.results_path.read_bytes() == parallel.results_path.read_bytes()


def test_ablation_arms_are_paired(tmp_path):
    out = H.run_ablation(tiny(tmp_path, protocol="ablation"))
    phases = {"prior", "finetuned", "baseline-prior", "baseline-finetuned", "scratch-prior",
              "scratch-finetuned"}
    units = {}
    for r in out.table.rows:
        if r.unit != "mean":
            units.setdefault(r.phase, []).append((r.seed, r.unit))
    assert set(units) == phases
    assert all(sorted(v) == sorted(units["finetuned"]) for v in units.values())
    for a in out.audit.values():
        assert a["meta_params"] == a["baseline_params"]
    diffs = H.paired_difference(out.table)
    assert set(diffs) == {0, 1}


def test_ablation_shares_splits_with_lodo(tmp_path):
    lodo = H.run_lodo(tiny(tmp_path / "l"))
    abl = H.run_ablation(tiny(tmp_path / "a", protocol="ablation"))
    split = lambda out: sorted((k.split("|", 1)[1], v["split"]) for k, v in out.audit.items())
    assert split(lodo) == split(abl)


def test_sweep_grid_and_invalid_cells(tmp_path):
    cfg = tiny(tmp_path, protocol="sweep", held_out=("darken",), seeds=(0,))
    out = H.run_sweep(cfg, k_values=[1, 2, 9], S_values=[1, 2])
    cells = {r.run_id for r in out.table.rows}
    assert cells == {f"sweep/k{k}-S{s}" for k in (1, 2, 9) for s in (1, 2)}
    invalid = {r.run_id for r in out.table.rows if r.phase == "invalid"}
    assert invalid == {"sweep/k1-S1", "sweep/k1-S2", "sweep/k9-S1", "sweep/k9-S2"}
    assert all(r.srocc is None for r in out.table.rows if r.phase == "invalid")


def test_prior_cache_reuses_identical_training(tmp_path):
    cfg = replace(tiny(tmp_path / "a"), cache_dir=str(tmp_path / "cache"))
    first = H.run_lodo(cfg)
    assert len(list((tmp_path / "cache").glob("*.ckpt"))) == 4
    again = H.run_lodo(replace(cfg, out=str(tmp_path / "b")))
    assert first.results_path.read_bytes() == again.results_path.read_bytes()
    # a sweep cell with the same k and S reuses the same priors
    sweep = H.run_sweep(replace(cfg, protocol="sweep", out=str(tmp_path / "c")),
                        k_values=[5], S_values=[6])
    a = {(r.seed, r.unit, r.phase): r.srocc for r in first.table.rows}
    b = {(r.seed, r.unit, r.phase): r.srocc for r in sweep.table.rows}
    assert a == b


def test_random_split_protocol(tmp_path):
    cfg = replace(tiny(tmp_path, protocol="random-split"), random_split_images=10)
    out = H.run_random_split(cfg)
    units = {r.unit for r in out.table.rows}
    assert units == {"split0", "split1", "mean"}
    meta, target = H.random_split_tasks(cfg, 0)
    assert len(meta.tasks) == 8 and len(target.train) == 8 and len(target.test) == 2


def test_protocol_mismatch_rejected(tmp_path):
    with pytest.raises(H.ConfigError):
        H.run_ablation(tiny(tmp_path))


def test_partial_results_flushed_on_failure(tmp_path, monkeypatch):
    calls = []
    original = H._run_job

    def flaky(cfg, job):
        calls.append(job)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return original(cfg, job)

    monkeypatch.setattr(H, "_run_job", flaky)
    with pytest.raises(RuntimeError):
        H.run_lodo(tiny(tmp_path))
    text = (tmp_path / "results.partial.csv").read_text()
    assert text.count("\n") == 1 + 2  # header plus the first job's two phases
    assert not (tmp_path / "results.csv").exists()


def test_loaded_task_directory(tmp_path):
    from miqa import taskgen as tg
    fams = tg.default_families(["gaussian-noise", "darken", "jitter"])
    tg.export_tasks(tmp_path / "data", fams, tg.gen_base_images(4, seed=0))
    cfg = tiny(tmp_path / "out")
    cfg.tasks = replace(cfg.tasks, families=("gaussian-noise", "darken", "jitter"),
                        data_dir=str(tmp_path / "data"))
    cfg.meta = replace(cfg.meta, k=2)
    meta, target = H.lodo_tasks(cfg, 0, "darken")
    assert sorted(t.task_id for t in meta.tasks) == ["gaussian-noise", "jitter"]
    assert len(target.train) == 10 and len(target.test) == 10
    out = H.run_lodo(replace(cfg, held_out=("darken",), seeds=(0,)))
    assert len([r for r in out.table.rows if r.unit == "darken"]) == 2
