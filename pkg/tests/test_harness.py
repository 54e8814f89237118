import json
import textwrap

import numpy as np
import pytest

from flexilora.harness import cli
from flexilora.harness.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from flexilora.harness.config import ConfigError, ExperimentConfig, from_dict, load_config
from flexilora.harness.pipeline import StageError, run_experiment
from flexilora.harness.report import ReportRow, emit_report, to_csv

TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32},
    "pretrain": {"steps": 20, "n_copy": 50, "n_per_knob": 10, "warmup": 5},
    "tasks": [{"family": "mod_chain", "low": [1], "high": [3], "n_train": 32, "n_eval": 16}],
    "router": {"label_by": "knob", "epochs": 3},
    "finetune": {"steps": 3, "batch_size": 8, "lr": 0.1},
    "eval": {"batch_size": 8, "max_new": 2},
}


def _cfg(tmp_path, **over):
    data = json.loads(json.dumps(TINY))
    data.update(over)
    data.setdefault("out", str(tmp_path / "run"))
    return from_dict(data)


# -- checkpoints ---------------------------------------------------------------


def _tensors():
    rng = np.random.default_rng(0)
    return {
        "adapter.layers.0.q.A": rng.normal(size=(8, 4)).astype(np.float32),
        "router.w1": rng.normal(size=(3, 4)),
        "ids": np.arange(5, dtype=np.int64),
    }


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    t = _tensors()
    p = tmp_path / "c.flxl"
    save_checkpoint(t, p)
    back = load_checkpoint(p)
    for k, v in t.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)
    save_checkpoint(back, tmp_path / "d.flxl")
    assert p.read_bytes() == (tmp_path / "d.flxl").read_bytes()


def test_checkpoint_layout(tmp_path):
    blob = encode(_tensors())
    assert blob[:4] == b"FLXL"
    assert int.from_bytes(blob[4:8], "little") == 1


def test_checkpoint_detects_flipped_byte():
    blob = bytearray(encode(_tensors()))
    blob[-5] ^= 0x40
    with pytest.raises(CheckpointError, match="hash"):
        decode(bytes(blob))


def test_checkpoint_detects_truncation_and_magic():
    blob = encode(_tensors())
    with pytest.raises(CheckpointError):
        decode(blob[:-1])
    with pytest.raises(CheckpointError):
        decode(blob[:10])
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + blob[4:])


def test_checkpoint_version_mismatch():
    blob = bytearray(encode({}))
    blob[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(blob))


def test_empty_checkpoint(tmp_path):
    save_checkpoint({}, tmp_path / "e.flxl")
    assert load_checkpoint(tmp_path / "e.flxl") == {}


# -- config --------------------------------------------------------------------


def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg.adapters.r_max == 8 and cfg.router.rank_table == [2, 8]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="router"):
        from_dict({"router": {"sigmaa": 0.1}})


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        from_dict({"router": {"sigma": True}})
    with pytest.raises(ConfigError):
        from_dict({"policies": [{"kind": "adalora"}]})


def test_toml_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(
        textwrap.dedent(
            """
            seed = 4
            [router]
            sigma = 0.2
            [[policies]]
            kind = "dylora"
            low = 1
            high = 4
            """
        )
    )
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.router.sigma == 0.2 and cfg.policies[0].high == 4
    p.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(p)


def test_slice_hash_tracks_only_its_sections():
    a, b = ExperimentConfig(), ExperimentConfig()
    b.router.sigma = 0.3
    assert a.slice_hash("model", "pretrain") == b.slice_hash("model", "pretrain")
    assert a.slice_hash("router") != b.slice_hash("router")


# -- reports -------------------------------------------------------------------


def _row(method, params, score=0.5):
    return ReportRow("mod_chain", method, method, "accuracy", params, float(params), score, 0.6, 0.4, 10, {1: 0.6}, {4: 10})


def test_report_files(tmp_path):
    paths = emit_report([_row("lora-4", 8192), _row("lora-8", 16384)], tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert len(lines) == 3
    assert lines[2].split(",")[4] == "16384"
    assert paths["pareto"].read_text().splitlines()[0] == "expected_active_params,score"
    assert "lora-8" in paths["text"].read_text()


def test_single_row_report(tmp_path):
    emit_report([_row("lora-8", 1)], tmp_path)
    assert len((tmp_path / "report.csv").read_text().splitlines()) == 2


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_csv_is_deterministic():
    rows = [_row("a", 1), _row("b", 2)]
    assert to_csv(rows) == to_csv(rows)


# -- pipeline ------------------------------------------------------------------


@pytest.fixture(scope="module")
def shared_cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("cache"))


def test_pipeline_one_policy(tmp_path, shared_cache):
    cfg = _cfg(tmp_path, cache=shared_cache, policies=[{"kind": "lora", "rank": 8}])
    res = run_experiment(cfg)
    assert len(res.rows) == 1
    csv_lines = (tmp_path / "run" / "report.csv").read_text().splitlines()
    assert len(csv_lines) == 2
    row = res.rows[0]
    assert sum(row.rank_histogram.values()) == row.n == 16


def test_pipeline_rerun_is_cached_and_identical(tmp_path, shared_cache):
    pol = [{"kind": "lora", "rank": 2}, {"kind": "dylora", "low": 1, "high": 4}, {"kind": "dylora+", "low": 1, "high": 4}, {"kind": "flexi"}]
    cfg = _cfg(tmp_path, cache=shared_cache, policies=pol)
    run_experiment(cfg)
    out = tmp_path / "run"
    first = (out / "report.csv").read_bytes()
    stamps = {p.name: p.stat().st_mtime_ns for p in out.glob("*.flxl")}
    # dylora and dylora+ share one trained checkpoint
    assert len([p for p in stamps if p.startswith("adapters-mod_chain-random-1..4")]) == 1
    run_experiment(cfg)
    assert (out / "report.csv").read_bytes() == first
    assert {p.name: p.stat().st_mtime_ns for p in out.glob("*.flxl")} == stamps


def test_pipeline_same_seed_fresh_dirs_identical(tmp_path, shared_cache):
    reports = []
    for name, threads in (("a", 1), ("b", 3)):
        cfg = _cfg(tmp_path, cache=shared_cache, out=str(tmp_path / name), policies=[{"kind": "dylora+", "low": 1, "high": 8}])
        run_experiment(cfg, threads=threads)
        reports.append((tmp_path / name / "report.csv").read_bytes())
    assert reports[0] == reports[1]


def test_pipeline_stage_errors_name_the_stage(tmp_path, shared_cache):
    cfg = _cfg(tmp_path, cache=shared_cache, policies=[{"kind": "flexi"}])
    cfg.router.label_by = "zero_shot"
    cfg.router.tau = 2.0  # nothing can be easy, so balancing fails
    with pytest.raises(StageError, match="train-router") as err:
        run_experiment(cfg)
    assert err.value.seed == cfg.seed


def test_pipeline_partial_stages(tmp_path, shared_cache):
    cfg = _cfg(tmp_path, cache=shared_cache)
    res = run_experiment(cfg, until="gen-tasks")
    assert not res.rows
    assert list((tmp_path / "run").glob("data-mod_chain-train-*.jsonl"))


# -- cli -------------------------------------------------------------------------


def _toml(tmp_path, shared_cache):
    p = tmp_path / "c.toml"
    p.write_text(
        textwrap.dedent(
            f"""
            out = "{tmp_path / 'cli'}"
            cache = "{shared_cache}"
            [model]
            d_model = 16
            n_layers = 1
            n_heads = 2
            d_ff = 32
            [pretrain]
            steps = 20
            n_copy = 50
            n_per_knob = 10
            warmup = 5
            [[tasks]]
            family = "mod_chain"
            low = [1]
            high = [3]
            n_train = 32
            n_eval = 16
            [router]
            label_by = "knob"
            epochs = 3
            [finetune]
            steps = 3
            batch_size = 8
            [eval]
            batch_size = 8
            max_new = 2
            """
        )
    )
    return p


def test_cli_exit_codes(tmp_path, shared_cache, capsys):
    cfgp = _toml(tmp_path, shared_cache)
    assert cli.main(["eval", "--config", str(cfgp), "--policy", "lora", "--rank", "4"]) == 0
    assert "lora-4" in capsys.readouterr().out
    assert cli.main(["report", "--config", str(cfgp)]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--config", str(cfgp), "--out", str(tmp_path / "empty")]) == cli.EXIT_RUNTIME
    assert cli.main(["selftest", "--only", "nope"]) == cli.EXIT_CONFIG


def test_cli_selftest_subset(capsys):
    assert cli.main(["selftest", "--only", "accounting", "checkpoint"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
