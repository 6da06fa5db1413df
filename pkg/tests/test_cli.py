import csv
import io
import json
import math

import numpy as np
import pytest

from iud.cli import config_to_doc, load_trace, main, parse_config, save_trace
from iud.errors import ConfigurationError
from iud.inference import wald_statistic
from iud.mechanisms import Mechanism
from iud.simulate import lookup_scenario, replicate_rng, run_trial


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def parse_csv(text):
    return list(csv.reader(io.StringIO(text)))


# --- config parsing -----------------------------------------------------------


def test_parse_config_minimal_defaults():
    config, scenarios, replicates = parse_config({"scenarios": ["S_B"], "trial": {"n": 200}})
    assert config.num_treatments == 2
    assert config.num_strata == 5
    assert config.horizon == 200
    assert config.varsigma == 1.0
    assert np.allclose(config.covariate_probs, 0.2)
    assert config.mechanism.psi_max == 10.0
    assert config.allocation.kind.value == "inverse_complement"
    assert scenarios[0].name == "S_B"
    assert replicates == 10_000


def test_parse_config_rejects_bad_simplex():
    with pytest.raises(ConfigurationError):
        parse_config({"scenarios": ["S_B"], "trial": {"p": [0.5, 0.2, 0.1, 0.1, 0.2]}})


def test_parse_config_rejects_unknown_keys_with_path():
    with pytest.raises(ConfigurationError, match=r"trial\.horizon"):
        parse_config({"scenarios": ["S_B"], "trial": {"horizon": 100}})
    with pytest.raises(ConfigurationError, match=r"mechanism\.mle\.bogus"):
        parse_config({"scenarios": ["S_B"], "mechanism": {"mle": {"bogus": 1}}})


def test_parse_config_rejects_out_of_range_theta():
    doc = {"scenarios": [{"name": "bad", "theta": [[0.5, 1.2], [0.1, 0.1]]}]}
    with pytest.raises(ConfigurationError):
        parse_config(doc)


def test_parse_config_inline_scenarios_and_aliases():
    doc = {
        "scenarios": [
            {"name": "det", "theta": [[0.4, 0.6], [0.2, 0.2]]},
            {"name": "rnd", "beta": [[49.5, 49.5], [3.5, 31.5]]},
        ],
        "trial": {"H": 2},
        "mechanism": {"variant": "IUD2"},
    }
    config, scenarios, _ = parse_config(doc)
    assert config.mechanism.variant is Mechanism.SIMILARITY
    assert scenarios[0].kind == "deterministic"
    assert scenarios[1].kind == "random_beta"


def test_config_roundtrip_through_doc():
    doc = {
        "scenarios": ["S_1"],
        "trial": {"n": 80, "seed": 9, "checkpoints": [40, 80]},
        "mechanism": {"variant": "model_based"},
        "replicates": 7,
    }
    config, scenarios, replicates = parse_config(doc)
    echoed = config_to_doc(config, scenarios, replicates)
    config2, scenarios2, replicates2 = parse_config(echoed)
    assert config_to_doc(config2, scenarios2, replicates2) == echoed
    assert config2.horizon == config.horizon and config2.seed == config.seed
    assert config2.mechanism.variant is config.mechanism.variant
    assert [s.name for s in scenarios2] == [s.name for s in scenarios]
    assert replicates2 == replicates


# --- trace files ----------------------------------------------------------------


def test_trace_roundtrip(tmp_path):
    config, scenarios, _ = parse_config(
        {"scenarios": ["S_B"], "trial": {"n": 60, "checkpoints": [30, 60]}}
    )
    trace = run_trial(config, scenarios[0])
    path = tmp_path / "trace.json"
    save_trace(trace, str(path))
    loaded = load_trace(str(path))
    assert loaded.checkpoints == trace.checkpoints
    assert np.array_equal(loaded.s_snapshots, trace.s_snapshots)
    assert np.array_equal(loaded.f_snapshots, trace.f_snapshots)
    assert np.allclose(loaded.p_snapshots, trace.p_snapshots)
    assert np.allclose(loaded.realized_theta, trace.realized_theta)


def test_load_trace_rejects_other_files(tmp_path):
    path = tmp_path / "bogus.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ConfigurationError):
        load_trace(str(path))


# --- commands -------------------------------------------------------------------


@pytest.fixture
def small_config(tmp_path):
    doc = {
        "scenarios": ["S_B"],
        "trial": {"n": 60, "seed": 3, "checkpoints": [30, 60]},
        "mechanism": {"variant": "similarity"},
        "replicates": 6,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_simulate_writes_outputs_and_is_reproducible(tmp_path, small_config, capsys):
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    code, _, _ = run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out1))
    assert code == 0
    assert (out1 / "metrics.csv").exists()
    assert (out1 / "manifest.json").exists()

    rows = parse_csv((out1 / "metrics.csv").read_text())
    assert rows[0] == [
        "scenario", "mechanism", "estimator", "n", "metric", "stratum", "mean", "se", "replicates",
    ]
    assert all(len(r) == 9 for r in rows[1:])
    strata_col = {r[5] for r in rows[1:]}
    assert strata_col == {"", "1", "2", "3", "4", "5"}

    code, _, _ = run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out2))
    assert code == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()

    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["config"]["trial"]["seed"] == 3
    assert manifest["config"]["replicates"] == 6


def test_simulate_rerun_from_manifest_is_byte_identical(tmp_path, small_config, capsys):
    out1, out2 = tmp_path / "orig", tmp_path / "from_manifest"
    run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out1))
    code, _, _ = run_cli(
        capsys, "simulate", "--config", str(out1 / "manifest.json"), "--out", str(out2)
    )
    assert code == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_simulate_thread_count_is_byte_stable(tmp_path, small_config, capsys, monkeypatch):
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out1), "--threads", "1")
    monkeypatch.setenv("IUD_THREADS", "3")
    run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out2), "--threads", "1")
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_simulate_emit_traces(tmp_path, small_config, capsys):
    out = tmp_path / "traced"
    code, _, _ = run_cli(
        capsys, "simulate", "--config", str(small_config), "--out", str(out), "--emit-traces",
        "--replicates", "2",
    )
    assert code == 0
    trace_files = sorted((out / "traces" / "S_B").glob("*.json"))
    assert len(trace_files) == 2
    loaded = load_trace(str(trace_files[0]))
    assert loaded.checkpoints == (30, 60)


def test_simulate_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenarios": ["S_B"], "trial": {"p": [1.0, 1.0]}}))
    code, _, err = run_cli(capsys, "simulate", "--config", str(path), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "error" in err


def test_simulate_missing_config_exits_2(tmp_path, capsys):
    code, _, _ = run_cli(
        capsys, "simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")
    )
    assert code == 2


def test_mle_command_matches_library(tmp_path, capsys):
    counts = tmp_path / "counts.csv"
    counts.write_text("n,s\n10,9\n10,1\n")
    code, out, _ = run_cli(capsys, "mle", "--counts", str(counts))
    assert code == 0
    header, row = parse_csv(out)
    assert header == ["alpha", "beta", "status", "log_likelihood"]
    assert row[2] == "interior"
    from iud.betabinom import AggregatedSample, fit_mle

    ref = fit_mle(AggregatedSample([10, 10], [9, 1]))
    assert float(row[0]) == pytest.approx(ref.alpha, rel=1e-8)
    assert float(row[1]) == pytest.approx(ref.beta, rel=1e-8)
    assert float(row[3]) == pytest.approx(ref.log_likelihood, rel=1e-8)


def test_mle_command_pooled_sample(tmp_path, capsys):
    counts = tmp_path / "counts.csv"
    counts.write_text("10,5\n10,5\n")
    code, out, _ = run_cli(capsys, "mle", "--counts", str(counts))
    assert code == 0
    _, row = parse_csv(out)
    assert row[2] == "pooled_boundary"
    assert row[0] == "inf"


def test_analyze_sequential_endpoint_matches_fixed_sample(tmp_path, capsys):
    config, scenarios, _ = parse_config(
        {"scenarios": ["S_B"], "trial": {"n": 100, "seed": 8, "checkpoints": [50, 100]}}
    )
    trace = run_trial(config, scenarios[0], replicate_rng(config.seed, 0))
    path = tmp_path / "trace.json"
    save_trace(trace, str(path))
    code, out, _ = run_cli(
        capsys, "analyze", "--trace", str(path), "--pair", "1,2", "--stratum", "1",
        "--times", "0.5,1.0",
    )
    assert code == 0
    blocks = out.strip().split("\n\n")
    assert len(blocks) == 2
    fixed = parse_csv(blocks[0])
    seq = parse_csv(blocks[1])
    assert seq[0] == ["t", "step", "U"]
    assert len(seq) == 3
    u_ref = wald_statistic(trace.counts_at(1), 0, 1, 0)
    assert float(seq[2][2]) == pytest.approx(u_ref, rel=1e-8)
    # the fixed-sample row at n=100 carries the same statistic
    assert float(fixed[2][6]) == pytest.approx(u_ref, rel=1e-8)


def test_analyze_missing_time_is_config_error(tmp_path, capsys):
    config, scenarios, _ = parse_config(
        {"scenarios": ["S_B"], "trial": {"n": 100, "checkpoints": [100]}}
    )
    trace = run_trial(config, scenarios[0])
    path = tmp_path / "t.json"
    save_trace(trace, str(path))
    code, _, err = run_cli(
        capsys, "analyze", "--trace", str(path), "--pair", "1,2", "--stratum", "1",
        "--times", "0.25,1.0",
    )
    assert code == 2
    assert "snapshot" in err


def test_scenarios_command_lists_catalog(capsys):
    code, out, _ = run_cli(capsys, "scenarios")
    assert code == 0
    rows = parse_csv(out)
    names = {r[0] for r in rows[1:]}
    assert {"S_Bbar", "S_B", "S_1", "S_2", "S_3", "S_4", "S_5"} <= names


def test_csv_numbers_use_nine_significant_digits(tmp_path, small_config, capsys):
    out = tmp_path / "fmt"
    run_cli(capsys, "simulate", "--config", str(small_config), "--out", str(out))
    rows = parse_csv((out / "metrics.csv").read_text())
    for row in rows[1:]:
        for cell in (row[6], row[7]):
            if cell and "." in cell:
                digits = cell.replace("-", "").replace(".", "").lstrip("0")
                assert len(digits) <= 9
    assert "," in rows[1][6] or float(rows[1][6]) == float(f"{float(rows[1][6]):.9g}")
