"""Command-line behavior: exit codes, file outputs, and the serve/agent loop.

All commands run in-process through main(argv), so stdout/stderr and exit
codes are asserted without spawning interpreters.
"""
import json
import logging
import socket
import threading
import time

import numpy as np
import pytest

from fedhead.cli import main
from fedhead.data import load_dataset
from fedhead.simulator import CSV_COLUMNS
from fedhead.wire import decode_model


TINY = ["--dim", "8", "--samples", "300", "--margin", "6.0"]


def test_no_subcommand_is_a_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    assert main(["frobnicate"]) == 1


def test_unknown_flag_is_a_usage_error():
    assert main(["gradcheck", "--frobnicate"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_invalid_log_level_is_a_usage_error(monkeypatch, capsys):
    monkeypatch.setenv("FTL_LOG_LEVEL", "verbose")
    assert main(["gradcheck", "--trials", "1"]) == 1
    assert "FTL_LOG_LEVEL" in capsys.readouterr().err


def test_gradcheck_passes_and_reports(capsys):
    assert main(["gradcheck", "--trials", "20"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_fails_on_unreachable_tolerance(capsys):
    assert main(["gradcheck", "--trials", "20", "--tol", "1e-20"]) == 2
    assert "FAILED" in capsys.readouterr().err


def test_gen_data_writes_a_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "toy.ds"
    rc = main(["gen-data", *TINY, "--seed", "4", "--out", str(out)])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out
    ds = load_dataset(out)
    assert ds.embedding_dim == 8
    assert len(ds.labels) == 300
    assert len(ds.validation_indices()) == 60  # default 0.2 split


def test_simulate_from_dataset_file_writes_csv(tmp_path, capsys):
    data = tmp_path / "toy.ds"
    assert main(["gen-data", *TINY, "--out", str(data)]) == 0
    csv_path = tmp_path / "run.csv"
    rc = main([
        "simulate", "--data", str(data), "-N", "2", "-B", "5", "-L", "1",
        "-T", "3", "-R", "1", "--lr", "0.05", "--out", str(csv_path),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "devices=2:" in out
    lines = csv_path.read_text().splitlines()
    assert lines[0] == CSV_COLUMNS
    assert len(lines) == 1 + 3  # header + one epoch row per epoch


def test_simulate_synthetic_without_out_prints_summary_only(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["simulate", *TINY, "-N", "1", "-B", "5", "-L", "1", "-T", "2", "-R", "1"])
    assert rc == 0
    assert "devices=1:" in capsys.readouterr().out
    assert not list(tmp_path.iterdir())  # nothing written


def test_simulate_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("devices = 4\nepochs = 2\nbatch_size = 5\nrepetitions = 1\n"
                   "synth_dim = 8\nsynth_samples = 300\n")
    rc = main(["simulate", "--config", str(cfg), "-N", "1", "-L", "1"])
    assert rc == 0
    assert "devices=1:" in capsys.readouterr().out


def test_sweep_preset_with_overrides(tmp_path, capsys):
    out = tmp_path / "ep.csv"
    rc = main([
        "sweep", "--preset", "fig4", *TINY, "-R", "1", "-T", "3", "-B", "5",
        "--out", str(out),
    ])
    assert rc == 0
    stdout = capsys.readouterr().out
    for episodes in (1, 3, 5, 6):
        assert f"local_episodes={episodes}:" in stdout
    lines = out.read_text().splitlines()
    assert lines[0] == CSV_COLUMNS
    assert len(lines) == 1 + 4 * 3  # four sweep points, three epochs each


def test_sweep_default_output_name_comes_from_preset(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = main([
        "sweep", "--preset", "fig2", *TINY, "-R", "1", "-T", "2", "-B", "5",
        "-L", "1", "--values", "1,2",
    ])
    assert rc == 0
    assert (tmp_path / "fig2.csv").exists()


def test_sweep_custom_axis_and_values(tmp_path, capsys):
    out = tmp_path / "b.csv"
    rc = main([
        "sweep", *TINY, "--sweep", "batch_size", "--values", "1,5",
        "-R", "1", "-T", "2", "-L", "1", "--out", str(out),
    ])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "batch_size=1:" in stdout and "batch_size=5:" in stdout


def test_sweep_rejects_preset_plus_config(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("devices = 1\n")
    assert main(["sweep", "--preset", "fig1", "--config", str(cfg)]) == 1


def test_missing_dataset_file_is_a_runtime_error(capsys):
    rc = main(["simulate", "--data", "/nonexistent/toy.ds", "-T", "1", "-R", "1"])
    assert rc == 2
    assert "fedhead:" in capsys.readouterr().err


def test_encode_decode_round_trip(tmp_path, capsys):
    blob_json = tmp_path / "blob.json"
    values = [0.5, -1.25, 2.0, 0.0, 3.5, -0.75]  # (E=2,C=2): 2*2+2 values
    blob_json.write_text(json.dumps(
        {"embedding_dim": 2, "num_classes": 2, "values": values}
    ))
    binary = tmp_path / "blob.ftl"
    assert main(["encode", "--in", str(blob_json), "--out", str(binary)]) == 0
    assert "2" in capsys.readouterr().out
    blob = decode_model(binary.read_bytes())
    assert np.array_equal(blob.values, np.asarray(values))  # float32-exact values

    back = tmp_path / "back.json"
    assert main(["decode", "--in", str(binary), "--out", str(back)]) == 0
    payload = json.loads(back.read_text())
    assert payload["embedding_dim"] == 2
    assert payload["values"] == values


def test_decode_to_stdout(tmp_path, capsys):
    blob_json = tmp_path / "blob.json"
    blob_json.write_text(json.dumps(
        {"embedding_dim": 1, "num_classes": 1, "values": [1.5, -2.5]}
    ))
    binary = tmp_path / "blob.ftl"
    assert main(["encode", "--in", str(blob_json), "--out", str(binary)]) == 0
    capsys.readouterr()
    assert main(["decode", "--in", str(binary)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["values"] == [1.5, -2.5]


def test_encode_rejects_incomplete_json(tmp_path, capsys):
    blob_json = tmp_path / "blob.json"
    blob_json.write_text(json.dumps({"values": [1.0, 2.0]}))
    rc = main(["encode", "--in", str(blob_json), "--out", str(tmp_path / "x.ftl")])
    assert rc == 2
    assert "missing key" in capsys.readouterr().err


def test_decode_rejects_corrupted_bytes(tmp_path, capsys):
    blob_json = tmp_path / "blob.json"
    blob_json.write_text(json.dumps(
        {"embedding_dim": 2, "num_classes": 2, "values": [0.0] * 6}
    ))
    binary = tmp_path / "blob.ftl"
    assert main(["encode", "--in", str(blob_json), "--out", str(binary)]) == 0
    raw = bytearray(binary.read_bytes())
    raw[-1] ^= 0x01
    binary.write_bytes(bytes(raw))
    assert main(["decode", "--in", str(binary)]) == 2
    assert "CorruptionError" in capsys.readouterr().err


def test_agent_device_id_must_select_a_shard(tmp_path, capsys):
    data = tmp_path / "toy.ds"
    assert main(["gen-data", *TINY, "--out", str(data)]) == 0
    rc = main([
        "agent", "--connect", "127.0.0.1:1", "--data", str(data),
        "--device-id", "5", "--num-devices", "2",
    ])
    assert rc == 1
    assert "--device-id" in capsys.readouterr().err


def test_resolved_config_is_logged(tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="fedhead.cli")
    data = tmp_path / "toy.ds"
    assert main(["gen-data", *TINY, "--seed", "9", "--out", str(data)]) == 0
    entries = [r.message for r in caplog.records if "resolved config" in r.message]
    assert entries, "every command must log its resolved configuration"
    payload = json.loads(entries[0].split("resolved config: ", 1)[1])
    assert payload["command"] == "gen-data"
    assert payload["seed"] == 9


def test_serve_and_agent_commands_run_rounds(tmp_path, capsys):
    data = tmp_path / "toy.ds"
    assert main(["gen-data", *TINY, "--seed", "2", "--out", str(data)]) == 0

    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    serve_rc = {}

    def run_server():
        serve_rc["rc"] = main([
            "serve", "--listen", f"127.0.0.1:{port}", "--policy", "count:1",
            "--dim", "8", "--classes", "2", "--rounds", "2",
            "--data", str(data),
        ])

    thread = threading.Thread(target=run_server, daemon=True)
    thread.start()
    time.sleep(0.1)
    # The agent outlives the server, runs out of reconnect attempts, and
    # reports a runtime error: that is the designed end for an orphan agent.
    agent_rc = main([
        "agent", "--connect", f"127.0.0.1:{port}", "--device-id", "0",
        "--data", str(data), "--num-devices", "1",
        "--sync-batch", "5", "--episodes", "2", "--lr", "0.05",
    ])
    thread.join(30.0)
    assert not thread.is_alive()
    assert serve_rc["rc"] == 0
    assert agent_rc == 2
    out, err = capsys.readouterr()
    assert "served 2 rounds" in out
    assert "fedhead: ConnectionError" in err
