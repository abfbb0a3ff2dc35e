import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from clusterlb.cli import hexdump, main, parse_hex
from clusterlb.control import decode_control

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def runner():
    return CliRunner()


def small_scenario(tmp_path, **extra):
    doc = {"mode": "in-network", "concurrency": 50, "total_requests": 100, "seed": 42, **extra}
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_hexdump_parse_roundtrip():
    data = bytes(range(40))
    assert parse_hex(hexdump(data)) == data
    assert parse_hex("0x5034 # magic\n01") == b"\x50\x34\x01"


def test_simulate_writes_csvs(runner, tmp_path):
    out = tmp_path / "out"
    res = runner.invoke(main, ["simulate", "--scenario", str(small_scenario(tmp_path)), "--out", str(out)])
    assert res.exit_code == 0, res.output
    nodes = (out / "nodes.csv").read_text().splitlines()
    assert nodes[0] == "node_id,requests" and len(nodes) == 11
    assert sum(int(line.split(",")[1]) for line in nodes[1:]) == 100
    assert (out / "metrics.csv").read_text().startswith("metric,value\n")
    assert "completed_requests" in res.output


def test_simulate_same_seed_identical(runner, tmp_path):
    scn = small_scenario(tmp_path)
    for d in ("a", "b"):
        runner.invoke(main, ["simulate", "--scenario", str(scn), "--out", str(tmp_path / d)])
    for name in ("nodes.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_seed_flag_overrides(runner, tmp_path):
    scn = small_scenario(tmp_path)
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--out", str(tmp_path / "a")])
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--seed", "7", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "nodes.csv").read_bytes() != (tmp_path / "b" / "nodes.csv").read_bytes()


def test_simulate_text_format(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--scenario", str(small_scenario(tmp_path)),
                               "--out", str(tmp_path), "--format", "text"])
    assert res.exit_code == 0
    assert (tmp_path / "report.txt").read_text().startswith("metrics:\n")


def test_simulate_missing_file(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--scenario", str(tmp_path / "nope.yaml")])
    assert res.exit_code != 0
    assert "nope.yaml" in res.output


def test_simulate_yaml_error_has_line(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mode: in-network\nconcurrency: [1,\n")
    res = runner.invoke(main, ["simulate", "--scenario", str(bad)])
    assert res.exit_code != 0
    assert "bad.yaml:3" in res.output


def test_simulate_unknown_key(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--scenario", str(small_scenario(tmp_path, bogus=1))])
    assert res.exit_code != 0 and "bogus" in res.output


def test_simulate_topology_file(runner, tmp_path):
    from clusterlb.netsim import default_topology
    topo = tmp_path / "topo.yaml"
    topo.write_text(yaml.safe_dump(default_topology(4).to_dict()))
    res = runner.invoke(main, ["simulate", "--scenario", str(small_scenario(tmp_path)),
                               "--topology", str(topo), "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert len((tmp_path / "nodes.csv").read_text().splitlines()) == 5


def test_simulate_state_change_scenario(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--scenario", str(SCENARIOS / "scale_down.yaml"),
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    metrics = dict(l.split(",", 1) for l in (tmp_path / "metrics.csv").read_text().splitlines())
    assert metrics["removed_node_selections"] == "0"
    assert float(metrics["registry_update_latency"]) <= 2.5


def test_env_var_seed_and_flag_precedence(runner, tmp_path):
    scn = small_scenario(tmp_path)
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--seed", "9", "--out", str(tmp_path / "flag")])
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--out", str(tmp_path / "env")],
                  env={"CLUSTERLB_SIMULATE_SEED": "9"})
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--seed", "42", "--out", str(tmp_path / "both")],
                  env={"CLUSTERLB_SIMULATE_SEED": "9"})
    runner.invoke(main, ["simulate", "--scenario", str(scn), "--out", str(tmp_path / "plain")])
    read = lambda d: (tmp_path / d / "nodes.csv").read_bytes()
    assert read("flag") == read("env")
    assert read("both") == read("plain") != read("env")


def test_control_encode_three_replicas(runner, tmp_path):
    out = tmp_path / "ctl.hex"
    res = runner.invoke(main, ["control-encode", "--state", str(SCENARIOS / "state.yaml"), "--out", str(out)])
    assert res.exit_code == 0
    assert res.output.startswith("0000: 50 34 01 03")
    assert "24 bytes, roundtrip: PASS" in res.output
    assert len(decode_control(bytes.fromhex(out.read_text())).replica_addrs) == 3


def test_control_encode_too_many(runner, tmp_path):
    doc = yaml.safe_load((SCENARIOS / "state.yaml").read_text())
    doc["replicas"] = [{"pod_id": f"p{i}", "node_addr": f"10.0.2.{i}"} for i in range(1, 12)]
    path = tmp_path / "big.yaml"
    path.write_text(yaml.safe_dump(doc))
    res = runner.invoke(main, ["control-encode", "--state", str(path)])
    assert res.exit_code != 0 and "11" in res.output
    assert runner.invoke(main, ["control-encode", "--state", str(path), "--max-replicas", "11"]).exit_code == 0


def test_control_decode_fixture(runner):
    res = runner.invoke(main, ["control-decode", "--in", str(FIXTURES / "control_10_replicas.hex")])
    assert res.exit_code == 0
    assert "replica_addrs[9]" in res.output and "roundtrip: PASS" in res.output


def test_control_decode_corrupt_names_field(runner):
    res = runner.invoke(main, ["control-decode", "--hex", "0000017580c000020a00500a000001"])
    assert res.exit_code != 0
    assert "BadMagic" in res.output and "field magic at offset 0" in res.output
    res = runner.invoke(main, ["control-decode", "--hex", "5034010375"])
    assert "TruncatedControl" in res.output and "offset" in res.output
    res = runner.invoke(main, ["control-decode", "--hex", "zz"])
    assert res.exit_code != 0 and "invalid hex" in res.output


def test_control_decode_needs_one_input(runner):
    assert runner.invoke(main, ["control-decode"]).exit_code == 2


def test_routes_check(runner, tmp_path):
    res = runner.invoke(main, ["routes-check", "--routes", str(SCENARIOS / "routes.txt")])
    assert res.exit_code == 0 and "4 routes OK" in res.output
    bad = tmp_path / "bad.txt"
    bad.write_text("0.0.0.0/0 1.1.1.1 1\n10.0.0.1/8 1.1.1.1 2\n")
    res = runner.invoke(main, ["routes-check", "--routes", str(bad)])
    assert res.exit_code != 0 and "line 2" in res.output


def test_agent_unreadable_state(runner, tmp_path):
    res = runner.invoke(main, ["agent", "--state", str(tmp_path / "missing.yaml"), "--max-polls", "0"])
    assert res.exit_code != 0 and "missing.yaml" in res.output


def test_agent_process_sends_and_picks_up_edit(tmp_path):
    """Run the real entry point against a UDP socket and edit the state file mid-run."""
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(10)
    port = rx.getsockname()[1]
    state = tmp_path / "state.yaml"
    doc = yaml.safe_load((SCENARIOS / "state.yaml").read_text())
    state.write_text(yaml.safe_dump(doc))

    proc = subprocess.Popen(
        [sys.executable, "-m", "clusterlb.cli", "agent", "--state", str(state),
         "--dataplane", f"127.0.0.1:{port}", "--poll-interval", "0.2", "--max-polls", "40"],
        stderr=subprocess.PIPE, text=True, env={**os.environ, "PYTHONUNBUFFERED": "1"},
    )
    try:
        first, _ = rx.recvfrom(2048)
        assert decode_control(first).replica_count == 3
        doc["replicas"][3]["phase"] = "Running"
        edited_at = time.monotonic()
        state.write_text(yaml.safe_dump(doc))
        second, _ = rx.recvfrom(2048)
        assert time.monotonic() - edited_at < 0.2 + 1.0
        assert decode_control(second).replica_count == 4
    finally:
        proc.wait(timeout=30)
        rx.close()
    log = proc.stderr.read()
    assert log.count("control_sent") == 2
    assert "generation=2" in log
