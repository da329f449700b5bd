from __future__ import annotations

import os
import random
import subprocess
import sys

import pytest

from sa_gateway import corpus
from sa_gateway.cli import EXIT_OK, EXIT_PROTOCOL, EXIT_USAGE, main
from sa_gateway.cot import parse_cot, to_xml
from sa_gateway.frame_codec import decode_frame
from sa_gateway.gateway import decode_stream
from sa_gateway.mesh_sim import Topology
from sa_gateway.translator import operational_view


@pytest.fixture
def line_topology(tmp_path):
    path = tmp_path / "line.topo"
    path.write_text(Topology.line([0x01, 0x02, 0x03, 0x04, 0x05]).dumps())
    return path


def test_convert_location_roundtrip(tmp_path):
    src, frames, back = tmp_path / "in.xml", tmp_path / "out.bin", tmp_path / "back.xml"
    e = corpus.location("ALPHA", 45.677, -111.0429, 1461.0)
    src.write_bytes(to_xml(e))
    assert main(["convert", "cot2frame", str(src), str(frames), "--source", "0x0A"]) == EXIT_OK
    assert len(list(decode_stream(frames.read_bytes()))) == 1
    assert main(["convert", "frame2cot", str(frames), str(back)]) == EXIT_OK
    rebuilt = parse_cot(back.read_bytes())
    assert operational_view(rebuilt) == operational_view(e)
    assert rebuilt.uid.startswith("BT-000000000000000A-")


def test_convert_raw_archive_makes_28_frames(tmp_path):
    src, frames, back = tmp_path / "image.zip", tmp_path / "out.bin", tmp_path / "back.xml"
    src.write_bytes(random.Random(3).randbytes(6144))
    assert main(["convert", "cot2frame", str(src), str(frames)]) == EXIT_OK
    raws = list(decode_stream(frames.read_bytes()))
    assert len(raws) == 28
    assert all(decode_frame(r).header.frag_total == 28 for r in raws)
    assert main(["convert", "frame2cot", str(frames), str(back)]) == EXIT_OK
    assert parse_cot(back.read_bytes()).event_type.startswith("b-f-t")


def test_convert_malformed_xml_is_protocol_error(tmp_path, capsys):
    src = tmp_path / "bad.xml"
    src.write_text("<event uid='x'")
    assert main(["convert", "cot2frame", str(src), str(tmp_path / "o")]) == EXIT_PROTOCOL
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_convert_truncated_stream_is_protocol_error(tmp_path):
    src, frames = tmp_path / "image.zip", tmp_path / "out.bin"
    src.write_bytes(random.Random(4).randbytes(2000))
    assert main(["convert", "cot2frame", str(src), str(frames)]) == EXIT_OK
    data = frames.read_bytes()
    frames.write_bytes(data[: len(data) // 2])
    assert main(["convert", "frame2cot", str(frames), str(tmp_path / "x.xml")]) == EXIT_PROTOCOL


def test_convert_missing_input_is_usage_error(tmp_path):
    assert main(["convert", "cot2frame", str(tmp_path / "nope.xml"), str(tmp_path / "o")]) == EXIT_USAGE


def test_bad_address_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["convert", "cot2frame", "a", "b", "--source", "zz"])
    assert exc.value.code == EXIT_USAGE


def test_netscan_prints_one_row_per_node(line_topology, capsys):
    assert main(["netscan", "--topology", str(line_topology), "--origin", "0x01"]) == EXIT_OK
    out = capsys.readouterr().out
    for addr in ("0000000000000002", "0000000000000005"):
        assert addr in out.upper()


def test_netscan_unknown_origin(line_topology):
    assert main(["netscan", "--topology", str(line_topology), "--origin", "0x99"]) == EXIT_USAGE


def test_netscan_missing_topology(tmp_path):
    assert main(["netscan", "--topology", str(tmp_path / "none"), "--origin", "0x01"]) == EXIT_USAGE


def test_bench_csv_is_byte_stable(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.csv"
        argv = ["bench", "--scenario", "small", "--seed", "5", "--reps", "10", "--loss", "0.1", "--out", str(out)]
        assert main(argv) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].startswith(b"scenario,seed,rep,latency_s,frames\n")
    assert "mean_s" in capsys.readouterr().out


def test_simulate_writes_event_log(line_topology, tmp_path, capsys):
    scenario = tmp_path / "s.txt"
    scenario.write_text("at 0 send text 0x01 0x05 hello\nat 1 send text 0x05 0x01 back\n")
    log = tmp_path / "log.csv"
    argv = ["simulate", "--topology", str(line_topology), "--scenario", str(scenario), "--out", str(log)]
    assert main(argv) == EXIT_OK
    assert "delivered 2" in capsys.readouterr().out
    assert log.read_text().count("\n") > 2


def test_simulate_source_outside_topology(line_topology, tmp_path):
    scenario = tmp_path / "s.txt"
    scenario.write_text("at 0 send text 0x77 0x05 hello\n")
    assert main(["simulate", "--topology", str(line_topology), "--scenario", str(scenario)]) == EXIT_USAGE


def test_gateway_run_missing_config(tmp_path):
    assert main(["gateway", "run", "--config", str(tmp_path / "missing.conf")]) == EXIT_USAGE


def test_provision_writes_certificates(tmp_path):
    assert main(["provision", "--out", str(tmp_path / "pki"), "--clients", "2"]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "pki").iterdir())
    assert names == ["ca.key", "ca.pem", "client-00.key", "client-00.pem", "client-01.key", "client-01.pem", "server.key", "server.pem"]


def test_module_entry_point_exit_codes():
    env = dict(os.environ, SA_GATEWAY_LOG="ERROR")
    run = lambda *a: subprocess.run([sys.executable, "-m", "sa_gateway", *a], capture_output=True, env=env)
    assert run("--help").returncode == 0
    assert run("bogus").returncode == EXIT_USAGE
    assert run("bench").returncode == EXIT_USAGE
