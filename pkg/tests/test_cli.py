import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from navhop import wire
from navhop.cli import build_parser
from navhop.harness import _read_ready

ROOT = Path(__file__).parent.parent
SCENARIOS = ROOT / "scenarios"


def cli(*args, env=None, timeout=120):
    return subprocess.run([sys.executable, "-m", "navhop.cli", *args], capture_output=True, text=True,
                          timeout=timeout, env={**os.environ, **(env or {})})


def spawn(*args, env=None):
    p = subprocess.Popen([sys.executable, "-m", "navhop.cli", *args], stdout=subprocess.PIPE,
                         stderr=subprocess.DEVNULL, env={**os.environ, **(env or {})})
    name, addr = _read_ready(p, 20)
    return p, addr


def test_env_overrides(monkeypatch):
    monkeypatch.setenv("NAVHOP_STORE_ROOT", "/tmp/x")
    monkeypatch.setenv("NAVHOP_MAX_JOBS", "3")
    monkeypatch.setenv("NAVHOP_POLL", "true")
    args = build_parser().parse_args(["agent", "--node-id", "A", "--scheduler", "127.0.0.1:1"])
    assert (args.store_root, args.max_jobs, args.poll) == ("/tmp/x", 3, True)


def test_scheduler_agent_submit_jobs(tmp_path):
    store = str(tmp_path / "store")
    sched, saddr = spawn("scheduler", "--journal", str(tmp_path / "journal"), "--store-root", store)
    agent = None
    try:
        s = wire.format_addr(saddr)
        out = cli("submit", "--scheduler", s, "--store-root", store, "--job-id", "1")
        assert out.returncode == 0 and json.loads(out.stdout)["status"] == "new"
        agent, _ = spawn("agent", "--node-id", "A", "--scheduler", s, "--poll", "--poll-interval", "0.02",
                         env={"NAVHOP_STORE_ROOT": store})
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            jobs = json.loads(cli("jobs", "--scheduler", s).stdout)
            if jobs == [["1", "finished"]]:
                break
            time.sleep(0.1)
        assert jobs == [["1", "finished"]]
        assert (tmp_path / "store" / "job-1" / "product" / "match.txt").read_bytes() == \
            (ROOT / "tests" / "fixtures" / "seed7_match.txt").read_bytes()
    finally:
        for p in (agent, sched):
            if p is not None:
                p.kill()
                p.wait()
                p.stdout.close()


def test_harness_run_cli_passes(tmp_path):
    report = tmp_path / "report.json"
    out = cli("harness", "run", "--topology", str(SCENARIOS / "cluster.toml"),
              "--scenario", str(SCENARIOS / "kill_after_second_ckpt.toml"), "--report", str(report))
    assert out.returncode == 0, out.stderr
    doc = json.loads(report.read_text())
    assert doc["verdict"] == {"ok": True, "violations": []}
    assert doc["jobs"]["1"]["attempts"]["6"] == 2 and doc["events"]


def test_harness_run_cli_fails_on_deadline(tmp_path):
    topo = tmp_path / "tight.toml"
    topo.write_text('[cluster]\nnodes = ["A"]\ndeadline_secs = 0.0\n\n[[jobs]]\njob_id = "1"\n')
    out = cli("harness", "run", "--topology", str(topo), "--no-events")
    assert out.returncode == 1
    doc = json.loads(out.stdout)
    assert "events" not in doc and not doc["verdict"]["ok"]
    assert "violation: scenario deadline exceeded" in out.stderr


def test_cli_reports_errors_with_exit_2(tmp_path):
    sched, saddr = spawn("scheduler", "--journal", str(tmp_path / "journal"))
    try:
        s = wire.format_addr(saddr)
        args = ["submit", "--scheduler", s, "--store-root", str(tmp_path / "st"), "--job-id", "1"]
        assert cli(*args).returncode == 0
        dup = cli(*args)
        assert dup.returncode == 2 and "already exists" in dup.stderr
    finally:
        sched.kill()
        sched.wait()
        sched.stdout.close()
