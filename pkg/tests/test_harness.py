import copy
from pathlib import Path

import pytest

from navhop.harness import (
    JobSpec,
    KillEvent,
    KillSchedule,
    Topology,
    baseline_products,
    build_report,
    check_events,
    kill_point_sweep,
    recompute_ratio,
    replay_verify,
    run_scenario,
    short_notice,
)

SCENARIOS = Path(__file__).parent.parent / "scenarios"


@pytest.fixture(scope="module")
def baseline():
    return baseline_products([JobSpec("1")])


@pytest.fixture(scope="module")
def clean_run():
    topo = Topology(nodes=["A", "B"], jobs=[JobSpec("1")], deadline_secs=30)
    return run_scenario(topo, None, KillSchedule([], name="no-fault"))


# ---------------------------------------------------------------- configuration


def test_load_topology_and_scenario():
    topo = Topology.load(SCENARIOS / "cluster.toml")
    assert topo.nodes == ["A", "B"] and topo.jobs[0].job_id == "1" and topo.grace_ms == 500
    hop = Topology.load(SCENARIOS / "hop_cluster.toml")
    assert hop.hop_other == "B" and hop.jobs[0].start_on == "A"
    sched = KillSchedule.load(SCENARIOS / "kill_after_second_ckpt.toml")
    (k,) = sched.events
    assert k.match == {"kind": "stage_mid", "job": "1", "stage": 6} and k.mode == "immediate"
    sched.validate(topo)


def test_schedule_validation():
    topo = Topology(nodes=["A"])
    with pytest.raises(ValueError):
        KillSchedule([KillEvent(target="Q", at_ms=5)]).validate(topo)
    with pytest.raises(ValueError):
        KillEvent(mode="gentle", at_ms=5)
    with pytest.raises(ValueError):
        KillEvent()
    with pytest.raises(ValueError):
        KillEvent(at_ms=5, match={"kind": "x"})
    with pytest.raises(ValueError):
        Topology(nodes=[])
    with pytest.raises(ValueError):
        Topology(nodes=["A", "A"])
    KillSchedule([KillEvent(target="scheduler", at_ms=1)]).validate(topo)


def test_kill_matching():
    k = KillEvent(match={"kind": "store_partial", "key_glob": "job-1/cmi/*"})
    assert k.matches({"kind": "store_partial", "key": "job-1/cmi/0000000001.cmi"})
    assert not k.matches({"kind": "store_partial", "key": "job-1/current.manifest"})
    assert not k.matches({"kind": "store_done", "key": "job-1/cmi/0000000001.cmi"})
    assert KillEvent(match={"kind": "stage_start", "stage": 3}).matches({"kind": "stage_start", "stage": 3, "job": "1"})


def test_sweep_catalogue_covers_required_points():
    names = [s.name for s in kill_point_sweep()]
    assert len(names) >= 20 and len(set(names)) == len(names)
    assert {f"stage-{k}-start" for k in range(9)} <= set(names)
    assert any("mid" in n for n in names)
    assert any("torn-upload" in n and "cmi" in n for n in names)
    assert any("manifest-pending" in n for n in names)


# ---------------------------------------------------------------- invariant checker


def ev(kind, job="1", node="A", run="A/1/1", **kw):
    return {"kind": kind, "job": job, "node": node, "run": run, **kw}


def clean_log():
    return [
        ev("start", seq=0, stage=0),
        ev("stage_start", stage=0),
        ev("stage_start", stage=1),
        ev("ckpt_cmi_uploaded", seq=1, stage=2, digest="d1", bytes=10),
        ev("ckpt_promoted", seq=1, stage=2),
        ev("ckpt_published", seq=1),
        ev("hop_request", dest="B"),
        ev("resume", node="B", run="B/2/1", seq=1, stage=2, digest="d1"),
        ev("hop_done", dest="B"),
        ev("stage_start", node="B", run="B/2/1", stage=2),
        ev("task_completed", node="B", run="B/2/1"),
    ]


def test_clean_log_has_no_violations():
    assert check_events(clean_log(), kill_free=True) == []


def test_duplicate_stage_event_detected():
    log = clean_log()
    log.insert(2, dict(log[1]))
    assert any("executed 2 times" in v for v in check_events(log, kill_free=True))


def test_post_hop_activity_detected():
    log = clean_log() + [ev("stage_start", stage=2)]
    out = check_events(log, kill_free=True)
    assert any("post-hop" in v for v in out)


def test_concurrent_runs_detected():
    log = clean_log()
    log.insert(3, ev("start", node="C", run="C/3/1", seq=0, stage=0))
    assert any("still active" in v for v in check_events(log, kill_free=False))


def test_restart_from_unuploaded_cmi_detected():
    log = clean_log()
    log[7] = ev("resume", node="B", run="B/2/1", seq=1, stage=2, digest="torn")
    assert any("never fully uploaded" in v for v in check_events(log, kill_free=True))


def test_restart_from_older_checkpoint_detected():
    log = clean_log()[:6] + [
        ev("ckpt_cmi_uploaded", seq=2, stage=4, digest="d2"),
        ev("ckpt_promoted", seq=2, stage=4),
        {"kind": "harness_kill", "node": "harness", "target": "A"},
        ev("restart", node="B", run="B/2/1", seq=1, stage=2, digest="d1"),
    ]
    assert any("latest promoted is seq 2" in v for v in check_events(log, kill_free=False))


def test_non_monotonic_sequence_detected():
    log = clean_log()[:6] + [ev("ckpt_cmi_uploaded", seq=1, stage=3, digest="dx")]
    assert any("not above" in v for v in check_events(log, kill_free=True))


def test_fresh_start_after_checkpoint_detected():
    log = clean_log()[:6] + [{"kind": "harness_kill", "node": "harness", "target": "A"},
                             ev("start", node="B", run="B/2/1", seq=0, stage=0)]
    assert any("fresh start" in v for v in check_events(log, kill_free=False))


def test_kill_ends_runs_on_that_node():
    log = clean_log()[:6] + [{"kind": "harness_kill", "node": "harness", "target": "A"},
                             ev("restart", node="B", run="B/2/1", seq=1, stage=2, digest="d1")]
    assert check_events(log, kill_free=False) == []


def test_recompute_ratio():
    log = [ev("stage_start", stage=s) for s in (0, 1, 2, 1, 2)]
    assert recompute_ratio(log) == pytest.approx(2 / 3)
    assert recompute_ratio([]) == 0.0


# ---------------------------------------------------------------- real runs


def test_no_fault_run(clean_run, baseline):
    verdict = replay_verify(clean_run, baseline)
    assert verdict.ok, verdict.violations
    job = clean_run.jobs["1"]
    assert job.status == "finished" and set(job.attempts.values()) == {1}
    assert clean_run.recompute_ratio == 0.0 and job.cmis_emitted == 2 and job.bytes_checkpointed > 0
    doc = clean_run.to_dict(include_events=False)
    assert "events" not in doc and doc["jobs"]["1"]["product_bytes"] == len(baseline["1"])


def test_doctored_report_is_rejected(clean_run, baseline):
    bad = copy.deepcopy(clean_run)
    i = next(i for i, e in enumerate(bad.events) if e["kind"] == "stage_start" and e["stage"] == 4)
    bad.events.insert(i + 1, dict(bad.events[i]))
    verdict = replay_verify(bad, baseline)
    assert not verdict.ok and any("stage 4 executed 2 times" in v for v in verdict.violations)

    wrong = copy.deepcopy(clean_run)
    wrong.jobs["1"].product = baseline["1"] + b"x"
    assert any("differs from baseline" in v for v in replay_verify(wrong, baseline).violations)


def test_single_node_no_fault():
    topo = Topology(nodes=["A"], jobs=[JobSpec("1")], deadline_secs=30)
    report = run_scenario(topo, None, KillSchedule([]))
    assert report.all_finished and report.recompute_ratio == 0.0


def test_kill_after_first_ckpt_publish(baseline):
    topo = Topology(nodes=["A", "B"], jobs=[JobSpec("1")], deadline_secs=30)
    sched = KillSchedule([KillEvent(match={"kind": "ckpt_published", "job": "1", "seq": 1})], name="after-ckpt-1")
    report = run_scenario(topo, None, sched)
    assert replay_verify(report, baseline).ok
    attempts = report.jobs["1"].attempts
    assert [attempts[s] for s in range(3)] == [1, 1, 1]
    finisher = [e["node"] for e in report.events if e["kind"] == "finished_published"]
    killed = report.kills[0]["target"]
    assert finisher and finisher[0] != killed


def test_short_notice_falls_back_to_previous_checkpoint(baseline):
    topo = Topology(nodes=["A", "B"], jobs=[JobSpec("1")], deadline_secs=30)
    report = run_scenario(topo, None, short_notice())
    assert replay_verify(report, baseline).ok
    exits = [e for e in report.events if e["kind"] == "harness_node_exit"]
    assert exits and exits[0]["code"] == 143
    restart = [e for e in report.events if e["kind"] == "restart"]
    assert restart and restart[0]["seq"] == 1
    assert report.jobs["1"].attempts[3] == 2


def test_scheduler_kill_is_survivable(baseline):
    topo = Topology(nodes=["A", "B"], jobs=[JobSpec("1"), JobSpec("2", seed=7)], deadline_secs=40)
    sched = KillSchedule([KillEvent(target="scheduler", match={"kind": "ckpt_promoted", "job": "1", "seq": 1})])
    report = run_scenario(topo, None, sched)
    verdict = replay_verify(report, {"1": baseline["1"], "2": baseline["1"]})
    assert verdict.ok, verdict.violations


def test_hop_variant_across_processes(baseline):
    topo = Topology.load(SCENARIOS / "hop_cluster.toml")
    report = run_scenario(topo, None, KillSchedule([]))
    assert replay_verify(report, baseline).ok
    nodes = [e["node"] for e in report.events if e["kind"] == "stage_start" and not e["label"].startswith("hop")]
    assert nodes == ["B", "B", "A", "A", "A", "B"]
