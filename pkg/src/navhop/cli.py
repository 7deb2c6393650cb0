"""Command line entry points: ``agent``, ``scheduler``, ``submit``, ``jobs`` and ``harness run``.

Every option can also come from an environment variable named
``NAVHOP_<OPTION>`` (dashes become underscores), e.g. ``NAVHOP_STORE_ROOT``.
A server prints one ``READY <name> <host>:<port>`` line on stdout once it is
listening.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading

from . import wire
from .agent import Agent, launch
from .colocation import default_registry, submit_job
from .errors import NavhopError
from .events import FileSink, SocketSink, EventSink
from .runtime import AppRegistry, RetryPolicy
from .scheduler import Registry, RemoteSchedulerClient, serve as serve_scheduler
from .store import LocalStore


def _apply_env(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        value = os.environ.get("NAVHOP_" + action.dest.upper())
        if value is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = value.lower() in ("1", "true", "yes", "on")
        else:
            action.default = action.type(value) if action.type else value
        action.required = False


def _ready(name: str, addr: tuple[str, int]) -> None:
    sys.stdout.write(f"READY {name} {wire.format_addr(addr)}\n")
    sys.stdout.flush()


def _store_hook(events: EventSink):
    def hook(point: str, key: str) -> None:
        namespace = key.split("/", 1)[0]
        job = namespace[4:] if namespace.startswith("job-") else None
        events.emit(f"store_{point}", key=key, job=job)

    return hook


def cmd_agent(args: argparse.Namespace) -> int:
    if args.events:
        events: EventSink = SocketSink(wire.parse_addr(args.events), args.node_id)
    elif args.event_log:
        events = FileSink(args.event_log, args.node_id)
    else:
        events = EventSink(args.node_id)
    store = LocalStore(args.store_root, hook=_store_hook(events) if args.events or args.event_log else None)
    full = default_registry(hop_other=args.hop_other, radius=args.radius)
    wanted = [a for a in args.apps.split(",") if a] if args.apps else full.names()
    registry = AppRegistry(full.get(name) for name in wanted)
    scheduler = RemoteSchedulerClient(wire.parse_addr(args.scheduler))
    host, port = wire.parse_addr(args.listen)
    agent, server = launch(
        args.node_id, store, registry, scheduler, host=host, port=port,
        events=events, max_concurrent_jobs=args.max_jobs, kill_grace_ms=args.kill_grace_ms,
        retry=RetryPolicy(retries=args.retries),
    )
    _ready(args.node_id, server.addr)
    events.emit("agent_up", host=agent.node.host, port=agent.node.port, apps=registry.names())
    agent.start_background(args.poll, args.poll_interval, args.heartbeat_secs)
    agent.stopped.wait()
    return 0


def cmd_scheduler(args: argparse.Namespace) -> int:
    store = LocalStore(args.store_root) if args.store_root else None
    registry = Registry(args.journal, lease_secs=args.lease_secs, store=store)
    host, port = wire.parse_addr(args.listen)
    server = serve_scheduler(registry, host, port)
    _ready("scheduler", server.addr)
    threading.Event().wait()
    return 0


def cmd_submit(args: argparse.Namespace) -> int:
    store = LocalStore(args.store_root)
    client = RemoteSchedulerClient(wire.parse_addr(args.scheduler))
    job = submit_job(store, client, args.job_id, args.app, args.seed, args.n_fine, args.n_coarse)
    print(json.dumps(job, sort_keys=True))
    return 0


def cmd_jobs(args: argparse.Namespace) -> int:
    client = RemoteSchedulerClient(wire.parse_addr(args.scheduler))
    print(json.dumps(client.list_jobs()))
    return 0


def cmd_harness_run(args: argparse.Namespace) -> int:
    from .harness import KillSchedule, Topology, baseline_products, replay_verify, run_scenario

    topology = Topology.load(args.topology)
    schedule = KillSchedule.load(args.scenario) if args.scenario else KillSchedule([])
    report = run_scenario(topology, topology.jobs, schedule, seed=args.seed)
    verdict = replay_verify(report, baseline_products(topology.jobs))
    doc = report.to_dict(include_events=not args.no_events)
    doc["verdict"] = {"ok": verdict.ok, "violations": verdict.violations}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for v in verdict.violations:
        print(f"violation: {v}", file=sys.stderr)
    return 0 if verdict.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navhop")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("agent", help="run a node agent")
    p.add_argument("--node-id", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--store-root", required=True)
    p.add_argument("--scheduler", required=True, help="scheduler host:port")
    p.add_argument("--apps", default="", help="comma-separated app names (default: all)")
    p.add_argument("--hop-other", default=None, help="data-host node id for the hop variant")
    p.add_argument("--radius", type=float, default=0.05)
    p.add_argument("--max-jobs", type=int, default=1)
    p.add_argument("--poll", action="store_true", help="pull jobs from the scheduler")
    p.add_argument("--poll-interval", type=float, default=0.05)
    p.add_argument("--heartbeat-secs", type=float, default=5.0)
    p.add_argument("--kill-grace-ms", type=int, default=500)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--events", default=None, help="harness event channel host:port")
    p.add_argument("--event-log", default=None, help="append events to this JSONL file")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("scheduler", help="run the job scheduler")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--journal", required=True)
    p.add_argument("--lease-secs", type=float, default=30.0)
    p.add_argument("--store-root", default=None, help="validate published blobs against this store")
    p.set_defaults(func=cmd_scheduler)

    p = sub.add_parser("submit", help="stage synthetic inputs and register a job")
    p.add_argument("--scheduler", required=True)
    p.add_argument("--store-root", required=True)
    p.add_argument("--job-id", required=True)
    p.add_argument("--app", default="colocation")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-fine", type=int, default=100)
    p.add_argument("--n-coarse", type=int, default=20)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("jobs", help="list jobs and statuses")
    p.add_argument("--scheduler", required=True)
    p.set_defaults(func=cmd_jobs)

    p = sub.add_parser("harness", help="preemption harness")
    hsub = p.add_subparsers(dest="harness_command", required=True)
    h = hsub.add_parser("run", help="run one scenario and verify it")
    h.add_argument("--topology", required=True)
    h.add_argument("--scenario", default=None)
    h.add_argument("--report", default=None)
    h.add_argument("--seed", type=int, default=7)
    h.add_argument("--no-events", action="store_true", help="omit the event log from the report")
    h.set_defaults(func=cmd_harness_run)

    for action in sub.choices.values():
        _apply_env(action)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except NavhopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
