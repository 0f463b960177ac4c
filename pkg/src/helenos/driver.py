"""Closed-loop client driver: spawns clients, collects events, snapshots.

Clients run on threads, one per client, sharing nothing but the transport
endpoints and the event sink. The serial-baseline scheme is the one
exception: its clients are interleaved round-robin on a single thread at
task granularity, which keeps the global lock's arrival order (and hence
the final state) reproducible from the seed alone.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .cc import TxnContext
from .config import ScenarioConfig
from .errors import HelenosError
from .metrics import EventSink, MetricsReport, aggregate
from .model import RingLayout
from .store import merge_snapshots
from .transport import Transport, unwrap_reply
from .verify import History, build_history
from .wire import Op, Scheme, control_request

_BACKOFF_SALT = 0x5EED_B0FF


@dataclass
class RunArtifacts:
    config: ScenarioConfig
    report: MetricsReport
    events: list
    history: History
    snapshot: bytes

    @property
    def commits(self) -> int:
        return self.report.commits

    def mean_ops_per_txn(self) -> float:
        if not self.history.effects:
            return 0.0
        total = sum(len(e.ops) for e in self.history.effects)
        return total / len(self.history.effects)


def _make_runtime(cfg: ScenarioConfig, layout: RingLayout, transport: Transport,
                  client_id: int, sink: EventSink):
    from .workload import ClientRuntime

    ctx = TxnContext(
        transport=transport,
        layout=layout,
        scheme=cfg.scheme,
        buckets_per_table=cfg.buckets,
        delay_ms=cfg.op_delay_ms,
        client_id=client_id,
        retry_limit=cfg.retry_limit,
        backoff_base_ms=cfg.backoff_base_ms,
        backoff_cap_ms=cfg.backoff_cap_ms,
        backoff_rng=random.Random((cfg.seed ^ client_id) + _BACKOFF_SALT),
        sink=sink,
    )
    return ClientRuntime(ctx=ctx, cfg=cfg, rng=random.Random(cfg.seed ^ client_id))


def run_clients(
    cfg: ScenarioConfig,
    layout: RingLayout,
    transport_for: Callable[[int], Transport],
    sink: EventSink,
) -> int:
    """Execute clients x tasks-per-client tasks; returns the task count."""
    from .workload import pick_task

    if cfg.scheme is Scheme.GLOCK:
        return _run_serial(cfg, layout, transport_for, sink)

    errors: list[BaseException] = []
    barrier = threading.Barrier(cfg.clients)
    tasks_done = [0] * cfg.clients

    def client_main(client_id: int) -> None:
        runtime = _make_runtime(cfg, layout, transport_for(client_id), client_id, sink)
        barrier.wait()
        sink.client_start(runtime.ctx.clock(), client_id)
        try:
            for _ in range(cfg.tasks_per_client):
                runtime.run_task(pick_task(cfg, runtime.rng))
                tasks_done[client_id] += 1
        except BaseException as exc:
            errors.append(exc)
            raise
        finally:
            sink.client_end(runtime.ctx.clock(), client_id)

    threads = [
        threading.Thread(target=client_main, args=(i,), daemon=True, name=f"client{i}")
        for i in range(cfg.clients)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise HelenosError(f"client failed: {errors[0]!r}") from errors[0]
    return sum(tasks_done)


def _run_serial(cfg, layout, transport_for, sink: EventSink) -> int:
    """Deterministic round-robin schedule for the serial-baseline scheme."""
    from .workload import pick_task

    runtimes = [
        _make_runtime(cfg, layout, transport_for(i), i, sink)
        for i in range(cfg.clients)
    ]
    for runtime in runtimes:
        sink.client_start(runtime.ctx.clock(), runtime.ctx.client_id)
    tasks_done = 0
    for _round in range(cfg.tasks_per_client):
        for runtime in runtimes:
            runtime.run_task(pick_task(cfg, runtime.rng))
            tasks_done += 1
    for runtime in runtimes:
        sink.client_end(runtime.ctx.clock(), runtime.ctx.client_id)
    return tasks_done


def cluster_snapshot(transport: Transport, layout: RingLayout) -> bytes:
    """Merged, deterministic dump of every node's table state."""
    dumps = []
    for i, node_id in enumerate(layout.node_ids):
        req = control_request(i + 1, Op.SNAPSHOT)
        dumps.append(unwrap_reply(i + 1, transport.request(node_id, req)))
    return merge_snapshots(dumps)


def run_scenario(
    cfg: ScenarioConfig,
    transport_for: Callable[[int], Transport],
    layout: RingLayout,
    snapshot_transport: Transport | None = None,
) -> RunArtifacts:
    """One full run: clients, aggregation, history, and final snapshot."""
    started = time.monotonic_ns()
    sink = EventSink()
    run_clients(cfg, layout, transport_for, sink)
    events = sink.events()
    total_s = (time.monotonic_ns() - started) / 1e9
    report = aggregate(events, total_time_s=total_s)
    report.check_invariants()
    snap_transport = snapshot_transport if snapshot_transport is not None else transport_for(0)
    snapshot = cluster_snapshot(snap_transport, layout)
    return RunArtifacts(cfg, report, events, build_history(events), snapshot)


def run_in_process(cfg: ScenarioConfig) -> RunArtifacts:
    """Convenience: run a scenario against a fresh loopback cluster."""
    from .transport import LoopbackCluster

    cluster = LoopbackCluster(cfg.node_ids())
    return run_scenario(cfg, lambda _i: cluster, cluster.layout)
