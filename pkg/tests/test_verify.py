"""Offline checkers: brute-force witness search, conflict graph, integrity."""

from __future__ import annotations

from dataclasses import replace

import pytest

from helenos.config import ScenarioConfig, TaskType
from helenos.driver import run_in_process
from helenos.errors import VerificationError
from helenos.metrics import Commit
from helenos.model import (
    BucketId,
    Message,
    MsgId,
    SeqPair,
    TableId,
    bucket_of,
    inter_key,
    message_key,
    seqno_key,
    term_key,
)
from helenos.verify import (
    EffectOp,
    History,
    TxnEffect,
    brute_force_serializable,
    check_integrity,
    check_serializable,
    conflict_graph_serializable,
    state_from_snapshot,
)
from helenos.wire import Scheme

BX = BucketId(TableId.SEQNO, 0)
BY = BucketId(TableId.SEQNO, 1)
KX = seqno_key(10)
KY = seqno_key(11)


def write_skew_history() -> tuple[History, dict]:
    t1 = TxnEffect(1, "skew", 100, [
        EffectOp(1, BX, "read", KX, SeqPair(0, 0), 1),
        EffectOp(2, BY, "write_seq", KY, SeqPair(1, 0), 2),
    ])
    t2 = TxnEffect(2, "skew", 101, [
        EffectOp(1, BY, "read", KY, SeqPair(0, 0), 1),
        EffectOp(2, BX, "write_seq", KX, SeqPair(1, 0), 2),
    ])
    history = History(
        effects=[t1, t2],
        bucket_order={
            BX: [(1, 1, "read"), (2, 2, "write_seq")],
            BY: [(1, 2, "read"), (2, 1, "write_seq")],
        },
    )
    final = {KX: SeqPair(1, 0), KY: SeqPair(1, 0)}
    return history, final


def small_cfg(**kw) -> ScenarioConfig:
    base = dict(nodes=2, buckets=2, clients=2, tasks_per_client=1,
                user_population=4, keyword_domain=8, op_delay_ms=0,
                multicast_recipients=(2, 3), import_batch=(1, 3),
                scheme=Scheme.GLOCK, seed=1)
    base.update(kw)
    return ScenarioConfig(**base)


class TestBruteForce:
    def test_serial_run_witness_is_commit_order(self):
        artifacts = run_in_process(small_cfg(clients=2, seed=3))
        state = state_from_snapshot(artifacts.snapshot)
        verdict = brute_force_serializable(artifacts.history, state)
        assert verdict.ok
        commit_order = [e.txn_id for e in artifacts.history.effects]
        assert verdict.witness == commit_order

    def test_interleaved_run_has_witness(self, scheme):
        cfg = small_cfg(scheme=scheme, clients=3, seed=9)
        artifacts = run_in_process(cfg)
        assert len(artifacts.history.effects) <= 10
        state = state_from_snapshot(artifacts.snapshot)
        verdict = brute_force_serializable(artifacts.history, state)
        assert verdict.ok, verdict.detail
        assert sorted(verdict.witness) == sorted(e.txn_id for e in artifacts.history.effects)

    def test_write_skew_is_rejected(self):
        history, final = write_skew_history()
        verdict = brute_force_serializable(history, final)
        assert not verdict.ok

    def test_wrong_final_state_is_rejected(self):
        artifacts = run_in_process(small_cfg(seed=5))
        state = state_from_snapshot(artifacts.snapshot)
        state[seqno_key(999)] = SeqPair(42, 0)  # state the run never produced
        verdict = brute_force_serializable(artifacts.history, state)
        assert not verdict.ok

    def test_incr_seq_effect_asserts_predecessor(self):
        t = TxnEffect(1, "incr", 10, [EffectOp(1, BX, "incr_seq", KX, SeqPair(5, 0), 1)])
        history = History([t], {BX: [(1, 1, "incr_seq")]})
        ok = brute_force_serializable(history, {KX: SeqPair(5, 0)},
                                      initial_state={KX: SeqPair(4, 0)})
        assert ok.ok
        bad = brute_force_serializable(history, {KX: SeqPair(5, 0)})
        assert not bad.ok  # increment from (0,0) cannot yield (5,0)

    def test_limit_enforced(self):
        effects = [TxnEffect(i, "t", i, [EffectOp(1, BX, "read", KX, SeqPair(0, 0), i)])
                   for i in range(11)]
        history = History(effects, {})
        with pytest.raises(VerificationError):
            check_serializable(history, {}, brute_force_limit=10)


class TestConflictGraph:
    def test_write_skew_two_cycle(self):
        history, _final = write_skew_history()
        verdict = conflict_graph_serializable(history)
        assert not verdict.ok
        assert verdict.cycle is not None
        assert sorted(verdict.cycle) == [1, 2]

    def test_acyclic_history_accepted(self, scheme):
        cfg = small_cfg(scheme=scheme, clients=3, seed=13)
        artifacts = run_in_process(cfg)
        verdict = conflict_graph_serializable(artifacts.history)
        assert verdict.ok

    def test_read_read_is_not_a_conflict(self):
        t1 = TxnEffect(1, "r", 10, [EffectOp(1, BX, "read", KX, SeqPair(0, 0), 1)])
        t2 = TxnEffect(2, "r", 11, [EffectOp(1, BX, "read", KX, SeqPair(0, 0), 2)])
        history = History([t1, t2], {BX: [(1, 1, "read"), (2, 2, "read")]})
        verdict = conflict_graph_serializable(history)
        assert verdict.ok


class TestIntegrity:
    def test_empty_snapshot_passes(self):
        assert check_integrity({}).ok

    def test_seeded_runs_pass(self, scheme):
        cfg = small_cfg(scheme=scheme, clients=3, tasks_per_client=2, seed=17,
                        buckets=8)
        artifacts = run_in_process(cfg)
        verdict = check_integrity(state_from_snapshot(artifacts.snapshot))
        assert verdict.ok, verdict.violations[:5]

    def test_dangling_term_id_named(self):
        state = {term_key(1, 2): (MsgId(1, 9),)}
        verdict = check_integrity(state)
        assert not verdict.ok
        assert any("MsgId(recipient=1, seq=9)" in v for v in verdict.violations)

    def test_missing_inter_direction_detected(self):
        msg = Message(MsgId(2, 1), 1, 2, (3,), 1)
        state = {
            message_key(2): (msg,),
            inter_key(1, 2): (msg.id,),
            seqno_key(2): SeqPair(1, 0),
        }
        verdict = check_integrity(state)
        assert any("INTER:(2,1)" in v.replace(" ", "") for v in verdict.violations)

    def test_sequence_discipline_violations(self):
        msg = Message(MsgId(2, 5), 1, 2, (3,), 1)
        state = {
            message_key(2): (msg,),
            inter_key(1, 2): (msg.id,),
            inter_key(2, 1): (msg.id,),
            seqno_key(2): SeqPair(5, 5),  # live message at seq == deleted
        }
        verdict = check_integrity(state)
        assert any("seq outside" in v for v in verdict.violations)

    def test_deleted_above_current_detected(self):
        verdict = check_integrity({seqno_key(1): SeqPair(1, 2)})
        assert not verdict.ok


class TestHistoryBuilding:
    def test_aborted_attempt_ops_excluded(self):
        cfg = small_cfg(scheme=Scheme.OCC, clients=4, tasks_per_client=2,
                        seed=23, buckets=2, user_population=4,
                        multicast_recipients=(1, 2))
        artifacts = run_in_process(cfg)
        committed = {(e.txn_id) for e in artifacts.history.effects}
        commit_attempts = {
            e.txn_id: e.attempt for e in artifacts.events if isinstance(e, Commit)
        }
        assert committed == set(commit_attempts)
        for effect in artifacts.history.effects:
            assert effect.ops, "committed transaction recorded no operations"
