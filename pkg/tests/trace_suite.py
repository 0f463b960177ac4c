"""Derived single-client transaction traces, runnable under any scheme.

Each trace is a function taking a fresh Rig (see test_workload); the
acceptance suite replays all of them per scheme against stated expected
values.
"""

from __future__ import annotations

from helenos.model import MsgId, SeqPair, inter_key, message_key, seqno_key, term_key

A, B_USER, C = 1, 2, 3
W1, W2 = 10, 11


def trace_send_full_effect(rig):
    mid = rig.send(A, B_USER, [W1, W2])
    assert mid == MsgId(B_USER, 1)
    state = rig.state()
    assert state[seqno_key(B_USER)] == SeqPair(1, 0)
    assert [m.id for m in state[message_key(B_USER)]] == [mid]
    assert state[inter_key(A, B_USER)] == (mid,)
    assert state[inter_key(B_USER, A)] == (mid,)
    assert state[term_key(B_USER, W1)] == (mid,)
    assert state[term_key(B_USER, W2)] == (mid,)
    assert len(state) == 6


def trace_send_increments_sequence(rig):
    rig.send(A, B_USER, [W1])
    assert rig.send(C, B_USER, [W2]) == MsgId(B_USER, 2)


def trace_association_after_send(rig):
    rig.send(A, B_USER, [W1, W2])
    ids, pairs = rig.association(A, B_USER)
    assert ids == [MsgId(B_USER, 1), MsgId(B_USER, 1)]
    assert pairs == [SeqPair(0, 0), SeqPair(1, 0)]


def trace_association_symmetry(rig):
    rig.send(A, B_USER, [W1])
    fwd_ids, fwd_pairs = rig.association(A, B_USER)
    rev_ids, rev_pairs = rig.association(B_USER, A)
    assert sorted(fwd_ids) == sorted(rev_ids)
    assert fwd_pairs == list(reversed(rev_pairs))


def trace_keyword_under_recipient(rig):
    rig.send(A, B_USER, [W1, W2])
    assert rig.by_keyword(B_USER, {W1}) == {MsgId(B_USER, 1)}
    assert rig.by_keyword(A, {W1}) == set()


def trace_conversation_both_directions(rig):
    rig.send(A, B_USER, [W1])
    assert rig.conversation(A, B_USER) == [MsgId(B_USER, 1)]
    assert rig.conversation(B_USER, A) == [MsgId(B_USER, 1)]


def trace_get_messages_resolves_sender(rig):
    rig.send(A, B_USER, [W1, W2])
    (msg,) = rig.get_messages([MsgId(B_USER, 1)])
    assert msg.sender == A and msg.content == (W1, W2)


def trace_index_sorts_by_timestamp(rig):
    rig.send(A, B_USER, [W1])
    rig.send(C, B_USER, [W2])
    msgs, pairs = rig.index({B_USER: {W1, W2}})
    assert [m.id.seq for m in msgs] == [1, 2]
    assert msgs[0].timestamp < msgs[1].timestamp
    assert pairs == [SeqPair(2, 0)]


def trace_index_crops_after_sort(rig):
    for _ in range(5):
        rig.send(A, B_USER, [W1])
    msgs, _ = rig.index({B_USER: {W1}}, cap=3)
    assert [m.id.seq for m in msgs] == [1, 2, 3]


def trace_reset_cutoff(rig):
    rig.seed_seq(A, SeqPair(7, 2))
    assert rig.reset_cutoff(A) == SeqPair(7, 2)
    assert rig.state()[seqno_key(A)] == SeqPair(7, 7)


def trace_remove_clears_all_but_seq(rig):
    rig.send(A, B_USER, [W1, W2])
    (msg,) = rig.get_messages([MsgId(B_USER, 1)])
    rig.remove([msg])
    assert rig.state() == {seqno_key(B_USER): SeqPair(1, 0)}


def trace_import_raises_current(rig):
    from helenos.model import Message

    msg = Message(MsgId(B_USER, 3), A, B_USER, (W1,), 50)
    assert rig.import_batch([msg]) == 1
    assert rig.state()[seqno_key(B_USER)] == SeqPair(3, 0)


def trace_import_cutoff_skips(rig):
    from helenos.model import Message

    rig.seed_seq(B_USER, SeqPair(5, 5))
    msg = Message(MsgId(B_USER, 3), A, B_USER, (W1,), 50)
    assert rig.import_batch([msg]) == 0
    assert message_key(B_USER) not in rig.state()


def trace_import_duplicate_skips(rig):
    from helenos.model import Message

    msg = Message(MsgId(B_USER, 3), A, B_USER, (W1,), 50)
    assert rig.import_batch([msg]) == 1
    assert rig.import_batch([msg]) == 0


def trace_clear_inbox_three_txns(rig):
    for sender in (A, C, 4):
        rig.send(sender, B_USER, [W1])
    pre = rig.reset_cutoff(B_USER)
    assert pre == SeqPair(3, 0)
    ids = [MsgId(B_USER, s) for s in range(pre.deleted + 1, pre.current + 1)]
    msgs = rig.get_messages(ids)
    assert len(msgs) == 3
    rig.remove(msgs)
    assert rig.state() == {seqno_key(B_USER): SeqPair(3, 3)}


DERIVED_TRACES = [
    ("send full effect", trace_send_full_effect),
    ("send increments sequence", trace_send_increments_sequence),
    ("association after send", trace_association_after_send),
    ("association symmetry", trace_association_symmetry),
    ("keyword under recipient", trace_keyword_under_recipient),
    ("conversation both directions", trace_conversation_both_directions),
    ("get messages resolves sender", trace_get_messages_resolves_sender),
    ("index sorts by timestamp", trace_index_sorts_by_timestamp),
    ("index crops after sort", trace_index_crops_after_sort),
    ("reset cutoff", trace_reset_cutoff),
    ("remove clears all but seq", trace_remove_clears_all_but_seq),
    ("import raises current", trace_import_raises_current),
    ("import cutoff skips", trace_import_cutoff_skips),
    ("import duplicate skips", trace_import_duplicate_skips),
    ("clear inbox three txns", trace_clear_inbox_three_txns),
]
