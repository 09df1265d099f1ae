import random

import pytest

from blizzard import crashfuzz as CF
from blizzard.logrep.entry import EntryKind


@pytest.mark.parametrize("service", ["kv", "graph", "vote"])
def test_exhaustive_three_ops(service):
    rep = CF.exhaustive(CF.FuzzConfig(service=service, ops=3), seed=1)
    assert rep.ok, rep.summary()
    assert any(t.crashed for t in rep.trials)
    # the last crash point is past the whole run, so nothing crashed there
    assert not rep.trials[-1].crashed


@pytest.mark.parametrize("service", ["kv", "graph", "vote"])
def test_seeded_with_double_crash(service):
    rep = CF.seeded(CF.FuzzConfig(service=service), range(15))
    assert rep.ok, rep.summary()
    assert len(rep.trials) == 15


def test_crash_free_trial_commits_every_update():
    cfg = CF.FuzzConfig("kv")
    ops = CF.fuzz_ops("kv", random.Random(3), 6)
    h_base = CF._Harness(cfg).base_image()
    t = CF.run_trial(cfg, ops, h_base, None, "flush")
    assert not t.crashed and not t.problems
    assert t.committed_updates == sum(k == EntryKind.UPDATE for k, _ in ops)


def test_crash_before_anything_persists_loses_nothing_acked():
    cfg = CF.FuzzConfig("kv")
    ops = CF.fuzz_ops("kv", random.Random(4), 4)
    t = CF.run_trial(cfg, ops, CF._Harness(cfg).base_image(), 0, "reverse")
    assert t.crashed and not t.problems
    assert t.committed_updates == 0


def test_persist_count_is_deterministic():
    cfg = CF.FuzzConfig("graph")
    ops = CF.fuzz_ops("graph", random.Random(5), 5)
    assert CF.count_persists(cfg, ops) == CF.count_persists(cfg, ops) > 0


def test_skipping_the_undo_fence_is_caught():
    # without the fence between undo record and in-place write, some crash
    # point must leave a state that no committed-prefix replay explains
    found = False
    for seed in range(6):
        rep = CF.exhaustive(CF.FuzzConfig("kv", ops=3, skip_undo_fence=True,
                                          persist_orders=("reverse",)), seed=seed)
        if not rep.ok:
            found = True
            break
    assert found


def test_unknown_service_rejected():
    with pytest.raises(ValueError):
        CF.fuzz_ops("echo", random.Random(0), 1)
