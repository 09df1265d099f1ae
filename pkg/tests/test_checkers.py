from blizzard.checkers import HistOp, SafetyChecker, find_serial_order
from blizzard.libds import codec
from blizzard.libds.models import make_model

OK = codec.kv_response(codec.KVStatus.OK)


def kv():
    return make_model("kv")


def commutes(a, b):
    return codec.decode_kv(a).key != codec.decode_kv(b).key


def put(name, v, idx, resp=OK):
    return HistOp(name, codec.kv_put(b"x", v), resp, True, idx)


def get(name, v):
    resp = codec.kv_response(codec.KVStatus.OK, v) if v else codec.kv_response(
        codec.KVStatus.NOT_FOUND)
    return HistOp(name, codec.kv_get(b"x"), resp, False)


def test_read_placed_between_writes():
    ops = [put("w1", b"1", 1), put("w2", b"2", 2), get("r", b"1")]
    assert find_serial_order(ops, kv, commutes) == ["w1", "r", "w2"]


def test_conflicting_writes_keep_log_order():
    # a delete reporting NOT_FOUND must have run before the put, which the log forbids
    missing = codec.kv_response(codec.KVStatus.NOT_FOUND)
    ops = [put("w", b"1", 1), HistOp("d", codec.kv_del(b"x"), missing, True, 2)]
    assert find_serial_order(ops, kv, commutes) is None
    ops[1].log_index = 0
    assert find_serial_order(ops, kv, commutes) == ["d", "w"]


def test_impossible_read_rejected():
    assert find_serial_order([put("w", b"1", 1), get("r", b"9")], kv, commutes) is None


def test_optional_op_may_be_skipped():
    ops = [put("w1", b"1", 1), HistOp("w2", codec.kv_put(b"x", b"2"), None, True, 2,
                                      optional=True), get("r", b"1")]
    assert find_serial_order(ops, kv, commutes) is not None


def test_election_safety_violation():
    c = SafetyChecker()
    c.on_leader(0, 3)
    c.on_leader(1, 3)
    assert [v.prop for v in c.violations] == ["election_safety"]


def test_state_machine_safety_and_acked_loss():
    c = SafetyChecker()
    c.on_commit(0, 5, 2, (1, 1, 1))
    c.on_commit(1, 5, 3, (1, 1, 2))
    assert c.check_acked({(1, 1, 1), (1, 9, 9)}) == {(1, 9, 9)}
    assert {v.prop for v in c.violations} == {"state_machine_safety", "acked_loss"}


def test_log_matching_offline():
    c = SafetyChecker()
    a = [(1, 1, (0, 0, 0)), (2, 1, (1, 1, 1)), (3, 2, (1, 1, 2))]
    b = [(1, 1, (0, 0, 0)), (2, 1, (1, 1, 9)), (3, 2, (1, 1, 2))]
    c.check_logs({0: a, 1: a})
    assert c.ok
    c.check_logs({0: a, 1: b})
    assert [v.prop for v in c.violations] == ["log_matching"]


def test_leader_append_only():
    c = SafetyChecker()
    c.on_truncate(0, 4, was_leader=False)
    assert c.ok
    c.on_truncate(0, 4, was_leader=True)
    assert not c.ok
