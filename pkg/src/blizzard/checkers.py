"""Safety checkers: the five RAFT properties, acked-update loss, serializability.

:class:`SafetyChecker` is a RAFT observer shared by every node of a
simulation; it checks properties online as nodes report leadership, appends,
truncations and commits, and offline over the final logs.

:func:`find_serial_order` is a brute-force permutation search for small
histories: it looks for a total order that respects log order between every
non-commuting pair of updates and reproduces every observed response when
replayed through the reference model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from blizzard.logrep.entry import EntryKind


@dataclass
class Violation:
    prop: str
    detail: str

    def __str__(self) -> str:
        return f"{self.prop}: {self.detail}"


class SafetyChecker:
    """RAFT observer checking Election Safety, Leader Append-Only, Log Matching,
    Leader Completeness and State Machine Safety."""

    PROPS = ("election_safety", "leader_append_only", "log_matching", "leader_completeness",
             "state_machine_safety")

    def __init__(self, lookup: Callable[[int], object] | None = None):
        self.lookup = lookup  # node id -> RaftNode (None if down)
        self.leaders: dict[int, int] = {}
        self.entries: dict[tuple[int, int], tuple] = {}
        self.committed: dict[int, tuple[int, tuple]] = {}
        self.violations: list[Violation] = []
        self.commits = 0

    def _fail(self, prop: str, detail: str) -> None:
        self.violations.append(Violation(prop, detail))

    # ------------------------------------------------------------- observer

    def on_leader(self, node: int, term: int) -> None:
        prev = self.leaders.setdefault(term, node)
        if prev != node:
            self._fail("election_safety", f"term {term} has leaders {prev} and {node}")
        raft = self.lookup(node) if self.lookup else None
        if raft is None:
            return
        for idx, (t, ident) in self.committed.items():
            if idx < raft.first_index:
                continue  # compacted, hence committed locally
            if idx > raft.last_index or raft.term_at(idx) != t:
                self._fail("leader_completeness",
                           f"leader {node} term {term} lacks committed index {idx} (term {t})")
                return

    def on_append(self, node: int, index: int, term: int, ident: tuple) -> None:
        prev = self.entries.setdefault((index, term), ident)
        if prev != ident:
            self._fail("log_matching",
                       f"node {node}: ({index}, {term}) holds {ident}, elsewhere {prev}")

    def on_truncate(self, node: int, from_index: int, was_leader: bool) -> None:
        if was_leader:
            self._fail("leader_append_only", f"leader {node} truncated from {from_index}")

    def on_commit(self, node: int, index: int, term: int, ident: tuple) -> None:
        self.commits += 1
        prev = self.committed.setdefault(index, (term, ident))
        if prev != (term, ident):
            self._fail("state_machine_safety",
                       f"node {node} applied ({term}, {ident}) at {index}, another applied {prev}")

    # -------------------------------------------------------------- offline

    def check_logs(self, logs: dict[int, list[tuple[int, int, tuple]]]) -> None:
        """Log Matching over final logs: same (index, term) implies identical prefixes."""
        ids = sorted(logs)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                la = {idx: (t, ident) for idx, t, ident in logs[a]}
                lb = {idx: (t, ident) for idx, t, ident in logs[b]}
                common = sorted(set(la) & set(lb), reverse=True)
                matched = False
                for idx in common:
                    if la[idx][0] == lb[idx][0]:
                        matched = True
                    if matched and la[idx] != lb[idx]:
                        self._fail("log_matching", f"nodes {a},{b} differ at {idx} below a match")
                        break

    def check_acked(self, acked: set[tuple]) -> set[tuple]:
        """Acked updates missing from the committed log."""
        have = {ident for _, ident in self.committed.values()}
        lost = {a for a in acked if a not in have}
        for a in sorted(lost):
            self._fail("acked_loss", f"acknowledged update {a} never committed")
        return lost

    @property
    def ok(self) -> bool:
        return not self.violations


# ----------------------------------------------------------- serializability

@dataclass
class HistOp:
    """One operation for the oracle.

    ``response`` is None when the outcome is unknown.  ``log_index`` orders
    updates; reads have none.  ``optional`` ops may have taken effect or not.
    """

    name: str
    request: bytes
    response: bytes | None
    is_update: bool
    log_index: int | None = None
    optional: bool = False
    meta: dict = field(default_factory=dict)


def find_serial_order(ops: list[HistOp], model_factory: Callable[[], object],
                      commutes: Callable[[bytes, bytes], bool]) -> list[str] | None:
    """Return op names in a valid serial order, or None if none exists."""
    n = len(ops)
    # must_precede[j] = ops that have to come before j
    must = [set() for _ in range(n)]
    for i in range(n):
        for j in range(n):
            a, b = ops[i], ops[j]
            if i == j or not (a.is_update and b.is_update):
                continue
            if a.log_index is None or b.log_index is None:
                continue
            if a.log_index < b.log_index and not commutes(a.request, b.request):
                must[j].add(i)
    required = {i for i in range(n) if not ops[i].optional}

    def dfs(model, placed: list[int], used: set[int], skipped: set[int]):
        if required <= used and all(i in used or i in skipped for i in range(n)):
            return placed
        for i in range(n):
            if i in used or i in skipped:
                continue
            if not all(p in used or p in skipped for p in must[i]):
                continue
            m = model.copy()
            got = m.apply(ops[i].request)
            want = ops[i].response
            if want is None or bytes(got) == bytes(want):
                r = dfs(m, placed + [i], used | {i}, skipped)
                if r is not None:
                    return r
            if ops[i].optional:
                r = dfs(model, placed, used, skipped | {i})
                if r is not None:
                    return r
        return None

    order = dfs(model_factory(), [], set(), set())
    return None if order is None else [ops[i].name for i in order]


def history_from_run(records, commit_log: dict[int, tuple[int, tuple]],
                     payloads: dict[tuple[int, int], bytes]) -> list[HistOp]:
    """Oracle input from client records and the committed log.

    Every committed update becomes an op at its log index; its response is
    checked when exactly one committed entry carries the request's identity.
    Reads that returned OK become unordered ops.  Requests that never got an
    OK but may have been applied are covered by the committed log.
    """
    by_ident: dict[tuple[int, int], list[int]] = {}
    for idx, (_, ident) in commit_log.items():
        kind, cid, rid = ident
        if kind == EntryKind.UPDATE:
            by_ident.setdefault((cid, rid), []).append(idx)
    resp = {(r.client, r.rid): r for r in records}
    ops = []
    for key, idxs in sorted(by_ident.items(), key=lambda kv: kv[1][0]):
        rec = resp.get(key)
        single = len(idxs) == 1
        for idx in idxs:
            # an empty OK is the generic reply re-sent after a restart
            known = rec is not None and rec.status == 0 and single and len(rec.response) > 0
            response = rec.response if known else None
            ops.append(HistOp(f"u{key[0]}.{key[1]}@{idx}", payloads[key], response, True, idx))
    for r in records:
        if not r.is_update and r.status == 0:
            ops.append(HistOp(f"r{r.client}.{r.rid}", r.request, r.response, False))
    return ops
