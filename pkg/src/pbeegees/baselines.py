"""Reference replicas: Fast-HotStuff, Chained HotStuff, naive validation.

The HotStuff-family replicas are built at the fidelity needed for latency
comparison: happy path, timeout-driven view change that extends the highest
known certificate, and the consecutive-view commit rules (two-chain for
Fast-HotStuff, three-chain for Chained HotStuff).  Locking-rule corner
cases are out of scope; these replicas are only run against crash-style
faults, never byzantine ones.

The naive replica reuses the full pBeeGees block format but validates a
proposal in isolation (no traceback) and selects view-change parents without
checking them, which is exactly the behaviour the invalid-block attack
exploits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .chain import (
    NULL_ID,
    Block,
    BlockId,
    BlockStore,
    QuorumCert,
    TimeoutMsg,
    UnknownBlock,
    Vote,
    VoteType,
    encode_qc_ref,
    encode_vote,
    genesis_qc,
    leader_of,
    make_block,
    make_qc,
    make_tc,
    make_vote,
    quorum,
)
from .crypto import Keystore, Signature, digest
from .events import EventKind, Outbox
from .replica import NotLeader, PbgReplica, ProtocolConfig
from .validation import Validator


class BaselineKind(Enum):
    FAST_HOTSTUFF = "fhs"
    CHAINED_HOTSTUFF = "chs"
    NAIVE_BEEGEES = "naive"


# --- commit rules -----------------------------------------------------------

def fhs_commit_rule(b, store: BlockStore) -> Optional[BlockId]:
    """Commit the second certified block when the top two certified views on
    b's chain are consecutive."""
    if b.qc.block == NULL_ID:
        return None
    b1 = store.get(b.qc.block)
    if b1.is_genesis():
        return None
    if b1.view == b1.qc.view + 1:
        return b1.qc.block
    return None


def chs_commit_rule(b, store: BlockStore) -> Optional[BlockId]:
    """Commit the third-back certified block under three stacked,
    consecutively-viewed certificates."""
    if b.qc.block == NULL_ID:
        return None
    b1 = store.get(b.qc.block)
    if b1.is_genesis() or b1.qc.block == NULL_ID:
        return None
    b2 = store.get(b1.qc.block)
    if b2.is_genesis() or b2.qc.block == NULL_ID:
        return None
    if b1.view == b2.view + 1 and b2.view == b2.qc.view + 1:
        return b2.qc.block
    return None


# --- HotStuff-family wire types ----------------------------------------------

def _u32(x: int) -> bytes:
    return struct.pack(">I", x)


def _u64(x: int) -> bytes:
    return struct.pack(">Q", x)


@dataclass(frozen=True, eq=False)
class HsTimeout:
    """Timeout message carrying the sender's highest known certificate."""

    sender: int
    view: int
    high_qc: QuorumCert
    sig: Signature

    def signing_bytes(self) -> bytes:
        return b"FT" + _u32(self.sender) + _u64(self.view) + encode_qc_ref(self.high_qc)

    def __eq__(self, other):
        return (isinstance(other, HsTimeout) and self.sender == other.sender
                and self.view == other.view and self.high_qc == other.high_qc)

    def __hash__(self):
        return hash((self.sender, self.view, self.high_qc.view, self.high_qc.block))


@dataclass(frozen=True)
class HsTC:
    view: int
    msgs: tuple[HsTimeout, ...]


@dataclass(frozen=True, eq=False)
class HsBlock:
    proposer: int
    view: int
    parent: BlockId
    qc: QuorumCert
    tc: Optional[HsTC]
    payload: bytes
    sig: Signature
    id: BlockId = NULL_ID
    tmo_set = None  # store compatibility

    def signing_bytes(self) -> bytes:
        tc_part = NULL_ID
        if self.tc is not None:
            parts = [_u64(self.tc.view)]
            for m in sorted(self.tc.msgs, key=lambda m: m.sender):
                parts.append(m.signing_bytes())
                parts.append(m.sig.tag)
            tc_part = digest(b"".join(parts))
        return b"".join([
            b"FB", _u32(self.proposer), _u64(self.view), self.parent,
            encode_qc_ref(self.qc), tc_part, _u32(len(self.payload)), self.payload,
        ])

    def is_genesis(self) -> bool:
        return self.view == 0 and self.parent == NULL_ID

    def __eq__(self, other):
        return isinstance(other, HsBlock) and self.id == other.id

    def __hash__(self):
        return hash(self.id)


def make_hs_block(keystore: Keystore, proposer: int, view: int, parent: BlockId,
                  qc: QuorumCert, payload: bytes,
                  tc: Optional[HsTC] = None) -> HsBlock:
    b = HsBlock(proposer=proposer, view=view, parent=parent, qc=qc, tc=tc,
                payload=payload, sig=Signature(proposer, NULL_ID, b""), id=NULL_ID)
    raw = b.signing_bytes()
    return HsBlock(proposer=proposer, view=view, parent=parent, qc=qc, tc=tc,
                   payload=payload,
                   sig=keystore.sign(keystore.keypair(proposer), raw),
                   id=digest(raw))


def make_hs_genesis() -> HsBlock:
    qc = QuorumCert(view=0, block=NULL_ID, qtype=VoteType.NORMAL, votes=frozenset())
    b = HsBlock(proposer=0, view=0, parent=NULL_ID, qc=qc, tc=None,
                payload=b"genesis", sig=Signature(0, NULL_ID, b"genesis"), id=NULL_ID)
    return HsBlock(proposer=0, view=0, parent=NULL_ID, qc=qc, tc=None,
                   payload=b"genesis", sig=b.sig, id=digest(b.signing_bytes()))


@dataclass(frozen=True)
class HsProposal:
    block: HsBlock
    ancestors: tuple[HsBlock, ...] = ()


# --- HotStuff-family replica ---------------------------------------------------

class HotStuffReplica:
    """Fast-HotStuff (two-chain) or Chained HotStuff (three-chain) replica."""

    def __init__(self, rid: int, cfg: ProtocolConfig, keystore: Keystore,
                 kind: BaselineKind = BaselineKind.FAST_HOTSTUFF,
                 stop_oracle=None):
        assert kind in (BaselineKind.FAST_HOTSTUFF, BaselineKind.CHAINED_HOTSTUFF)
        self.id = rid
        self.cfg = cfg
        self.keystore = keystore
        self.kind = kind
        self.byzantine = False
        self.genesis = make_hs_genesis()
        self.gqc = genesis_qc(self.genesis.id)
        self.store = BlockStore(self.genesis)
        self.validator = Validator(keystore, cfg.n, cfg.f, cfg.pd)  # qc checks only
        self.view = 1
        self.high_qc = self.gqc
        self.last_vote_view = 0
        self.committed: list[BlockId] = [self.genesis.id]
        self.committed_set: set[BlockId] = {self.genesis.id}
        self.vote_buckets: dict[tuple, dict[int, Vote]] = {}
        self.formed_qcs: dict[tuple, QuorumCert] = {}
        self.timeout_buckets: dict[int, dict[int, HsTimeout]] = {}
        self.sent_timeout: dict[int, HsTimeout] = {}
        self.proposed_views: set[int] = set()
        self.timer_gen = 0
        self.stop_oracle = stop_oracle or (lambda view: False)

    def init(self, now: float) -> Outbox:
        out = Outbox()
        self._enter_view(1, "boot", now, out)
        if leader_of(1, self.cfg.n) == self.id:
            self._try_propose(self.gqc, None, now, out)
        return out

    def on_message(self, msg, now: float) -> Outbox:
        out = Outbox()
        if isinstance(msg, HsProposal):
            self._on_proposal(msg, now, out)
        elif isinstance(msg, Vote):
            self._on_vote(msg, now, out)
        elif isinstance(msg, HsTimeout):
            self._on_timeout_msg(msg, now, out)
        return out

    def on_timer(self, now: float) -> Outbox:
        out = Outbox()
        self._send_timeout_msg(self.view, now, out)
        out.timer = now + self.cfg.timeout_fn(self.view)
        self.timer_gen += 1
        return out

    # -- handlers

    def _on_proposal(self, prop: HsProposal, now: float, out: Outbox) -> None:
        b = prop.block
        for anc in prop.ancestors:
            self.store.add(anc)
        self.store.add(b)
        if not self._block_valid(b):
            out.event(EventKind.DROP, reason="invalid_proposal",
                      block=b.id.hex(), view=b.view)
            return
        self._observe_qc(b.qc)
        if b.view > self.view:
            self._enter_view(b.view, "proposal", now, out)
        if b.view == self.view and b.view > self.last_vote_view:
            vote = make_vote(self.keystore, self.id, b.view, b.id, VoteType.NORMAL)
            self.last_vote_view = b.view
            out.event(EventKind.VOTE, block=b.id.hex(), view=b.view,
                      vtype=VoteType.NORMAL.value, cnt_tmo=0)
            for d in sorted({leader_of(b.view + 1, self.cfg.n), b.proposer}):
                out.send(d, vote)
        target = (fhs_commit_rule if self.kind is BaselineKind.FAST_HOTSTUFF
                  else chs_commit_rule)(b, self.store)
        if target is not None:
            self._commit(target, now, out)

    def _block_valid(self, b: HsBlock) -> bool:
        if b.id != digest(b.signing_bytes()):
            return False
        if b.proposer != leader_of(b.view, self.cfg.n):
            return False
        if not self.keystore.verify(b.proposer, b.signing_bytes(), b.sig):
            return False
        if not self.validator.qc_valid(b.qc, self.genesis.id):
            return False
        if b.parent != b.qc.block:
            return False
        if b.tc is None:
            return b.view == b.qc.view + 1
        if b.tc.view != b.view - 1:
            return False
        senders = {m.sender for m in b.tc.msgs}
        if len(senders) < quorum(self.cfg.n, self.cfg.f) or len(senders) != len(b.tc.msgs):
            return False
        for m in b.tc.msgs:
            if m.view != b.tc.view:
                return False
            if not self.keystore.verify(m.sender, m.signing_bytes(), m.sig):
                return False
            if not self.validator.qc_valid(m.high_qc, self.genesis.id):
                return False
            if m.high_qc.view > b.qc.view:
                return False  # leader must extend the highest certificate
        return True

    def _on_vote(self, v: Vote, now: float, out: Outbox) -> None:
        if not self.keystore.verify(
                v.voter, encode_vote(v.voter, v.view, v.block, v.vtype), v.sig):
            out.event(EventKind.DROP, reason="bad_signature", voter=v.voter)
            return
        key = (v.view, v.block, v.vtype)
        bucket = self.vote_buckets.setdefault(key, {})
        if v.voter in bucket:
            return
        bucket[v.voter] = v
        if len(bucket) >= quorum(self.cfg.n, self.cfg.f) and key not in self.formed_qcs:
            qc = make_qc(bucket.values(), quorum(self.cfg.n, self.cfg.f))
            self.formed_qcs[key] = qc
            self._observe_qc(qc)
            out.event(EventKind.QC_FORMED, view=qc.view, block=qc.block.hex(),
                      qtype=qc.qtype.value)
            nxt = qc.view + 1
            if leader_of(nxt, self.cfg.n) == self.id and nxt >= self.view:
                if nxt > self.view:
                    self._enter_view(nxt, "qc", now, out)
                self._try_propose(qc, None, now, out)

    def _on_timeout_msg(self, m: HsTimeout, now: float, out: Outbox) -> None:
        if m.view < self.view:
            return
        if not self.keystore.verify(m.sender, m.signing_bytes(), m.sig):
            out.event(EventKind.DROP, reason="bad_signature", sender=m.sender)
            return
        self._observe_qc(m.high_qc)
        bucket = self.timeout_buckets.setdefault(m.view, {})
        if m.sender in bucket:
            return
        bucket[m.sender] = m
        if len(bucket) >= self.cfg.f + 1 and m.view not in self.sent_timeout:
            self._send_timeout_msg(m.view, now, out)
        if len(bucket) >= quorum(self.cfg.n, self.cfg.f) and m.view + 1 > self.view:
            out.event(EventKind.TC_FORMED, view=m.view)
            self._enter_view(m.view + 1, "tc", now, out)
            if leader_of(self.view, self.cfg.n) == self.id:
                msgs = sorted(bucket.values(), key=lambda m: (-m.high_qc.view, m.sender))
                chosen = tuple(msgs[:quorum(self.cfg.n, self.cfg.f)])
                self._try_propose(chosen[0].high_qc, HsTC(m.view, chosen), now, out)

    # -- helpers

    def _observe_qc(self, qc: QuorumCert) -> None:
        if qc.view > self.high_qc.view:
            self.high_qc = qc

    def _try_propose(self, qc: QuorumCert, tc: Optional[HsTC],
                     now: float, out: Outbox) -> None:
        if self.view in self.proposed_views:
            return
        self.proposed_views.add(self.view)
        if self.stop_oracle(self.view):
            out.event(EventKind.DROP, reason="stop_fault", view=self.view)
            return
        block = make_hs_block(self.keystore, self.id, self.view, parent=qc.block,
                              qc=qc, payload=b"v%d:r%d" % (self.view, self.id), tc=tc)
        self.store.add(block)
        out.event(EventKind.PROPOSE, block=block.id.hex(), view=block.view,
                  origin="by_timeout" if tc else "by_votes", cnt_tmo=0,
                  qc_view=qc.view, qc_type=qc.qtype.value)
        ancestors = []
        if qc.block in self.store:
            ancestors.append(self.store.get(qc.block))
        out.broadcast(self.cfg.n, HsProposal(block, tuple(ancestors)))

    def _send_timeout_msg(self, view: int, now: float, out: Outbox) -> None:
        m = self.sent_timeout.get(view)
        if m is None:
            raw_free = HsTimeout(self.id, view, self.high_qc,
                                 Signature(self.id, NULL_ID, b""))
            sig = self.keystore.sign(self.keystore.keypair(self.id),
                                     raw_free.signing_bytes())
            m = HsTimeout(self.id, view, self.high_qc, sig)
            self.sent_timeout[view] = m
            out.event(EventKind.TIMEOUT, view=view, high_qc_view=self.high_qc.view)
        out.broadcast(self.cfg.n, m)

    def _enter_view(self, view: int, via: str, now: float, out: Outbox) -> None:
        self.view = view
        self.timer_gen += 1
        out.timer = now + self.cfg.timeout_fn(view)
        out.event(EventKind.VIEW_ENTER, view=view, via=via)
        for v in [v for v in self.timeout_buckets if v < view - 1]:
            del self.timeout_buckets[v]

    def _commit(self, target: BlockId, now: float, out: Outbox) -> None:
        if target == NULL_ID or target in self.committed_set:
            return
        try:
            path = []
            cur = self.store.get(target)
            while cur.id not in self.committed_set:
                path.append(cur)
                if cur.is_genesis():
                    break
                cur = self.store.get(cur.parent)
        except UnknownBlock:
            return
        for blk in reversed(path):
            self.committed.append(blk.id)
            self.committed_set.add(blk.id)
            out.event(EventKind.COMMIT, block=blk.id.hex(), view=blk.view,
                      boosted=False)


# --- naive validation replica ---------------------------------------------------

def naive_beegees_validate(validator: Validator, b: Block, store: BlockStore) -> bool:
    """Per-block validity only, no traceback: the check that lets an
    implicitly invalid block through."""
    try:
        return validator.explicit_valid(b, store)
    except UnknownBlock:
        return False


class NaiveBeeGeesReplica(PbgReplica):
    """pBeeGees message flow with the original BeeGees-style checks.

    Differences from the prudent replica: proposals are accepted on explicit
    validity alone, view-change parents are taken on rank without validation,
    and the commit path re-scans timeout sets for same-view conflicts instead
    of relying on vote types.
    """

    def _evaluate(self, b: Block) -> Optional[VoteType]:
        ok = naive_beegees_validate(self.validator, b, self.store)
        return VoteType.NORMAL if ok else None

    def propose_by_tc(self, msgs: list[TimeoutMsg],
                      payload: Optional[bytes] = None) -> Block:
        if not self._is_leader(self.view):
            raise NotLeader(f"replica {self.id} does not lead view {self.view}")
        q = quorum(self.cfg.n, self.cfg.f)
        if len({m.sender for m in msgs}) < q:
            raise ValueError("need a quorum of timeout messages")
        for m in msgs:
            self.store.ingest(m.high_vote)
        # highest-ranked high_vote wins, validity never checked
        ordered = sorted(msgs, key=lambda m: (-m.high_vote.view,
                                              -m.high_vote.qc.view,
                                              m.high_vote.id, m.sender))
        parent = ordered[0].high_vote
        chosen = ordered[:q]
        tc = make_tc(chosen, q)
        return make_block(
            self.keystore, self.id, self.view, parent=parent.id, qc=parent.qc,
            payload=payload if payload is not None else self._payload(self.view),
            tc=tc, tmo_set=chosen, cnt_tmo=parent.cnt_tmo + 1,
        )

    def commit_rule(self, b: Block) -> Optional[BlockId]:
        """Commit the second certified block, re-validating the span against
        same-view conflicts when the certified views are not consecutive."""
        try:
            if b.qc.block == NULL_ID:
                return None
            b1 = self.store.get(b.qc.block)
            if b1.is_genesis():
                return None
            b2_id = b1.qc.block if b1.qc.block != NULL_ID else self.genesis.id
            if b1.view == b1.qc.view + 1:
                return b2_id
            span = self.store.chain_to_ancestor(b1.id, b2_id)[:-1]
            for blk in span:
                if not blk.tmo_set:
                    continue
                parent_view = self.store.get(blk.parent).view
                for m in blk.tmo_set:
                    if (m.high_vote.view == parent_view
                            and self.store.conflicting(m.high_vote.id, b2_id)):
                        return None  # suspended
            return b2_id
        except UnknownBlock:
            return None
