"""The pBeeGees replica: proposal, voting, certificates, commit, pacemaker.

One replica is a single-threaded event handler.  It consumes a message or a
timer expiry and returns an Outbox of sends, trace events and an optional
timer deadline; the simulated network owns delivery.  A configuration switch
selects the commit-boost variant (votes broadcast to everyone, immediate
commit on a full set of normal votes, vote-count ranking tie-break).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .chain import (
    NULL_ID,
    Block,
    BlockId,
    BlockOrigin,
    BlockStore,
    QuorumCert,
    RankCb,
    TimeoutMsg,
    UnknownBlock,
    Vote,
    VoteType,
    encode_vote,
    genesis_qc,
    leader_of,
    make_block,
    make_genesis,
    make_qc,
    make_tc,
    make_timeout_msg,
    make_vote,
    quorum,
    rank,
    rank_cb,
    rank_key,
)
from .crypto import Keystore
from .events import EventKind, Outbox
from .validation import Validator, Verdict


class Variant(Enum):
    PBG = "pbg"
    PBG_CB = "pbg_cb"


class NotLeader(Exception):
    pass


class NoValidParent(Exception):
    """Every timeout-set candidate failed validation."""


@dataclass
class ProtocolConfig:
    n: int
    f: int
    pd: int = 3
    delta: float = 1000.0
    timeout_fn: Callable[[int], float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.n != 3 * self.f + 1:
            raise ValueError(f"n={self.n} must equal 3f+1 for f={self.f}")
        if self.timeout_fn is None:
            self.timeout_fn = lambda v: 5.0 * self.delta


@dataclass(frozen=True)
class Proposal:
    """A block broadcast plus the uncertified ancestor segment.

    Carrying the ancestors up to (and including) the block's certified
    ancestor lets receivers validate and commit without fetch round-trips.
    """

    block: Block
    ancestors: tuple[Block, ...] = ()


class PbgReplica:
    def __init__(
        self,
        rid: int,
        cfg: ProtocolConfig,
        keystore: Keystore,
        variant: Variant = Variant.PBG,
        stop_oracle: Optional[Callable[[int], bool]] = None,
    ):
        self.id = rid
        self.cfg = cfg
        self.keystore = keystore
        self.variant = variant
        self.byzantine = False
        self.genesis = make_genesis()
        self.gqc = genesis_qc(self.genesis.id)
        self.store = BlockStore(self.genesis)
        self.validator = Validator(keystore, cfg.n, cfg.f, cfg.pd,
                                   cb=variant is Variant.PBG_CB)
        self.view = 1
        self.high_vote: Block = self.genesis
        self.last_vote_view = 0
        self.committed: list[BlockId] = [self.genesis.id]
        self.committed_set: set[BlockId] = {self.genesis.id}
        self.vote_buckets: dict[tuple, dict[int, Vote]] = {}
        self.formed_qcs: dict[tuple, QuorumCert] = {}
        self.timeout_buckets: dict[int, dict[int, TimeoutMsg]] = {}
        self.sent_timeout: dict[int, TimeoutMsg] = {}
        self.formed_tc_views: set[int] = set()
        self.proposed_views: set[int] = set()
        self.timer_gen = 0
        self.stop_oracle = stop_oracle or (lambda view: False)

    # -- simulation-facing interface ----------------------------------------

    def init(self, now: float) -> Outbox:
        out = Outbox()
        self._enter_view(1, "boot", now, out)
        if self._is_leader(1):
            self._try_propose_by_qc(self.gqc, now, out)
        return out

    def on_message(self, msg, now: float) -> Outbox:
        out = Outbox()
        if isinstance(msg, Proposal):
            self.on_proposal(msg, now, out)
        elif isinstance(msg, Vote):
            self.on_vote(msg, now, out)
        elif isinstance(msg, TimeoutMsg):
            self.on_timeout_msg(msg, now, out)
        return out

    def on_timer(self, now: float) -> Outbox:
        out = Outbox()
        self._send_timeout_msg(self.view, now, out)
        out.timer = now + self.cfg.timeout_fn(self.view)
        self.timer_gen += 1
        return out

    # -- handlers --------------------------------------------------------------

    def on_proposal(self, prop: Proposal, now: float, out: Outbox) -> None:
        b = prop.block
        for anc in prop.ancestors:
            self.store.ingest(anc)
        self.store.ingest(b)

        try:
            vtype = self._evaluate(b)
        except UnknownBlock:
            vtype = None
        if vtype is None:
            out.event(EventKind.DROP, reason="invalid_proposal",
                      block=b.id.hex(), view=b.view)
            return

        # the block's certificate justifies its view
        if b.view > self.view:
            self._enter_view(b.view, "proposal", now, out)

        if b.view == self.view and b.view > self.last_vote_view:
            self._cast_vote(b, vtype, now, out)

        self._run_commit_rule(b, now, out)

    def _evaluate(self, b: Block) -> Optional[VoteType]:
        """Vote type for a proposal, or None when it must be dropped."""
        result = self.validator.valid_chain(b, self.store)
        if result.verdict is Verdict.INVALID:
            return None
        return result.vote_type()

    def on_vote(self, v: Vote, now: float, out: Outbox) -> None:
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
            out.event(EventKind.QC_FORMED, view=qc.view, block=qc.block.hex(),
                      qtype=qc.qtype.value)
            nxt = qc.view + 1
            if self._is_leader(nxt) and nxt >= self.view:
                if nxt > self.view:
                    self._enter_view(nxt, "qc", now, out)
                self._try_propose_by_qc(qc, now, out)

        if self.variant is Variant.PBG_CB:
            self._boost_check(v.view, v.block, now, out)

    def on_timeout_msg(self, m: TimeoutMsg, now: float, out: Outbox) -> None:
        if m.view < self.view:
            return
        if not self.validator.timeout_msg_valid(m):
            out.event(EventKind.DROP, reason="bad_signature", sender=m.sender)
            return
        self.store.ingest(m.high_vote)
        bucket = self.timeout_buckets.setdefault(m.view, {})
        if m.sender in bucket:
            return
        bucket[m.sender] = m

        # seeing f+1 timeouts proves a correct replica gave up on the view
        if len(bucket) >= self.cfg.f + 1 and m.view not in self.sent_timeout:
            self._send_timeout_msg(m.view, now, out)

        if len(bucket) >= quorum(self.cfg.n, self.cfg.f) and m.view not in self.formed_tc_views:
            self.formed_tc_views.add(m.view)
            out.event(EventKind.TC_FORMED, view=m.view)
            if m.view + 1 > self.view:
                self._enter_view(m.view + 1, "tc", now, out)
            if self.view == m.view + 1 and self._is_leader(self.view):
                self._try_propose_by_tc(m.view, now, out)

    # -- voting / commit --------------------------------------------------------

    def _cast_vote(self, b: Block, vtype: VoteType, now: float, out: Outbox) -> None:
        vote = make_vote(self.keystore, self.id, b.view, b.id, vtype)
        self.last_vote_view = b.view
        out.event(EventKind.VOTE, block=b.id.hex(), view=b.view,
                  vtype=vtype.value, cnt_tmo=b.cnt_tmo)
        # a prudent vote records the parent so the next timeout proposal can
        # still extend the chain without breaching the hollow bound
        if VoteType.PRUD in vtype:
            self.high_vote = self.store.get(b.parent)
        else:
            self.high_vote = b
        if self.variant is Variant.PBG_CB:
            out.broadcast(self.cfg.n, vote)
        else:
            dests = {leader_of(b.view + 1, self.cfg.n), b.proposer}
            for d in sorted(dests):
                out.send(d, vote)

    def _boost_check(self, view: int, block: BlockId, now: float, out: Outbox) -> None:
        bucket = self.vote_buckets.get((view, block, VoteType.NORMAL))
        if bucket is not None and len(bucket) >= self.cfg.n:
            self._commit(block, now, out, boosted=True)

    def _run_commit_rule(self, b: Block, now: float, out: Outbox) -> None:
        target = self.commit_rule(b)
        if target is not None:
            self._commit(target, now, out, boosted=False)

    def commit_rule(self, b: Block) -> Optional[BlockId]:
        """Nearest two non-prudent certified blocks; commit the second when
        the first's certificate carries no equivocation mark."""
        try:
            b1_id, t1 = self.get_nonprud_qc_block(b)
            if t1 is not VoteType.NORMAL:
                return None
            b2_id, _ = self.get_nonprud_qc_block(self.store.get(b1_id))
        except UnknownBlock:
            return None
        return b2_id

    def get_nonprud_qc_block(self, b: Block) -> tuple[BlockId, VoteType]:
        """Follow certificate links, skipping prudent certificates."""
        if b.is_genesis():
            return b.id, VoteType.NORMAL
        qc = b.qc
        while VoteType.PRUD in qc.qtype:
            qc = self.store.get(qc.block).qc
        if qc.block == NULL_ID:  # genesis's internal self-reference
            return self.genesis.id, VoteType.NORMAL
        return qc.block, qc.qtype

    def _commit(self, target: BlockId, now: float, out: Outbox, boosted: bool) -> None:
        if target in self.committed_set:
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
            return  # missing ancestor content; a later trigger retries
        for blk in reversed(path):
            self.committed.append(blk.id)
            self.committed_set.add(blk.id)
            out.event(EventKind.COMMIT, block=blk.id.hex(), view=blk.view,
                      boosted=boosted)

    # -- proposing ---------------------------------------------------------------

    def _payload(self, view: int) -> bytes:
        return b"v%d:r%d" % (view, self.id)

    def _try_propose_by_qc(self, qc: QuorumCert, now: float, out: Outbox) -> None:
        if self.view in self.proposed_views:
            return
        self.proposed_views.add(self.view)
        if self.stop_oracle(self.view):
            out.event(EventKind.DROP, reason="stop_fault", view=self.view)
            return
        block = self.propose_by_qc(qc)
        self._broadcast_proposal(block, now, out)

    def propose_by_qc(self, qc: QuorumCert, payload: Optional[bytes] = None) -> Block:
        if not self._is_leader(self.view):
            raise NotLeader(f"replica {self.id} does not lead view {self.view}")
        if qc.view != self.view - 1:
            raise ValueError("certificate does not cover the previous view")
        return make_block(
            self.keystore, self.id, self.view, parent=qc.block, qc=qc,
            payload=payload if payload is not None else self._payload(self.view),
        )

    def _try_propose_by_tc(self, timed_out_view: int, now: float, out: Outbox) -> None:
        if self.view in self.proposed_views:
            return
        self.proposed_views.add(self.view)
        if self.stop_oracle(self.view):
            out.event(EventKind.DROP, reason="stop_fault", view=self.view)
            return
        msgs = list(self.timeout_buckets.get(timed_out_view, {}).values())
        try:
            block = self.propose_by_tc(msgs)
        except NoValidParent:
            out.event(EventKind.DROP, reason="no_valid_parent", view=self.view)
            return
        self._broadcast_proposal(block, now, out)

    def propose_by_tc(self, msgs: list[TimeoutMsg],
                      payload: Optional[bytes] = None) -> Block:
        """Build the view-change proposal from collected timeout messages.

        The parent is the highest-ranked candidate that validates and leaves
        room under the hollow-chain bound; the attached timeout set is a
        quorum-sized subset in which nothing outranks that parent, so the
        proposal survives the receivers' ranking check.
        """
        if not self._is_leader(self.view):
            raise NotLeader(f"replica {self.id} does not lead view {self.view}")
        q = quorum(self.cfg.n, self.cfg.f)
        if len({m.sender for m in msgs}) < q:
            raise ValueError("need a quorum of timeout messages")
        for m in msgs:
            self.store.ingest(m.high_vote)

        candidates: dict[BlockId, Block] = {}
        for m in msgs:
            candidates.setdefault(m.high_vote.id, m.high_vote)

        def selection_key(b: Block):
            boost = 0
            if self.variant is Variant.PBG_CB:
                count = len({m.sender for m in msgs if m.high_vote.id == b.id})
                boost = count if count >= self.cfg.f + 1 else 0
            # ties resolve to the lowest block id, deterministically
            return (-b.view, -b.qc.view, -boost, b.id)

        ordered = sorted(candidates.values(), key=selection_key)

        for cand in ordered:
            if cand.cnt_tmo >= self.cfg.pd:
                continue  # a child would exceed the hollow bound
            try:
                if self.validator.valid_chain(cand, self.store).verdict is Verdict.INVALID:
                    continue
            except UnknownBlock:
                continue
            subset = [m for m in msgs if not self._outranks(m.high_vote, cand, msgs)]
            if len(subset) < q:
                continue
            subset.sort(key=lambda m: (rank_key(m.high_vote), -m.sender), reverse=True)
            chosen = subset[:q]
            tc = make_tc(chosen, q)
            return make_block(
                self.keystore, self.id, self.view, parent=cand.id, qc=cand.qc,
                payload=payload if payload is not None else self._payload(self.view),
                tc=tc, tmo_set=chosen, cnt_tmo=cand.cnt_tmo + 1,
            )
        raise NoValidParent(f"view {self.view}: no usable candidate among "
                            f"{len(candidates)} high votes")

    def _outranks(self, a: Block, b: Block, msgs) -> bool:
        if self.variant is Variant.PBG_CB:
            return rank_cb(a, b, msgs, self.cfg.f) is RankCb.B1_HIGHER
        return rank(a, b)

    def _broadcast_proposal(self, block: Block, now: float, out: Outbox) -> None:
        self.store.ingest(block)
        out.event(EventKind.PROPOSE, block=block.id.hex(), view=block.view,
                  origin=block.origin.value, cnt_tmo=block.cnt_tmo,
                  qc_view=block.qc.view, qc_type=block.qc.qtype.value)
        ancestors = self._ancestor_closure(block)
        out.broadcast(self.cfg.n, Proposal(block, ancestors))

    def _ancestor_closure(self, block: Block) -> tuple[Block, ...]:
        try:
            chain = self.store.chain_to_ancestor(block.parent, block.qc_block)
        except UnknownBlock:
            chain = [self.store.get(block.parent)] if block.parent in self.store else []
        return tuple(chain)

    # -- pacemaker ----------------------------------------------------------------

    def _send_timeout_msg(self, view: int, now: float, out: Outbox) -> None:
        m = self.sent_timeout.get(view)
        if m is None:
            m = make_timeout_msg(self.keystore, self.id, view, self.high_vote)
            self.sent_timeout[view] = m
            out.event(EventKind.TIMEOUT, view=view,
                      high_vote=self.high_vote.id.hex())
        out.broadcast(self.cfg.n, m)

    def _enter_view(self, view: int, via: str, now: float, out: Outbox) -> None:
        self.view = view
        self.timer_gen += 1
        out.timer = now + self.cfg.timeout_fn(view)
        out.event(EventKind.VIEW_ENTER, view=view, via=via)
        for v in [v for v in self.timeout_buckets if v < view - 1]:
            del self.timeout_buckets[v]

    def _is_leader(self, view: int) -> bool:
        return leader_of(view, self.cfg.n) == self.id
