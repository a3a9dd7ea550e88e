"""Block validity: per-block explicit rules and recursive chain traceback.

Explicit validity checks only what a block carries itself (signature,
proposer schedule, certificate consistency, parent ranking within the
timeout set).  Chain validation recurses from a timeout-generated block back
to the nearest certified ancestor, folding in equivocation detection and the
hollow-chain (prudence) bound, and yields the verdict a voter turns into one
of the four vote types.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .chain import (
    Block,
    BlockId,
    BlockOrigin,
    BlockStore,
    QuorumCert,
    RankCb,
    TimeoutMsg,
    UnknownBlock,
    VoteType,
    block_id,
    encode_timeout_msg,
    encode_vote,
    leader_of,
    quorum,
    rank,
    rank_cb,
)
from .crypto import Keystore


class Verdict(Enum):
    NORMAL = "normal"
    EQVC = "eqvc"
    INVALID = "invalid"


@dataclass(frozen=True)
class ValidationResult:
    verdict: Verdict
    prud: bool

    def vote_type(self) -> VoteType:
        """Map a non-invalid result onto its vote type."""
        assert self.verdict is not Verdict.INVALID
        vt = VoteType.NORMAL
        if self.prud:
            vt |= VoteType.PRUD
        if self.verdict is Verdict.EQVC:
            vt |= VoteType.EQVC
        return vt


INVALID = ValidationResult(Verdict.INVALID, prud=False)


def test_equivocation(candidates: list[Block], qc_block: BlockId,
                      store: BlockStore) -> Verdict:
    """Eqvc iff some equal-rank candidate conflicts with the certified block."""
    for cand in candidates:
        store.ingest(cand)
        if store.conflicting(cand.id, qc_block):
            return Verdict.EQVC
    return Verdict.NORMAL


class Validator:
    """Per-replica validation engine with an advisory verdict cache.

    `cb` switches the ranking used for timeout-set comparisons to the
    vote-count rule of the commit-boost variant.  The cache is keyed by block
    id; verdicts are intrinsic to a block's content so a hit can never change
    the outcome, it only skips re-verification.
    """

    def __init__(self, keystore: Keystore, n: int, f: int, pd: int,
                 cb: bool = False):
        if pd < 1:
            raise ValueError("prudence degree must be >= 1")
        self.keystore = keystore
        self.n = n
        self.f = f
        self.pd = pd
        self.cb = cb
        self._memo: dict[BlockId, ValidationResult] = {}
        self._checked_qcs: set[QuorumCert] = set()
        self.max_depth = 0
        self.fresh_validations = 0

    # -- certificate checks -------------------------------------------------

    def qc_valid(self, qc: QuorumCert, genesis_id: BlockId) -> bool:
        if qc.is_genesis():
            return qc.block == genesis_id and qc.qtype is VoteType.NORMAL
        if qc in self._checked_qcs:
            return True
        voters = {v.voter for v in qc.votes}
        if len(voters) != len(qc.votes) or len(qc.votes) < quorum(self.n, self.f):
            return False
        for v in qc.votes:
            if v.view != qc.view or v.block != qc.block or v.vtype is not qc.qtype:
                return False
            if not self.keystore.verify(v.voter, encode_vote(v.voter, v.view, v.block, v.vtype), v.sig):
                return False
        self._checked_qcs.add(qc)
        return True

    def timeout_msg_valid(self, m: TimeoutMsg) -> bool:
        if m.high_vote.view > m.view:
            return False
        hv = m.high_vote
        if not hv.is_genesis():
            if hv.proposer != leader_of(hv.view, self.n):
                return False
            if not self.keystore.verify(hv.proposer, hv.signing_bytes(), hv.sig):
                return False
        return self.keystore.verify(
            m.sender, encode_timeout_msg(m.sender, m.view, m.high_vote.id), m.sig)

    # -- ranking under the active variant ------------------------------------

    def _outranks(self, a: Block, b: Block, tmo_set) -> bool:
        if self.cb:
            return rank_cb(a, b, tmo_set, self.f) is RankCb.B1_HIGHER
        return rank(a, b)

    def _rank_equal(self, a: Block, b: Block, tmo_set) -> bool:
        if self.cb:
            return rank_cb(a, b, tmo_set, self.f) is RankCb.TIE
        return not rank(a, b) and not rank(b, a)

    # -- explicit (per-block) validity ----------------------------------------

    def explicit_valid(self, b: Block, store: BlockStore) -> bool:
        """Self-contained validity rules for a single block."""
        if b.is_genesis():
            return True
        if b.id != _recompute_id(b):
            return False
        if b.proposer != leader_of(b.view, self.n):
            return False
        if not self.keystore.verify(b.proposer, b.signing_bytes(), b.sig):
            return False
        if not self.qc_valid(b.qc, store.genesis.id):
            return False
        if b.qc_block != b.qc.block:
            return False

        if b.origin is BlockOrigin.BY_VOTES:
            if b.tc is not None or b.tmo_set is not None:
                return False
            if b.cnt_tmo != 0:
                return False
            # the certificate must be over the parent, formed in the previous view
            return b.parent == b.qc.block and b.view == b.qc.view + 1

        # timeout-generated block
        if b.tc is None or b.tmo_set is None or not b.tmo_set:
            return False
        if b.tc.view != b.view - 1:
            return False
        senders = {m.sender for m in b.tmo_set}
        if len(senders) != len(b.tmo_set) or len(senders) < quorum(self.n, self.f):
            return False
        if set(b.tmo_set) != set(b.tc.msgs):
            return False
        for m in b.tmo_set:
            if m.view != b.tc.view or not self.timeout_msg_valid(m):
                return False
        # certified block must sit on this block's own chain
        store.ingest(b)
        if not store.is_ancestor(b.qc_block, b.id):
            return False
        # parent comes from the timeout set and nothing there outranks it
        parent = None
        for m in b.tmo_set:
            if m.high_vote.id == b.parent:
                parent = m.high_vote
                break
        if parent is None:
            return False
        if any(self._outranks(m.high_vote, parent, b.tmo_set) for m in b.tmo_set):
            return False
        return b.cnt_tmo == parent.cnt_tmo + 1

    # -- recursive chain validation -------------------------------------------

    def valid_chain(self, b: Block, store: BlockStore) -> ValidationResult:
        """Traceback validation of `b` down to its certified ancestor.

        Verdict precedence is Invalid over Eqvc over Normal; the prudent flag
        is orthogonal and refers to `b` itself.
        """
        self.fresh_validations += 1
        return self._valid_chain(b, store, depth=1)

    def _valid_chain(self, b: Block, store: BlockStore, depth: int) -> ValidationResult:
        self.max_depth = max(self.max_depth, depth)
        if b.is_genesis():
            return ValidationResult(Verdict.NORMAL, prud=False)
        cached = self._memo.get(b.id)
        if cached is not None:
            return cached

        result = self._validate_uncached(b, store, depth)
        self._memo[b.id] = result
        return result

    def _validate_uncached(self, b: Block, store: BlockStore, depth: int) -> ValidationResult:
        if not self.explicit_valid(b, store):
            return INVALID
        if b.cnt_tmo > self.pd:
            return INVALID
        prud = b.cnt_tmo == self.pd

        if b.origin is BlockOrigin.BY_VOTES:
            # a quorum already vouched for the parent chain
            return ValidationResult(Verdict.NORMAL, prud=prud)

        parent = next(m.high_vote for m in b.tmo_set if m.high_vote.id == b.parent)
        store.ingest(b)
        rec = self._valid_chain(parent, store, depth + 1)
        if rec.verdict is Verdict.INVALID:
            return INVALID

        flag_eqvc = rec.verdict is Verdict.EQVC
        if not flag_eqvc:
            seen: set[BlockId] = set()
            candidates = []
            for m in b.tmo_set:
                hv = m.high_vote
                if hv.id == parent.id or hv.id in seen:
                    continue
                if self._rank_equal(hv, parent, b.tmo_set):
                    seen.add(hv.id)
                    candidates.append(hv)
            if test_equivocation(candidates, b.qc_block, store) is Verdict.EQVC:
                flag_eqvc = True

        verdict = Verdict.EQVC if flag_eqvc else Verdict.NORMAL
        return ValidationResult(verdict, prud=prud)


def _recompute_id(b: Block) -> BlockId:
    return block_id(b)
