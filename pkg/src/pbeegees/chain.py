"""Chained-consensus data structures: blocks, certificates, ranking, block store.

Blocks are content-addressed: a block's id is a digest over its header, so
equal ids mean equal header contents within a run.  Certificates are plain
vote / timeout-message multisets (no threshold signatures).  All types are
immutable after construction; a BlockStore is mutated only by its owning
replica.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum, Flag
from typing import Iterable, Optional

from .crypto import Keystore, ReplicaId, Signature, digest

View = int
BlockId = bytes

NULL_ID = b"\x00" * 32
GENESIS_VIEW = 0


class UnknownBlock(Exception):
    """A referenced block (or an intermediate parent) is not resolvable."""


class MalformedCert(Exception):
    """A certificate violates its construction invariants."""


class VoteType(Flag):
    NORMAL = 0
    PRUD = 1
    EQVC = 2


PRUD_EQVC = VoteType.PRUD | VoteType.EQVC


class BlockOrigin(Enum):
    BY_VOTES = "by_votes"
    BY_TIMEOUT = "by_timeout"


def leader_of(view: View, n: int) -> ReplicaId:
    """Round-robin leader schedule."""
    return view % n


def quorum(n: int, f: int) -> int:
    return n - f


# --- canonical byte encodings -------------------------------------------
#
# Fixed-width integers, length-prefixed variable fields.  Nested blocks are
# committed to through their digests: a timeout message encodes the block it
# carries by block id, and a block covers its timeout set through the TC
# digest.  This keeps identities stable and encoding cost linear.

def _u32(x: int) -> bytes:
    return struct.pack(">I", x)


def _u64(x: int) -> bytes:
    return struct.pack(">Q", x)


def encode_vote(voter: ReplicaId, view: View, block: BlockId, vtype: VoteType) -> bytes:
    return b"VT" + _u32(voter) + _u64(view) + block + _u32(vtype.value)


def encode_timeout_msg(sender: ReplicaId, view: View, high_vote_id: BlockId) -> bytes:
    return b"TM" + _u32(sender) + _u64(view) + high_vote_id


def encode_qc_ref(qc: "QuorumCert") -> bytes:
    return _u64(qc.view) + qc.block + _u32(qc.qtype.value)


def tc_digest(tc: "TimeoutCert") -> bytes:
    parts = [b"TC", _u64(tc.view)]
    for m in sorted(tc.msgs, key=lambda m: m.sender):
        parts.append(encode_timeout_msg(m.sender, m.view, m.high_vote.id))
        parts.append(m.sig.tag)
    return digest(b"".join(parts))


def block_signing_bytes(
    proposer: ReplicaId,
    view: View,
    parent: BlockId,
    qc: "QuorumCert",
    origin: BlockOrigin,
    tc: Optional["TimeoutCert"],
    cnt_tmo: int,
    payload: bytes,
) -> bytes:
    return b"".join(
        [
            b"BK",
            _u32(proposer),
            _u64(view),
            parent,
            encode_qc_ref(qc),
            b"\x01" if origin is BlockOrigin.BY_TIMEOUT else b"\x00",
            tc_digest(tc) if tc is not None else NULL_ID,
            _u32(cnt_tmo),
            _u32(len(payload)),
            payload,
        ]
    )


# --- data types -----------------------------------------------------------

@dataclass(frozen=True)
class Vote:
    voter: ReplicaId
    view: View
    block: BlockId
    vtype: VoteType
    sig: Signature


@dataclass(frozen=True)
class QuorumCert:
    view: View
    block: BlockId
    qtype: VoteType
    votes: frozenset[Vote]

    def is_genesis(self) -> bool:
        return self.view == GENESIS_VIEW and not self.votes


@dataclass(frozen=True, eq=False)
class TimeoutMsg:
    sender: ReplicaId
    view: View  # the view that timed out
    high_vote: "Block"
    sig: Signature

    def __eq__(self, other):
        return (
            isinstance(other, TimeoutMsg)
            and self.sender == other.sender
            and self.view == other.view
            and self.high_vote.id == other.high_vote.id
        )

    def __hash__(self):
        return hash((self.sender, self.view, self.high_vote.id))


@dataclass(frozen=True)
class TimeoutCert:
    view: View
    msgs: tuple[TimeoutMsg, ...]  # distinct senders, sorted by sender


@dataclass(frozen=True, eq=False)
class Block:
    proposer: ReplicaId
    view: View
    parent: BlockId
    qc: QuorumCert
    qc_block: BlockId
    tc: Optional[TimeoutCert]
    tmo_set: Optional[tuple[TimeoutMsg, ...]]
    cnt_tmo: int
    payload: bytes
    sig: Signature
    origin: BlockOrigin
    id: BlockId = field(default=NULL_ID)

    def __eq__(self, other):
        return isinstance(other, Block) and self.id == other.id

    def __hash__(self):
        return hash(self.id)

    def signing_bytes(self) -> bytes:
        return block_signing_bytes(
            self.proposer, self.view, self.parent, self.qc,
            self.origin, self.tc, self.cnt_tmo, self.payload,
        )

    def is_genesis(self) -> bool:
        return self.view == GENESIS_VIEW and self.parent == NULL_ID


def block_id(b: Block) -> BlockId:
    return digest(b.signing_bytes())


# --- factories ------------------------------------------------------------

def make_vote(keystore: Keystore, voter: ReplicaId, view: View, block: BlockId,
              vtype: VoteType) -> Vote:
    msg = encode_vote(voter, view, block, vtype)
    return Vote(voter=voter, view=view, block=block, vtype=vtype,
                sig=keystore.sign(keystore.keypair(voter), msg))


def make_timeout_msg(keystore: Keystore, sender: ReplicaId, view: View,
                     high_vote: Block) -> TimeoutMsg:
    msg = encode_timeout_msg(sender, view, high_vote.id)
    return TimeoutMsg(sender=sender, view=view, high_vote=high_vote,
                      sig=keystore.sign(keystore.keypair(sender), msg))


def make_qc(votes: Iterable[Vote], quorum_size: int) -> QuorumCert:
    """Aggregate same-type votes for one block into a certificate.

    Rejects duplicate voters, mixed (view, block, type) tuples, and vote sets
    below the quorum size.
    """
    votes = frozenset(votes)
    if not votes:
        raise MalformedCert("empty vote set")
    voters = {v.voter for v in votes}
    if len(voters) != len(votes):
        raise MalformedCert("duplicate voter")
    keys = {(v.view, v.block, v.vtype) for v in votes}
    if len(keys) != 1:
        raise MalformedCert("votes disagree on (view, block, type)")
    if len(votes) < quorum_size:
        raise MalformedCert(f"{len(votes)} votes < quorum {quorum_size}")
    view, block, vtype = next(iter(keys))
    return QuorumCert(view=view, block=block, qtype=vtype, votes=votes)


def make_tc(msgs: Iterable[TimeoutMsg], quorum_size: int) -> TimeoutCert:
    msgs = sorted(set(msgs), key=lambda m: m.sender)
    if len({m.sender for m in msgs}) != len(msgs):
        raise MalformedCert("duplicate timeout sender")
    views = {m.view for m in msgs}
    if len(views) != 1:
        raise MalformedCert("timeout messages disagree on view")
    if len(msgs) < quorum_size:
        raise MalformedCert(f"{len(msgs)} timeout messages < quorum {quorum_size}")
    return TimeoutCert(view=views.pop(), msgs=tuple(msgs))


def make_block(
    keystore: Keystore,
    proposer: ReplicaId,
    view: View,
    parent: BlockId,
    qc: QuorumCert,
    payload: bytes,
    tc: Optional[TimeoutCert] = None,
    tmo_set: Optional[Iterable[TimeoutMsg]] = None,
    cnt_tmo: int = 0,
) -> Block:
    origin = BlockOrigin.BY_TIMEOUT if tc is not None else BlockOrigin.BY_VOTES
    tmo = tuple(sorted(tmo_set, key=lambda m: m.sender)) if tmo_set is not None else None
    raw = block_signing_bytes(proposer, view, parent, qc, origin, tc, cnt_tmo, payload)
    sig = keystore.sign(keystore.keypair(proposer), raw)
    b = Block(
        proposer=proposer, view=view, parent=parent, qc=qc, qc_block=qc.block,
        tc=tc, tmo_set=tmo, cnt_tmo=cnt_tmo, payload=payload, sig=sig,
        origin=origin, id=digest(raw),
    )
    return b


def make_genesis() -> Block:
    """Synthetic bootstrap block: view 0, committed by definition.

    Its own qc field points at the null id to break the self-reference; the
    certificate other blocks build on is the separate self-certifying
    genesis_qc below.
    """
    qc = QuorumCert(view=GENESIS_VIEW, block=NULL_ID, qtype=VoteType.NORMAL,
                    votes=frozenset())
    sig = Signature(signer=0, payload_digest=NULL_ID, tag=b"genesis")
    b = Block(
        proposer=0, view=GENESIS_VIEW, parent=NULL_ID, qc=qc, qc_block=NULL_ID,
        tc=None, tmo_set=None, cnt_tmo=0, payload=b"genesis", sig=sig,
        origin=BlockOrigin.BY_VOTES, id=NULL_ID,
    )
    return Block(
        proposer=b.proposer, view=b.view, parent=b.parent, qc=b.qc,
        qc_block=b.qc_block, tc=b.tc, tmo_set=b.tmo_set, cnt_tmo=b.cnt_tmo,
        payload=b.payload, sig=b.sig, origin=b.origin, id=block_id(b),
    )


def genesis_qc(genesis_id: BlockId) -> QuorumCert:
    """Synthetic normal certificate over genesis, used to justify view 1."""
    return QuorumCert(view=GENESIS_VIEW, block=genesis_id, qtype=VoteType.NORMAL,
                      votes=frozenset())


# --- ranking --------------------------------------------------------------

def rank(b1: Block, b2: Block) -> bool:
    """True iff b1 outranks b2: higher view, or same view and higher qc view."""
    return (b1.view > b2.view) or (b1.view == b2.view and b1.qc.view > b2.qc.view)


def rank_key(b: Block) -> tuple[int, int]:
    return (b.view, b.qc.view)


class RankCb(Enum):
    B1_HIGHER = "b1"
    B2_HIGHER = "b2"
    TIE = "tie"


def rank_cb(b1: Block, b2: Block, tmo_set: Iterable[TimeoutMsg], f: int) -> RankCb:
    """Vote-count tie-break used by the commit-boost variant.

    When the base rule ties (same view, same qc view), the block carried as
    high_vote by at least f+1 distinct senders outranks the other; if neither
    reaches that count the ranks stay equal.
    """
    if rank(b1, b2):
        return RankCb.B1_HIGHER
    if rank(b2, b1):
        return RankCb.B2_HIGHER
    if b1.id == b2.id:
        return RankCb.TIE
    c1 = len({m.sender for m in tmo_set if m.high_vote.id == b1.id})
    c2 = len({m.sender for m in tmo_set if m.high_vote.id == b2.id})
    if c1 >= f + 1 and c1 > c2:
        return RankCb.B1_HIGHER
    if c2 >= f + 1 and c2 > c1:
        return RankCb.B2_HIGHER
    return RankCb.TIE


# --- block store ----------------------------------------------------------

class BlockStore:
    """Per-replica content-addressed block map with ancestry queries."""

    def __init__(self, genesis: Block):
        self.genesis = genesis
        self._blocks: dict[BlockId, Block] = {genesis.id: genesis}

    def __contains__(self, bid: BlockId) -> bool:
        return bid in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def blocks(self) -> Iterable[Block]:
        return self._blocks.values()

    def add(self, block: Block) -> None:
        self._blocks.setdefault(block.id, block)

    def ingest(self, block: Block) -> None:
        """Store a block plus every block nested in its timeout messages.

        Ids are recomputed before insertion so a mislabelled block cannot
        poison the content addressing.
        """
        stack = [block]
        while stack:
            b = stack.pop()
            if b.id in self._blocks:
                continue
            if not b.is_genesis() and isinstance(b, Block) and block_id(b) != b.id:
                continue
            self._blocks[b.id] = b
            for cert in (getattr(b, "tmo_set", None), getattr(b.tc, "msgs", None) if b.tc else None):
                if cert:
                    stack.extend(m.high_vote for m in cert if hasattr(m, "high_vote"))

    def get(self, bid: BlockId) -> Block:
        try:
            return self._blocks[bid]
        except KeyError:
            raise UnknownBlock(bid.hex()) from None

    def is_ancestor(self, a: BlockId, b: BlockId) -> bool:
        """True iff a is on the parent chain of b (a == b included)."""
        target = self.get(a)
        cur = self.get(b)
        while True:
            if cur.id == target.id:
                return True
            if cur.view < target.view or cur.is_genesis():
                return False
            cur = self.get(cur.parent)

    def conflicting(self, a: BlockId, b: BlockId) -> bool:
        """Neither block lies on the other's chain."""
        return not self.is_ancestor(a, b) and not self.is_ancestor(b, a)

    def chain_to_ancestor(self, frm: BlockId, upto: BlockId) -> list[Block]:
        """Blocks from `frm` down to `upto`, inclusive on both ends."""
        out = []
        cur = self.get(frm)
        stop = self.get(upto)
        while True:
            out.append(cur)
            if cur.id == stop.id:
                return out
            if cur.is_genesis() or cur.view < stop.view:
                raise UnknownBlock(f"{upto.hex()} not an ancestor of {frm.hex()}")
            cur = self.get(cur.parent)
