"""Simulation laboratory for certificate-decoupled chained BFT consensus.

Implements the pBeeGees replica (traceback validation, pre-commit
equivocation detection, prudent hollow-chain bounding), its commit-boost
variant, HotStuff-family baselines, a naive-validation replica, scripted
adversaries, and a deterministic discrete-event network for running them.
"""

from .chain import (
    Block,
    BlockOrigin,
    BlockStore,
    MalformedCert,
    QuorumCert,
    RankCb,
    TimeoutCert,
    TimeoutMsg,
    UnknownBlock,
    Vote,
    VoteType,
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
)
from .crypto import KeyPair, Keystore, Signature
from .events import EventKind, Outbox, TraceEvent
from .replica import NoValidParent, NotLeader, PbgReplica, Proposal, ProtocolConfig, Variant
from .baselines import (
    BaselineKind,
    HotStuffReplica,
    NaiveBeeGeesReplica,
    chs_commit_rule,
    fhs_commit_rule,
    naive_beegees_validate,
)
from .simnet import (
    FaultPlan,
    HorizonExceeded,
    LatencyModel,
    Protocol,
    SimConfig,
    SimResult,
    Simulation,
    Trace,
    rng_stream,
    run,
    sample_latency,
)
from .validation import ValidationResult, Validator, Verdict, test_equivocation

__all__ = [name for name in dir() if not name.startswith("_")]
