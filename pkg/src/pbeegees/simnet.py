"""Deterministic discrete-event network, fault injection, and adversaries.

Time is simulated milliseconds.  Every message, including one a replica
addresses to itself, is assigned a delivery delay from the latency model and
enqueued; events are processed in (time, sequence) order, so a run is a pure
function of its configuration and seed.  Partial synchrony: draws are
unbounded before GST (but flushed by GST+delta), and clamped to delta from
GST on.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .baselines import BaselineKind, HotStuffReplica, NaiveBeeGeesReplica
from .chain import Block, make_block, make_timeout_msg, make_tc, quorum
from .crypto import Keystore
from .events import EventKind, Outbox, TraceEvent
from .replica import PbgReplica, Proposal, ProtocolConfig, Variant


class HorizonExceeded(Exception):
    """No progress event inside the configured guard window."""


class Protocol(Enum):
    PBG = "pbg"
    PBG_CB = "pbg_cb"
    FHS = "fhs"
    CHS = "chs"
    NAIVE_BEEGEES = "naive_beegees"


def rng_stream(seed: int, *labels) -> random.Random:
    """Independent, reproducible generator for one (seed, purpose) pair."""
    h = hashlib.sha256(repr((seed,) + labels).encode()).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


@dataclass(frozen=True)
class LatencyModel:
    base_low: float = 150.0
    base_high: float = 350.0
    spike_prob: float = 0.10
    spike_delay: float = 500.0
    delta: float = 1000.0
    gst: float = 0.0


def sample_latency(model: LatencyModel, rng: random.Random,
                   send_time: float = 0.0) -> float:
    """One delivery delay.  Uniform base, occasional spike replacing the
    draw; sends at or after GST are clamped to delta, earlier sends are
    flushed no later than GST + delta."""
    raw = rng.uniform(model.base_low, model.base_high)
    if rng.random() < model.spike_prob:
        raw = model.spike_delay
    if send_time >= model.gst:
        return min(raw, model.delta)
    return min(raw, model.gst + model.delta - send_time)


@dataclass(frozen=True)
class FaultPlan:
    stop_prob: float = 0.0
    byzantine_set: frozenset[int] = frozenset()
    adversary_script: Optional[str] = None
    # deterministic stop schedule; overrides the Bernoulli draw when given
    stop_views: Optional[frozenset[int]] = None


def make_stop_oracle(plan: FaultPlan, seed: int) -> Callable[[int], bool]:
    if plan.stop_views is not None:
        stops = plan.stop_views
        return lambda view: view in stops
    if plan.stop_prob <= 0.0:
        return lambda view: False
    prob = plan.stop_prob

    def oracle(view: int) -> bool:
        # keyed by view so the draw is independent of processing order
        return rng_stream(seed, "stop", view).random() < prob

    return oracle


class Trace:
    def __init__(self):
        self.events: list[TraceEvent] = []

    def add(self, time: float, kind: EventKind, replica: int, detail: dict) -> None:
        self.events.append(TraceEvent(time, len(self.events), kind, replica, detail))

    def by_kind(self, kind: EventKind) -> list[TraceEvent]:
        return [e for e in self.events if e.kind is kind]

    def to_jsonl(self) -> str:
        return "\n".join(e.to_json() for e in self.events) + "\n"


# --- adversary scripts -----------------------------------------------------

class EquivocatorReplica(PbgReplica):
    """Leader that sends two different blocks to disjoint halves."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.byzantine = True

    def _broadcast_proposal(self, block: Block, now: float, out: Outbox) -> None:
        alt = make_block(
            self.keystore, self.id, block.view, parent=block.parent, qc=block.qc,
            payload=block.payload + b"/alt", tc=block.tc, tmo_set=block.tmo_set,
            cnt_tmo=block.cnt_tmo,
        )
        self.store.ingest(block)
        self.store.ingest(alt)
        ancestors = self._ancestor_closure(block)
        half = self.cfg.n // 2
        for variant_block, dests in ((block, range(half)),
                                     (alt, range(half, self.cfg.n))):
            out.event(EventKind.PROPOSE, block=variant_block.id.hex(),
                      view=variant_block.view, origin=variant_block.origin.value,
                      cnt_tmo=variant_block.cnt_tmo, qc_view=variant_block.qc.view,
                      qc_type=variant_block.qc.qtype.value)
            for d in dests:
                out.send(d, Proposal(variant_block, ancestors))


@dataclass
class AttackState:
    """Coordination blackboard for the invalid-branch script members."""

    tip: Optional[Block] = None
    primary_done: bool = False


class InvalidThenHaltReplica(PbgReplica):
    """Proposes a block conflicting with the committed chain, leaks it in a
    timeout message, then goes silent; other script members extend the
    branch when they lead."""

    def __init__(self, *args, attack: AttackState, **kwargs):
        super().__init__(*args, **kwargs)
        self.byzantine = True
        self.attack = attack
        self.halted = False
        self.attack_view: Optional[int] = None
        self.invalid_block: Optional[Block] = None

    def on_message(self, msg, now: float) -> Outbox:
        if self.halted:
            return Outbox()
        return super().on_message(msg, now)

    def on_timer(self, now: float) -> Outbox:
        if self.halted:
            return Outbox()
        if self.invalid_block is not None and self.view == self.attack_view:
            out = Outbox()
            poison = make_timeout_msg(self.keystore, self.id, self.view,
                                      self.invalid_block)
            out.event(EventKind.TIMEOUT, view=self.view,
                      high_vote=self.invalid_block.id.hex())
            out.broadcast(self.cfg.n, poison)
            self.halted = True
            return out
        return super().on_timer(now)

    def _try_propose_by_qc(self, qc, now, out) -> None:
        if self._launch_attack(now, out):
            return
        super()._try_propose_by_qc(qc, now, out)

    def _try_propose_by_tc(self, timed_out_view, now, out) -> None:
        if self._launch_attack(now, out):
            return
        if self._extend_branch(timed_out_view, now, out):
            return
        super()._try_propose_by_tc(timed_out_view, now, out)

    def _launch_attack(self, now: float, out: Outbox) -> bool:
        if self.attack.primary_done or len(self.committed) < 2:
            return False
        tip = self.store.get(self.committed[-1])
        if tip.qc.block != tip.parent:
            return False
        # reuse the committed tip's certificate but skip the tip itself:
        # the result extends the tip's parent and conflicts with the tip
        bad = make_block(self.keystore, self.id, self.view, parent=tip.parent,
                         qc=tip.qc, payload=self._payload(self.view))
        self.proposed_views.add(self.view)
        self.store.ingest(bad)
        self.attack.tip = bad
        self.attack.primary_done = True
        self.attack_view = self.view
        self.invalid_block = bad
        out.event(EventKind.PROPOSE, block=bad.id.hex(), view=bad.view,
                  origin=bad.origin.value, cnt_tmo=bad.cnt_tmo,
                  qc_view=bad.qc.view, qc_type=bad.qc.qtype.value)
        ancestors = tuple(b for b in [self.store.get(tip.parent)] if b)
        out.broadcast(self.cfg.n, Proposal(bad, ancestors))
        return True

    def _extend_branch(self, timed_out_view: int, now: float, out: Outbox) -> bool:
        tip = self.attack.tip
        if tip is None or tip.view > timed_out_view:
            return False
        q = quorum(self.cfg.n, self.cfg.f)
        others = [m for m in self.timeout_buckets.get(timed_out_view, {}).values()
                  if m.sender != self.id and m.high_vote.view <= tip.view]
        if len(others) < q - 1:
            return False
        claim = make_timeout_msg(self.keystore, self.id, timed_out_view, tip)
        chosen = [claim] + sorted(others, key=lambda m: m.sender)[:q - 1]
        block = make_block(
            self.keystore, self.id, self.view, parent=tip.id, qc=tip.qc,
            payload=self._payload(self.view), tc=make_tc(chosen, q),
            tmo_set=chosen, cnt_tmo=tip.cnt_tmo + 1,
        )
        self.proposed_views.add(self.view)
        self.store.ingest(block)
        self.attack.tip = block
        out.event(EventKind.PROPOSE, block=block.id.hex(), view=block.view,
                  origin=block.origin.value, cnt_tmo=block.cnt_tmo,
                  qc_view=block.qc.view, qc_type=block.qc.qtype.value)
        out.broadcast(self.cfg.n, Proposal(block, (tip,)))
        return True


class SilentLeaderReplica(PbgReplica):
    """Times every one of its own views out by never proposing."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.byzantine = True

    def _try_propose_by_qc(self, qc, now, out) -> None:
        self.proposed_views.add(self.view)
        out.event(EventKind.DROP, reason="byz_silent", view=self.view)

    def _try_propose_by_tc(self, timed_out_view, now, out) -> None:
        self.proposed_views.add(self.view)
        out.event(EventKind.DROP, reason="byz_silent", view=self.view)


ADVERSARY_SCRIPTS = ("equivocate", "invalid_then_halt", "hollow_inducer")


# --- simulation -------------------------------------------------------------

@dataclass
class SimConfig:
    n: int
    f: int
    protocol: Protocol = Protocol.PBG
    pd: int = 3
    latency: LatencyModel = field(default_factory=LatencyModel)
    faults: FaultPlan = field(default_factory=FaultPlan)
    seed: int = 0
    max_views: Optional[int] = 50
    max_ms: float = 3_600_000.0
    guard_ms: Optional[float] = None  # defaults to 40 view timeouts

    def __post_init__(self):
        if self.n != 3 * self.f + 1:
            raise ValueError(f"n={self.n} must equal 3f+1 for f={self.f}")
        if len(self.faults.byzantine_set) > self.f:
            raise ValueError("byzantine set larger than f")
        if self.guard_ms is None:
            self.guard_ms = 200.0 * self.latency.delta


@dataclass
class SimResult:
    config: SimConfig
    trace: Trace
    replicas: list
    correct_ids: list[int]

    def correct_replicas(self):
        return [self.replicas[i] for i in self.correct_ids]


def protocol_variant(protocol: Protocol) -> Variant:
    return Variant.PBG_CB if protocol is Protocol.PBG_CB else Variant.PBG


def build_replicas(cfg: SimConfig, keystore: Keystore):
    pcfg = ProtocolConfig(n=cfg.n, f=cfg.f, pd=cfg.pd, delta=cfg.latency.delta)
    stop = make_stop_oracle(cfg.faults, cfg.seed)
    byz = cfg.faults.byzantine_set
    if byz and cfg.protocol in (Protocol.FHS, Protocol.CHS):
        raise ValueError("byzantine scripts are only wired for the "
                         "pBeeGees-format protocols")
    variant = protocol_variant(cfg.protocol)
    attack = AttackState()
    replicas = []
    for i in range(cfg.n):
        if i in byz:
            script = cfg.faults.adversary_script or "hollow_inducer"
            if script == "equivocate":
                replicas.append(EquivocatorReplica(i, pcfg, keystore, variant=variant))
            elif script == "invalid_then_halt":
                replicas.append(InvalidThenHaltReplica(i, pcfg, keystore,
                                                       variant=variant, attack=attack))
            elif script == "hollow_inducer":
                replicas.append(SilentLeaderReplica(i, pcfg, keystore, variant=variant))
            else:
                raise ValueError(f"unknown adversary script {script!r}")
        elif cfg.protocol in (Protocol.PBG, Protocol.PBG_CB):
            replicas.append(PbgReplica(i, pcfg, keystore, variant=variant,
                                       stop_oracle=stop))
        elif cfg.protocol is Protocol.NAIVE_BEEGEES:
            replicas.append(NaiveBeeGeesReplica(i, pcfg, keystore,
                                                variant=Variant.PBG, stop_oracle=stop))
        else:
            kind = (BaselineKind.FAST_HOTSTUFF if cfg.protocol is Protocol.FHS
                    else BaselineKind.CHAINED_HOTSTUFF)
            replicas.append(HotStuffReplica(i, pcfg, keystore, kind=kind,
                                            stop_oracle=stop))
    return replicas


_DELIVER = 0
_TIMER = 1


class Simulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.keystore = Keystore(cfg.n, seed=cfg.seed)
        self.replicas = build_replicas(cfg, self.keystore)
        self.correct_ids = [i for i in range(cfg.n)
                            if not getattr(self.replicas[i], "byzantine", False)]
        self.trace = Trace()
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self._mid = 0
        self._latency_rngs = {i: rng_stream(cfg.seed, "latency", i)
                              for i in range(cfg.n)}
        self._last_progress = 0.0

    def _push(self, time: float, kind: int, payload: tuple) -> None:
        heapq.heappush(self._queue, (time, self._seq, kind, payload))
        self._seq += 1

    def _process_outbox(self, rid: int, out: Outbox) -> None:
        for kind, detail in out.events:
            self.trace.add(self.now, kind, rid, detail)
            if kind in (EventKind.VIEW_ENTER, EventKind.COMMIT, EventKind.PROPOSE):
                self._last_progress = self.now
        for dest, msg in out.sends:
            delay = sample_latency(self.cfg.latency, self._latency_rngs[rid], self.now)
            mid = self._mid
            self._mid += 1
            self.trace.add(self.now, EventKind.SEND, rid,
                           {"mid": mid, "to": dest, "msg": type(msg).__name__})
            self._push(self.now + delay, _DELIVER, (dest, msg, mid, rid))
        if out.timer is not None:
            replica = self.replicas[rid]
            self._push(out.timer, _TIMER, (rid, replica.timer_gen))

    def run(self) -> SimResult:
        for rid, replica in enumerate(self.replicas):
            self._process_outbox(rid, replica.init(0.0))

        while self._queue:
            time, _, kind, payload = heapq.heappop(self._queue)
            if time > self.cfg.max_ms:
                break
            self.now = time
            if self.now - self._last_progress > self.cfg.guard_ms:
                raise HorizonExceeded(
                    f"no progress since t={self._last_progress:.0f} ms")

            if kind == _DELIVER:
                dest, msg, mid, src = payload
                self.trace.add(self.now, EventKind.DELIVER, dest,
                               {"mid": mid, "from": src, "msg": type(msg).__name__})
                out = self.replicas[dest].on_message(msg, self.now)
                self._process_outbox(dest, out)
            else:
                rid, gen = payload
                replica = self.replicas[rid]
                if gen != replica.timer_gen:
                    continue  # superseded by a view change
                out = replica.on_timer(self.now)
                self._process_outbox(rid, out)

            if self.cfg.max_views is not None and self.correct_ids:
                if min(self.replicas[i].view for i in self.correct_ids) > self.cfg.max_views:
                    break

        return SimResult(config=self.cfg, trace=self.trace,
                         replicas=self.replicas, correct_ids=self.correct_ids)


def run(cfg: SimConfig) -> SimResult:
    """Run one configured simulation to its horizon."""
    return Simulation(cfg).run()
