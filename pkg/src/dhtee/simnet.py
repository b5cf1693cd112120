"""Deterministic discrete-event kernel with fault injection.

Events run in ``(time, insertion sequence)`` order. Network messages pass
through the adversary's drop and tamper rules; local timers and physical
enrollment reads never touch the network and are exempt by construction.
A global clock delivers :class:`RoundTick` to every clocked actor every
``round_interval`` ticks.
"""
from __future__ import annotations

import dataclasses
import fnmatch
import heapq
import json
import random
from typing import Callable, Iterable, Optional

from .codec import digest, encode, hash_of, record

BEHAVIORS = ("honest", "silent", "forge-results", "equivocate")
MUTATIONS = ("flip-bit", "substitute-ka")
KA_FIELDS = ("ka_public", "ka_public_requester", "ka_public_prover")


class UnknownActor(KeyError):
    pass


class ConfigInvalid(ValueError):
    pass


@record
class RoundTick:
    round: int


@record
class TraceRecord:
    time: int
    seq: int
    src: str
    dst: str
    kind: str
    body: bytes


@record
class Sample:
    kind: str
    key: bytes
    tick: int


@dataclasses.dataclass
class DropRule:
    kind: str = "*"
    src: str = "*"
    dst: str = "*"
    probability: float = 1.0

    def matches(self, src, dst, kind):
        return (fnmatch.fnmatchcase(kind, self.kind) and fnmatch.fnmatchcase(src, self.src)
                and fnmatch.fnmatchcase(dst, self.dst))


@dataclasses.dataclass
class TamperRule(DropRule):
    mutation: str = "flip-bit"

    def __post_init__(self):
        if self.mutation not in MUTATIONS:
            raise ConfigInvalid(f"unknown mutation {self.mutation!r}")


@dataclasses.dataclass
class AdversaryConfig:
    faulty_validators: dict[int, str] = dataclasses.field(default_factory=dict)
    scheduler_mode: str = "honest"
    scheduler_pick: Optional[str] = None
    tamper_rules: list[TamperRule] = dataclasses.field(default_factory=list)
    drop_rules: list[DropRule] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        for idx, behavior in self.faulty_validators.items():
            if behavior not in BEHAVIORS:
                raise ConfigInvalid(f"validator {idx}: unknown behavior {behavior!r}")
        if self.scheduler_mode not in ("honest", "adversarial"):
            raise ConfigInvalid(f"unknown scheduler mode {self.scheduler_mode!r}")


class Actor:
    clocked = False

    def __init__(self, actor_id: str):
        self.actor_id = actor_id
        self.behavior = "honest"
        self.sim: Optional[Simulation] = None
        self._rng: Optional[random.Random] = None

    @property
    def rng(self) -> random.Random:
        """Per-actor generator, seeded from the run seed and the actor id."""
        if self._rng is None:
            seed = hash_of(f"{self.sim.seed}|{self.actor_id}".encode())
            self._rng = random.Random(int.from_bytes(seed[:8], "big"))
        return self._rng

    @property
    def honest(self) -> bool:
        return self.behavior == "honest"

    def send(self, dst: str, msg, delay: Optional[int] = None) -> None:
        self.sim.send(self.actor_id, dst, msg, delay)

    def on_message(self, src: str, msg) -> None:
        pass

    def on_tick(self, rnd: int) -> None:
        pass


@dataclasses.dataclass(order=True)
class _Event:
    time: int
    seq: int
    src: str = dataclasses.field(compare=False)
    dst: str = dataclasses.field(compare=False)
    msg: object = dataclasses.field(compare=False)


def _bytes_paths(obj, path=()):
    if isinstance(obj, bytes):
        if obj:
            yield path
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _bytes_paths(getattr(obj, f.name), path + (f.name,))
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from _bytes_paths(item, path + (i,))


def _replace_at(obj, path, fn):
    if not path:
        return fn(obj)
    head, rest = path[0], path[1:]
    if isinstance(obj, tuple):
        return obj[:head] + (_replace_at(obj[head], rest, fn),) + obj[head + 1:]
    return dataclasses.replace(obj, **{head: _replace_at(getattr(obj, head), rest, fn)})


def mutate(msg, mutation: str, rng: random.Random):
    """Apply a named in-flight mutation; returns the (possibly unchanged) message."""
    paths = list(_bytes_paths(msg))
    if mutation == "substitute-ka":
        paths = [p for p in paths if p and p[-1] in KA_FIELDS]
        if not paths:
            return msg
        fake = rng.randbytes(32)
        for p in paths:
            msg = _replace_at(msg, p, lambda _old: fake)
        return msg
    if not paths:
        return msg
    path = paths[rng.randrange(len(paths))]

    def flip(data: bytes) -> bytes:
        bit = rng.randrange(len(data) * 8)
        out = bytearray(data)
        out[bit // 8] ^= 1 << (bit % 8)
        return bytes(out)

    return _replace_at(msg, path, flip)


class Simulation:

    def __init__(self, seed: int, delay: int = 1, round_interval: int = 5,
                 adversary: Optional[AdversaryConfig] = None):
        if delay < 1 or round_interval < 1:
            raise ConfigInvalid("delay and round_interval must be positive")
        self.seed = seed
        self.delay = delay
        self.round_interval = round_interval
        self.adversary = adversary or AdversaryConfig()
        self.rng = random.Random(seed)
        self.now = 0
        self.actors: dict[str, Actor] = {}
        self.trace: list[TraceRecord] = []
        self.samples: list[Sample] = []
        self._clocked: list[Actor] = []
        self._queue: list[_Event] = []
        self._seq = 0
        self._round = 0
        self._clock_started = False
        self._digests: dict[int, tuple[object, bytes]] = {}

    def add_actor(self, actor: Actor) -> Actor:
        if actor.actor_id in self.actors:
            raise ConfigInvalid(f"duplicate actor {actor.actor_id!r}")
        actor.sim = self
        self.actors[actor.actor_id] = actor
        if actor.clocked:
            self._clocked.append(actor)
        return actor

    def actor(self, actor_id: str) -> Actor:
        try:
            return self.actors[actor_id]
        except KeyError:
            raise UnknownActor(actor_id) from None

    @property
    def current_round(self) -> int:
        return self._round

    def _push(self, time, src, dst, msg):
        heapq.heappush(self._queue, _Event(time, self._seq, src, dst, msg))
        self._seq += 1

    def send(self, src: str, dst: str, msg, delay: Optional[int] = None) -> None:
        if dst not in self.actors:
            raise UnknownActor(dst)
        kind = type(msg).__name__
        adv = self.adversary
        for rule in adv.drop_rules:
            if rule.matches(src, dst, kind) and self.rng.random() < rule.probability:
                self.trace.append(TraceRecord(self.now, -1, src, dst, "drop:" + kind, self._body(msg)))
                return
        for rule in adv.tamper_rules:
            if rule.matches(src, dst, kind) and self.rng.random() < rule.probability:
                msg = mutate(msg, rule.mutation, self.rng)
        self._push(self.now + (self.delay if delay is None else delay), src, dst, msg)

    def timer(self, actor_id: str, after: int, msg) -> None:
        self._push(self.now + max(1, after), actor_id, actor_id, msg)

    def inject_fault(self, actor_id: str, behavior: str) -> None:
        if behavior not in BEHAVIORS:
            raise ConfigInvalid(f"unknown behavior {behavior!r}")
        self.actor(actor_id).behavior = behavior

    def sample(self, kind: str, key: bytes) -> None:
        self.samples.append(Sample(kind, key, self.now))

    def _body(self, msg) -> bytes:
        hit = self._digests.get(id(msg))
        if hit is not None and hit[0] is msg:
            return hit[1]
        d = digest(msg)
        if len(self._digests) > 4096:
            self._digests.clear()
        self._digests[id(msg)] = (msg, d)
        return d

    def _start_clock(self):
        if not self._clock_started:
            self._clock_started = True
            self._push(self.round_interval, "clock", "clock", RoundTick(1))

    def run(self, until: int, stop: Optional[Callable[[], bool]] = None) -> None:
        """Process events up to and including tick ``until``.

        ``stop`` is polled after every round tick; returning True ends the run.
        """
        self._start_clock()
        while self._queue and self._queue[0].time <= until:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            self.trace.append(TraceRecord(ev.time, ev.seq, ev.src, ev.dst,
                                          type(ev.msg).__name__, self._body(ev.msg)))
            if ev.dst == "clock":
                self._round = ev.msg.round
                for actor in list(self._clocked):
                    actor.on_tick(ev.msg.round)
                self._push(self.now + self.round_interval, "clock", "clock", RoundTick(ev.msg.round + 1))
                if stop is not None and stop():
                    return
            else:
                self.actors[ev.dst].on_message(ev.src, ev.msg)

    def trace_digest(self) -> bytes:
        h = hash_of(b"trace")
        for rec in self.trace:
            h = hash_of(h + encode(rec))
        return h


def trace_lines(trace: Iterable[TraceRecord]) -> Iterable[str]:
    for rec in trace:
        yield json.dumps({"time": rec.time, "seq": rec.seq, "src": rec.src, "dst": rec.dst,
                          "kind": rec.kind, "body": rec.body.hex()})
