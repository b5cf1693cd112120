"""Latency/throughput sweep: plain transfers versus attestation reports.

Each (rate, mode) point runs on a fresh network seeded identically, with the
devices already enrolled at genesis. In attestation mode every submitted
transaction is a native report answering a request that genesis holds
pending, so each one runs the full on-chain verification and emits a
result. A workload actor submits ``rate`` transactions one tick after each
round boundary; latency is finalization tick minus submission tick.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import statistics
from typing import Iterable, Optional, Sequence, TextIO

from . import crypto
from .codec import hash_of, record
from .enrollment import VENDOR, DeviceRecord
from .ledger import GasTable, LedgerParams, LedgerState, SubmitTx, ValidatorNode, ValidatorSet
from .protocol import att_gen, att_rqst
from .registry import RequirementList
from .scenario import derived_keypair, scheme_from_config, validator_id
from .simnet import Actor, Sample, Simulation
from .tee import TeePlatform, VendorMock, create_environment
from .transactions import Transaction, Transfer, TxKind, sign_transaction

CSV_HEADER = ("rate", "mode", "mean_latency", "p95_latency", "throughput")
PLAIN = "plain"
ATTESTATION = "attestation"
MODES = (PLAIN, ATTESTATION)


@dataclasses.dataclass(frozen=True)
class PerfRow:
    rate: int
    mode: str
    mean_latency: float
    p95_latency: float
    throughput: float

    def as_csv(self) -> tuple:
        return (self.rate, self.mode, f"{self.mean_latency:.3f}", f"{self.p95_latency:.3f}",
                f"{self.throughput:.3f}")


@dataclasses.dataclass
class LatencyStats:
    count: int
    mean: float
    p95: float


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; ``q`` in (0, 100]."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return float(ordered[rank - 1])


def collect_metrics(samples: Iterable[Sample], window: tuple[int, int], round_interval: int):
    """Latency per transaction and finalized-per-round throughput inside ``window`` (ticks).

    A transaction's finalization tick is the earliest ``final`` sample for it.
    Returns ``(latencies, LatencyStats, throughput)``.
    """
    submitted: dict[bytes, int] = {}
    final: dict[bytes, int] = {}
    for s in samples:
        if s.kind == "submit":
            submitted.setdefault(s.key, s.tick)
        elif s.kind == "final":
            final[s.key] = min(final.get(s.key, s.tick), s.tick)
    latencies = [final[k] - t for k, t in submitted.items() if k in final]
    lo, hi = window
    in_window = sum(1 for k, t in final.items() if k in submitted and lo < t <= hi)
    rounds = (hi - lo) / round_interval
    throughput = in_window / rounds if rounds > 0 else 0.0
    stats = LatencyStats(len(latencies), statistics.fmean(latencies) if latencies else 0.0,
                         percentile(latencies, 95))
    return latencies, stats, throughput


@record
class SubmitBatch:
    round: int


class Workload(Actor):
    """Submits each round's batch one tick after the round boundary."""

    clocked = True

    def __init__(self, batches: dict[int, list[Transaction]], validator_ids: Sequence[str]):
        super().__init__("workload")
        self.batches = batches
        self.validator_ids = tuple(validator_ids)

    def on_tick(self, rnd: int) -> None:
        if rnd in self.batches:
            self.sim.timer(self.actor_id, 1, SubmitBatch(rnd))

    def on_message(self, src: str, msg) -> None:
        if src != self.actor_id or not isinstance(msg, SubmitBatch):
            return
        for tx in self.batches.pop(msg.round, ()):
            self.sim.sample("submit", tx.digest)
            for vid in self.validator_ids:
                self.send(vid, SubmitTx(tx))

    @property
    def remaining(self) -> int:
        return sum(len(b) for b in self.batches.values())


def _fleet(cfg: dict, seed: int, count: int):
    specs = [scheme_from_config(e) for e in cfg["schemes"]]
    vocab = cfg.get("registry", {}).get("attributes", {})
    admin = derived_keypair(seed, "admin")
    n = cfg["validators"]
    val_keys = [derived_keypair(seed, f"validator/{i}") for i in range(n)]
    vset = ValidatorSet.from_keys([k.public for k in val_keys])
    vendors = {s.vendor: VendorMock(s.vendor, hash_of(f"{seed}|vendor/{s.vendor}".encode()), s.chain_depth)
               for s in specs}
    state = LedgerState.genesis(vset, admin.public, [(s, vocab.get(s.tag, [])) for s in specs],
                                {k: v.public_key for k, v in vendors.items()},
                                [tuple(p) for p in cfg.get("registry", {}).get("equivalences", [])])
    platforms = []
    for i in range(count):
        spec = specs[i % len(specs)]
        kp = derived_keypair(seed, f"perf-device/{i}")
        attrs = [state.registry.lookup(spec.tag, label) for label in vocab.get(spec.tag, [])]
        p = TeePlatform(f"p{i}", spec, kp, attrs)
        vendors[spec.vendor].manufacture(p.device_id, kp.public)
        state.devices[p.device_id] = DeviceRecord(p.device_id, kp.public, spec.tag, VENDOR,
                                                  vendors[spec.vendor].endorse(p.device_id))
        platforms.append(p)
    return state, val_keys, platforms


def _transactions(mode: str, total: int, platforms, state: LedgerState, seed: int) -> list[Transaction]:
    txs = []
    k = len(platforms)
    for j in range(total):
        sender = platforms[j % k]
        if mode == PLAIN:
            tx = sign_transaction(TxKind.TRANSFER, Transfer(platforms[(j + 1) % k].device_id, 1,
                                                            j.to_bytes(8, "big")),
                                  sender.device_id, sender.keypair.secret)
        else:
            prover = platforms[(j + 1) % k]
            required = sender.attributes[:1]
            ka_req = crypto.ka_generate(hash_of(f"{seed}|ka-req|{j}".encode()))
            req = att_rqst(sender.device_id, sender.keypair.secret,
                           RequirementList(tuple(required), prover.device_id), ka_req,
                           hash_of(f"{seed}|nonce|{j}".encode())[:16])
            state.requests[req.request_hash] = req
            handle = create_environment(prover, prover.device_id, b"perf-workload")
            ka = crypto.ka_generate(hash_of(f"{seed}|ka-rpt|{j}".encode()))
            _, payload = att_gen(prover, handle, req, ka)
            tx = sign_transaction(TxKind.ATT_REPORT, payload, prover.device_id, prover.keypair.secret)
        txs.append(tx)
    return txs


def run_point(cfg: dict, rate: int, mode: str, seed: Optional[int] = None) -> PerfRow:
    seed = cfg["seed"] if seed is None else seed
    wl = cfg["workload"]
    rounds, warmup = wl.get("rounds", 30), wl.get("warmup", 2)
    net = cfg.get("network", {})
    interval = net.get("round_interval", 5)
    state, val_keys, platforms = _fleet(cfg, seed, wl.get("devices", 8))
    txs = _transactions(mode, rate * rounds, platforms, state, seed)

    sim = Simulation(seed, delay=net.get("delay", 1), round_interval=interval)
    ids = tuple(validator_id(i) for i in range(len(val_keys)))
    params = LedgerParams(ids, gas_limit=cfg.get("gas_limit", 48), gas=GasTable())
    nodes = [sim.add_actor(ValidatorNode(i, kp, state, params)) for i, kp in enumerate(val_keys)]
    batches = {r + 1: txs[r * rate:(r + 1) * rate] for r in range(rounds)}
    workload = sim.add_actor(Workload(batches, ids))

    def drained() -> bool:
        return workload.remaining == 0 and all(not n.mempool for n in nodes) and \
            sim.current_round > rounds + 1
    sim.run((rounds * 4 + 10) * interval, drained)
    window = ((1 + warmup) * interval, (rounds + 1) * interval)
    _, stats, throughput = collect_metrics(sim.samples, window, interval)
    return PerfRow(rate, mode, stats.mean, stats.p95, throughput)


def run_sweep(cfg: dict, seed: Optional[int] = None) -> list[PerfRow]:
    wl = cfg["workload"]
    modes = wl.get("modes") or list(MODES)
    return [run_point(cfg, rate, mode, seed) for rate in wl["rates"] for mode in modes]


def write_csv(rows: Iterable[PerfRow], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.as_csv())


def csv_text(rows: Iterable[PerfRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
