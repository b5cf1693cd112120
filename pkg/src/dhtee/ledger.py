"""Permissioned ledger state machine with quorum consensus over it.

Consensus runs one proposer slot per clock round, round-robin over the
validator set. A slot has two voting phases. Validators *prepare* a valid
proposal, and on seeing a quorum of prepares in the current round they lock
on it and *commit*. A quorum of commits from one round finalizes the block.
A locked validator prepares only its locked block, or a block whose
proposal carries a prepare quorum at least as recent as its lock. The
commit signatures double as the finality certificate that light clients
check, so ``quorum = floor(2N/3) + 1`` distinct commit signatures on a
header are all a device needs.

Blocks carry the client transactions in ascending digest order, followed by
the ``ATT_RESULT`` transactions their execution emitted. A block is valid
only if every client transaction in it executes successfully; invalid
transactions are rejected by consensus and never reach the chain.
"""
from __future__ import annotations

import dataclasses
from collections import defaultdict
from typing import Iterable, Optional, Sequence

from . import crypto
from .codec import (
    DIGEST_SIZE,
    MerkleProof,
    digest,
    encode,
    hash_of,
    merkle_prove,
    merkle_root,
    record,
    verify_merkle,
)
from .enrollment import (
    DeviceRecord,
    EnrollmentError,
    EnrollPayload,
    Witness,
    sign_witness,
    validate_enrollment,
)
from .protocol import (
    AttestationRequest,
    CommonVerificationResult,
    Verdict,
    att_con_vrfy,
    request_signature_ok,
)
from .registry import AttributeRegistry, DuplicateAttribute, RegistrySnapshot, UnknownAttribute
from .simnet import Actor
from .tee import (
    DuplicateScheme,
    MalformedReport,
    SchemeSpec,
    SchemeTable,
    UnsupportedScheme,
    install_scheme,
)
from .transactions import (
    ADMIN_SUBMITTER,
    LEDGER_SUBMITTER,
    AttReportPayload,
    DeclareEquivalence,
    InstallScheme,
    RegisterAttribute,
    Transaction,
    Transfer,
    TxKind,
)

GENESIS_PARENT = bytes(DIGEST_SIZE)
EMPTY_TX_ROOT = hash_of(b"")


def quorum_for(n: int) -> int:
    return (2 * n) // 3 + 1


@record
class ValidatorSet:
    validators: tuple[bytes, ...]
    quorum: int

    @classmethod
    def from_keys(cls, keys: Sequence[bytes]) -> "ValidatorSet":
        return cls(tuple(keys), quorum_for(len(keys)))

    def __len__(self):
        return len(self.validators)


EMPTY_VALIDATOR_SET = ValidatorSet((), 1)


@record
class BlockHeader:
    height: int
    parent: bytes
    tx_root: bytes
    proposer: int


@record
class PrepareStatement:
    height: int
    round: int
    header_digest: bytes


@record
class CommitStatement:
    height: int
    round: int
    header_digest: bytes


@record
class ProposalStatement:
    height: int
    round: int
    header_digest: bytes


@record
class CommitSignature:
    validator: int
    signature: bytes


@record
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    commit_round: int = -1
    commit_signatures: tuple[CommitSignature, ...] = ()

    @property
    def header_digest(self) -> bytes:
        return digest(self.header)


@record
class InclusionProof:
    header: BlockHeader
    commit_round: int
    commit_signatures: tuple[CommitSignature, ...]
    merkle: MerkleProof
    transaction: Transaction


@record
class SubmissionReceipt:
    tx_digest: bytes
    targets: tuple[str, ...]
    multicast: bool


# -- wire messages ---------------------------------------------------------

@record
class SubmitTx:
    tx: Transaction
    relay: bool = False


@record
class SubmitAck:
    tx_digest: bytes
    accepted: bool
    reason: str = ""


@record
class Proposal:
    height: int
    round: int
    proposer: int
    block: Block
    justification: tuple["Vote", ...]
    signature: bytes


@record
class Vote:
    phase: str
    height: int
    round: int
    header_digest: bytes
    validator: int
    signature: bytes


@record
class SyncRequest:
    from_height: int


@record
class SyncResponse:
    blocks: tuple[Block, ...]


@record
class QueryResult:
    request_hash: bytes


@record
class ResultResponse:
    request_hash: bytes
    proof: Optional[InclusionProof]


@record
class QueryTx:
    tx_digest: bytes


@record
class TxResponse:
    tx_digest: bytes
    proof: Optional[InclusionProof]


@record
class RequestNotice:
    proof: InclusionProof


# -- state -------------------------------------------------------------------

@dataclasses.dataclass
class GasTable:
    """Block-space cost of a transaction, in abstract units.

    ``base`` is the fixed cost of carrying any transaction;
    ``signature`` is charged per signature check beyond the transaction's
    own; ``emitted`` per record the execution appends to the block.
    """

    base: int = 4
    signature: int = 1
    emitted: int = 1


def tx_gas(tx: Transaction, gas: GasTable) -> int:
    extra_sigs, emitted = 0, 0
    if tx.kind is TxKind.ATT_REQUEST:
        extra_sigs = 1
    elif tx.kind is TxKind.ATT_REPORT:
        extra_sigs, emitted = 1, 1
    elif tx.kind is TxKind.ENROLL and isinstance(tx.payload, EnrollPayload):
        end = tx.payload.record.endorsement
        extra_sigs = len(tx.payload.witnesses) + (len(end.chain) if end else 0)
    return gas.base + gas.signature * extra_sigs + gas.emitted * emitted


class Rejected(Exception):
    def __init__(self, reason: str, permanent: bool = True):
        super().__init__(reason)
        self.reason = reason
        self.permanent = permanent


class InvalidBlock(Exception):
    pass


@record
class StateSnapshot:
    height: int
    devices: tuple[DeviceRecord, ...]
    registry: RegistrySnapshot
    schemes: tuple[SchemeSpec, ...]
    vendors: tuple[tuple[str, bytes], ...]
    admin_key: bytes
    validator_set: ValidatorSet
    requests: tuple[tuple[bytes, AttestationRequest], ...]
    results: tuple[tuple[bytes, CommonVerificationResult], ...]
    rejected: tuple[tuple[bytes, str], ...]
    transfers: tuple[tuple[str, int], ...]
    seen: tuple[bytes, ...]


class LedgerState:
    """Everything validators agree on; a pure fold over the finalized chain."""

    def __init__(self, validator_set: ValidatorSet, admin_key: bytes):
        self.height = 0
        self.validator_set = validator_set
        self.admin_key = admin_key
        self.devices: dict[str, DeviceRecord] = {}
        self.registry = AttributeRegistry()
        self.schemes = SchemeTable()
        self.vendors: dict[str, bytes] = {}
        self.requests: dict[bytes, AttestationRequest] = {}
        self.results: dict[bytes, CommonVerificationResult] = {}
        self.rejected: dict[bytes, str] = {}
        self.transfers: dict[str, int] = {}
        self.seen: set[bytes] = set()

    @classmethod
    def genesis(cls, validator_set: ValidatorSet, admin_key: bytes,
                schemes: Iterable[tuple[SchemeSpec, Sequence[str]]] = (),
                vendors: Optional[dict[str, bytes]] = None,
                equivalences: Iterable[tuple[str, str]] = (),
                devices: Iterable[DeviceRecord] = (),
                requests: Iterable[AttestationRequest] = ()) -> "LedgerState":
        state = cls(validator_set, admin_key)
        state.vendors.update(vendors or {})
        for spec, vocabulary in schemes:
            install_scheme(state.schemes, state.registry, spec, vocabulary)
        for a, b in equivalences:
            state.registry.declare_equivalence(state.registry.lookup_qualified(a),
                                               state.registry.lookup_qualified(b))
        for rec in devices:
            state.devices[rec.device_id] = rec
        for req in requests:
            state.requests[req.request_hash] = req
        return state

    def copy(self) -> "LedgerState":
        other = LedgerState.__new__(LedgerState)
        other.height = self.height
        other.validator_set = self.validator_set
        other.admin_key = self.admin_key
        other.devices = dict(self.devices)
        other.registry = self.registry.copy()
        other.schemes = self.schemes.copy()
        other.vendors = dict(self.vendors)
        other.requests = dict(self.requests)
        other.results = dict(self.results)
        other.rejected = dict(self.rejected)
        other.transfers = dict(self.transfers)
        other.seen = set(self.seen)
        return other

    def snapshot(self) -> StateSnapshot:
        return StateSnapshot(
            height=self.height,
            devices=tuple(self.devices[k] for k in sorted(self.devices)),
            registry=self.registry.snapshot(),
            schemes=self.schemes.specs(),
            vendors=tuple(sorted(self.vendors.items())),
            admin_key=self.admin_key,
            validator_set=self.validator_set,
            requests=tuple(sorted(self.requests.items())),
            results=tuple(sorted(self.results.items())),
            rejected=tuple(sorted(self.rejected.items())),
            transfers=tuple(sorted(self.transfers.items())),
            seen=tuple(sorted(self.seen)),
        )

    def encode(self) -> bytes:
        return encode(self.snapshot())

    def digest(self) -> bytes:
        return hash_of(self.encode())


def signer_key(state: LedgerState, tx: Transaction) -> Optional[bytes]:
    if tx.kind is TxKind.ENROLL:
        if isinstance(tx.payload, EnrollPayload) and tx.payload.record.device_id == tx.submitter:
            return tx.payload.record.attestation_public_key
        return None
    if tx.kind is TxKind.GOVERNANCE:
        return state.admin_key if tx.submitter == ADMIN_SUBMITTER else None
    if tx.kind is TxKind.ATT_RESULT:
        return None
    rec = state.devices.get(tx.submitter)
    return rec.attestation_public_key if rec else None


def admit(state: LedgerState, tx: Transaction) -> Optional[str]:
    """Mempool admission check. Returns a rejection reason or None.

    Signatures are checked whenever the signer key is known; a transaction
    from a device this node has not seen enroll yet is admitted and judged
    at execution.
    """
    if not isinstance(tx, Transaction) or not isinstance(tx.kind, TxKind):
        return "not a transaction"
    if tx.kind is TxKind.ATT_RESULT:
        return "results are emitted by the ledger, not submitted"
    if len(tx.signature) != crypto.SIGNATURE_SIZE:
        return "malformed signature"
    key = signer_key(state, tx)
    if key is None:
        if tx.kind in (TxKind.ENROLL, TxKind.GOVERNANCE):
            return "unknown signer"
        return None
    if not crypto.check_signature(key, tx.signing_bytes(), tx.signature):
        return "bad signature"
    return None


def _result_tx(result: CommonVerificationResult) -> Transaction:
    return Transaction(TxKind.ATT_RESULT, result, LEDGER_SUBMITTER, b"")


def _execute(state: LedgerState, tx: Transaction) -> list[Transaction]:
    if tx.digest in state.seen:
        raise Rejected("duplicate transaction")
    if tx.kind is TxKind.ATT_RESULT:
        raise Rejected("results are emitted by the ledger, not submitted")
    key = signer_key(state, tx)
    if key is None:
        raise Rejected("unknown signer", permanent=False)
    if not crypto.check_signature(key, tx.signing_bytes(), tx.signature):
        raise Rejected("bad signature")
    p = tx.payload
    emitted: list[Transaction] = []

    if tx.kind is TxKind.ENROLL:
        try:
            validate_enrollment(p, state.devices, state.vendors, state.schemes.tags(), state.validator_set)
        except EnrollmentError as exc:
            raise Rejected(f"{type(exc).__name__}: {exc}") from None
        state.devices[p.record.device_id] = p.record

    elif tx.kind is TxKind.GOVERNANCE:
        reg = state.registry
        try:
            if isinstance(p, RegisterAttribute):
                if p.scheme not in state.schemes:
                    raise Rejected(f"scheme {p.scheme!r} is not installed")
                reg.register_attribute(p.scheme, p.label)
            elif isinstance(p, DeclareEquivalence):
                reg.declare_equivalence(reg.lookup_qualified(p.a), reg.lookup_qualified(p.b))
            elif isinstance(p, InstallScheme):
                known = state.vendors.get(p.spec.vendor)
                if known is not None and known != p.vendor_key:
                    raise Rejected(f"vendor {p.spec.vendor!r} already has another key")
                install_scheme(state.schemes, reg, p.spec, p.vocabulary)
                state.vendors.setdefault(p.spec.vendor, p.vendor_key)
            else:
                raise Rejected("unknown governance payload")
        except UnknownAttribute as exc:
            # may name attributes a pending scheme install has yet to register
            raise Rejected(f"UnknownAttribute: {exc}", permanent=False) from None
        except (DuplicateAttribute, DuplicateScheme, UnsupportedScheme) as exc:
            raise Rejected(f"{type(exc).__name__}: {exc}") from None

    elif tx.kind is TxKind.ATT_REQUEST:
        if not isinstance(p, AttestationRequest) or p.requester_id != tx.submitter:
            raise Rejected("request must be submitted by its requester")
        if not request_signature_ok(p, key):
            raise Rejected("bad request signature")
        if len(p.ka_public_requester) != crypto.PUBLIC_KEY_SIZE:
            raise Rejected("malformed key share")
        for a in p.lst.required:
            try:
                state.registry.get(a)
            except UnknownAttribute:
                raise Rejected(f"unknown attribute {a}") from None
        target = p.lst.target_device
        if target is not None and target not in state.devices:
            raise Rejected(f"unknown target {target!r}", permanent=False)
        rh = p.request_hash
        if rh in state.requests or rh in state.results:
            raise Rejected("duplicate request")
        state.requests[rh] = p

    elif tx.kind is TxKind.ATT_REPORT:
        prover = state.devices[tx.submitter]
        if not isinstance(p, AttReportPayload):
            raise Rejected("malformed report payload")
        try:
            report = state.schemes.verifier(p.scheme).parse(p.report)
        except (UnsupportedScheme, MalformedReport) as exc:
            raise Rejected(f"unreadable report: {exc}") from None
        rh = report.request_hash
        if rh in state.results:
            raise Rejected("request already resolved")
        request = state.requests.get(rh)
        if request is None:
            raise Rejected("unknown request", permanent=False)
        target = request.lst.target_device
        if target is not None and target != prover.device_id:
            raise Rejected("request is addressed to another device")
        result = att_con_vrfy(state.registry, state.schemes, prover, request, p)
        del state.requests[rh]
        state.results[rh] = result
        emitted.append(_result_tx(result))

    elif tx.kind is TxKind.TRANSFER:
        if not isinstance(p, Transfer) or p.amount < 0:
            raise Rejected("malformed transfer")
        state.transfers[tx.submitter] = state.transfers.get(tx.submitter, 0) + 1

    state.seen.add(tx.digest)
    for e in emitted:
        state.seen.add(e.digest)
    return emitted


def apply_transaction(state: LedgerState, tx: Transaction) -> tuple[LedgerState, list[Transaction]]:
    """Execute ``tx`` against ``state`` in place.

    Total: an invalid transaction is recorded in ``state.rejected`` and
    leaves everything else untouched. Returns the state and any emitted
    ``ATT_RESULT`` transactions.
    """
    try:
        emitted = _execute(state, tx)
    except Rejected as exc:
        state.rejected[tx.digest] = exc.reason
        return state, []
    return state, emitted


def tx_root_of(transactions: Sequence[Transaction]) -> bytes:
    if not transactions:
        return EMPTY_TX_ROOT
    return merkle_root([t.digest for t in transactions])


def build_block(state: LedgerState, candidates: Sequence[Transaction], proposer: int,
                parent: bytes, gas_limit: int, gas: GasTable):
    """Assemble the next block from ``candidates`` (already in selection order).

    Returns ``(block, post_state, dropped)`` where ``dropped`` lists the
    candidates that failed execution with their Rejected reason.
    """
    chosen, used = [], 0
    for tx in candidates:
        cost = tx_gas(tx, gas)
        if used + cost <= gas_limit:
            chosen.append(tx)
            used += cost
    chosen.sort(key=lambda t: t.digest)
    work = state.copy()
    included, emitted, dropped = [], [], []
    for tx in chosen:
        try:
            emitted.extend(_execute(work, tx))
        except Rejected as exc:
            dropped.append((tx, exc))
            continue
        included.append(tx)
    work.height = state.height + 1
    txs = tuple(included + emitted)
    header = BlockHeader(work.height, parent, tx_root_of(txs), proposer)
    return Block(header, txs), work, dropped


def execute_block(state: LedgerState, block: Block, parent: bytes, gas_limit: int,
                  gas: GasTable, n_validators: int) -> LedgerState:
    """Re-execute ``block`` on a copy of ``state``; raise InvalidBlock if it is not valid."""
    h = block.header
    if h.height != state.height + 1 or h.parent != parent:
        raise InvalidBlock("does not extend the tip")
    if not 0 <= h.proposer < n_validators:
        raise InvalidBlock("unknown proposer")
    txs = block.transactions
    client = [t for t in txs if t.kind is not TxKind.ATT_RESULT]
    if list(txs[:len(client)]) != client:
        raise InvalidBlock("emitted results must follow client transactions")
    digests = [t.digest for t in client]
    if any(a >= b for a, b in zip(digests, digests[1:])):
        raise InvalidBlock("client transactions out of order")
    if sum(tx_gas(t, gas) for t in client) > gas_limit:
        raise InvalidBlock("block over gas limit")
    work = state.copy()
    emitted = []
    for tx in client:
        try:
            emitted.extend(_execute(work, tx))
        except Rejected as exc:
            raise InvalidBlock(f"contains rejected transaction: {exc.reason}") from None
    if tuple(client + emitted) != txs:
        raise InvalidBlock("emitted results differ from re-execution")
    if tx_root_of(txs) != h.tx_root:
        raise InvalidBlock("tx_root mismatch")
    work.height = h.height
    return work


def commit_certificate_ok(header: BlockHeader, commit_round: int,
                          sigs: Sequence[CommitSignature], validators: ValidatorSet) -> bool:
    n = len(validators.validators)
    if n == 0:
        return False
    stmt = encode(CommitStatement(header.height, commit_round, digest(header)))
    good = set()
    for cs in sigs:
        if cs.validator in good or not 0 <= cs.validator < n:
            continue
        if crypto.check_signature(validators.validators[cs.validator], stmt, cs.signature):
            good.add(cs.validator)
    return len(good) >= validators.quorum


def light_verify(proof: InclusionProof, validators: ValidatorSet) -> bool:
    """Check finality of the header and inclusion of the transaction."""
    try:
        if not commit_certificate_ok(proof.header, proof.commit_round,
                                     proof.commit_signatures, validators):
            return False
        if proof.merkle.root != proof.header.tx_root:
            return False
        return verify_merkle(proof.merkle, proof.transaction.digest)
    except (TypeError, AttributeError, ValueError):
        return False


def inclusion_proof(block: Block, position: int) -> InclusionProof:
    leaves = [t.digest for t in block.transactions]
    return InclusionProof(block.header, block.commit_round, block.commit_signatures,
                          merkle_prove(leaves, position), block.transactions[position])


def replay_chain(genesis: LedgerState, blocks: Sequence[Block], gas_limit: int,
                 gas: GasTable) -> LedgerState:
    state = genesis.copy()
    parent = GENESIS_PARENT
    for b in blocks:
        state = execute_block(state, b, parent, gas_limit, gas, len(genesis.validator_set))
        parent = b.header_digest
    return state


# -- validator actor ---------------------------------------------------------

@dataclasses.dataclass
class LedgerParams:
    validator_ids: tuple[str, ...]
    gas_limit: int = 48
    gas: GasTable = dataclasses.field(default_factory=GasTable)
    scheduler_id: Optional[str] = None
    sync_batch: int = 16


@dataclasses.dataclass
class _Candidate:
    block: Block
    post_state: LedgerState


class ValidatorNode(Actor):
    clocked = True

    def __init__(self, index: int, keypair: crypto.SigningKeyPair, genesis: LedgerState,
                 params: LedgerParams):
        super().__init__(params.validator_ids[index])
        self.index = index
        self.keypair = keypair
        self.params = params
        self.validator_set = genesis.validator_set
        self.n = len(self.validator_set)
        self.genesis = genesis.copy()
        self.state = genesis.copy()
        self.chain: list[Block] = []
        self.tx_location: dict[bytes, tuple[int, int]] = {}
        self.result_location: dict[bytes, tuple[int, int]] = {}
        self.mempool: dict[bytes, tuple[int, Transaction]] = {}
        self.round = 0
        self.deferred: list[tuple[str, object]] = []
        self.last_sync_round = -1
        self._new_height()

    # -- bookkeeping

    @property
    def height(self) -> int:
        """Height of the next block to finalize."""
        return len(self.chain) + 1

    @property
    def tip(self) -> bytes:
        return self.chain[-1].header_digest if self.chain else GENESIS_PARENT

    def _new_height(self):
        self.locked: Optional[tuple[int, bytes]] = None
        self.valid: Optional[tuple[int, bytes, tuple[Vote, ...]]] = None
        self.candidates: dict[bytes, Optional[_Candidate]] = {}
        self.prepares: dict[tuple[int, bytes], dict[int, Vote]] = defaultdict(dict)
        self.commits: dict[tuple[int, bytes], dict[int, Vote]] = defaultdict(dict)
        self.prepared_rounds: set[int] = set()
        self.committed_rounds: set[int] = set()
        self.proposals_seen: set[int] = set()

    def _broadcast(self, msg, targets: Optional[Iterable[str]] = None):
        for vid in (targets if targets is not None else self.params.validator_ids):
            self.send(vid, msg)

    def _sign(self, stmt) -> bytes:
        return crypto.sign(self.keypair.secret, encode(stmt))

    def _vote(self, phase: str, rnd: int, header_digest: bytes) -> Vote:
        cls = PrepareStatement if phase == "prepare" else CommitStatement
        sig = self._sign(cls(self.height, rnd, header_digest))
        return Vote(phase, self.height, rnd, header_digest, self.index, sig)

    def block_at(self, height: int) -> Block:
        return self.chain[height - 1]

    # -- clock

    def on_tick(self, rnd: int) -> None:
        self.round = rnd
        if self.behavior == "silent":
            return
        if rnd % self.n == self.index:
            self._propose(rnd)

    def _mempool_order(self) -> list[Transaction]:
        items = sorted(self.mempool.items(), key=lambda kv: (kv[1][0], kv[0]))
        return [tx for _, (_, tx) in items]

    def _build(self, candidates: Sequence[Transaction]) -> tuple[Block, LedgerState]:
        block, post, dropped = build_block(self.state, candidates, self.index, self.tip,
                                           self.params.gas_limit, self.params.gas)
        for tx, exc in dropped:
            if exc.permanent:
                self.mempool.pop(tx.digest, None)
        return block, post

    def _propose(self, rnd: int) -> None:
        just: tuple[Vote, ...] = ()
        if self.valid is not None and self.candidates.get(self.valid[1]) is not None:
            block = self.candidates[self.valid[1]].block
            just = self.valid[2]
        else:
            block, post = self._build(self._mempool_order())
            if not block.transactions:
                return
            if self.behavior == "forge-results":
                block = self._forge_block(block)
            self.candidates[block.header_digest] = None if self.behavior == "forge-results" else _Candidate(block, post)
        if self.behavior == "equivocate":
            self._equivocate(rnd, block, just)
            return
        self._broadcast(self._proposal(rnd, block, just))

    def _proposal(self, rnd: int, block: Block, just) -> Proposal:
        sig = self._sign(ProposalStatement(self.height, rnd, block.header_digest))
        return Proposal(self.height, rnd, self.index, block, tuple(just), sig)

    def _equivocate(self, rnd: int, block: Block, just) -> None:
        client = [t for t in block.transactions if t.kind is not TxKind.ATT_RESULT]
        alt, _ = self._build(client[:-1]) if client else (block, None)
        others = [v for i, v in enumerate(self.params.validator_ids) if i != self.index]
        self.rng.shuffle(others)
        half = len(others) // 2
        self.send(self.actor_id, self._proposal(rnd, block, just))
        self._broadcast(self._proposal(rnd, block, just), others[:half])
        self._broadcast(self._proposal(rnd, alt, ()), others[half:])

    def _forge_block(self, block: Block) -> Block:
        """Swap in a fabricated satisfied verdict; honest validators will refuse it."""
        txs = list(block.transactions)
        forged = None
        for i, tx in enumerate(txs):
            if tx.kind is TxKind.ATT_RESULT:
                res = dataclasses.replace(tx.payload, verdict=Verdict.SATISFIED, missing=(),
                                          ka_public_prover=self.rng.randbytes(32))
                txs[i] = forged = _result_tx(res)
                break
        if forged is None and self.state.requests:
            rh = sorted(self.state.requests)[0]
            req = self.state.requests[rh]
            txs.append(_result_tx(CommonVerificationResult(
                rh, req.requester_id, req.lst.target_device or "nobody", Verdict.SATISFIED,
                ka_public_prover=self.rng.randbytes(32), prover_measurement=bytes(32))))
        header = dataclasses.replace(block.header, tx_root=tx_root_of(txs))
        return Block(header, tuple(txs))

    # -- messages

    def on_message(self, src: str, msg) -> None:
        if self.behavior == "silent":
            return
        handler = getattr(self, "_on_" + type(msg).__name__, None)
        if handler is not None:
            handler(src, msg)

    def _on_SubmitTx(self, src: str, msg: SubmitTx) -> None:
        tx = msg.tx
        from_peer = src in self.params.validator_ids
        if tx.digest in self.tx_location:
            reason = "already included"
        else:
            reason = admit(self.state, tx)
        if reason is None and tx.digest not in self.mempool:
            self.mempool[tx.digest] = (self.sim.now, tx)
            if msg.relay and not from_peer:
                others = [v for v in self.params.validator_ids if v != self.actor_id]
                self._broadcast(SubmitTx(tx, False), others)
        if not from_peer:
            self.send(src, SubmitAck(tx.digest, reason is None, reason or ""))

    def _defer(self, src: str, msg) -> None:
        self.deferred.append((src, msg))
        if self.last_sync_round != self.round:
            self.last_sync_round = self.round
            self.send(src, SyncRequest(self.height))

    def _on_Proposal(self, src: str, msg: Proposal) -> None:
        if not 0 <= msg.proposer < self.n:
            return
        stmt = encode(ProposalStatement(msg.height, msg.round, msg.block.header_digest))
        if not crypto.check_signature(self.validator_set.validators[msg.proposer], stmt, msg.signature):
            return
        if msg.height > self.height:
            self._defer(src, msg)
            return
        if msg.height < self.height or msg.round != self.round or msg.proposer != msg.round % self.n:
            return
        equivocator = self.behavior == "equivocate"
        if msg.round in self.proposals_seen and not equivocator:
            return
        self.proposals_seen.add(msg.round)
        d = msg.block.header_digest
        cand = self._candidate(msg.block)
        if cand is None:
            return
        if equivocator:
            # signs whatever it sees, in both phases
            self._broadcast(self._vote("prepare", msg.round, d))
            self._broadcast(self._vote("commit", msg.round, d))
            return
        if msg.round not in self.prepared_rounds and self._may_prepare(d, msg.justification, msg.round):
            self.prepared_rounds.add(msg.round)
            self._broadcast(self._vote("prepare", msg.round, d))
        self._check_quorums(d)

    def _candidate(self, block: Block) -> Optional[_Candidate]:
        d = block.header_digest
        if d in self.candidates:
            return self.candidates[d]
        try:
            post = execute_block(self.state, block, self.tip, self.params.gas_limit,
                                 self.params.gas, self.n)
            cand = _Candidate(block, post)
        except InvalidBlock:
            cand = None
        self.candidates[d] = cand
        return cand

    def _polka_ok(self, votes: Sequence[Vote], header_digest: bytes) -> Optional[int]:
        """Round of a valid prepare quorum for ``header_digest`` at this height, else None."""
        if not votes:
            return None
        rnd = votes[0].round
        seen = set()
        for v in votes:
            if (v.phase != "prepare" or v.round != rnd or v.height != self.height
                    or v.header_digest != header_digest or v.validator in seen
                    or not 0 <= v.validator < self.n):
                return None
            stmt = encode(PrepareStatement(v.height, v.round, v.header_digest))
            if not crypto.check_signature(self.validator_set.validators[v.validator], stmt, v.signature):
                return None
            seen.add(v.validator)
        return rnd if len(seen) >= self.validator_set.quorum else None

    def _may_prepare(self, d: bytes, justification, rnd: int) -> bool:
        if self.locked is None or self.locked[1] == d:
            return True
        jr = self._polka_ok(justification, d)
        return jr is not None and self.locked[0] <= jr < rnd

    def _on_Vote(self, src: str, msg: Vote) -> None:
        if msg.phase not in ("prepare", "commit") or not 0 <= msg.validator < self.n:
            return
        if msg.height > self.height:
            self._defer(src, msg)
            return
        if msg.height < self.height:
            self._late_commit(msg)
            return
        cls = PrepareStatement if msg.phase == "prepare" else CommitStatement
        stmt = encode(cls(msg.height, msg.round, msg.header_digest))
        if not crypto.check_signature(self.validator_set.validators[msg.validator], stmt, msg.signature):
            return
        pool = self.prepares if msg.phase == "prepare" else self.commits
        pool[(msg.round, msg.header_digest)].setdefault(msg.validator, msg)
        self._check_quorums(msg.header_digest)

    def _late_commit(self, msg: Vote) -> None:
        """Attach a commit that arrives just after finalization to the certificate."""
        if msg.phase != "commit" or msg.height != self.height - 1 or not self.chain:
            return
        last = self.chain[-1]
        if msg.round != last.commit_round or msg.header_digest != last.header_digest:
            return
        if any(cs.validator == msg.validator for cs in last.commit_signatures):
            return
        stmt = encode(CommitStatement(msg.height, msg.round, msg.header_digest))
        if not crypto.check_signature(self.validator_set.validators[msg.validator], stmt, msg.signature):
            return
        sigs = tuple(sorted(last.commit_signatures + (CommitSignature(msg.validator, msg.signature),),
                            key=lambda cs: cs.validator))
        self.chain[-1] = dataclasses.replace(last, commit_signatures=sigs)

    def _check_quorums(self, d: bytes) -> None:
        if self.candidates.get(d) is None:
            return
        q = self.validator_set.quorum
        for (rnd, hd), votes in list(self.prepares.items()):
            if hd != d or len(votes) < q:
                continue
            if self.valid is None or rnd > self.valid[0]:
                self.valid = (rnd, d, tuple(votes[i] for i in sorted(votes)))
            if rnd == self.round and rnd not in self.committed_rounds and self.honest_voter:
                self.committed_rounds.add(rnd)
                self.locked = (rnd, d)
                self._broadcast(self._vote("commit", rnd, d))
        for (rnd, hd), votes in list(self.commits.items()):
            if hd == d and len(votes) >= q:
                self._finalize(rnd, d)
                return

    @property
    def honest_voter(self) -> bool:
        return self.behavior in ("honest", "forge-results")

    def _finalize(self, rnd: int, d: bytes) -> None:
        cand = self.candidates[d]
        votes = self.commits[(rnd, d)]
        sigs = tuple(CommitSignature(i, votes[i].signature) for i in sorted(votes))
        block = dataclasses.replace(cand.block, commit_round=rnd, commit_signatures=sigs)
        self._append(block, cand.post_state)

    def _append(self, block: Block, post: LedgerState) -> None:
        self.chain.append(block)
        self.state = post
        h = block.header.height
        for pos, tx in enumerate(block.transactions):
            self.tx_location[tx.digest] = (h, pos)
            self.mempool.pop(tx.digest, None)
            if tx.kind is TxKind.ATT_RESULT:
                self.result_location[tx.payload.request_hash] = (h, pos)
            elif self.honest:
                self.sim.sample("final", tx.digest)
        if self.behavior != "silent":
            self._forward_requests(block)
        self._new_height()
        pending, self.deferred = self.deferred, []
        for src, msg in pending:
            self.on_message(src, msg)

    def _forward_requests(self, block: Block) -> None:
        for pos, tx in enumerate(block.transactions):
            if tx.kind is not TxKind.ATT_REQUEST:
                continue
            proof = inclusion_proof(block, pos)
            target = tx.payload.lst.target_device or self.params.scheduler_id
            if target is None or target not in self.sim.actors:
                continue
            if self.behavior == "forge-results":
                req = dataclasses.replace(tx.payload, ka_public_requester=self.rng.randbytes(32))
                proof = dataclasses.replace(proof, transaction=dataclasses.replace(tx, payload=req))
            self.send(target, RequestNotice(proof))

    def _on_SyncRequest(self, src: str, msg: SyncRequest) -> None:
        start = max(1, msg.from_height)
        blocks = tuple(self.chain[start - 1:start - 1 + self.params.sync_batch])
        if blocks:
            self.send(src, SyncResponse(blocks))

    def _on_SyncResponse(self, src: str, msg: SyncResponse) -> None:
        for block in msg.blocks:
            if block.header.height != self.height:
                continue
            if not commit_certificate_ok(block.header, block.commit_round,
                                         block.commit_signatures, self.validator_set):
                return
            try:
                post = execute_block(self.state, block, self.tip, self.params.gas_limit,
                                     self.params.gas, self.n)
            except InvalidBlock:
                return
            self._append(block, post)

    def proof_for_tx(self, tx_digest: bytes) -> Optional[InclusionProof]:
        loc = self.tx_location.get(tx_digest)
        return inclusion_proof(self.block_at(loc[0]), loc[1]) if loc else None

    def proof_for_result(self, request_hash: bytes) -> Optional[InclusionProof]:
        loc = self.result_location.get(request_hash)
        return inclusion_proof(self.block_at(loc[0]), loc[1]) if loc else None

    def _on_QueryResult(self, src: str, msg: QueryResult) -> None:
        if self.behavior == "forge-results":
            self.send(src, ResultResponse(msg.request_hash, self._forged_proof(msg.request_hash)))
            return
        self.send(src, ResultResponse(msg.request_hash, self.proof_for_result(msg.request_hash)))

    def _on_QueryTx(self, src: str, msg: QueryTx) -> None:
        self.send(src, TxResponse(msg.tx_digest, self.proof_for_tx(msg.tx_digest)))

    def query_result(self, request_hash: bytes):
        """Direct (non-network) form of the result query."""
        if self.behavior == "forge-results":
            proof = self._forged_proof(request_hash)
        else:
            proof = self.proof_for_result(request_hash)
        return (proof.transaction.payload, proof) if proof else None

    def _forged_proof(self, request_hash: bytes) -> InclusionProof:
        real = self.proof_for_result(request_hash)
        victim = real.transaction.payload if real else None
        fake = CommonVerificationResult(
            request_hash,
            victim.requester_id if victim else "",
            victim.prover_id if victim else "",
            Verdict.SATISFIED,
            ka_public_prover=self.rng.randbytes(32),
            prover_measurement=bytes(32),
        )
        tx = _result_tx(fake)
        strategy = self.rng.randrange(3)
        last = self.chain[-1] if self.chain else None
        if strategy == 0 or last is None:
            # a header of its own, signed only by itself plus borrowed signatures
            header = BlockHeader(self.height, self.tip, tx.digest, self.index)
            sig = self._sign(CommitStatement(header.height, self.round, digest(header)))
            borrowed = tuple(cs for cs in (last.commit_signatures if last else ()) if cs.validator != self.index)
            sigs = (CommitSignature(self.index, sig),) + borrowed
            return InclusionProof(header, self.round, sigs, merkle_prove([tx.digest], 0), tx)
        if strategy == 1:
            # genuine finalized header, transaction not in its tree
            leaves = [t.digest for t in last.transactions]
            mp = merkle_prove(leaves, 0)
            return InclusionProof(last.header, last.commit_round, last.commit_signatures, mp, tx)
        # genuine signatures over a header whose tx_root was swapped
        header = dataclasses.replace(last.header, tx_root=tx.digest)
        return InclusionProof(header, last.commit_round, last.commit_signatures,
                              merkle_prove([tx.digest], 0), tx)

    def physical_read(self, platform) -> Optional[Witness]:
        """Read the device key over a dedicated physical channel and sign a witness."""
        if self.behavior == "silent":
            return None
        key = platform.export_public_key()
        if self.behavior != "honest":
            key = self.rng.randbytes(32)
        return sign_witness(self.keypair, self.index, platform.device_id, key, platform.spec.tag)

    def finalized_commit_certificates(self):
        """(height, round, digest) of every commit quorum this node has collected."""
        out = []
        for b in self.chain:
            out.append((b.header.height, b.commit_round, b.header_digest))
        for (rnd, d), votes in self.commits.items():
            if len(votes) >= self.validator_set.quorum:
                out.append((self.height, rnd, d))
        return out
