"""Device-side client that runs attestations and opens channels to peers.

A :class:`DeviceClient` trusts nothing it receives from the network except
what light-verifies against the validator set it was handed at enrollment.
Every ledger fact it acts on must arrive with a valid inclusion proof.

Channel set-up
--------------
*One-way*: once the forward result is satisfied, the requester combines its
request share with the prover's report share; the prover does the same
with the roles swapped. The transcript is the forward request hash.

*Mutual* (default): after a satisfied forward result the prover attests the
requester in return. Each side combines the share from the report it
produced with the peer's share from the other verified result, and both
request hashes form the transcript.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

from . import crypto
from .codec import hash_of, record
from .enrollment import (
    DIRECT,
    EnrollmentError,
    NotEnrolled,
    distribute_validator_set,
    enroll_direct,
    enroll_via_vendor,
)
from .ledger import (
    InclusionProof,
    QueryResult,
    QueryTx,
    RequestNotice,
    ResultResponse,
    SubmitAck,
    SubmitTx,
    TxResponse,
    ValidatorSet,
    light_verify,
)
from .protocol import (
    AttestationRequest,
    CommonVerificationResult,
    SecureChannel,
    att_gen,
    att_rqst,
    lookup_requirements,
    new_request_nonce,
    session_transcript,
)
from .registry import AttributeRegistry, UnknownAttribute
from .scheduler import CapabilityAdvertisement
from .simnet import Actor
from .tee import EnclaveHandle, NotInitialized, TeePlatform, VendorMock, create_environment
from .transactions import Transaction, TxKind, sign_transaction

MUTUAL = "mutual"
ONE_WAY = "one-way"

GREETING = b"hello over an attested channel"


class Timeout(Exception):
    pass


class VerificationFailed(Exception):
    pass


class AllNodesUnreachable(Exception):
    pass


@record
class Retry:
    tx_digest: bytes
    attempt: int


@record
class ChannelData:
    sender: str
    nonce: bytes
    ciphertext: bytes


@dataclasses.dataclass
class AttestationPlan:
    """One attestation this device will start once enrolled."""

    at_round: int
    requirements: tuple[str, ...]
    target: Optional[str] = None


@dataclasses.dataclass
class ClientParams:
    validator_ids: tuple[str, ...]
    mode: str = MUTUAL
    timeout_rounds: int = 20
    poll_every: int = 1
    multicast: bool = True
    ack_timeout: int = 3
    scheduler_id: Optional[str] = None


@dataclasses.dataclass
class _Watch:
    """A request whose on-chain result this device is waiting for."""

    request: AttestationRequest
    role: str                      # "requester" or "prover"
    started: int
    ka: crypto.KeyAgreementShare   # request share (requester) or report share (prover)
    reverse_of: Optional[bytes] = None
    rejected_proofs: int = 0
    result: Optional[CommonVerificationResult] = None
    outcome: Optional[str] = None


@dataclasses.dataclass
class _Pending:
    tx: Transaction
    attempt: int = 0
    done: bool = False


class DeviceClient(Actor):
    clocked = True

    def __init__(self, platform: TeePlatform, params: ClientParams,
                 registry_view: Callable[[], AttributeRegistry],
                 code_identity: bytes = b"dhtee-client-v1",
                 vendor: Optional[VendorMock] = None,
                 enrollment_path: str = "vendor",
                 plans: Sequence[AttestationPlan] = (),
                 peer_requirements: Sequence[str] = ()):
        super().__init__(platform.device_id)
        self.platform = platform
        self.params = params
        self.registry_view = registry_view
        self.vendor = vendor
        self.enrollment_path = enrollment_path
        self.handle: EnclaveHandle = create_environment(platform, platform.device_id, code_identity)
        self.plans = sorted(plans, key=lambda p: p.at_round)
        self.peer_requirements = tuple(peer_requirements)
        self.validator_set: ValidatorSet = ValidatorSet((), 1)
        self.enrolled = False
        self.enroll_tx: Optional[Transaction] = None
        self.enroll_error: Optional[str] = None
        self.witness_sources: Sequence = ()
        self.pending: dict[bytes, _Pending] = {}
        self.watches: dict[bytes, _Watch] = {}
        self.answered: set[bytes] = set()
        self.channels: dict[str, SecureChannel] = {}
        self.outcomes: dict[bytes, str] = {}
        self.errors: list[str] = []
        self.accepted_proofs: list[InclusionProof] = []
        self.received: list[tuple[str, bytes]] = []
        self._early_data: list[ChannelData] = []
        self._early_notices: list[tuple[str, RequestNotice]] = []
        self._in_flight: dict[Optional[str], bytes] = {}
        self._round = 0

    # -- enrollment

    def mark_enrolled(self, validator_set: ValidatorSet) -> None:
        """Treat the device as already enrolled at genesis."""
        distribute_validator_set(self, validator_set)
        self.enrolled = True

    def begin_enrollment(self, validator_set: ValidatorSet) -> None:
        try:
            if self.enrollment_path == DIRECT:
                tx = enroll_direct(self.platform, self.witness_sources, validator_set.quorum)
            else:
                tx = enroll_via_vendor(self.platform, self.vendor)
        except EnrollmentError as exc:
            self.enroll_error = f"{type(exc).__name__}: {exc}"
            return
        # the validator keys come with the enrollment hand-off
        distribute_validator_set(self, validator_set)
        self.enroll_tx = tx
        self.submit(tx)

    def _on_TxResponse(self, src: str, msg: TxResponse) -> None:
        if self.enrolled or self.enroll_tx is None or msg.tx_digest != self.enroll_tx.digest:
            return
        if msg.proof is None or not self._verified(msg.proof):
            return
        if msg.proof.transaction.digest != self.enroll_tx.digest:
            return
        self.enrolled = True
        if self.params.scheduler_id in self.sim.actors:
            ad = CapabilityAdvertisement(self.actor_id, self.platform.spec.tag, self.platform.attributes)
            self.send(self.params.scheduler_id, ad)
        early, self._early_notices = self._early_notices, []
        for src_, notice in early:
            self._on_RequestNotice(src_, notice)

    def _verified(self, proof: InclusionProof) -> bool:
        ok = light_verify(proof, self.validator_set)
        if ok:
            self.accepted_proofs.append(proof)
        return ok

    # -- submission

    def submit(self, tx: Transaction) -> None:
        self.sim.sample("submit", tx.digest)
        if self.params.multicast:
            for vid in self.params.validator_ids:
                self.send(vid, SubmitTx(tx))
            return
        self.pending[tx.digest] = _Pending(tx)
        self._send_next(tx.digest)

    def _send_next(self, tx_digest: bytes) -> None:
        p = self.pending[tx_digest]
        if p.attempt >= len(self.params.validator_ids):
            p.done = True
            self.errors.append(f"AllNodesUnreachable: {tx_digest.hex()[:16]}")
            return
        self.send(self.params.validator_ids[p.attempt], SubmitTx(p.tx, relay=True))
        self.sim.timer(self.actor_id, self.params.ack_timeout, Retry(tx_digest, p.attempt))

    def _on_SubmitAck(self, src: str, msg: SubmitAck) -> None:
        p = self.pending.get(msg.tx_digest)
        if p is None or p.done:
            return
        p.done = True
        if not msg.accepted and msg.reason != "already included":
            self.errors.append(f"rejected by {src}: {msg.reason}")

    def _on_Retry(self, src: str, msg: Retry) -> None:
        p = self.pending.get(msg.tx_digest)
        if src != self.actor_id or p is None or p.done or p.attempt != msg.attempt:
            return
        p.attempt += 1
        self._send_next(msg.tx_digest)

    # -- clock

    def on_tick(self, rnd: int) -> None:
        self._round = rnd
        if not self.enrolled:
            if self.enroll_tx is not None:
                for vid in self.params.validator_ids:
                    self.send(vid, QueryTx(self.enroll_tx.digest))
            return
        while self.plans and self.plans[0].at_round <= rnd:
            plan = self.plans[0]
            if plan.target in self._in_flight:
                break
            self.plans.pop(0)
            self._start(plan)
        for rh, w in list(self.watches.items()):
            if w.outcome is not None:
                continue
            if rnd - w.started > self.params.timeout_rounds:
                self._give_up(rh, w)
            elif (rnd - w.started) % self.params.poll_every == 0:
                for vid in self.params.validator_ids:
                    self.send(vid, QueryResult(rh))

    def _give_up(self, rh: bytes, w: _Watch) -> None:
        exc = VerificationFailed if w.rejected_proofs else Timeout
        self._finish(rh, w, exc.__name__)

    def _finish(self, rh: bytes, w: _Watch, outcome: str) -> None:
        w.outcome = outcome
        self.outcomes[rh] = outcome
        for peer, h in list(self._in_flight.items()):
            if h == rh and outcome != "satisfied":
                del self._in_flight[peer]

    # -- requester side

    def request_attestation(self, requirements: Sequence[str], target: Optional[str] = None,
                            reverse_of: Optional[bytes] = None) -> AttestationRequest:
        """att_rqst: sign a request for ``requirements`` and submit it."""
        if not self.enrolled:
            raise NotEnrolled(self.actor_id)
        lst = lookup_requirements(self.registry_view(), requirements, target)
        ka = crypto.ka_generate(self.rng.randbytes(32))
        req = att_rqst(self.actor_id, self.platform.keypair.secret, lst, ka,
                       new_request_nonce(self.rng))
        self.submit(sign_transaction(TxKind.ATT_REQUEST, req, self.actor_id,
                                     self.platform.keypair.secret))
        self.watches[req.request_hash] = _Watch(req, "requester", self._round, ka,
                                                reverse_of=reverse_of)
        return req

    def _start(self, plan: AttestationPlan) -> None:
        try:
            req = self.request_attestation(plan.requirements, plan.target)
        except (UnknownAttribute, NotEnrolled) as exc:
            self.errors.append(f"{type(exc).__name__}: {exc}")
            return
        self._in_flight[plan.target] = req.request_hash

    # -- prover side

    def _on_RequestNotice(self, src: str, msg: RequestNotice) -> None:
        proof = msg.proof
        tx = proof.transaction
        if tx.kind is not TxKind.ATT_REQUEST or not isinstance(tx.payload, AttestationRequest):
            return
        req = tx.payload
        rh = req.request_hash
        if not self.enrolled:
            if len(self._early_notices) < 64:
                self._early_notices.append((src, msg))
            return
        if rh in self.answered or not self._verified(proof):
            return
        if req.lst.target_device not in (None, self.actor_id) or req.requester_id == self.actor_id:
            self.errors.append(f"refused request {rh.hex()[:16]} addressed elsewhere")
            self.answered.add(rh)
            return
        self.answered.add(rh)
        ka = crypto.ka_generate(self.rng.randbytes(32))
        try:
            _, payload = att_gen(self.platform, self.handle, req, ka)
        except NotInitialized as exc:
            self.errors.append(f"NotInitialized: {exc}")
            return
        self.submit(sign_transaction(TxKind.ATT_REPORT, payload, self.actor_id,
                                     self.platform.keypair.secret))
        self.watches.setdefault(rh, _Watch(req, "prover", self._round, ka))

    # -- results

    def _on_ResultResponse(self, src: str, msg: ResultResponse) -> None:
        w = self.watches.get(msg.request_hash)
        if w is None or w.outcome is not None or msg.proof is None:
            return
        proof = msg.proof
        tx = proof.transaction
        res = tx.payload
        if (tx.kind is not TxKind.ATT_RESULT or not isinstance(res, CommonVerificationResult)
                or res.request_hash != msg.request_hash or not self._verified(proof)):
            w.rejected_proofs += 1
            return
        if res.requester_id != w.request.requester_id:
            w.rejected_proofs += 1
            return
        w.result = res
        self._finish(msg.request_hash, w, res.verdict.value)
        if res.satisfied:
            self._on_satisfied(msg.request_hash, w)

    def _on_satisfied(self, rh: bytes, w: _Watch) -> None:
        res = w.result
        if self.params.mode == ONE_WAY:
            if w.role == "requester":
                self._establish(res.prover_id, w.ka, res.ka_public_prover, (rh,))
            else:
                self._establish(w.request.requester_id, w.ka, w.request.ka_public_requester, (rh,))
            return
        if w.role == "prover" and not self._is_reverse(w.request):
            # the forward run about us succeeded; attest the requester in return
            try:
                self.request_attestation(self.peer_requirements, w.request.requester_id, reverse_of=rh)
            except (UnknownAttribute, NotEnrolled) as exc:
                self.errors.append(f"{type(exc).__name__}: {exc}")
            return
        self._try_pair()

    def _is_reverse(self, req: AttestationRequest) -> bool:
        """True if ``req`` is a peer attesting us back for a run we started."""
        peer = req.requester_id
        for w in self.watches.values():
            if w.role != "requester" or w.reverse_of is not None:
                continue
            if w.request.lst.target_device == peer or (w.result is not None and w.result.prover_id == peer):
                return True
        return False

    def _try_pair(self) -> None:
        """Establish mutual channels whose two verified runs are both satisfied."""
        sat = {rh: w for rh, w in self.watches.items() if w.outcome == "satisfied"}
        for rh, w in sat.items():
            if w.role == "requester" and w.reverse_of is not None:
                # we are the original prover; rh is our reverse request
                fwd = sat.get(w.reverse_of)
                if fwd is not None and fwd.role == "prover":
                    self._establish(w.result.prover_id, fwd.ka, w.result.ka_public_prover,
                                    (w.reverse_of, rh))
            elif w.role == "requester" and w.reverse_of is None:
                # we are the original requester; find the reverse run we proved
                peer = w.result.prover_id
                for rrh, rw in sat.items():
                    if (rw.role == "prover" and rw.request.requester_id == peer
                            and rw.request.lst.target_device == self.actor_id):
                        self._establish(peer, rw.ka, w.result.ka_public_prover, (rh, rrh))

    def _establish(self, peer: str, own: crypto.KeyAgreementShare, peer_share: bytes,
                   basis: tuple[bytes, ...]) -> None:
        if peer in self.channels and self.channels[peer].basis == basis:
            return
        try:
            shared = crypto.ka_shared(own, peer_share)
        except crypto.InvalidPublicShare as exc:
            self.errors.append(f"InvalidPublicShare: {exc}")
            return
        session = crypto.derive_session(shared, session_transcript(*basis))
        self.channels[peer] = SecureChannel(peer, session, self.sim.now, basis)
        for (target, h) in list(self._in_flight.items()):
            if h in basis:
                del self._in_flight[target]
        self._send_sealed(peer, GREETING)
        early, self._early_data = self._early_data, []
        for m in early:
            self._on_ChannelData(m.sender, m)

    # -- channel traffic

    def _send_sealed(self, peer: str, plaintext: bytes) -> None:
        ch = self.channels[peer]
        nonce = hash_of(self.actor_id.encode())[:4] + ch.send_counter.to_bytes(8, "big")
        ch.send_counter += 1
        self.send(peer, ChannelData(self.actor_id, nonce, crypto.seal(ch.session, nonce, plaintext)))

    def _on_ChannelData(self, src: str, msg: ChannelData) -> None:
        ch = self.channels.get(src)
        if ch is None:
            if len(self._early_data) < 64:
                self._early_data.append(msg)
            return
        try:
            self.received.append((src, crypto.unseal(ch.session, msg.nonce, msg.ciphertext)))
        except crypto.AuthenticationFailure:
            self.errors.append(f"AuthenticationFailure from {src}")

    def on_message(self, src: str, msg) -> None:
        handler = getattr(self, "_on_" + type(msg).__name__, None)
        if handler is not None:
            handler(src, msg)
