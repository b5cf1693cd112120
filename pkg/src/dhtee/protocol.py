"""Attestation records and the request / report / conversion steps.

``att_rqst`` and ``att_gen`` build the signed request and the native report
on the devices; ``att_con_vrfy`` runs inside transaction execution on every
validator and turns a native report into the scheme-neutral
:class:`CommonVerificationResult`. The polling, light verification and
channel set-up that follow live in :mod:`dhtee.client`.
"""
from __future__ import annotations

import dataclasses
import enum
from typing import Optional

from . import crypto
from .codec import digest, encode, record
from .registry import AttributeRegistry, RequirementList, UnknownAttribute
from .tee import (
    EnclaveHandle,
    MalformedReport,
    NativeAttestationReport,
    SchemeTable,
    TeePlatform,
    UnsupportedScheme,
    encode_native,
    generate_native_report,
)
from .transactions import AttReportPayload

NONCE_SIZE = 16


class Verdict(enum.Enum):
    SATISFIED = "satisfied"
    UNSATISFIED = "unsatisfied"
    INVALID_REPORT = "invalid-report"


@record
class RequestBody:
    lst: RequirementList
    requester_id: str
    ka_public_requester: bytes
    nonce: bytes


@record
class AttestationRequest:
    lst: RequirementList
    requester_id: str
    ka_public_requester: bytes
    nonce: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return encode(RequestBody(self.lst, self.requester_id, self.ka_public_requester, self.nonce))

    @property
    def request_hash(self) -> bytes:
        return digest(self)


@record
class CommonVerificationResult:
    request_hash: bytes
    requester_id: str
    prover_id: str
    verdict: Verdict
    witness_map: tuple[tuple[int, int], ...] = ()
    missing: tuple[int, ...] = ()
    ka_public_prover: bytes = b""
    prover_measurement: bytes = b""

    @property
    def satisfied(self) -> bool:
        return self.verdict is Verdict.SATISFIED


@dataclasses.dataclass
class SecureChannel:
    peer: str
    session: crypto.SessionKey
    established_at: int
    basis: tuple[bytes, ...]
    send_counter: int = 0


def att_rqst(requester_id: str, secret: bytes, lst: RequirementList,
             ka: crypto.KeyAgreementShare, nonce: bytes) -> AttestationRequest:
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    unsigned = AttestationRequest(lst, requester_id, ka.public_share, nonce)
    return dataclasses.replace(unsigned, signature=crypto.sign(secret, unsigned.body()))


def request_signature_ok(request: AttestationRequest, public_key: bytes) -> bool:
    return crypto.check_signature(public_key, request.body(), request.signature)


def att_gen(platform: TeePlatform, handle: EnclaveHandle, request: AttestationRequest,
            ka: crypto.KeyAgreementShare) -> tuple[NativeAttestationReport, AttReportPayload]:
    report = generate_native_report(platform, handle, request, ka)
    return report, AttReportPayload(platform.spec.tag, encode_native(report, platform.spec))


def att_con_vrfy(registry: AttributeRegistry, schemes: SchemeTable, prover_record,
                 request: AttestationRequest, payload: AttReportPayload) -> CommonVerificationResult:
    """Verify a native report against the prover's registered key and translate it.

    Never raises on bad input. Any report that cannot be trusted as an
    answer to this exact request yields ``invalid-report``.
    """
    rhash = request.request_hash
    invalid = CommonVerificationResult(rhash, request.requester_id, prover_record.device_id,
                                       Verdict.INVALID_REPORT)
    if payload.scheme != prover_record.scheme:
        return invalid
    try:
        verifier = schemes.verifier(payload.scheme)
        report = verifier.parse(payload.report)
    except (UnsupportedScheme, MalformedReport):
        return invalid
    if not verifier.verify(payload.report, prover_record.attestation_public_key):
        return invalid
    if report.request_hash != rhash or report.requester_id != request.requester_id:
        return invalid
    try:
        if any(registry.get(a).scheme != prover_record.scheme for a in report.attributes):
            return invalid
        sat = registry.satisfies(request.lst, report.attributes)
    except UnknownAttribute:
        return invalid
    if not sat.satisfied:
        return CommonVerificationResult(rhash, request.requester_id, prover_record.device_id,
                                        Verdict.UNSATISFIED, sat.witnesses, sat.missing,
                                        b"", report.measurement)
    return CommonVerificationResult(rhash, request.requester_id, prover_record.device_id,
                                    Verdict.SATISFIED, sat.witnesses, (),
                                    report.ka_public, report.measurement)


def session_transcript(*request_hashes: bytes) -> bytes:
    """Transcript hash binding a session to the attestation run(s) behind it."""
    return digest(tuple(request_hashes))


def new_request_nonce(rng) -> bytes:
    return rng.randbytes(NONCE_SIZE)


def lookup_requirements(registry: AttributeRegistry, labels, target: Optional[str] = None) -> RequirementList:
    return RequirementList(tuple(registry.lookup_qualified(x) for x in labels), target)
