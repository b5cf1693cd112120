"""Ledger transaction envelope and the small governance/transfer payloads."""
from __future__ import annotations

import enum
from functools import cached_property

from . import crypto
from .codec import digest, encode, record
from .tee import SchemeSpec

LEDGER_SUBMITTER = "ledger"
ADMIN_SUBMITTER = "admin"


class TxKind(enum.Enum):
    ENROLL = "enroll"
    GOVERNANCE = "governance"
    ATT_REQUEST = "att-request"
    ATT_REPORT = "att-report"
    ATT_RESULT = "att-result"
    TRANSFER = "transfer"


@record
class TxBody:
    kind: TxKind
    payload: object
    submitter: str


@record
class Transaction:
    kind: TxKind
    payload: object
    submitter: str
    signature: bytes

    def signing_bytes(self) -> bytes:
        return encode(TxBody(self.kind, self.payload, self.submitter))

    @cached_property
    def digest(self) -> bytes:
        return digest(self)


def sign_transaction(kind: TxKind, payload, submitter: str, secret: bytes) -> Transaction:
    body = encode(TxBody(kind, payload, submitter))
    return Transaction(kind, payload, submitter, crypto.sign(secret, body))


@record
class RegisterAttribute:
    scheme: str
    label: str


@record
class DeclareEquivalence:
    a: str
    b: str


@record
class InstallScheme:
    spec: SchemeSpec
    vocabulary: tuple[str, ...]
    vendor_key: bytes


@record
class Transfer:
    recipient: str
    amount: int
    memo: bytes = b""


@record
class AttReportPayload:
    """A native report, carried opaquely in its scheme's own byte layout."""

    scheme: str
    report: bytes
