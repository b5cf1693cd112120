"""Device enrollment: vendor-endorsed and direct (physical) key registration.

Both paths end in an ``ENROLL`` transaction signed by the device key, which
doubles as proof of possession. Validators accept it only if

* vendor path: the endorsement chain verifies under the vendor key held in
  ledger state, or
* direct path: at least a quorum of distinct validators signed a witness
  statement over the same key bytes, each read over a physical channel.
"""
from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence

from . import crypto
from .codec import encode, record
from .tee import TeePlatform, VendorEndorsement, VendorMock, verify_endorsement
from .transactions import Transaction, TxKind, sign_transaction

VENDOR = "vendor"
DIRECT = "direct"


class EnrollmentError(Exception):
    pass


class EndorsementInvalid(EnrollmentError):
    pass


class DuplicateDevice(EnrollmentError):
    pass


class KeyMismatch(EnrollmentError):
    pass


class InsufficientWitnesses(EnrollmentError):
    pass


class NotEnrolled(EnrollmentError):
    pass


@record
class DeviceRecord:
    device_id: str
    attestation_public_key: bytes
    scheme: str
    enrollment_path: str
    endorsement: Optional[VendorEndorsement] = None


@record
class WitnessStatement:
    device_id: str
    public_key: bytes
    scheme: str


@record
class Witness:
    validator: int
    public_key: bytes
    signature: bytes


@record
class EnrollPayload:
    record: DeviceRecord
    witnesses: tuple[Witness, ...] = ()


def sign_witness(keypair: crypto.SigningKeyPair, index: int, device_id: str,
                 public_key: bytes, scheme: str) -> Witness:
    stmt = encode(WitnessStatement(device_id, public_key, scheme))
    return Witness(index, public_key, crypto.sign(keypair.secret, stmt))


def validate_enrollment(payload: EnrollPayload, devices: Mapping, vendors: Mapping[str, bytes],
                        scheme_tags: Iterable[str], validator_set) -> None:
    """Raise an EnrollmentError subclass unless ``payload`` may be accepted."""
    rec = payload.record
    if rec.device_id in devices:
        raise DuplicateDevice(rec.device_id)
    if rec.scheme not in set(scheme_tags):
        raise EnrollmentError(f"scheme {rec.scheme!r} is not installed")
    if len(rec.attestation_public_key) != crypto.PUBLIC_KEY_SIZE:
        raise EnrollmentError("attestation key must be 32 bytes")
    if rec.enrollment_path == VENDOR:
        end = rec.endorsement
        if end is None or payload.witnesses:
            raise EndorsementInvalid("vendor enrollment needs exactly an endorsement")
        if end.device_id != rec.device_id or end.device_public_key != rec.attestation_public_key:
            raise EndorsementInvalid("endorsement names another device or key")
        vendor_key = vendors.get(end.vendor)
        if vendor_key is None or not verify_endorsement(end, vendor_key):
            raise EndorsementInvalid(f"endorsement does not verify under {end.vendor!r}")
    elif rec.enrollment_path == DIRECT:
        if rec.endorsement is not None:
            raise EnrollmentError("direct enrollment carries no endorsement")
        stmt = encode(WitnessStatement(rec.device_id, rec.attestation_public_key, rec.scheme))
        good = set()
        for w in payload.witnesses:
            if w.public_key != rec.attestation_public_key:
                raise KeyMismatch(f"witness {w.validator} read a different key")
            if not 0 <= w.validator < len(validator_set.validators):
                continue
            if crypto.check_signature(validator_set.validators[w.validator], stmt, w.signature):
                good.add(w.validator)
        if len(good) < validator_set.quorum:
            raise InsufficientWitnesses(f"{len(good)} valid witnesses, need {validator_set.quorum}")
    else:
        raise EnrollmentError(f"unknown enrollment path {rec.enrollment_path!r}")


def enroll_via_vendor(platform: TeePlatform, vendor: VendorMock,
                      devices: Optional[Mapping] = None) -> Transaction:
    """Build the vendor-endorsed ENROLL transaction for ``platform``.

    ``devices`` is an optional view of the enrolled-device table used to
    fail fast on re-enrollment; validators re-check everything anyway.
    """
    if devices is not None and platform.device_id in devices:
        raise DuplicateDevice(platform.device_id)
    endorsement = vendor.endorse(platform.device_id)
    if endorsement.device_public_key != platform.public_key:
        raise EndorsementInvalid("vendor holds a different key for this device")
    if not verify_endorsement(endorsement, vendor.public_key):
        raise EndorsementInvalid("vendor chain does not verify")
    rec = DeviceRecord(platform.device_id, platform.public_key, platform.spec.tag, VENDOR, endorsement)
    return sign_transaction(TxKind.ENROLL, EnrollPayload(rec), platform.device_id, platform.keypair.secret)


def enroll_direct(platform: TeePlatform, validators: Sequence, quorum: int) -> Transaction:
    """Collect physical-read witnesses from ``validators`` and build the ENROLL tx.

    Each validator exposes ``physical_read(platform) -> Witness | None``. The
    key read by at least ``quorum`` witnesses wins; a device the witnesses
    cannot agree on is refused.
    """
    witnesses = [w for w in (v.physical_read(platform) for v in validators) if w is not None]
    if len(witnesses) < quorum:
        raise InsufficientWitnesses(f"{len(witnesses)} witnesses, need {quorum}")
    by_key: dict[bytes, list[Witness]] = {}
    for w in witnesses:
        by_key.setdefault(w.public_key, []).append(w)
    agreed = [ws for ws in by_key.values() if len(ws) >= quorum]
    if not agreed:
        raise KeyMismatch(f"no key was read by {quorum} witnesses")
    chosen = sorted(agreed[0], key=lambda w: w.validator)
    key = chosen[0].public_key
    if key != platform.public_key:
        # the device itself would not be able to sign for this key
        raise KeyMismatch("quorum read a key the device does not hold")
    rec = DeviceRecord(platform.device_id, key, platform.spec.tag, DIRECT)
    payload = EnrollPayload(rec, tuple(chosen))
    return sign_transaction(TxKind.ENROLL, payload, platform.device_id, platform.keypair.secret)


def distribute_validator_set(device, validator_set) -> None:
    """Hand the validator keys to an enrolling device over the trusted channel."""
    device.validator_set = validator_set
