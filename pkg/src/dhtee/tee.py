"""Mock TEE schemes, each with its own native report layout and vendor root.

A scheme is described by a :class:`SchemeSpec`. Two schemes differ in their
magic bytes, the order in which report fields are laid out, the width of
attribute ids on the wire and the vocabulary of attribute labels, so a
verifier for one scheme cannot parse the other's reports.

The enclave lifecycle loosely follows the SGX and SEV call sequences
(``ECREATE``/``EINIT``/``EENTER`` and ``INIT``/``INIT_EX``); the SEV table
lists ``ATTESTATON`` and ``EREPORT`` with overlapping roles, and the sev-like
mock exposes only a single report call.
"""
from __future__ import annotations

import dataclasses
import enum
import struct
from typing import Callable, Optional, Sequence

from . import crypto
from .codec import digest, encode, hash_of, record
from .registry import AttributeRegistry, DuplicateAttribute

REPORT_FIELDS = ("attributes", "measurement", "ka_public", "requester_id", "request_hash")


class DeviceUnknown(KeyError):
    pass


class NotInitialized(RuntimeError):
    pass


class UnsupportedScheme(KeyError):
    pass


class DuplicateScheme(ValueError):
    pass


class MalformedReport(ValueError):
    pass


@record
class SchemeSpec:
    tag: str
    magic: bytes
    field_order: tuple[str, ...]
    attribute_width: int
    vendor: str
    chain_depth: int = 1
    create_calls: tuple[str, ...] = ()
    report_call: str = "EREPORT"
    verifier: str = "layout-v1"

    def __post_init__(self):
        if sorted(self.field_order) != sorted(REPORT_FIELDS):
            raise ValueError(f"field_order must be a permutation of {REPORT_FIELDS}")
        if self.attribute_width not in (2, 4, 8):
            raise ValueError("attribute_width must be 2, 4 or 8")
        if len(self.magic) != 4:
            raise ValueError("magic must be 4 bytes")


SGX_LIKE = SchemeSpec(
    tag="sgx-like",
    magic=b"SGXR",
    field_order=("measurement", "attributes", "ka_public", "requester_id", "request_hash"),
    attribute_width=4,
    vendor="sgx-vendor",
    chain_depth=1,
    create_calls=("ECREATE", "EINIT", "EENTER"),
    report_call="EREPORT",
)

SEV_LIKE = SchemeSpec(
    tag="sev-like",
    magic=b"SEVA",
    field_order=("request_hash", "requester_id", "ka_public", "attributes", "measurement"),
    attribute_width=8,
    vendor="sev-vendor",
    chain_depth=2,
    create_calls=("INIT", "INIT_EX"),
    report_call="EREPORT",
)

BUILTIN_SCHEMES = {s.tag: s for s in (SGX_LIKE, SEV_LIKE)}


@record
class NativeAttestationReport:
    scheme: str
    attributes: tuple[int, ...]
    measurement: bytes
    ka_public: bytes
    requester_id: str
    request_hash: bytes
    signature: bytes = b""


class EnclaveState(enum.Enum):
    CREATED = "created"
    INITIALIZED = "initialized"
    TORN_DOWN = "torn-down"


@dataclasses.dataclass
class EnclaveHandle:
    device: str
    measurement: bytes
    state: EnclaveState
    calls: list = dataclasses.field(default_factory=list)


def _field_bytes(report: NativeAttestationReport, name: str, spec: SchemeSpec) -> bytes:
    value = getattr(report, name)
    if name == "attributes":
        w = spec.attribute_width
        return struct.pack(">I", len(value)) + b"".join(a.to_bytes(w, "big") for a in value)
    if name == "requester_id":
        return value.encode()
    return bytes(value)


def report_body(report: NativeAttestationReport, spec: SchemeSpec) -> bytes:
    """The signed prefix of a native report in ``spec``'s layout."""
    parts = [spec.magic]
    for name in spec.field_order:
        body = _field_bytes(report, name, spec)
        parts.append(struct.pack(">I", len(body)) + body)
    return b"".join(parts)


def encode_native(report: NativeAttestationReport, spec: SchemeSpec) -> bytes:
    sig = report.signature
    return report_body(report, spec) + struct.pack(">I", len(sig)) + sig


def decode_native(data: bytes, spec: SchemeSpec) -> NativeAttestationReport:
    if data[:4] != spec.magic:
        raise MalformedReport(f"not a {spec.tag} report")
    pos = 4
    chunks = []
    for _ in range(len(spec.field_order) + 1):
        if pos + 4 > len(data):
            raise MalformedReport("truncated report")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise MalformedReport("truncated field")
        chunks.append(data[pos:pos + n])
        pos += n
    if pos != len(data):
        raise MalformedReport("trailing bytes")
    fields = dict(zip(spec.field_order, chunks))
    raw_attrs = fields["attributes"]
    if len(raw_attrs) < 4:
        raise MalformedReport("attribute list too short")
    (count,) = struct.unpack_from(">I", raw_attrs, 0)
    w = spec.attribute_width
    if len(raw_attrs) != 4 + count * w:
        raise MalformedReport("attribute list length mismatch")
    attrs = tuple(int.from_bytes(raw_attrs[4 + i * w:4 + (i + 1) * w], "big") for i in range(count))
    for name in ("measurement", "ka_public", "request_hash"):
        if len(fields[name]) != 32:
            raise MalformedReport(f"{name} must be 32 bytes")
    try:
        requester = fields["requester_id"].decode()
    except UnicodeDecodeError as exc:
        raise MalformedReport("requester id is not UTF-8") from exc
    return NativeAttestationReport(
        scheme=spec.tag,
        attributes=attrs,
        measurement=fields["measurement"],
        ka_public=fields["ka_public"],
        requester_id=requester,
        request_hash=fields["request_hash"],
        signature=chunks[-1],
    )


class LayoutVerifier:
    """Signature check for reports in one scheme's native layout."""

    def __init__(self, spec: SchemeSpec):
        self.spec = spec

    def parse(self, data: bytes) -> NativeAttestationReport:
        return decode_native(data, self.spec)

    def verify(self, report, registered_key: bytes) -> bool:
        if isinstance(report, NativeAttestationReport):
            if report.scheme != self.spec.tag:
                return False
            try:
                data = encode_native(report, self.spec)
            except OverflowError:  # attribute id wider than the wire format
                return False
        else:
            data = bytes(report)
        try:
            parsed = decode_native(data, self.spec)
        except MalformedReport:
            return False
        return crypto.check_signature(registered_key, report_body(parsed, self.spec), parsed.signature)


VERIFIER_KINDS: dict[str, Callable[[SchemeSpec], LayoutVerifier]] = {
    "layout-v1": LayoutVerifier,
}


class SchemeTable:
    """Installed schemes and their verifiers, as held by every ledger node."""

    def __init__(self):
        self._specs: dict[str, SchemeSpec] = {}
        self._verifiers: dict[str, LayoutVerifier] = {}

    def copy(self) -> "SchemeTable":
        other = SchemeTable()
        other._specs = dict(self._specs)
        other._verifiers = dict(self._verifiers)
        return other

    def __contains__(self, tag):
        return tag in self._specs

    def tags(self) -> list[str]:
        return sorted(self._specs)

    def spec(self, tag: str) -> SchemeSpec:
        try:
            return self._specs[tag]
        except KeyError:
            raise UnsupportedScheme(tag) from None

    def verifier(self, tag: str) -> LayoutVerifier:
        try:
            return self._verifiers[tag]
        except KeyError:
            raise UnsupportedScheme(tag) from None

    def specs(self) -> tuple[SchemeSpec, ...]:
        return tuple(self._specs[t] for t in sorted(self._specs))

    def install(self, spec: SchemeSpec, verifier: Optional[LayoutVerifier] = None) -> None:
        if spec.tag in self._specs:
            raise DuplicateScheme(spec.tag)
        if verifier is None:
            try:
                verifier = VERIFIER_KINDS[spec.verifier](spec)
            except KeyError:
                raise UnsupportedScheme(f"no verifier kind {spec.verifier!r}") from None
        self._specs[spec.tag] = spec
        self._verifiers[spec.tag] = verifier


def install_scheme(
    table: SchemeTable,
    registry: AttributeRegistry,
    spec: SchemeSpec,
    vocabulary: Sequence[str],
    verifier: Optional[LayoutVerifier] = None,
) -> list[int]:
    """Install a new scheme and register its vocabulary.

    Only appends, so nothing already installed or registered is touched.
    Returns the ids assigned to the vocabulary.
    """
    if spec.tag in table:
        raise DuplicateScheme(spec.tag)
    labels = list(vocabulary)
    # clashes are reported before anything is mutated
    for label in labels:
        if registry.has(spec.tag, label):
            raise DuplicateAttribute(f"{spec.tag}/{label}")
    if len(set(labels)) != len(labels):
        raise DuplicateAttribute(f"repeated label in {spec.tag} vocabulary")
    table.install(spec, verifier)
    return [registry.register_attribute(spec.tag, label) for label in labels]


def native_verify(table: SchemeTable, tag: str, report, registered_key: bytes) -> bool:
    return table.verifier(tag).verify(report, registered_key)


class TeePlatform:
    """The TEE hardware of one device, holding its attestation key."""

    def __init__(self, device_id: str, spec: SchemeSpec, keypair: crypto.SigningKeyPair,
                 attributes: Sequence[int]):
        self.device_id = device_id
        self.spec = spec
        self.keypair = keypair
        self.attributes = tuple(attributes)

    @property
    def public_key(self) -> bytes:
        return self.keypair.public

    def export_public_key(self) -> bytes:
        """Physical key-export interface used by direct enrollment."""
        return self.keypair.public


def create_environment(platform: TeePlatform, device: str, code_identity: bytes,
                       initialize: bool = True) -> EnclaveHandle:
    if device != platform.device_id:
        raise DeviceUnknown(device)
    calls = list(platform.spec.create_calls)
    handle = EnclaveHandle(device, hash_of(code_identity), EnclaveState.CREATED, calls[:1])
    if initialize:
        initialize_environment(platform, handle)
    return handle


def initialize_environment(platform: TeePlatform, handle: EnclaveHandle) -> None:
    if handle.state is EnclaveState.TORN_DOWN:
        raise NotInitialized("environment was torn down")
    handle.calls.extend(platform.spec.create_calls[1:])
    handle.state = EnclaveState.INITIALIZED


def teardown(handle: EnclaveHandle) -> None:
    handle.state = EnclaveState.TORN_DOWN


def generate_native_report(platform: TeePlatform, handle: EnclaveHandle, request,
                           ka: crypto.KeyAgreementShare) -> NativeAttestationReport:
    """Sign a native report answering ``request`` with the platform key.

    ``request`` is any record with a ``requester_id``; its digest is bound
    into the report so the report cannot be replayed against another
    request.
    """
    if handle.state is not EnclaveState.INITIALIZED:
        raise NotInitialized(f"enclave on {handle.device} is {handle.state.value}")
    if handle.device != platform.device_id:
        raise DeviceUnknown(handle.device)
    handle.calls.append(platform.spec.report_call)
    unsigned = NativeAttestationReport(
        scheme=platform.spec.tag,
        attributes=platform.attributes,
        measurement=handle.measurement,
        ka_public=ka.public_share,
        requester_id=request.requester_id,
        request_hash=digest(request),
    )
    sig = crypto.sign(platform.keypair.secret, report_body(unsigned, platform.spec))
    return dataclasses.replace(unsigned, signature=sig)


@record
class CertStatement:
    issuer: bytes
    subject: bytes
    device_id: str
    role: str


@record
class CertLink:
    subject: bytes
    role: str
    signature: bytes


@record
class VendorEndorsement:
    vendor: str
    device_public_key: bytes
    device_id: str
    chain: tuple[CertLink, ...]

    @property
    def signature(self) -> bytes:
        return self.chain[-1].signature if self.chain else b""


def verify_endorsement(endorsement: VendorEndorsement, vendor_public_key: bytes) -> bool:
    """Walk the chain from the vendor root to the device attestation key."""
    if not endorsement.chain:
        return False
    issuer = vendor_public_key
    for link in endorsement.chain:
        stmt = CertStatement(issuer, link.subject, endorsement.device_id, link.role)
        if not crypto.check_signature(issuer, encode(stmt), link.signature):
            return False
        issuer = link.subject
    return issuer == endorsement.device_public_key and endorsement.chain[-1].role == "attestation"


class VendorMock:
    """In-process vendor root of trust for one scheme.

    With ``chain_depth`` 2 the vendor serves a key-server style chain: the
    root certifies a per-chip key, which certifies the attestation key.
    """

    def __init__(self, name: str, seed: bytes, chain_depth: int = 1):
        self.name = name
        self.chain_depth = chain_depth
        self._root = crypto.keygen(hash_of(b"vendor-root|" + seed))
        self._devices: dict[str, bytes] = {}

    @property
    def public_key(self) -> bytes:
        return self._root.public

    def manufacture(self, device_id: str, public_key: bytes) -> None:
        self._devices[device_id] = public_key

    def knows(self, device_id: str) -> bool:
        return device_id in self._devices

    def _chip_key(self, device_id: str) -> crypto.SigningKeyPair:
        return crypto.keygen(hash_of(b"chip|" + self._root.secret + device_id.encode()))

    def fetch_certificate_chain(self, device_id: str) -> tuple[CertLink, ...]:
        try:
            device_key = self._devices[device_id]
        except KeyError:
            raise DeviceUnknown(device_id) from None
        links = []
        issuer = self._root
        if self.chain_depth >= 2:
            chip = self._chip_key(device_id)
            stmt = CertStatement(issuer.public, chip.public, device_id, "chip")
            links.append(CertLink(chip.public, "chip", crypto.sign(issuer.secret, encode(stmt))))
            issuer = chip
        stmt = CertStatement(issuer.public, device_key, device_id, "attestation")
        links.append(CertLink(device_key, "attestation", crypto.sign(issuer.secret, encode(stmt))))
        return tuple(links)

    def endorse(self, device_id: str) -> VendorEndorsement:
        chain = self.fetch_certificate_chain(device_id)
        return VendorEndorsement(self.name, self._devices[device_id], device_id, chain)
