"""Small hand-built two-scheme world shared by the unit tests."""
from __future__ import annotations

import dataclasses

from dhtee import crypto
from dhtee.codec import hash_of
from dhtee.enrollment import DIRECT, VENDOR, DeviceRecord
from dhtee.registry import AttributeRegistry
from dhtee.tee import SEV_LIKE, SGX_LIKE, SchemeTable, TeePlatform, VendorMock, install_scheme

SGX_VOCAB = ("sdk-v2", "cpu-svn-7", "debug-off")
SEV_VOCAB = ("fw-1.4", "snp-on", "debug-off")


def key(label: str) -> crypto.SigningKeyPair:
    return crypto.keygen(hash_of(f"unit|{label}".encode()))


def ka(label: str) -> crypto.KeyAgreementShare:
    return crypto.ka_generate(hash_of(f"unit-ka|{label}".encode()))


@dataclasses.dataclass
class Mini:
    registry: AttributeRegistry
    schemes: SchemeTable
    vendors: dict
    sgx: TeePlatform
    sev: TeePlatform

    def record(self, platform: TeePlatform) -> DeviceRecord:
        return DeviceRecord(platform.device_id, platform.public_key, platform.spec.tag, DIRECT)

    def vendor_record(self, platform: TeePlatform) -> DeviceRecord:
        v = self.vendors[platform.spec.vendor]
        return DeviceRecord(platform.device_id, platform.public_key, platform.spec.tag, VENDOR,
                            v.endorse(platform.device_id))


def mini(equivalences=(("sgx-like/sdk-v2", "sev-like/fw-1.4"),
                       ("sgx-like/debug-off", "sev-like/debug-off"))) -> Mini:
    reg = AttributeRegistry()
    table = SchemeTable()
    sgx_ids = install_scheme(table, reg, SGX_LIKE, SGX_VOCAB)
    sev_ids = install_scheme(table, reg, SEV_LIKE, SEV_VOCAB)
    for a, b in equivalences:
        reg.declare_equivalence(reg.lookup_qualified(a), reg.lookup_qualified(b))
    vendors = {s.vendor: VendorMock(s.vendor, s.tag.encode(), s.chain_depth) for s in (SGX_LIKE, SEV_LIKE)}
    d1 = TeePlatform("d1", SGX_LIKE, key("d1"), sgx_ids)
    d2 = TeePlatform("d2", SEV_LIKE, key("d2"), sev_ids)
    for p in (d1, d2):
        vendors[p.spec.vendor].manufacture(p.device_id, p.public_key)
    return Mini(reg, table, vendors, d1, d2)
