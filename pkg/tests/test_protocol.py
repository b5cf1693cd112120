import dataclasses

import pytest

from dhtee import crypto
from dhtee.protocol import (
    NONCE_SIZE,
    Verdict,
    att_con_vrfy,
    att_gen,
    att_rqst,
    lookup_requirements,
    request_signature_ok,
    session_transcript,
)
from dhtee.registry import RequirementList, UnknownAttribute
from dhtee.tee import create_environment, encode_native, report_body
from dhtee.transactions import AttReportPayload
from setup_helpers import ka, key, mini

NONCE = b"\x07" * NONCE_SIZE


def run(m, labels, prover=None, requester=None):
    prover = prover or m.sev
    requester = requester or m.sgx
    lst = lookup_requirements(m.registry, labels, prover.device_id)
    req = att_rqst(requester.device_id, requester.keypair.secret, lst, ka("req"), NONCE)
    handle = create_environment(prover, prover.device_id, b"prover-code")
    report, payload = att_gen(prover, handle, req, ka("prover"))
    return req, report, payload


def test_request_signature():
    m = mini()
    req, _, _ = run(m, ["sgx-like/sdk-v2"])
    assert request_signature_ok(req, m.sgx.public_key)
    assert not request_signature_ok(req, m.sev.public_key)
    assert not request_signature_ok(dataclasses.replace(req, nonce=b"\x08" * 16), m.sgx.public_key)
    with pytest.raises(ValueError):
        att_rqst("d1", m.sgx.keypair.secret, RequirementList(), ka("req"), b"short")


def test_cross_scheme_requirement_is_satisfied_through_equivalence():
    m = mini()
    req, report, payload = run(m, ["sgx-like/sdk-v2", "sgx-like/debug-off"])
    res = att_con_vrfy(m.registry, m.schemes, m.record(m.sev), req, payload)
    assert res.verdict is Verdict.SATISFIED and res.satisfied
    reg = m.registry
    assert dict(res.witness_map) == {reg.lookup("sgx-like", "sdk-v2"): reg.lookup("sev-like", "fw-1.4"),
                                     reg.lookup("sgx-like", "debug-off"): reg.lookup("sev-like", "debug-off")}
    assert res.ka_public_prover == ka("prover").public_share
    assert res.prover_measurement == report.measurement
    assert res.request_hash == req.request_hash


def test_unmapped_requirement_is_unsatisfied_with_missing_list():
    m = mini()
    req, _, payload = run(m, ["sgx-like/cpu-svn-7", "sgx-like/sdk-v2"])
    res = att_con_vrfy(m.registry, m.schemes, m.record(m.sev), req, payload)
    assert res.verdict is Verdict.UNSATISFIED
    assert res.missing == (m.registry.lookup("sgx-like", "cpu-svn-7"),)
    assert res.ka_public_prover == b""


def test_without_equivalence_nothing_crosses():
    m = mini(equivalences=())
    req, _, payload = run(m, ["sgx-like/sdk-v2"])
    assert att_con_vrfy(m.registry, m.schemes, m.record(m.sev), req, payload).verdict is Verdict.UNSATISFIED


def test_invalid_report_cases():
    m = mini()
    req, report, payload = run(m, ["sgx-like/sdk-v2"])
    rec = m.record(m.sev)
    bad = lambda **kw: att_con_vrfy(m.registry, m.schemes, kw.pop("rec", rec), kw.pop("req", req),
                                    kw.pop("payload", payload))
    # wrong registered key
    assert bad(rec=dataclasses.replace(rec, attestation_public_key=key("x").public)).verdict is Verdict.INVALID_REPORT
    # report answers another request
    other = dataclasses.replace(req, nonce=b"\x09" * 16)
    assert bad(req=other).verdict is Verdict.INVALID_REPORT
    # scheme mismatch with the prover record
    assert bad(payload=AttReportPayload("sgx-like", payload.report)).verdict is Verdict.INVALID_REPORT
    # garbage bytes
    assert bad(payload=AttReportPayload("sev-like", b"junk")).verdict is Verdict.INVALID_REPORT
    # a validly signed report claiming another scheme's attributes
    sneaky = dataclasses.replace(report, attributes=(m.registry.lookup("sgx-like", "sdk-v2"),))
    sneaky = dataclasses.replace(sneaky, signature=b"")
    sneaky = dataclasses.replace(sneaky, signature=crypto.sign(m.sev.keypair.secret, report_body(sneaky, m.sev.spec)))
    assert bad(payload=AttReportPayload("sev-like", encode_native(sneaky, m.sev.spec))).verdict is Verdict.INVALID_REPORT
    # attribute id not in the registry at all
    ghost = dataclasses.replace(report, attributes=(999,), signature=b"")
    ghost = dataclasses.replace(ghost, signature=crypto.sign(m.sev.keypair.secret, report_body(ghost, m.sev.spec)))
    assert bad(payload=AttReportPayload("sev-like", encode_native(ghost, m.sev.spec))).verdict is Verdict.INVALID_REPORT


def test_every_single_bit_flip_of_the_report_is_invalid():
    m = mini()
    req, _, payload = run(m, ["sgx-like/sdk-v2"])
    rec = m.record(m.sev)
    data = payload.report
    for bit in range(len(data) * 8):
        b = bytearray(data)
        b[bit // 8] ^= 1 << (bit % 8)
        res = att_con_vrfy(m.registry, m.schemes, rec, req, AttReportPayload("sev-like", bytes(b)))
        assert res.verdict is Verdict.INVALID_REPORT, bit


def test_session_transcript_is_order_sensitive():
    assert session_transcript(b"a" * 32, b"b" * 32) != session_transcript(b"b" * 32, b"a" * 32)
    assert len(session_transcript(b"a" * 32)) == 32


def test_lookup_requirements_rejects_unknown_labels():
    m = mini()
    with pytest.raises(UnknownAttribute):
        lookup_requirements(m.registry, ["sgx-like/nope"])
    assert lookup_requirements(m.registry, ["sev-like/snp-on"], "d2") == RequirementList((4,), "d2")
