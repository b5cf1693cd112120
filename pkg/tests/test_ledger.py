import dataclasses

import pytest
from hypothesis import given, strategies as st

from dhtee import crypto
from dhtee.codec import MerkleProof, MerkleStep, encode
from dhtee.enrollment import enroll_via_vendor
from dhtee.ledger import (
    GENESIS_PARENT,
    Block,
    CommitSignature,
    CommitStatement,
    GasTable,
    InvalidBlock,
    LedgerParams,
    LedgerState,
    SubmitTx,
    ValidatorNode,
    ValidatorSet,
    admit,
    apply_transaction,
    build_block,
    execute_block,
    inclusion_proof,
    light_verify,
    quorum_for,
    replay_chain,
    tx_gas,
    tx_root_of,
)
from dhtee.protocol import Verdict, att_gen, att_rqst, lookup_requirements
from dhtee.simnet import Actor, DropRule, Simulation
from dhtee.tee import SEV_LIKE, SGX_LIKE, create_environment
from dhtee.transactions import (
    ADMIN_SUBMITTER,
    DeclareEquivalence,
    RegisterAttribute,
    Transaction,
    Transfer,
    TxKind,
    sign_transaction,
)
from setup_helpers import SEV_VOCAB, SGX_VOCAB, ka, key, mini

N = 4
VAL_KEYS = [key(f"val{i}") for i in range(N)]
VSET = ValidatorSet.from_keys([k.public for k in VAL_KEYS])
ADMIN = key("admin")
GAS = GasTable()
IDS = tuple(f"v{i}" for i in range(N))


def genesis(enrolled=True, equivalences=(("sgx-like/sdk-v2", "sev-like/fw-1.4"),)):
    m = mini(equivalences=())
    devices = [m.vendor_record(m.sgx), m.vendor_record(m.sev)] if enrolled else []
    state = LedgerState.genesis(VSET, ADMIN.public, [(SGX_LIKE, SGX_VOCAB), (SEV_LIKE, SEV_VOCAB)],
                                {k: v.public_key for k, v in m.vendors.items()}, equivalences, devices)
    return m, state


def transfer(platform, n, to="d2"):
    return sign_transaction(TxKind.TRANSFER, Transfer(to, 1, n.to_bytes(8, "big")), platform.device_id,
                            platform.keypair.secret)


def request_and_report(m, state, labels=("sgx-like/sdk-v2",), n=0):
    lst = lookup_requirements(state.registry, labels, "d2")
    req = att_rqst("d1", m.sgx.keypair.secret, lst, ka(f"r{n}"), bytes([n]) * 16)
    req_tx = sign_transaction(TxKind.ATT_REQUEST, req, "d1", m.sgx.keypair.secret)
    _, payload = att_gen(m.sev, create_environment(m.sev, "d2", b"code"), req, ka(f"p{n}"))
    rpt_tx = sign_transaction(TxKind.ATT_REPORT, payload, "d2", m.sev.keypair.secret)
    return req, req_tx, rpt_tx


def brute_quorum(n):
    return min(q for q in range(1, n + 1) if 3 * q > 2 * n)


@pytest.mark.parametrize("n", range(1, 40))
def test_quorum_is_smallest_strict_two_thirds(n):
    assert quorum_for(n) == brute_quorum(n)


def test_gas_costs():
    m, state = genesis()
    _, req_tx, rpt_tx = request_and_report(m, state)
    assert tx_gas(transfer(m.sgx, 0), GAS) == 4
    assert tx_gas(req_tx, GAS) == 5
    assert tx_gas(rpt_tx, GAS) == 6
    enroll = enroll_via_vendor(m.sev, m.vendors["sev-vendor"])
    assert tx_gas(enroll, GAS) == 4 + SEV_LIKE.chain_depth


# -- state transitions -------------------------------------------------------

def test_enrollment_through_the_ledger():
    m, state = genesis(enrolled=False)
    tx = enroll_via_vendor(m.sgx, m.vendors["sgx-vendor"])
    assert admit(state, tx) is None
    apply_transaction(state, tx)
    assert state.devices["d1"].attestation_public_key == m.sgx.public_key
    apply_transaction(state, tx)
    assert state.rejected[tx.digest] == "duplicate transaction"
    again = enroll_via_vendor(m.sgx, m.vendors["sgx-vendor"])
    again = sign_transaction(TxKind.ENROLL, again.payload, "d1", m.sgx.keypair.secret)
    assert again.digest == tx.digest  # deterministic signatures: identical resubmission


def test_enrollment_signed_by_someone_else_is_refused():
    m, state = genesis(enrolled=False)
    tx = enroll_via_vendor(m.sgx, m.vendors["sgx-vendor"])
    forged = sign_transaction(TxKind.ENROLL, tx.payload, "d1", m.sev.keypair.secret)
    assert admit(state, forged) == "bad signature"
    before = state.digest()
    apply_transaction(state, forged)
    assert "d1" not in state.devices
    assert state.rejected[forged.digest] == "bad signature"
    assert before != state.digest()  # only the rejection bookkeeping changed
    wrong_submitter = sign_transaction(TxKind.ENROLL, tx.payload, "d2", m.sgx.keypair.secret)
    assert admit(state, wrong_submitter) == "unknown signer"


def test_governance_requires_the_admin_key():
    m, state = genesis()
    tx = sign_transaction(TxKind.GOVERNANCE, RegisterAttribute("sgx-like", "tdx-ish"), ADMIN_SUBMITTER,
                          ADMIN.secret)
    apply_transaction(state, tx)
    assert state.registry.has("sgx-like", "tdx-ish")
    bad = sign_transaction(TxKind.GOVERNANCE, RegisterAttribute("sgx-like", "x"), ADMIN_SUBMITTER,
                           m.sgx.keypair.secret)
    apply_transaction(state, bad)
    assert not state.registry.has("sgx-like", "x")
    eq = sign_transaction(TxKind.GOVERNANCE, DeclareEquivalence("sgx-like/debug-off", "sev-like/debug-off"),
                          ADMIN_SUBMITTER, ADMIN.secret)
    apply_transaction(state, eq)
    assert state.registry.same_class(state.registry.lookup("sgx-like", "debug-off"),
                                     state.registry.lookup("sev-like", "debug-off"))
    unknown = sign_transaction(TxKind.GOVERNANCE, DeclareEquivalence("sgx-like/nope", "sev-like/snp-on"),
                               ADMIN_SUBMITTER, ADMIN.secret)
    apply_transaction(state, unknown)
    assert state.rejected[unknown.digest].startswith("UnknownAttribute")


def test_request_then_report_emits_a_result():
    m, state = genesis()
    req, req_tx, rpt_tx = request_and_report(m, state)
    _, emitted = apply_transaction(state, req_tx)
    assert emitted == [] and req.request_hash in state.requests
    _, emitted = apply_transaction(state, rpt_tx)
    assert len(emitted) == 1
    res = emitted[0].payload
    assert emitted[0].kind is TxKind.ATT_RESULT
    assert res.verdict is Verdict.SATISFIED
    assert state.results[req.request_hash] == res
    assert req.request_hash not in state.requests


def test_replayed_report_does_not_yield_a_second_verdict():
    m, state = genesis()
    _, req_tx, rpt_tx = request_and_report(m, state)
    apply_transaction(state, req_tx)
    apply_transaction(state, rpt_tx)
    n_results = len(state.results)
    _, emitted = apply_transaction(state, rpt_tx)
    assert emitted == [] and len(state.results) == n_results
    # a fresh report for the already-resolved request is refused as well
    _, payload = att_gen(m.sev, create_environment(m.sev, "d2", b"code"), req_tx.payload, ka("other"))
    fresh = sign_transaction(TxKind.ATT_REPORT, payload, "d2", m.sev.keypair.secret)
    _, emitted = apply_transaction(state, fresh)
    assert emitted == [] and state.rejected[fresh.digest] == "request already resolved"


def test_report_for_unknown_request_and_submitted_results():
    m, state = genesis()
    _, _, rpt_tx = request_and_report(m, state)
    apply_transaction(state, rpt_tx)
    assert state.rejected[rpt_tx.digest] == "unknown request"
    fake = Transaction(TxKind.ATT_RESULT, None, "ledger", b"")
    assert admit(state, fake) is not None
    apply_transaction(state, fake)
    assert fake.digest in state.rejected


def test_state_copy_is_isolated_and_digest_is_stable():
    m, state = genesis()
    d = state.digest()
    other = state.copy()
    apply_transaction(other, transfer(m.sgx, 1))
    assert state.digest() == d and other.digest() != d
    assert state.encode() == genesis()[1].encode()


# -- blocks ------------------------------------------------------------------

def test_block_capacity_follows_the_gas_limit():
    m, state = genesis()
    txs = [transfer(m.sgx, i) for i in range(20)]
    block, post, dropped = build_block(state, txs, 0, GENESIS_PARENT, 48, GAS)
    assert len(block.transactions) == 12 and not dropped
    digests = [t.digest for t in block.transactions]
    assert digests == sorted(digests)
    assert post.transfers == {"d1": 12}
    assert execute_block(state, block, GENESIS_PARENT, 48, GAS, N).digest() == post.digest()


def test_results_follow_client_transactions_in_the_same_block():
    m, state = genesis()
    _, req_tx, rpt_tx = request_and_report(m, state)
    apply_transaction(state, req_tx)
    block, post, _ = build_block(state, [rpt_tx, transfer(m.sgx, 0)], 1, GENESIS_PARENT, 48, GAS)
    kinds = [t.kind for t in block.transactions]
    assert kinds[-1] is TxKind.ATT_RESULT and kinds.count(TxKind.ATT_RESULT) == 1
    assert len(post.results) == 1


def test_invalid_transactions_are_left_out_of_honest_blocks():
    m, state = genesis()
    good = transfer(m.sgx, 0)
    bad = sign_transaction(TxKind.TRANSFER, Transfer("d2", 1), "d1", m.sev.keypair.secret)
    block, _, dropped = build_block(state, [good, bad], 0, GENESIS_PARENT, 48, GAS)
    assert block.transactions == (good,)
    assert [t for t, _ in dropped] == [bad]


def test_execute_block_refuses_malformed_blocks():
    m, state = genesis()
    txs = [transfer(m.sgx, i) for i in range(3)]
    block, _, _ = build_block(state, txs, 0, GENESIS_PARENT, 48, GAS)
    run = lambda b, parent=GENESIS_PARENT, limit=48: execute_block(state, b, parent, limit, GAS, N)
    run(block)
    with pytest.raises(InvalidBlock):
        run(block, parent=b"\x01" * 32)
    with pytest.raises(InvalidBlock):
        run(dataclasses.replace(block, transactions=tuple(reversed(block.transactions))))
    with pytest.raises(InvalidBlock):
        run(block, limit=8)
    with pytest.raises(InvalidBlock):
        run(dataclasses.replace(block, header=dataclasses.replace(block.header, proposer=7)))
    with pytest.raises(InvalidBlock):
        run(dataclasses.replace(block, header=dataclasses.replace(block.header, tx_root=bytes(32))))
    with pytest.raises(InvalidBlock):
        run(dataclasses.replace(block, header=dataclasses.replace(block.header, height=2)))
    bad = sign_transaction(TxKind.TRANSFER, Transfer("d2", 1), "d1", m.sev.keypair.secret)
    with pytest.raises(InvalidBlock):
        run(Block(dataclasses.replace(block.header), tuple(sorted(block.transactions + (bad,),
                                                                  key=lambda t: t.digest))))


def test_forged_result_in_a_block_is_refused():
    m, state = genesis()
    _, req_tx, rpt_tx = request_and_report(m, state, labels=("sgx-like/cpu-svn-7",))
    apply_transaction(state, req_tx)
    block, _, _ = build_block(state, [rpt_tx], 0, GENESIS_PARENT, 48, GAS)
    res_tx = block.transactions[-1]
    assert res_tx.payload.verdict is Verdict.UNSATISFIED
    forged = dataclasses.replace(res_tx, payload=dataclasses.replace(res_tx.payload, verdict=Verdict.SATISFIED))
    txs = block.transactions[:-1] + (forged,)
    fb = Block(dataclasses.replace(block.header, tx_root=tx_root_of(txs)), txs)
    with pytest.raises(InvalidBlock):
        execute_block(state, fb, GENESIS_PARENT, 48, GAS, N)


# -- light client ------------------------------------------------------------

def certified(block, signers, rnd=0):
    stmt = encode(CommitStatement(block.header.height, rnd, block.header_digest))
    sigs = tuple(CommitSignature(i, crypto.sign(VAL_KEYS[i].secret, stmt)) for i in signers)
    return dataclasses.replace(block, commit_round=rnd, commit_signatures=sigs)


def test_light_verify_needs_a_quorum_of_distinct_validators():
    m, state = genesis()
    block, _, _ = build_block(state, [transfer(m.sgx, i) for i in range(5)], 0, GENESIS_PARENT, 48, GAS)
    for k in range(N + 1):
        for pos in range(len(block.transactions)):
            ok = light_verify(inclusion_proof(certified(block, range(k)), pos), VSET)
            assert ok == (k >= VSET.quorum)
    dup = certified(block, [0, 0, 0, 1])
    assert not light_verify(inclusion_proof(dup, 0), VSET)
    other_round = certified(block, range(3), rnd=1)
    proof = inclusion_proof(other_round, 0)
    assert light_verify(proof, VSET)
    assert not light_verify(dataclasses.replace(proof, commit_round=0), VSET)


def test_light_verify_rejects_tampered_inclusion():
    m, state = genesis()
    block = certified(build_block(state, [transfer(m.sgx, i) for i in range(5)], 0, GENESIS_PARENT, 48,
                                  GAS)[0], range(4))
    proof = inclusion_proof(block, 2)
    assert light_verify(proof, VSET)
    assert not light_verify(dataclasses.replace(proof, transaction=block.transactions[1]), VSET)
    assert not light_verify(dataclasses.replace(proof, header=dataclasses.replace(proof.header, height=9)), VSET)
    step = proof.merkle.path[0]
    bad_path = (MerkleStep(bytes(32), step.sibling_on_left),) + proof.merkle.path[1:]
    assert not light_verify(dataclasses.replace(proof, merkle=MerkleProof(2, bad_path, proof.merkle.root)), VSET)
    assert not light_verify(dataclasses.replace(proof, merkle=None), VSET)
    other = ValidatorSet.from_keys([key(f"x{i}").public for i in range(4)])
    assert not light_verify(proof, other)


# -- consensus over the simulated network -------------------------------------

class Sink(Actor):
    def __init__(self):
        super().__init__("client")
        self.acks = []

    def on_message(self, src, msg):
        self.acks.append((src, msg))


def network(faults=(), seed=3):
    m, state = genesis()
    sim = Simulation(seed)
    params = LedgerParams(IDS)
    nodes = [sim.add_actor(ValidatorNode(i, VAL_KEYS[i], state, params)) for i in range(N)]
    client = sim.add_actor(Sink())
    for i, behavior in faults:
        sim.inject_fault(IDS[i], behavior)
    return m, state, sim, nodes, client


def submit(sim, client, tx, targets=IDS):
    for v in targets:
        sim.send(client.actor_id, v, SubmitTx(tx))


def test_honest_network_finalizes_and_agrees():
    m, state, sim, nodes, client = network()
    txs = [transfer(m.sgx, i) for i in range(30)]
    for tx in txs:
        submit(sim, client, tx)
    sim.run(200)
    chains = [[b.header_digest for b in n.chain] for n in nodes]
    assert all(c == chains[0] for c in chains) and len(chains[0]) >= 3
    assert sum(len(b.transactions) for b in nodes[0].chain) == 30
    assert all(len(b.commit_signatures) == 4 for b in nodes[0].chain[:-1])
    final = replay_chain(state, nodes[0].chain, 48, GAS)
    assert all(final.digest() == n.state.digest() for n in nodes)
    assert all(len(a) == 0 for a in (n.mempool for n in nodes))
    assert all(msg.accepted for _, msg in client.acks)


def test_duplicate_submissions_are_included_once():
    m, state, sim, nodes, client = network()
    tx = transfer(m.sgx, 0)
    for _ in range(3):
        submit(sim, client, tx)
    sim.run(60)
    submit(sim, client, tx, IDS[:1])
    sim.run(120)
    included = [t for b in nodes[0].chain for t in b.transactions]
    assert included.count(tx) == 1
    assert client.acks[-1][1].reason == "already included"


@pytest.mark.parametrize("behavior", ["silent", "equivocate", "forge-results"])
@pytest.mark.parametrize("faulty", range(N))
def test_one_faulty_validator_cannot_stall_or_fork(behavior, faulty):
    m, state, sim, nodes, client = network([(faulty, behavior)])
    _, req_tx, rpt_tx = request_and_report(m, state)
    txs = [transfer(m.sgx, i) for i in range(10)] + [req_tx]
    for tx in txs:
        submit(sim, client, tx)
    sim.run(60)
    submit(sim, client, rpt_tx)
    sim.run(300)
    honest = [n for n in nodes if n.index != faulty]
    chains = [[b.header_digest for b in n.chain] for n in honest]
    assert all(c == chains[0] for c in chains)
    included = {t.digest for b in honest[0].chain for t in b.transactions}
    assert all(t.digest in included for t in txs + [rpt_tx])
    replay_chain(state, honest[0].chain, 48, GAS)
    for b in honest[0].chain:
        assert light_verify(inclusion_proof(b, 0), VSET)
        if behavior == "silent":
            assert len(b.commit_signatures) == 3


def test_two_silent_validators_halt_finality():
    m, state, sim, nodes, client = network([(1, "silent"), (2, "silent")])
    submit(sim, client, transfer(m.sgx, 0))
    sim.run(200)
    assert all(not n.chain for n in nodes)


def test_lagging_validator_catches_up_by_sync():
    m, state, sim, nodes, client = network()
    sim.adversary.drop_rules.append(DropRule(dst="v3"))
    for i in range(20):
        submit(sim, client, transfer(m.sgx, i), IDS[:3])
    sim.run(150)
    assert len(nodes[3].chain) == 0 and len(nodes[0].chain) >= 2
    sim.adversary.drop_rules.clear()
    for i in range(20, 24):
        submit(sim, client, transfer(m.sgx, i), IDS)
    sim.run(400)
    assert [b.header_digest for b in nodes[3].chain] == [b.header_digest for b in nodes[0].chain]


@given(st.lists(st.integers(0, 40), min_size=1, max_size=15))
def test_replay_reproduces_block_by_block_state(ids):
    m, state = genesis()
    txs = [transfer(m.sgx, i) for i in ids]
    blocks, cur, parent = [], state, GENESIS_PARENT
    for i in range(0, len(txs), 4):
        block, cur, _ = build_block(cur, txs[i:i + 4], 0, parent, 48, GAS)
        blocks.append(block)
        parent = block.header_digest
    assert replay_chain(state, blocks, 48, GAS).digest() == cur.digest()
    assert cur.transfers.get("d1", 0) == len(set(ids))
