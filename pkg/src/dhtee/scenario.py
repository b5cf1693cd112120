"""Build simulated worlds from scenario files and check their safety assertions."""
from __future__ import annotations

import dataclasses
import json
import re
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import jsonschema

from . import crypto
from .client import (
    MUTUAL,
    AttestationPlan,
    ClientParams,
    DeviceClient,
)
from .codec import digest, encode, hash_of
from .enrollment import DIRECT, VENDOR, DeviceRecord
from .ledger import (
    GasTable,
    LedgerParams,
    SubmitAck,
    SubmitTx,
    LedgerState,
    ValidatorNode,
    ValidatorSet,
    commit_certificate_ok,
    replay_chain,
)
from .registry import UnknownAttribute
from .scheduler import CapabilityAdvertisement, Scheduler
from .simnet import (
    Actor,
    AdversaryConfig,
    ConfigInvalid,
    DropRule,
    Sample,
    Simulation,
    TamperRule,
    TraceRecord,
    trace_lines,
)
from .tee import BUILTIN_SCHEMES, DuplicateScheme, SchemeSpec, TeePlatform, VendorMock
from .transactions import (
    ADMIN_SUBMITTER,
    DeclareEquivalence,
    InstallScheme,
    Transaction,
    TxKind,
    sign_transaction,
)

SCHEDULER_ID = "scheduler"

Source = Union[str, Path, dict]


# -- configuration -----------------------------------------------------------

def load_schema(name: str) -> dict:
    text = resources.files("dhtee").joinpath("schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


_WS = re.compile(r"\s*")


def locate(text: str, path: Sequence[Any]) -> tuple[int, int]:
    """Line and column (1-based) of the JSON value at ``path`` in ``text``.

    Walks as deep as the path exists; a missing key anchors at its parent.
    """
    dec = json.JSONDecoder()
    pos = _WS.match(text, 0).end()
    for step in path:
        if pos >= len(text):
            break
        opener = text[pos]
        if opener not in "{[":
            break
        parent = pos
        pos += 1
        found = None
        index = 0
        while True:
            pos = _WS.match(text, pos).end()
            if pos >= len(text) or text[pos] in "}]":
                break
            if opener == "{":
                key, pos = json.decoder.scanstring(text, pos + 1)
                pos = _WS.match(text, pos).end() + 1
                pos = _WS.match(text, pos).end()
                hit = key == step
            else:
                hit = index == step
            if hit:
                found = pos
                break
            _, pos = dec.raw_decode(text, pos)
            pos = _WS.match(text, pos).end()
            if pos < len(text) and text[pos] == ",":
                pos += 1
            index += 1
        if found is None:
            pos = parent
            break
        pos = found
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


class ConfigError(ConfigInvalid):
    """A configuration problem anchored to a line of its source file."""

    def __init__(self, source: str, line: int, col: int, message: str):
        super().__init__(f"{source}:{line}:{col}: {message}")
        self.source, self.line, self.col, self.message = source, line, col, message


def _read(source: Source) -> tuple[str, str]:
    if isinstance(source, dict):
        return json.dumps(source, indent=1), "<config>"
    path = Path(source)
    try:
        return path.read_text(), str(path)
    except OSError as exc:
        raise ConfigError(str(path), 1, 1, f"cannot read: {exc.strerror}") from None


def _apply_defaults(schema: dict, instance, root: dict):
    if "$ref" in schema:
        ref = schema["$ref"].split("/")[-1]
        schema = root["$defs"][ref]
    if isinstance(instance, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in instance and "default" in sub:
                instance[key] = json.loads(json.dumps(sub["default"]))
            if key in instance:
                _apply_defaults(sub, instance[key], root)
    elif isinstance(instance, list) and "items" in schema:
        for item in instance:
            _apply_defaults(schema["items"], item, root)
    return instance


def parse_config(source: Source, schema_name: str = "scenario") -> dict:
    """Read and schema-validate a configuration, filling in defaults.

    Raises ConfigError whose message starts ``file:line:col:``.
    """
    text, label = _read(source)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(label, exc.lineno, exc.colno, exc.msg) from None
    schema = load_schema(schema_name)
    validator = jsonschema.Draft202012Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if error is not None:
        line, col = locate(text, list(error.absolute_path))
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise ConfigError(label, line, col, f"{where}: {error.message}")
    _apply_defaults(schema, data, schema)
    if schema_name == "scenario":
        _semantic_checks(data, text, label)
    data["_source"] = label
    return data


def _semantic_checks(cfg: dict, text: str, label: str) -> None:
    def fail(path, message):
        line, col = locate(text, path)
        raise ConfigError(label, line, col, message)

    tags = []
    for i, entry in enumerate(cfg["schemes"]):
        try:
            tags.append(scheme_from_config(entry).tag)
        except ValueError as exc:
            fail(["schemes", i], str(exc))
    if len(set(tags)) != len(tags):
        fail(["schemes"], "scheme tags must be unique")
    vocab = {t: set(cfg.get("registry", {}).get("attributes", {}).get(t, ())) for t in tags}
    for t in cfg.get("registry", {}).get("attributes", {}):
        if t not in vocab:
            fail(["registry", "attributes", t], f"attributes for unknown scheme {t!r}")

    def known(label_: str) -> bool:
        scheme, _, name = label_.partition("/")
        return name in vocab.get(scheme, ())

    for i, pair in enumerate(cfg.get("registry", {}).get("equivalences", [])):
        for j, q in enumerate(pair):
            if not known(q):
                fail(["registry", "equivalences", i, j], f"unknown attribute {q!r}")
    ids = set()
    for i, dev in enumerate(cfg["devices"]):
        if dev["id"] in ids or dev["id"] == SCHEDULER_ID or re.fullmatch(r"v\d+", dev["id"]):
            fail(["devices", i, "id"], f"device id {dev['id']!r} is duplicated or reserved")
        ids.add(dev["id"])
        if dev["scheme"] not in vocab:
            fail(["devices", i, "scheme"], f"unknown scheme {dev['scheme']!r}")
        for j, a in enumerate(dev.get("attributes", [])):
            if not known(a) or not a.startswith(dev["scheme"] + "/"):
                fail(["devices", i, "attributes", j], f"{a!r} is not in the {dev['scheme']} vocabulary")
        for j, a in enumerate(dev.get("peer_requirements", [])):
            if not known(a):
                fail(["devices", i, "peer_requirements", j], f"unknown attribute {a!r}")
    for i, att in enumerate(cfg.get("attestations", [])):
        if att["requester"] not in ids:
            fail(["attestations", i, "requester"], f"unknown device {att['requester']!r}")
        if "target" in att and att["target"] not in ids:
            fail(["attestations", i, "target"], f"unknown device {att['target']!r}")
        for j, a in enumerate(att["requirements"]):
            if not known(a):
                fail(["attestations", i, "requirements", j], f"unknown attribute {a!r}")
    adv = cfg.get("adversary", {})
    for k in adv.get("faulty_validators", {}):
        if int(k) >= cfg["validators"]:
            fail(["adversary", "faulty_validators", k], f"no validator {k}")
    pick = adv.get("scheduler", {}).get("pick")
    if pick is not None and pick not in ids:
        fail(["adversary", "scheduler", "pick"], f"unknown device {pick!r}")


def scheme_from_config(entry: dict) -> SchemeSpec:
    if "builtin" in entry:
        return BUILTIN_SCHEMES[entry["builtin"]]
    return SchemeSpec(
        tag=entry["tag"],
        magic=entry["magic"].encode("ascii"),
        field_order=tuple(entry["field_order"]),
        attribute_width=entry["attribute_width"],
        vendor=entry["vendor"],
        chain_depth=entry.get("chain_depth", 1),
        create_calls=tuple(entry.get("create_calls", ())),
        report_call=entry.get("report_call", "EREPORT"),
        verifier=entry.get("verifier", "layout-v1"),
    )


def adversary_from_config(adv: dict) -> AdversaryConfig:
    def rules(cls, items):
        return [cls(**{k: v for k, v in r.items() if cls is TamperRule or k != "mutation"}) for r in items]

    sched = adv.get("scheduler", {})
    return AdversaryConfig(
        faulty_validators={int(k): v for k, v in adv.get("faulty_validators", {}).items()},
        scheduler_mode=sched.get("mode", "honest"),
        scheduler_pick=sched.get("pick"),
        tamper_rules=rules(TamperRule, adv.get("tamper_rules", [])),
        drop_rules=rules(DropRule, adv.get("drop_rules", [])),
    )


# -- world -------------------------------------------------------------------

def derived_keypair(seed: int, label: str) -> crypto.SigningKeyPair:
    return crypto.keygen(hash_of(f"dhtee|{seed}|{label}".encode()))


def validator_id(i: int) -> str:
    return f"v{i}"


@dataclasses.dataclass
class World:
    config: dict
    seed: int
    sim: Simulation
    genesis: LedgerState
    validators: list[ValidatorNode]
    devices: dict[str, DeviceClient]
    vendors: dict[str, VendorMock]
    admin: crypto.SigningKeyPair
    scheduler: Scheduler
    ledger_params: LedgerParams
    client_params: ClientParams

    @property
    def honest_validators(self) -> list[ValidatorNode]:
        return [v for v in self.validators if v.behavior == "honest"]

    def reference(self) -> ValidatorNode:
        """The honest validator with the longest chain (first on ties)."""
        honest = self.honest_validators or self.validators
        return max(honest, key=lambda v: (len(v.chain), -v.index))

    def registry_view(self):
        return self.reference().state.registry


def build_world(cfg: dict, seed: Optional[int] = None) -> World:
    seed = cfg["seed"] if seed is None else seed
    n = cfg["validators"]
    net = cfg.get("network", {})
    adversary = adversary_from_config(cfg.get("adversary", {}))
    sim = Simulation(seed, delay=net.get("delay", 1), round_interval=net.get("round_interval", 5),
                     adversary=adversary)

    val_keys = [derived_keypair(seed, f"validator/{i}") for i in range(n)]
    vset = ValidatorSet.from_keys([k.public for k in val_keys])
    admin = derived_keypair(seed, "admin")

    specs = [scheme_from_config(e) for e in cfg["schemes"]]
    vocab_cfg = cfg.get("registry", {}).get("attributes", {})
    vendors = {s.vendor: VendorMock(s.vendor, hash_of(f"{seed}|vendor/{s.vendor}".encode()), s.chain_depth)
               for s in specs}
    equivalences = [tuple(p) for p in cfg.get("registry", {}).get("equivalences", [])]
    base = LedgerState.genesis(vset, admin.public,
                               schemes=[(s, vocab_cfg.get(s.tag, [])) for s in specs],
                               vendors={name: v.public_key for name, v in vendors.items()},
                               equivalences=equivalences)

    platforms, genesis_records = {}, []
    spec_by_tag = {s.tag: s for s in specs}
    for dev in cfg["devices"]:
        spec = spec_by_tag[dev["scheme"]]
        kp = derived_keypair(seed, f"device/{dev['id']}")
        attrs = [base.registry.lookup_qualified(a) for a in dev.get("attributes", [])]
        platforms[dev["id"]] = TeePlatform(dev["id"], spec, kp, attrs)
        vendors[spec.vendor].manufacture(dev["id"], kp.public)
        if dev.get("enrollment", VENDOR) == "genesis":
            genesis_records.append(DeviceRecord(dev["id"], kp.public, spec.tag, VENDOR,
                                                vendors[spec.vendor].endorse(dev["id"])))
    genesis = base
    for rec in genesis_records:
        genesis.devices[rec.device_id] = rec

    ids = tuple(validator_id(i) for i in range(n))
    lparams = LedgerParams(ids, gas_limit=cfg.get("gas_limit", 48), gas=GasTable(),
                           scheduler_id=SCHEDULER_ID)
    validators = [ValidatorNode(i, val_keys[i], genesis, lparams) for i in range(n)]
    for v in validators:
        sim.add_actor(v)
    for i, behavior in adversary.faulty_validators.items():
        sim.inject_fault(validator_id(i), behavior)

    timeouts = cfg.get("timeouts", {})
    cparams = ClientParams(ids, mode=cfg.get("mode", MUTUAL),
                           timeout_rounds=timeouts.get("result_rounds", 20),
                           poll_every=timeouts.get("poll_every", 1),
                           multicast=cfg.get("submission", {}).get("multicast", True),
                           ack_timeout=timeouts.get("ack_ticks", 3),
                           scheduler_id=SCHEDULER_ID)

    world = World(cfg, seed, sim, genesis, validators, {}, vendors, admin, None, lparams, cparams)
    scheduler = Scheduler(SCHEDULER_ID, world.registry_view, adversary.scheduler_mode,
                          adversary.scheduler_pick)
    world.scheduler = scheduler
    sim.add_actor(scheduler)

    plans: dict[str, list[AttestationPlan]] = {}
    for att in cfg.get("attestations", []):
        plans.setdefault(att["requester"], []).append(
            AttestationPlan(att.get("at_round", 0), tuple(att["requirements"]), att.get("target")))
    for dev in cfg["devices"]:
        add_device(world, platforms[dev["id"]], dev, plans.get(dev["id"], ()))
    return world


def add_device(world: World, platform: TeePlatform, dev: dict,
               plans: Sequence[AttestationPlan] = ()) -> DeviceClient:
    """Create a device client for ``platform``, add it to the simulation and start enrollment."""
    path = dev.get("enrollment", VENDOR)
    client = DeviceClient(platform, world.client_params, world.registry_view,
                          code_identity=dev.get("code_identity", "dhtee-client-v1").encode(),
                          vendor=world.vendors.get(platform.spec.vendor),
                          enrollment_path=DIRECT if path == DIRECT else VENDOR,
                          plans=plans, peer_requirements=dev.get("peer_requirements", ()))
    client.witness_sources = world.validators
    world.devices[platform.device_id] = client
    world.sim.add_actor(client)
    vset = world.genesis.validator_set
    if path == "genesis":
        client.mark_enrolled(vset)
        world.scheduler.register_capabilities(
            CapabilityAdvertisement(platform.device_id, platform.spec.tag, platform.attributes))
    else:
        client.begin_enrollment(vset)
    return client


# -- running -----------------------------------------------------------------

@dataclasses.dataclass
class AssertionResult:
    name: str
    passed: bool
    detail: str = ""


@dataclasses.dataclass
class ScenarioTrace:
    name: str
    seed: int
    trace: list[TraceRecord]
    digest: bytes
    final_states: dict[str, bytes]
    samples: list[Sample]
    assertions: list[AssertionResult]
    rounds: int
    world: World = dataclasses.field(repr=False, compare=False)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def lines(self):
        return trace_lines(self.trace)


def _quiescent(world: World) -> bool:
    for d in world.devices.values():
        if d.enroll_error is not None:
            continue
        if not d.enrolled or d.plans:
            return False
        if any(w.outcome is None for w in d.watches.values()):
            return False
    return True


def drive(world: World, max_rounds: int, extra: Optional[Callable[[], bool]] = None) -> None:
    """Run until quiescent (plus one round to deliver channel traffic) or ``max_rounds``."""
    settle = {"left": None}

    def stop() -> bool:
        if settle["left"] is None:
            if _quiescent(world) and (extra is None or extra()):
                settle["left"] = 1
            return False
        settle["left"] -= 1
        return settle["left"] < 0

    world.sim.run(max_rounds * world.sim.round_interval, stop)


def finish(world: World, name: str) -> ScenarioTrace:
    sim = world.sim
    return ScenarioTrace(
        name=name,
        seed=world.seed,
        trace=list(sim.trace),
        digest=sim.trace_digest(),
        final_states={v.actor_id: v.state.digest() for v in world.validators},
        samples=list(sim.samples),
        assertions=check_world(world),
        rounds=sim.current_round,
        world=world,
    )


def run_scenario(config: Source, seed: Optional[int] = None,
                 trace_path: Optional[Union[str, Path]] = None) -> ScenarioTrace:
    cfg = config if isinstance(config, dict) and "_source" in config else parse_config(config)
    world = build_world(cfg, seed)
    drive(world, cfg.get("max_rounds", 60))
    result = finish(world, cfg.get("name", "scenario"))
    if trace_path is not None:
        write_trace(result, trace_path)
    return result


def write_trace(result: ScenarioTrace, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for line in result.lines():
            fh.write(line + "\n")


# -- assertions --------------------------------------------------------------

def _result(name: str, failures: list[str]) -> AssertionResult:
    return AssertionResult(name, not failures, "; ".join(failures[:5]))


def check_validators_agree(world: World) -> AssertionResult:
    failures = []
    honest = world.honest_validators
    ref = world.reference()
    ref_digests = [b.header_digest for b in ref.chain]
    by_height: dict[int, bytes] = {}
    for v in honest:
        mine = [b.header_digest for b in v.chain]
        if mine != ref_digests[:len(mine)]:
            failures.append(f"{v.actor_id} chain diverges from {ref.actor_id}")
        d = v.state.digest()
        if by_height.setdefault(len(v.chain), d) != d:
            failures.append(f"{v.actor_id} state differs at height {len(v.chain)}")
    return _result("validators-agree", failures)


def check_replay(world: World) -> AssertionResult:
    failures = []
    for v in world.honest_validators:
        replayed = replay_chain(world.genesis, v.chain, v.params.gas_limit, v.params.gas)
        if replayed.encode() != v.state.encode():
            failures.append(f"{v.actor_id} replay differs from live state")
    return _result("replay-sound", failures)


def check_no_conflicting_finality(world: World) -> AssertionResult:
    vset = world.genesis.validator_set
    seen: dict[int, set[bytes]] = {}
    for v in world.validators:
        for b in v.chain:
            if commit_certificate_ok(b.header, b.commit_round, b.commit_signatures, vset):
                seen.setdefault(b.header.height, set()).add(b.header_digest)
        for height, _rnd, d in v.finalized_commit_certificates():
            seen.setdefault(height, set()).add(d)
    failures = [f"height {h}: {len(ds)} finalized blocks" for h, ds in sorted(seen.items()) if len(ds) > 1]
    return _result("no-conflicting-finality", failures)


def _finalized_at(world: World, height: int, header_digest: bytes, tx_digest: bytes) -> bool:
    for v in world.honest_validators:
        if len(v.chain) >= height:
            b = v.chain[height - 1]
            return b.header_digest == header_digest and any(t.digest == tx_digest for t in b.transactions)
    return False


def check_light_client(world: World) -> AssertionResult:
    failures = []
    for d in world.devices.values():
        for p in d.accepted_proofs:
            if not _finalized_at(world, p.header.height, digest(p.header), p.transaction.digest):
                failures.append(f"{d.actor_id} accepted a proof absent from the finalized chain")
    return _result("light-client-sound", failures)


def check_no_false_channel(world: World) -> AssertionResult:
    failures = []
    results = world.reference().state.results
    mutual = world.client_params.mode == MUTUAL
    for d in world.devices.values():
        for peer, ch in d.channels.items():
            about_peer = 0
            for rh in ch.basis:
                r = results.get(rh)
                if r is None or not r.satisfied or {r.requester_id, r.prover_id} != {d.actor_id, peer}:
                    failures.append(f"{d.actor_id}->{peer}: basis {rh.hex()[:12]} is not a finalized satisfied verdict")
                elif r.prover_id == peer:
                    about_peer += 1
            requested = any(results.get(rh) is not None and results[rh].requester_id == d.actor_id
                            for rh in ch.basis)
            if (mutual or requested) and about_peer == 0:
                failures.append(f"{d.actor_id}->{peer}: no finalized satisfied verdict about the peer")
    return _result("no-false-channel", failures)


def check_enrollment(world: World) -> AssertionResult:
    failures = []
    for v in world.honest_validators:
        for dev_id, rec in v.state.devices.items():
            client = world.devices.get(dev_id)
            if client is not None and rec.attestation_public_key != client.platform.public_key:
                failures.append(f"{v.actor_id} holds a wrong key for {dev_id}")
    return _result("enrollment-sound", failures)


def _channel_ok(a: DeviceClient, b: DeviceClient) -> Optional[str]:
    ca, cb = a.channels.get(b.actor_id), b.channels.get(a.actor_id)
    if ca is None or cb is None:
        return f"no channel between {a.actor_id} and {b.actor_id}"
    if ca.session.key != cb.session.key or ca.session.transcript_hash != cb.session.transcript_hash:
        return f"session keys differ between {a.actor_id} and {b.actor_id}"
    if not any(src == b.actor_id for src, _ in a.received) or not any(src == a.actor_id for src, _ in b.received):
        return f"sealed traffic between {a.actor_id} and {b.actor_id} did not open"
    return None


def check_expectations(world: World) -> list[AssertionResult]:
    exp = world.config.get("expect", {})
    out = []
    devs = world.devices
    if "channels" in exp:
        fails = [msg for a, b in exp["channels"] if (msg := _channel_ok(devs[a], devs[b]))]
        out.append(_result("channel-established", fails))
    if "no_channels" in exp:
        fails = [f"unexpected channel {a}<->{b}" for a, b in exp["no_channels"]
                 if b in devs[a].channels or a in devs[b].channels]
        out.append(_result("no-channel", fails))
    if "verdicts" in exp:
        fails = []
        for e in exp["verdicts"]:
            got = [w.outcome for w in devs[e["requester"]].watches.values()
                   if w.role == "requester" and w.reverse_of is None
                   and ("target" not in e or w.request.lst.target_device == e["target"])]
            if e["outcome"] not in got:
                fails.append(f"{e['requester']}: expected {e['outcome']}, saw {got}")
        out.append(_result("verdicts", fails))
    ref = world.reference()
    if "enrolled" in exp or "not_enrolled" in exp:
        fails = [f"{d} not enrolled" for d in exp.get("enrolled", []) if d not in ref.state.devices]
        fails += [f"{d} enrolled" for d in exp.get("not_enrolled", []) if d in ref.state.devices]
        out.append(_result("enrollment-outcome", fails))
    height = max((len(v.chain) for v in world.honest_validators), default=0)
    if "min_height" in exp:
        out.append(_result("min-height", [] if height >= exp["min_height"] else [f"height {height}"]))
    if "max_height" in exp:
        out.append(_result("max-height", [] if height <= exp["max_height"] else [f"height {height}"]))
    if "commit_signatures" in exp:
        want = exp["commit_signatures"]
        fails = [f"block {b.header.height} has {len(b.commit_signatures)} signatures"
                 for b in ref.chain if len(b.commit_signatures) != want]
        out.append(_result("commit-signatures", fails))
    return out


def check_world(world: World) -> list[AssertionResult]:
    return [
        check_validators_agree(world),
        check_replay(world),
        check_no_conflicting_finality(world),
        check_light_client(world),
        check_no_false_channel(world),
        check_enrollment(world),
    ] + check_expectations(world)


def bundled_scenarios() -> list[str]:
    root = resources.files("dhtee").joinpath("scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("dhtee").joinpath("scenarios").joinpath(name)))



# -- scheme extension --------------------------------------------------------

class AdminConsole(Actor):
    """Holder of the governance key; submits registry and scheme changes."""

    def __init__(self, keypair: crypto.SigningKeyPair, validator_ids: Sequence[str]):
        super().__init__(ADMIN_SUBMITTER)
        self.keypair = keypair
        self.validator_ids = tuple(validator_ids)
        self.acks: list[SubmitAck] = []

    def submit(self, payload) -> Transaction:
        tx = sign_transaction(TxKind.GOVERNANCE, payload, ADMIN_SUBMITTER, self.keypair.secret)
        for vid in self.validator_ids:
            self.send(vid, SubmitTx(tx))
        return tx

    def on_message(self, src: str, msg) -> None:
        if isinstance(msg, SubmitAck):
            self.acks.append(msg)


def frozen_records(state: LedgerState, devices: Sequence[str], attributes: Sequence[int],
                   tags: Sequence[str]) -> dict[str, bytes]:
    """Canonical bytes of the named pre-existing records, keyed for diffing."""
    snap = state.registry.snapshot()
    out = {}
    for d in devices:
        out[f"device/{d}"] = encode(state.devices[d])
    for a in attributes:
        out[f"attribute/{a}"] = encode((snap.attributes[a], snap.class_of[a]))
    for t in tags:
        out[f"scheme/{t}"] = encode(state.schemes.spec(t))
    for rh, res in sorted(state.results.items()):
        out[f"result/{rh.hex()}"] = encode(res)
    return out


@dataclasses.dataclass
class ExtensionReport:
    base: ScenarioTrace
    extended: ScenarioTrace
    new_device: str
    peer: str
    prefix_identical: bool
    frozen_diff: list[str]

    @property
    def passed(self) -> bool:
        return self.prefix_identical and not self.frozen_diff and self.extended.passed


def _install_done(world: World, tag: str, equivalences) -> bool:
    reg = world.reference().state.registry
    if tag not in world.reference().state.schemes:
        return False
    try:
        return all(reg.same_class(reg.lookup_qualified(a), reg.lookup_qualified(b)) for a, b in equivalences)
    except UnknownAttribute:
        return False


def run_extension(base: Source, fixture: Source, seed: Optional[int] = None,
                  trace_path: Optional[Union[str, Path]] = None) -> ExtensionReport:
    """Install a new scheme mid-run and cross-attest a new-scheme device with an old one."""
    cfg = base if isinstance(base, dict) and "_source" in base else parse_config(base)
    fx = fixture if isinstance(fixture, dict) and "_source" in fixture else parse_config(fixture, "extension")
    try:
        spec = scheme_from_config(fx["scheme"])
    except ValueError as exc:
        raise ConfigInvalid(f"{fx['_source']}: scheme: {exc}") from None
    if spec.tag in {scheme_from_config(e).tag for e in cfg["schemes"]}:
        raise DuplicateScheme(spec.tag)
    dev_cfg, att = fx["device"], fx["attestation"]
    known_devices = {d["id"] for d in cfg["devices"]}
    if dev_cfg["id"] in known_devices or att["peer"] not in known_devices:
        raise ConfigInvalid(f"{fx['_source']}: device ids must be new and the peer must exist")

    max_rounds = cfg.get("max_rounds", 60)
    baseline = build_world(cfg, seed)
    drive(baseline, max_rounds)
    base_result = finish(baseline, cfg.get("name", "scenario"))

    world = build_world(cfg, seed)
    drive(world, max_rounds)
    prefix_identical = (len(world.sim.trace) == len(base_result.trace)
                        and world.sim.trace_digest() == base_result.digest)
    ref_state = world.reference().state
    old_devices = sorted(ref_state.devices)
    old_attrs = [r.id for r in ref_state.registry.records()]
    old_tags = ref_state.schemes.tags()
    before = frozen_records(ref_state, old_devices, old_attrs, old_tags)

    admin = AdminConsole(world.admin, world.ledger_params.validator_ids)
    world.sim.add_actor(admin)
    vendor = VendorMock(spec.vendor, hash_of(f"{world.seed}|vendor/{spec.vendor}".encode()), spec.chain_depth)
    world.vendors.setdefault(spec.vendor, vendor)
    vendor = world.vendors[spec.vendor]
    equivalences = [tuple(p) for p in fx.get("equivalences", [])]
    admin.submit(InstallScheme(spec, tuple(fx["vocabulary"]), vendor.public_key))
    for a, b in equivalences:
        admin.submit(DeclareEquivalence(a, b))
    horizon = world.sim.current_round + max_rounds
    world.sim.run(horizon * world.sim.round_interval,
                  lambda: _install_done(world, spec.tag, equivalences))
    if not _install_done(world, spec.tag, equivalences):
        raise ConfigInvalid(f"{fx['_source']}: scheme install did not finalize")

    reg = world.registry_view()
    kp = derived_keypair(world.seed, f"device/{dev_cfg['id']}")
    try:
        attrs = [reg.lookup_qualified(a) for a in dev_cfg["attributes"]]
    except UnknownAttribute as exc:
        raise ConfigInvalid(f"{fx['_source']}: device attribute {exc}") from None
    platform = TeePlatform(dev_cfg["id"], spec, kp, attrs)
    vendor.manufacture(platform.device_id, kp.public)
    start = world.sim.current_round + 1
    new_id, peer = platform.device_id, att["peer"]
    if att.get("new_device_requests", True):
        plan_owner, plan = new_id, AttestationPlan(start, tuple(att["requirements"]), peer)
    else:
        plan_owner, plan = peer, AttestationPlan(start, tuple(att["requirements"]), new_id)
    add_device(world, platform, {"id": new_id, "enrollment": dev_cfg.get("enrollment", VENDOR),
                                 "peer_requirements": dev_cfg.get("peer_requirements", [])},
               [plan] if plan_owner == new_id else ())
    if plan_owner == peer:
        world.devices[peer].plans.append(plan)
    drive(world, world.sim.current_round + max_rounds)

    after = frozen_records(world.reference().state, old_devices, old_attrs, old_tags)
    diff = sorted(k for k in before if before[k] != after.get(k))
    ext_cfg = dict(world.config)
    ext_cfg["expect"] = {"channels": [[new_id, peer]], "enrolled": [new_id]}
    world.config = ext_cfg
    extended = finish(world, f"{cfg.get('name', 'scenario')}+{spec.tag}")
    if trace_path is not None:
        write_trace(extended, trace_path)
    return ExtensionReport(base_result, extended, new_id, peer, prefix_identical, diff)
