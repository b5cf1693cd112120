"""Untrusted task scheduler for requests that do not name a prover.

Advertisements are taken at face value. Matching is equivalence-aware in
honest mode; in adversarial mode the scheduler deliberately hands the
request to a device that does not satisfy it. Either way the verdict is
decided on chain, so a bad pick costs liveness, never safety.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

from .codec import record
from .ledger import RequestNotice
from .protocol import AttestationRequest
from .registry import AttributeRegistry, RequirementList, UnknownAttribute
from .simnet import Actor

HONEST = "honest"
ADVERSARIAL = "adversarial"


@record
class CapabilityAdvertisement:
    device_id: str
    scheme: str
    attributes: tuple[int, ...]


class Scheduler(Actor):

    def __init__(self, actor_id: str, registry_view: Callable[[], AttributeRegistry],
                 mode: str = HONEST, wrong_pick: Optional[str] = None):
        super().__init__(actor_id)
        if mode not in (HONEST, ADVERSARIAL):
            raise ValueError(f"unknown scheduler mode {mode!r}")
        self.registry_view = registry_view
        self.mode = mode
        self.wrong_pick = wrong_pick
        self.ads: dict[str, CapabilityAdvertisement] = {}
        self.assignments: dict[bytes, Optional[str]] = {}

    def register_capabilities(self, ad: CapabilityAdvertisement) -> None:
        self.ads[ad.device_id] = ad

    def _satisfying(self, lst: RequirementList, device_id: str) -> bool:
        try:
            return self.registry_view().satisfies(lst, self.ads[device_id].attributes).satisfied
        except UnknownAttribute:
            return False

    def match_request(self, lst: RequirementList, exclude: Iterable[str] = ()) -> Optional[str]:
        skip = set(exclude)
        candidates = sorted(d for d in self.ads if d not in skip)
        honest = next((d for d in candidates if self._satisfying(lst, d)), None)
        if self.mode == HONEST:
            return honest
        if self.wrong_pick is not None and self.wrong_pick not in skip:
            return self.wrong_pick
        return next((d for d in candidates if not self._satisfying(lst, d)), honest)

    def on_message(self, src: str, msg) -> None:
        if isinstance(msg, CapabilityAdvertisement):
            self.register_capabilities(msg)
            return
        if not isinstance(msg, RequestNotice):
            return
        req = msg.proof.transaction.payload
        if not isinstance(req, AttestationRequest) or req.lst.target_device is not None:
            return
        rh = req.request_hash
        if rh in self.assignments:
            return
        pick = self.match_request(req.lst, exclude=(req.requester_id,))
        self.assignments[rh] = pick
        if pick is not None and pick in self.sim.actors:
            self.send(pick, msg)
