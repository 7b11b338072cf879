"""
Simulated on-chain escrow: deposits, dual-signed checkpoints, challenge-period settlement,
dispute replay and hashed timelocks.
NOTE: The contract re-verifies every signature and hash pointer itself; it never trusts a node.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field

from config import DEFAULT_CHALLENGE_PERIOD
from services.channel_node import ChannelConfig
from services.protocol import (
    GENESIS,
    Address,
    Checkpoint,
    Hash256,
    SignedInvoice,
    Violation,
    digest,
    verify_checkpoint_signatures,
    verify_signed_invoice,
)

logger = logging.getLogger(__name__)


class EscrowError(Exception):
    """Base class for rejected contract calls. The contract state is unchanged when raised."""


class DuplicateContract(EscrowError):
    pass


class UnknownContract(EscrowError):
    pass


class InvalidCheckpoint(EscrowError):
    pass


class StaleCheckpoint(EscrowError):
    pass


class BadSignature(EscrowError):
    pass


class ConservationViolation(EscrowError):
    pass


class AlreadyFinalized(EscrowError):
    pass


class NothingPending(EscrowError):
    pass


class ChallengeWindowClosed(EscrowError):
    pass


class ChallengeStillOpen(EscrowError):
    pass


class NotNewer(EscrowError):
    pass


class InvalidTranscript(EscrowError):
    def __init__(self, index: int, violation: Violation):
        self.index = index
        self.violation = violation
        super().__init__(f"transcript invalid at index {index}: {violation.value}")


class UnknownParty(EscrowError):
    pass


class InvalidAmount(EscrowError):
    pass


class InsufficientFunds(EscrowError):
    pass


class BadTimeout(EscrowError):
    pass


class UnknownLock(EscrowError):
    pass


class NotOpen(EscrowError):
    pass


class Expired(EscrowError):
    pass


class WrongPreimage(EscrowError):
    pass


class NotYetExpired(EscrowError):
    pass


class ChallengeParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    challenge_period: int = Field(DEFAULT_CHALLENGE_PERIOD, gt=0)


class HtlcStatus(str, Enum):
    OPEN = "OPEN"
    CLAIMED = "CLAIMED"
    REFUNDED = "REFUNDED"


@dataclass
class HTLC:
    lock_id: str
    amount: int
    hash_lock: Hash256
    timeout: int
    payer: Address
    payee: Address
    status: HtlcStatus = HtlcStatus.OPEN
    resolved_at: Optional[int] = None


class SettlementOrigin(str, Enum):
    REQUEST = "REQUEST"
    CHECKPOINT = "CHECKPOINT"
    DISPUTE = "DISPUTE"


@dataclass(frozen=True)
class PendingSettlement:
    sequence: int
    balances: Dict[Address, int]
    chain_head: Hash256
    challenge_deadline: int
    origin: SettlementOrigin


@dataclass(frozen=True)
class FinalizedSettlement:
    sequence: int
    balances: Dict[Address, int]
    payouts: Dict[Address, int]
    finalized_at: int


@dataclass(frozen=True)
class _ReplayBase:
    sequence: int
    chain_head: Hash256
    balances: Dict[Address, int]


@dataclass
class ContractState:
    channel: str
    deposits: Dict[Address, int]
    latest_checkpoint: Optional[Checkpoint] = None
    settlement: Union[None, PendingSettlement, FinalizedSettlement] = None
    htlcs: Dict[str, HTLC] = field(default_factory=dict)
    bases: List[_ReplayBase] = field(default_factory=list)
    preimages: Dict[str, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class SettlementReport:
    channel: str
    final_sequence: int
    payouts: Dict[Address, int]
    htlcs: List[HTLC]


class EscrowContract:
    """One channel's escrow. Calls are serialized by the caller."""

    def __init__(self, config: ChannelConfig, params: Optional[ChallengeParams] = None):
        self.config = config
        self.params = params or ChallengeParams()
        self.state = ContractState(channel=config.channel, deposits=config.deposits)
        self.state.bases.append(_ReplayBase(0, Hash256.ZERO, config.deposits))
        self._lock_counter = 0
        logger.info(f"Deployed escrow for {config.channel} holding {config.total_deposits}")

    @property
    def channel(self) -> str:
        return self.config.channel

    @property
    def pending(self) -> Optional[PendingSettlement]:
        settlement = self.state.settlement
        return settlement if isinstance(settlement, PendingSettlement) else None

    @property
    def finalized(self) -> Optional[FinalizedSettlement]:
        settlement = self.state.settlement
        return settlement if isinstance(settlement, FinalizedSettlement) else None

    @property
    def latest_sequence(self) -> int:
        checkpoint = self.state.latest_checkpoint
        return 0 if checkpoint is None else checkpoint.sequence

    def _balance_view(self) -> Dict[Address, int]:
        """Off-chain balances the contract would settle on right now."""
        if self.pending is not None:
            return self.pending.balances
        if self.state.latest_checkpoint is not None:
            return dict(self.state.latest_checkpoint.balances)
        return self.state.deposits

    def net(self, party: Address) -> int:
        """Net claimed HTLC transfers for `party`."""
        total = 0
        for htlc in self.state.htlcs.values():
            if htlc.status is HtlcStatus.CLAIMED:
                if htlc.payee == party:
                    total += htlc.amount
                if htlc.payer == party:
                    total -= htlc.amount
        return total

    def locked_by(self, party: Address) -> int:
        return sum(
            htlc.amount
            for htlc in self.state.htlcs.values()
            if htlc.status is HtlcStatus.OPEN and htlc.payer == party
        )

    @property
    def locked(self) -> int:
        return sum(htlc.amount for htlc in self.state.htlcs.values() if htlc.status is HtlcStatus.OPEN)

    def available(self, party: Address) -> int:
        if self.finalized is not None:
            return 0
        return self._balance_view().get(party, 0) + self.net(party) - self.locked_by(party)

    def spendable(self, party: Address) -> int:
        """What `party` may still lock; claimed HTLC gains only count once settled."""
        if self.finalized is not None:
            return 0
        return self._balance_view().get(party, 0) + min(self.net(party), 0) - self.locked_by(party)

    @property
    def paid_out(self) -> int:
        return 0 if self.finalized is None else sum(self.finalized.payouts.values())

    def revealed_preimage(self, lock_id: str) -> Optional[bytes]:
        return self.state.preimages.get(lock_id)

    def _assert_conservation(self) -> None:
        held = sum(self.available(party) for party in self.config.parties) + self.locked + self.paid_out
        if held != self.config.total_deposits:
            raise AssertionError(f"escrow {self.channel} accounts for {held}, deposits are {self.config.total_deposits}")

    def _require_open(self) -> None:
        if self.finalized is not None:
            raise AlreadyFinalized(f"channel {self.channel} settled at sequence {self.finalized.sequence}")

    def _require_party(self, party: Address) -> None:
        if party not in self.config.parties:
            raise UnknownParty(f"{party} is not a party of channel {self.channel}")

    def _validate_checkpoint(self, cp: Checkpoint) -> None:
        if cp.channel != self.channel:
            raise InvalidCheckpoint(f"checkpoint for {cp.channel!r} submitted to {self.channel!r}")
        if not verify_checkpoint_signatures(cp, self.config.key_a, self.config.key_b):
            raise BadSignature(f"checkpoint at sequence {cp.sequence} is not signed by both parties")
        if set(cp.balances) != set(self.config.parties) or any(amount < 0 for amount in cp.balances.values()):
            raise InvalidCheckpoint("checkpoint balances must cover exactly the two parties with non-negative amounts")
        if cp.total != self.config.total_deposits:
            raise ConservationViolation(f"checkpoint balances total {cp.total}, deposits are {self.config.total_deposits}")

    def _accept(self, cp: Checkpoint) -> None:
        self.state.latest_checkpoint = cp
        self.state.bases.append(_ReplayBase(cp.sequence, cp.chain_head, dict(cp.balances)))

    def _open_pending(self, sequence: int, balances: Dict[Address, int], head: Hash256, now: int, origin: SettlementOrigin) -> None:
        self.state.settlement = PendingSettlement(
            sequence=sequence,
            balances=dict(balances),
            chain_head=head,
            challenge_deadline=now + self.params.challenge_period,
            origin=origin,
        )

    def submit_checkpoint(self, cp: Checkpoint, now: int) -> None:
        """Accept a strictly newer dual-signed checkpoint; it also supersedes an older pending settlement."""
        self._require_open()
        self._validate_checkpoint(cp)
        if cp.sequence <= self.latest_sequence:
            raise StaleCheckpoint(f"checkpoint sequence {cp.sequence} is not above {self.latest_sequence}")
        self._accept(cp)
        pending = self.pending
        if pending is not None and cp.sequence > pending.sequence:
            self._open_pending(cp.sequence, dict(cp.balances), cp.chain_head, now, SettlementOrigin.CHECKPOINT)
            logger.info(f"Escrow {self.channel}: checkpoint {cp.sequence} superseded pending {pending.sequence}")
        self._assert_conservation()
        logger.info(f"Escrow {self.channel}: accepted {cp.reason.value} checkpoint at sequence {cp.sequence}")

    def request_settlement(self, cp: Checkpoint, now: int) -> PendingSettlement:
        self._require_open()
        self._validate_checkpoint(cp)
        if cp.sequence < self.latest_sequence:
            raise StaleCheckpoint(f"settlement at sequence {cp.sequence} is below checkpoint {self.latest_sequence}")
        pending = self.pending
        if pending is not None and cp.sequence <= pending.sequence:
            raise NotNewer(f"settlement at sequence {cp.sequence} does not supersede pending {pending.sequence}")
        if cp.sequence > self.latest_sequence:
            self._accept(cp)
        self._open_pending(cp.sequence, dict(cp.balances), cp.chain_head, now, SettlementOrigin.REQUEST)
        self._assert_conservation()
        logger.info(
            f"Escrow {self.channel}: settlement pending at sequence {cp.sequence} "
            f"until tick {self.pending.challenge_deadline}"
        )
        return self.pending

    def _find_base(self, first: SignedInvoice) -> _ReplayBase:
        predecessor = first.sequence - 1
        head = first.hash_pointer_to_previous.transaction_hash
        for base in reversed(self.state.bases):
            if base.sequence == predecessor and base.chain_head == head:
                return base
        raise InvalidTranscript(1, Violation.UNKNOWN_BASE)

    def _replay(self, transcript: Sequence[SignedInvoice]) -> _ReplayBase:
        base = self._find_base(transcript[0])
        balances = dict(base.balances)
        head = base.chain_head
        parties = set(self.config.parties)
        for index, si in enumerate(transcript, start=1):
            violations = verify_signed_invoice(si, self.config.currency)
            if si.channel != self.channel:
                violations.append(Violation.CHANNEL_MISMATCH)
            if si.buyer_address not in parties or si.supplier_address not in parties or si.buyer_address == si.supplier_address:
                violations.append(Violation.UNKNOWN_PARTY)
            if si.sequence != base.sequence + index:
                violations.append(Violation.SEQUENCE_MISMATCH)
            pointer = si.hash_pointer_to_previous
            if pointer.transaction_hash != head or (head.is_zero() and pointer != GENESIS):
                violations.append(Violation.HASH_POINTER_MISMATCH)
            if violations:
                raise InvalidTranscript(index, violations[0])
            if balances[si.buyer_address] < si.price:
                raise InvalidTranscript(index, Violation.INSUFFICIENT_FUNDS)
            balances[si.buyer_address] -= si.price
            balances[si.supplier_address] += si.price
            head = si.storage_digest
        return _ReplayBase(transcript[-1].sequence, head, balances)

    def dispute(self, transcript: Sequence[SignedInvoice], now: int) -> PendingSettlement:
        """
        Override a pending settlement with a longer signed history.
        The transcript must continue a state the contract already knows: genesis, an accepted
        checkpoint, or an earlier dispute resolution.
        """
        self._require_open()
        pending = self.pending
        if pending is None:
            raise NothingPending(f"no settlement pending on {self.channel}")
        if now > pending.challenge_deadline:
            raise ChallengeWindowClosed(f"challenge window closed at tick {pending.challenge_deadline}")
        if not transcript:
            raise NotNewer(f"empty transcript cannot supersede pending sequence {pending.sequence}")

        resolution = self._replay(transcript)
        if resolution.sequence <= pending.sequence:
            raise NotNewer(f"transcript ends at {resolution.sequence}, pending is {pending.sequence}")
        self.state.bases.append(resolution)
        self._open_pending(resolution.sequence, resolution.balances, resolution.chain_head, now, SettlementOrigin.DISPUTE)
        self._assert_conservation()
        logger.info(
            f"Escrow {self.channel}: dispute moved settlement from {pending.sequence} to {resolution.sequence}"
        )
        return self.pending

    def finalize(self, now: int) -> FinalizedSettlement:
        self._require_open()
        pending = self.pending
        if pending is None:
            raise NothingPending(f"no settlement pending on {self.channel}")
        if now <= pending.challenge_deadline:
            raise ChallengeStillOpen(f"challenge window open until tick {pending.challenge_deadline}")
        live = [h.lock_id for h in self.state.htlcs.values() if h.status is HtlcStatus.OPEN and h.timeout >= now]
        if live:
            raise ChallengeStillOpen(f"hashed timelocks still claimable: {', '.join(live)}")

        for htlc in self.state.htlcs.values():
            if htlc.status is HtlcStatus.OPEN:
                htlc.status = HtlcStatus.REFUNDED
                htlc.resolved_at = now
                logger.info(f"Escrow {self.channel}: refunded expired {htlc.lock_id} at finalize")

        payouts = {party: pending.balances.get(party, 0) + self.net(party) for party in self.config.parties}
        self.state.settlement = FinalizedSettlement(pending.sequence, dict(pending.balances), payouts, now)
        self._assert_conservation()
        logger.info(f"Escrow {self.channel}: finalized at sequence {pending.sequence}")
        return self.state.settlement

    def htlc_lock(self, payer: Address, payee: Address, amount: int, hash_lock: Hash256, timeout: int, now: int) -> str:
        self._require_open()
        self._require_party(payer)
        self._require_party(payee)
        if payer == payee:
            raise UnknownParty(f"payer and payee are both {payer}")
        if amount <= 0:
            raise InvalidAmount(f"lock amount must be positive, got {amount}")
        if timeout <= now:
            raise BadTimeout(f"timeout {timeout} is not after tick {now}")
        if self.spendable(payer) < amount:
            raise InsufficientFunds(f"{payer} can lock {self.spendable(payer)}, lock needs {amount}")

        self._lock_counter += 1
        lock_id = f"{self.channel}/htlc/{self._lock_counter}"
        self.state.htlcs[lock_id] = HTLC(lock_id, amount, hash_lock, timeout, payer, payee)
        self._assert_conservation()
        logger.info(f"Escrow {self.channel}: {lock_id} locks {amount} until tick {timeout}")
        return lock_id

    def _htlc(self, lock_id: str) -> HTLC:
        try:
            return self.state.htlcs[lock_id]
        except KeyError:
            raise UnknownLock(f"no lock {lock_id!r} on {self.channel}") from None

    def htlc_claim(self, lock_id: str, preimage: bytes, now: int) -> HTLC:
        htlc = self._htlc(lock_id)
        if htlc.status is not HtlcStatus.OPEN:
            raise NotOpen(f"{lock_id} is {htlc.status.value}")
        if now > htlc.timeout:
            raise Expired(f"{lock_id} expired at tick {htlc.timeout}")
        if digest(preimage) != htlc.hash_lock:
            raise WrongPreimage(f"preimage does not open {lock_id}")
        htlc.status = HtlcStatus.CLAIMED
        htlc.resolved_at = now
        self.state.preimages[lock_id] = bytes(preimage)
        self._assert_conservation()
        logger.info(f"Escrow {self.channel}: {lock_id} claimed by {htlc.payee}")
        return htlc

    def htlc_refund(self, lock_id: str, now: int) -> HTLC:
        htlc = self._htlc(lock_id)
        if htlc.status is not HtlcStatus.OPEN:
            raise NotOpen(f"{lock_id} is {htlc.status.value}")
        if now <= htlc.timeout:
            raise NotYetExpired(f"{lock_id} is claimable until tick {htlc.timeout}")
        htlc.status = HtlcStatus.REFUNDED
        htlc.resolved_at = now
        self._assert_conservation()
        logger.info(f"Escrow {self.channel}: {lock_id} refunded to {htlc.payer}")
        return htlc

    def settlement_report(self) -> SettlementReport:
        settlement = self.finalized
        if settlement is None:
            raise NothingPending(f"channel {self.channel} is not finalized")
        return SettlementReport(
            channel=self.channel,
            final_sequence=settlement.sequence,
            payouts=dict(settlement.payouts),
            htlcs=sorted(self.state.htlcs.values(), key=lambda h: h.lock_id),
        )


class ContractRegistry:
    """All deployed escrows, keyed by channel."""

    def __init__(self, params: Optional[ChallengeParams] = None):
        self.params = params or ChallengeParams()
        self._contracts: Dict[str, EscrowContract] = {}

    def deploy(self, config: ChannelConfig, params: Optional[ChallengeParams] = None) -> EscrowContract:
        if config.channel in self._contracts:
            raise DuplicateContract(f"channel {config.channel!r} already has an escrow")
        contract = EscrowContract(config, params or self.params)
        self._contracts[config.channel] = contract
        return contract

    def get(self, channel: str) -> EscrowContract:
        try:
            return self._contracts[channel]
        except KeyError:
            raise UnknownContract(f"no escrow deployed for {channel!r}") from None

    def __iter__(self) -> Iterator[EscrowContract]:
        return iter(self._contracts[name] for name in sorted(self._contracts))

    def __len__(self) -> int:
        return len(self._contracts)
