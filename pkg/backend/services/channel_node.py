"""
Parsec channel node: ordered, deduplicated application of one channel's signed transactions.
NOTE: A node owns exactly one ChannelState. Both parties' keys live here because checkpoints
are co-signed synchronously in simulation.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from services.protocol import (
    DEFAULT_CHANNEL,
    GENESIS,
    Address,
    Checkpoint,
    CheckpointReason,
    ControlKind,
    ControlMessage,
    Currency,
    Hash256,
    KeyPair,
    SignedInvoice,
    Violation,
    derive_address,
    pack_message,
    read_frames,
    sign_checkpoint,
    unpack_message,
    verify_signed_invoice,
    write_frames,
)

logger = logging.getLogger(__name__)


class ChannelError(Exception):
    """Base class for node-side rejections. State is unchanged when one is raised."""


class OrderingWindowExceeded(ChannelError):
    pass


class InsufficientFunds(ChannelError):
    pass


class UnknownChannel(ChannelError):
    pass


class ChannelHalted(ChannelError):
    pass


class InvalidTransaction(ChannelError):
    def __init__(self, transaction: SignedInvoice, violations: Iterable[Violation]):
        self.transaction = transaction
        self.violations = list(violations)
        names = ", ".join(v.value for v in self.violations)
        super().__init__(f"transaction {transaction.invoice_id} seq {transaction.sequence}: {names}")


class ForkDetected(ChannelError):
    """Two signed transactions claim the same predecessor; both are kept as evidence."""

    def __init__(self, evidence: Tuple[SignedInvoice, SignedInvoice]):
        self.evidence = evidence
        super().__init__(
            f"fork at sequence {evidence[0].sequence}: {evidence[0].invoice_id} vs {evidence[1].invoice_id}"
        )


class ChannelConfig(BaseModel):
    """Static channel parameters. Keys are the parties' public keys."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    channel: str = DEFAULT_CHANNEL
    currency: Currency
    party_a: Address
    party_b: Address
    key_a: bytes
    key_b: bytes
    deposit_a: int = Field(ge=0)
    deposit_b: int = Field(ge=0)
    n: int = Field(8, ge=1)
    m: int = Field(100, ge=1)
    checkpoint_timeout: int = Field(50, ge=1)

    @field_validator("party_a", "party_b", mode="before")
    @classmethod
    def _parse_address(cls, value):
        return Address.parse(value) if isinstance(value, str) else value

    @field_validator("key_a", "key_b", mode="before")
    @classmethod
    def _parse_key(cls, value):
        return bytes.fromhex(value) if isinstance(value, str) else value

    @field_serializer("party_a", "party_b")
    def _dump_address(self, value: Address) -> str:
        return str(value)

    @field_serializer("key_a", "key_b")
    def _dump_key(self, value: bytes) -> str:
        return value.hex()

    @model_validator(mode="after")
    def _check_parties(self) -> "ChannelConfig":
        if self.party_a == self.party_b:
            raise ValueError("party_a and party_b must be distinct")
        for party, key in ((self.party_a, self.key_a), (self.party_b, self.key_b)):
            if party.currency != self.currency:
                raise ValueError(f"party {party} is not a {self.currency.value} address")
            if derive_address(key, self.currency) != party:
                raise ValueError(f"public key does not derive party address {party}")
        return self

    @classmethod
    def for_keys(cls, keys_a: KeyPair, keys_b: KeyPair, currency: Currency = Currency.ETH, **fields) -> "ChannelConfig":
        return cls(
            currency=currency,
            party_a=keys_a.address(currency),
            party_b=keys_b.address(currency),
            key_a=keys_a.public_key,
            key_b=keys_b.public_key,
            **fields,
        )

    @property
    def parties(self) -> Tuple[Address, Address]:
        return self.party_a, self.party_b

    @property
    def deposits(self) -> Dict[Address, int]:
        return {self.party_a: self.deposit_a, self.party_b: self.deposit_b}

    @property
    def total_deposits(self) -> int:
        return self.deposit_a + self.deposit_b

    def counterparty(self, party: Address) -> Address:
        return self.party_b if party == self.party_a else self.party_a


@dataclass
class ChannelState:
    config: ChannelConfig
    balances: Dict[Address, int]
    chain_head: Hash256 = Hash256.ZERO
    next_sequence: int = 1
    applied_ids: Set[str] = field(default_factory=set)
    pending: Dict[str, SignedInvoice] = field(default_factory=dict)
    chain: List[SignedInvoice] = field(default_factory=list)
    last_checkpoint_sequence: int = 0
    last_checkpoint_time: int = 0
    last_checkpoint: Optional[Checkpoint] = None
    settled_sequence: int = 0
    htlc_locks: Dict[str, Tuple[Address, Address, int]] = field(default_factory=dict)
    htlc_net: Dict[Address, int] = field(default_factory=dict)
    halted_at: Optional[int] = None
    forks: List[Tuple[SignedInvoice, SignedInvoice]] = field(default_factory=list)

    @property
    def last_applied_sequence(self) -> int:
        return self.next_sequence - 1

    @property
    def htlc_locked(self) -> int:
        return sum(amount for _, _, amount in self.htlc_locks.values())

    def locked_by(self, party: Address) -> int:
        return sum(amount for payer, _, amount in self.htlc_locks.values() if payer == party)

    def available(self, party: Address) -> int:
        """Balance plus claimed HTLC transfers minus open locks."""
        return self.balances.get(party, 0) + self.htlc_net.get(party, 0) - self.locked_by(party)

    def spendable(self, party: Address) -> int:
        """Off-chain spending limit. HTLC gains are paid out on chain only."""
        return self.balances.get(party, 0) + min(self.htlc_net.get(party, 0), 0) - self.locked_by(party)


def open_channel(config: ChannelConfig, opened_at: int = 0) -> ChannelState:
    return ChannelState(config=config, balances=config.deposits, last_checkpoint_time=opened_at)


class OutputKind(str, Enum):
    CHECKPOINT = "CHECKPOINT"
    SETTLEMENT_REQUEST = "SETTLEMENT_REQUEST"
    DISPUTE_SUBMISSION = "DISPUTE_SUBMISSION"


@dataclass(frozen=True)
class NodeOutput:
    kind: OutputKind
    channel: str
    payload: Union[Checkpoint, Tuple[SignedInvoice, ...]]


class IngestStatus(str, Enum):
    APPLIED = "APPLIED"
    BUFFERED = "BUFFERED"
    DUPLICATE = "DUPLICATE"


@dataclass
class IngestResult:
    status: IngestStatus
    applied: List[SignedInvoice] = field(default_factory=list)
    outputs: List[NodeOutput] = field(default_factory=list)
    halted: Optional["InsufficientFunds"] = None


def reconstruct_order(buffer: Iterable[SignedInvoice], chain_head: Hash256) -> List[SignedInvoice]:
    """
    Longest run of buffered transactions linkable from `chain_head` through hash pointers.
    NOTE: Edges go predecessor hash -> own storage hash; any out-degree above one is a fork.
    """
    links = nx.DiGraph()
    for si in buffer:
        links.add_edge(si.hash_pointer_to_previous.transaction_hash, si.storage_digest, transaction=si)

    for node in links.nodes:
        if links.out_degree(node) > 1:
            rivals = [links.edges[node, successor]["transaction"] for successor in links.successors(node)]
            rivals.sort(key=lambda si: si.invoice_id)
            raise ForkDetected((rivals[0], rivals[1]))

    ordered = []
    head = chain_head
    while head in links and links.out_degree(head) == 1:
        successor = next(iter(links.successors(head)))
        ordered.append(links.edges[head, successor]["transaction"])
        head = successor
    return ordered


class ChannelNode:
    """Consumes one channel's transaction stream and emits checkpoints and settlement requests."""

    def __init__(self, config: ChannelConfig, signers: Mapping[Address, KeyPair], opened_at: int = 0):
        try:
            self._keys_a = signers[config.party_a]
            self._keys_b = signers[config.party_b]
        except KeyError as e:
            raise ChannelError(f"missing signing keys for party {e.args[0]}") from None
        self.state = open_channel(config, opened_at)
        logger.info(f"Opened channel {config.channel} with deposits {config.deposit_a}/{config.deposit_b}")

    @property
    def config(self) -> ChannelConfig:
        return self.state.config

    @property
    def channel(self) -> str:
        return self.state.config.channel

    def _violations(self, si: SignedInvoice) -> List[Violation]:
        config = self.config
        violations = verify_signed_invoice(si, config.currency)
        if si.channel != config.channel and Violation.CHANNEL_MISMATCH not in violations:
            violations.append(Violation.CHANNEL_MISMATCH)
        parties = set(config.parties)
        if si.buyer_address not in parties or si.supplier_address not in parties or si.buyer_address == si.supplier_address:
            violations.append(Violation.UNKNOWN_PARTY)
        return violations

    def ingest(self, si: SignedInvoice, now: int) -> IngestResult:
        state = self.state
        if si.invoice_id in state.applied_ids or si.invoice_id in state.pending:
            return IngestResult(IngestStatus.DUPLICATE)
        if state.halted_at is not None:
            raise ChannelHalted(f"channel {self.channel} halted at sequence {state.halted_at}")

        violations = self._violations(si)
        if violations:
            error = InvalidTransaction(si, violations)
            logger.warning(f"Rejected {error}")
            raise error

        if si.sequence < state.next_sequence:
            evidence = (state.chain[si.sequence - 1], si)
            state.forks.append(evidence)
            raise ForkDetected(evidence)
        if si.sequence > state.next_sequence + self.config.n:
            raise OrderingWindowExceeded(
                f"sequence {si.sequence} is beyond the window {state.next_sequence}..{state.next_sequence + self.config.n}"
            )
        if si.sequence > state.next_sequence:
            rival = next((p for p in state.pending.values() if p.sequence == si.sequence), None)
            if rival is not None:
                evidence = (rival, si)
                state.forks.append(evidence)
                raise ForkDetected(evidence)
            state.pending[si.invoice_id] = si
            logger.debug(f"Buffered {self.channel} seq {si.sequence} waiting for {state.next_sequence}")
            return IngestResult(IngestStatus.BUFFERED)

        expected = GENESIS if not state.chain else state.chain[-1].pointer
        if si.hash_pointer_to_previous != expected:
            error = InvalidTransaction(si, [Violation.HASH_POINTER_MISMATCH])
            logger.warning(f"Rejected {error}")
            raise error

        result = IngestResult(IngestStatus.APPLIED)
        self._apply(si, now, result)
        self._drain(now, result)
        return result

    def _drain(self, now: int, result: IngestResult) -> None:
        state = self.state
        if not state.pending:
            return
        try:
            followers = reconstruct_order(state.pending.values(), state.chain_head)
        except ForkDetected as e:
            state.forks.append(e.evidence)
            logger.warning(f"Channel {self.channel}: {e}")
            return
        for follower in followers:
            if follower.sequence != state.next_sequence:
                logger.warning(f"Channel {self.channel}: buffered seq {follower.sequence} links out of order")
                return
            try:
                self._apply(follower, now, result)
            except InsufficientFunds as e:
                logger.warning(f"Channel {self.channel}: {e}")
                result.halted = e
                return
            del state.pending[follower.invoice_id]

    def _apply(self, si: SignedInvoice, now: int, result: IngestResult) -> None:
        state = self.state
        if state.spendable(si.buyer_address) < si.price:
            state.halted_at = si.sequence
            raise InsufficientFunds(
                f"{si.buyer_address} cannot pay {si.price} at sequence {si.sequence} "
                f"(spendable {state.spendable(si.buyer_address)})"
            )
        state.balances[si.buyer_address] -= si.price
        state.balances[si.supplier_address] += si.price
        state.chain_head = si.storage_digest
        state.next_sequence += 1
        state.applied_ids.add(si.invoice_id)
        state.chain.append(si)
        self._check_conservation()
        result.applied.append(si)

        checkpoint = self.maybe_checkpoint(now)
        if checkpoint is not None:
            result.outputs.append(NodeOutput(OutputKind.CHECKPOINT, self.channel, checkpoint))

    def _check_conservation(self) -> None:
        state = self.state
        held = sum(state.available(party) for party in self.config.parties) + state.htlc_locked
        if held != self.config.total_deposits:
            raise AssertionError(f"channel {self.channel} holds {held}, deposits are {self.config.total_deposits}")

    def _checkpoint(self, reason: CheckpointReason) -> Checkpoint:
        state = self.state
        draft = Checkpoint(
            channel=self.channel,
            sequence=state.last_applied_sequence,
            balances=dict(state.balances),
            chain_head=state.chain_head,
            reason=reason,
        )
        return sign_checkpoint(draft, self._keys_a, self._keys_b)

    def _commit(self, reason: CheckpointReason, now: int) -> Checkpoint:
        state = self.state
        checkpoint = self._checkpoint(reason)
        state.last_checkpoint = checkpoint
        state.last_checkpoint_sequence = checkpoint.sequence
        state.last_checkpoint_time = now
        state.settled_sequence = max(state.settled_sequence, checkpoint.sequence)
        return checkpoint

    def maybe_checkpoint(self, now: int) -> Optional[Checkpoint]:
        """At most one checkpoint per call: MODULO on s mod m == 0, else TIMEOUT when overdue."""
        state = self.state
        sequence = state.last_applied_sequence
        if sequence <= state.last_checkpoint_sequence:
            return None
        if sequence % self.config.m == 0:
            reason = CheckpointReason.MODULO
        elif now - state.last_checkpoint_time >= self.config.checkpoint_timeout:
            reason = CheckpointReason.TIMEOUT
        else:
            return None
        checkpoint = self._commit(reason, now)
        logger.info(f"Channel {self.channel}: {reason.value} checkpoint at sequence {sequence}")
        return checkpoint

    def tick(self, now: int) -> List[NodeOutput]:
        checkpoint = self.maybe_checkpoint(now)
        return [] if checkpoint is None else [NodeOutput(OutputKind.CHECKPOINT, self.channel, checkpoint)]

    def handle_control(self, msg: ControlMessage, now: int) -> NodeOutput:
        """
        Answer a settlement control message.
        NOTE: An unscheduled request with nothing applied since the last commit carries that commit
        again, so emitted checkpoint sequences stay strictly increasing.
        """
        if msg.channel != self.channel:
            raise UnknownChannel(f"node for {self.channel!r} received control for {msg.channel!r}")
        state = self.state
        if msg.kind is ControlKind.UNSCHEDULED_SETTLEMENT:
            checkpoint = state.last_checkpoint
            if checkpoint is None or state.last_applied_sequence > checkpoint.sequence:
                checkpoint = self._commit(CheckpointReason.UNSCHEDULED, now)
            logger.info(f"Channel {self.channel}: settlement request at sequence {checkpoint.sequence}")
            return NodeOutput(OutputKind.SETTLEMENT_REQUEST, self.channel, checkpoint)

        transcript = tuple(state.chain[state.settled_sequence:])
        logger.info(f"Channel {self.channel}: dispute with {len(transcript)} transaction(s) after {state.settled_sequence}")
        return NodeOutput(OutputKind.DISPUTE_SUBMISSION, self.channel, transcript)

    def reserve_htlc(self, lock_id: str, payer: Address, payee: Address, amount: int) -> None:
        """Mirror an on-chain lock so off-chain spending cannot touch the locked amount."""
        self.state.htlc_locks[lock_id] = (payer, payee, amount)
        self._check_conservation()

    def resolve_htlc(self, lock_id: str, claimed: bool) -> None:
        payer, payee, amount = self.state.htlc_locks.pop(lock_id)
        if claimed:
            net = self.state.htlc_net
            net[payer] = net.get(payer, 0) - amount
            net[payee] = net.get(payee, 0) + amount
        self._check_conservation()

    def snapshot(self, path: Union[str, Path]) -> int:
        """
        Config JSON followed by the applied chain, framed like `.plog` files.
        NOTE: The pending buffer is not saved; the log re-delivers it.
        """
        values = [self.config.model_dump_json().encode("utf-8")]
        values.extend(pack_message(si) for si in self.state.chain)
        return write_frames(path, values)

    @classmethod
    def restore(cls, path: Union[str, Path], signers: Mapping[Address, KeyPair], opened_at: int = 0) -> "ChannelNode":
        frames = read_frames(path)
        if not frames:
            raise ChannelError(f"snapshot {path} is empty")
        node = cls(ChannelConfig.model_validate_json(frames[0]), signers, opened_at)
        for value in frames[1:]:
            node.ingest(unpack_message(value), opened_at)
        return node
