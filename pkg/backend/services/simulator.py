"""
Deterministic scenario driver: producers append signed transactions to the log, partition jobs
feed channel nodes, node outputs and workload verbs drive the escrow contracts.
NOTE: One logical tick runs producer verbs, delivery, node output dispatch, contract verbs and
the node clocks, always in that order.
"""
import logging
import random
from collections import defaultdict
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from config import CONTROL_TOPIC, TRANSACTION_TOPIC
from services.channel_node import ChannelConfig, ChannelError, ChannelNode, NodeOutput, OutputKind
from services.escrow import ContractRegistry, EscrowContract, EscrowError, HtlcStatus
from services.event_log import DeliveryStats, DeliveryStream, EventLog
from services.protocol import (
    Address,
    Checkpoint,
    ChainViolation,
    ControlKind,
    ControlMessage,
    EncodingMode,
    Hash256,
    Invoice,
    KeyPair,
    ProtocolError,
    SignedInvoice,
    canonical_encode,
    digest,
    make_signed_invoice,
    pack_message,
    unpack_message,
    verify_chain,
)
from services.report import ChannelOutcome, CheckpointEntry, ContractEntry, HtlcEntry, SimReport
from services.scenario import CONTRACT_VERBS, PRODUCER_VERBS, Action, Scenario, generate_scenario

logger = logging.getLogger(__name__)


class InvalidChain(Exception):
    def __init__(self, message: str, violation: Optional[ChainViolation] = None):
        self.violation = violation
        super().__init__(message)


@dataclass(frozen=True)
class OracleResult:
    balances: Dict[Address, int]
    chain_head: Hash256
    final_sequence: int


def oracle_replay(chain: Sequence[SignedInvoice], config: ChannelConfig) -> OracleResult:
    """In-order fold over a verified chain. No buffering, no deduplication."""
    chain = list(chain)
    if chain:
        violation = verify_chain(chain)
        if violation is not None:
            raise InvalidChain(f"chain invalid at index {violation.index}: {violation.violation.value}", violation)

    balances = dict(config.deposits)
    head = Hash256.ZERO
    for si in chain:
        if si.currency != config.currency or si.channel != config.channel:
            raise InvalidChain(f"transaction {si.sequence} does not belong to channel {config.channel}")
        if si.buyer_address not in balances or si.supplier_address not in balances:
            raise InvalidChain(f"transaction {si.sequence} moves funds outside the channel")
        if balances[si.buyer_address] < si.price:
            raise InvalidChain(f"transaction {si.sequence} overdraws {si.buyer_address}")
        balances[si.buyer_address] -= si.price
        balances[si.supplier_address] += si.price
        head = digest(canonical_encode(si, EncodingMode.STORAGE))
    return OracleResult(balances, head, len(chain))


@dataclass
class _Producer:
    """The honest parties' shared wallet view of one channel."""
    config: ChannelConfig
    rng: random.Random
    balances: Dict[Address, int]
    chain: List[SignedInvoice] = field(default_factory=list)
    payments: int = 0
    refused: int = 0


@dataclass
class JobResult:
    partition: int
    outputs: List[NodeOutput] = field(default_factory=list)
    rejections: List[str] = field(default_factory=list)


class PartitionJob:
    """Drains one transaction partition into the nodes of the channels it carries."""

    def __init__(self, partition: int, stream: DeliveryStream, nodes: Mapping[str, ChannelNode]):
        self.partition = partition
        self.stream = stream
        self.nodes = nodes

    def run(self, now: int) -> JobResult:
        result = JobResult(self.partition)
        for delivery in self.stream.poll_batch(flush=True):
            try:
                message = unpack_message(delivery.record.value)
            except ProtocolError as e:
                result.rejections.append(f"t={now} partition={self.partition} undecodable: {e}")
                continue
            node = self.nodes.get(getattr(message, "channel", None))
            if node is None or not isinstance(message, SignedInvoice):
                result.rejections.append(f"t={now} partition={self.partition} unroutable {type(message).__name__}")
                continue
            try:
                ingested = node.ingest(message, now)
            except ChannelError as e:
                logger.warning(f"Channel {node.channel} rejected seq {message.sequence}: {e}")
                result.rejections.append(f"t={now} {node.channel} seq={message.sequence} {type(e).__name__}")
                continue
            if ingested.halted is not None:
                result.rejections.append(
                    f"t={now} {node.channel} seq={node.state.halted_at} {type(ingested.halted).__name__}"
                )
            result.outputs.extend(ingested.outputs)
        return result


class Simulation:
    def __init__(self, scenario: Scenario, parallel: bool = False):
        self.scenario = scenario
        self.parallel = parallel
        self.now = 0
        self.keys: Dict[str, KeyPair] = scenario.parties()
        self.configs: Dict[str, ChannelConfig] = {config.channel: config for config in scenario.channels}
        self.labels: Dict[Address, str] = {}

        self.log = EventLog()
        self.log.create_topic(TRANSACTION_TOPIC, scenario.partitions)
        self.log.create_topic(CONTROL_TOPIC, scenario.partitions)
        self.registry = ContractRegistry(scenario.challenge)
        self.nodes: Dict[str, ChannelNode] = {}
        self.producers: Dict[str, _Producer] = {}
        for spec in scenario.channel_specs:
            config = self.configs[spec.name]
            keys_a, keys_b = self.keys[spec.a], self.keys[spec.b]
            self.labels[config.party_a] = spec.a
            self.labels[config.party_b] = spec.b
            self.registry.deploy(config)
            self.nodes[spec.name] = ChannelNode(config, {config.party_a: keys_a, config.party_b: keys_b})
            self.producers[spec.name] = _Producer(
                config=config,
                rng=random.Random(f"{scenario.seed}:{spec.name}"),
                balances=dict(config.deposits),
            )

        profile = scenario.fault_profile
        self.jobs = [
            PartitionJob(p, self.log.subscribe(TRANSACTION_TOPIC, [p], profile), self.nodes)
            for p in range(scenario.partitions)
        ]
        self.control_stream = self.log.subscribe(CONTROL_TOPIC)
        self.checkpoints: Dict[str, Dict[int, Checkpoint]] = defaultdict(dict)
        self.locks: Dict[str, Tuple[str, str]] = {}
        self.report = SimReport(
            scenario=scenario.name,
            seed=scenario.seed,
            partitions=scenario.partitions,
            duplicate_probability=scenario.duplicate_probability,
            max_reorder_distance=scenario.max_reorder_distance,
            challenge_period=scenario.challenge.challenge_period,
        )
        self._pool: Optional[Executor] = None

    def _label(self, address: Address) -> str:
        return self.labels.get(address, str(address))

    def _labelled(self, balances: Mapping[Address, int]) -> Dict[str, int]:
        return {self._label(address): amount for address, amount in balances.items()}

    def _reject(self, message: str) -> None:
        logger.warning(message)
        self.report.rejections.append(message)

    def run(self) -> SimReport:
        schedule: Dict[int, List[Action]] = defaultdict(list)
        for action in self.scenario.schedule():
            schedule[action.tick].append(action)
        last_tick = max(schedule, default=0)
        logger.info(f"Running scenario {self.scenario.name} seed {self.scenario.seed} through tick {last_tick}")

        if self.parallel:
            with ThreadPoolExecutor(max_workers=len(self.jobs), thread_name_prefix="partition") as pool:
                self._pool = pool
                self._run_ticks(schedule, last_tick)
            self._pool = None
        else:
            self._run_ticks(schedule, last_tick)
        self._close(last_tick + 1)
        return self._build_report()

    def _run_ticks(self, schedule: Mapping[int, List[Action]], last_tick: int) -> None:
        for now in range(0, last_tick + 1):
            self.step(now, schedule.get(now, []))

    def step(self, now: int, actions: Iterable[Action]) -> None:
        self.now = now
        actions = list(actions)
        for action in actions:
            if action.verb in PRODUCER_VERBS:
                self._produce(action)
        self._dispatch(self._deliver(now), now)
        for action in actions:
            if action.verb in CONTRACT_VERBS:
                self._contract_call(action)
        for name in sorted(self.nodes):
            self._dispatch(self.nodes[name].tick(now), now)

    def _deliver(self, now: int) -> List[NodeOutput]:
        if self._pool is not None:
            results = list(self._pool.map(lambda job: job.run(now), self.jobs))
        else:
            results = [job.run(now) for job in self.jobs]

        outputs = []
        for result in results:
            outputs.extend(result.outputs)
            self.report.rejections.extend(result.rejections)
        for delivery in self.control_stream.poll_batch(flush=True):
            message = unpack_message(delivery.record.value)
            node = self.nodes.get(message.channel)
            if node is None:
                self._reject(f"t={now} control for unknown channel {message.channel}")
                continue
            outputs.append(node.handle_control(message, now))
        return outputs

    def _call(self, now: int, channel: str, action: str, sequence: Optional[int], call: Callable[[], object]) -> str:
        try:
            call()
            outcome = "ACCEPTED"
        except EscrowError as e:
            logger.warning(f"Escrow {channel} refused {action}: {e}")
            outcome = type(e).__name__
        self.report.contract_calls.append(ContractEntry(now, channel, action, sequence, outcome))
        return outcome

    def _dispatch(self, outputs: Iterable[NodeOutput], now: int) -> None:
        for output in outputs:
            contract = self.registry.get(output.channel)
            if output.kind is OutputKind.CHECKPOINT:
                checkpoint = output.payload
                self.checkpoints[output.channel][checkpoint.sequence] = checkpoint
                try:
                    contract.submit_checkpoint(checkpoint, now)
                    outcome = "ACCEPTED"
                except EscrowError as e:
                    outcome = type(e).__name__
                self.report.checkpoints.append(
                    CheckpointEntry(now, output.channel, checkpoint.sequence, checkpoint.reason.value, outcome)
                )
            elif output.kind is OutputKind.SETTLEMENT_REQUEST:
                checkpoint = output.payload
                committed = self.checkpoints[output.channel]
                fresh = checkpoint.sequence not in committed
                committed.setdefault(checkpoint.sequence, checkpoint)
                outcome = self._call(
                    now, output.channel, "REQUEST", checkpoint.sequence,
                    lambda: contract.request_settlement(checkpoint, now),
                )
                # a restated commit is already listed
                if fresh:
                    self.report.checkpoints.append(
                        CheckpointEntry(now, output.channel, checkpoint.sequence, checkpoint.reason.value, outcome)
                    )
            else:
                transcript = output.payload
                sequence = transcript[-1].sequence if transcript else None
                self._call(now, output.channel, "DISPUTE", sequence, lambda: contract.dispute(transcript, now))

    def _produce(self, action: Action) -> None:
        channel = action.channel
        spec = self.scenario.spec(channel)
        config = self.configs[channel]
        contract = self.registry.get(channel)

        if action.verb == "control":
            kind = ControlKind.UNSCHEDULED_SETTLEMENT if action.args[0] == "unscheduled" else ControlKind.DISPUTED_SETTLEMENT
            requester = self.keys[action.args[1] if len(action.args) > 1 else spec.a].address(config.currency)
            self.log.append(CONTROL_TOPIC, channel.encode("utf-8"), pack_message(ControlMessage(channel, kind, requester)))
            return

        payer_label, amount, invoice_type = action.args
        producer = self.producers[channel]
        payer_keys = self.keys[payer_label]
        payee_keys = self.keys[spec.counterparty(payer_label)]
        payer = payer_keys.address(config.currency)
        payee = payee_keys.address(config.currency)

        if contract.finalized is not None:
            producer.refused += 1
            self._reject(f"t={action.tick} {channel} pay refused: channel settled")
            return
        limit = producer.balances[payer] + min(contract.net(payer), 0) - contract.locked_by(payer)
        if amount > limit:
            producer.refused += 1
            self._reject(f"t={action.tick} {channel} pay refused: {payer_label} can spend {limit}, asked {amount}")
            return

        predecessor = producer.chain[-1] if producer.chain else None
        si = make_signed_invoice(
            Invoice(payee, amount, config.currency, invoice_type),
            predecessor,
            channel,
            len(producer.chain) + 1,
            buyer_keys=payer_keys,
            seller_keys=payee_keys,
            channel_currency=config.currency,
            rng=producer.rng,
        )
        producer.chain.append(si)
        producer.balances[payer] -= amount
        producer.balances[payee] += amount
        producer.payments += 1
        self.log.append(TRANSACTION_TOPIC, channel.encode("utf-8"), pack_message(si))

    def _contract_call(self, action: Action) -> None:
        now = action.tick
        channel = action.channel
        contract = self.registry.get(channel)
        node = self.nodes[channel]

        if action.verb == "settle-stale":
            (sequence,) = action.args
            checkpoint = self.checkpoints[channel].get(sequence)
            if checkpoint is None:
                self.report.contract_calls.append(ContractEntry(now, channel, "STALE_REQUEST", sequence, "NoCheckpoint"))
                return
            self._call(now, channel, "STALE_REQUEST", sequence, lambda: contract.request_settlement(checkpoint, now))
        elif action.verb == "settle":
            pending = contract.pending
            self._call(now, channel, "FINALIZE", pending.sequence if pending else None, lambda: contract.finalize(now))
            self._sync_refunds(channel)
        elif action.verb == "htlc-lock":
            self._htlc_lock(action, contract, node)
        elif action.verb == "htlc-claim":
            label, secret = action.args
            if secret.startswith("@"):
                source = self.locks.get(secret[1:])
                revealed = None if source is None else self.registry.get(source[0]).revealed_preimage(source[1])
                preimage = revealed or b""
            else:
                preimage = secret.encode("utf-8")
            self._htlc_resolve(action, label, lambda c, lock_id: c.htlc_claim(lock_id, preimage, now), claimed=True)
        elif action.verb == "htlc-refund":
            (label,) = action.args
            self._htlc_resolve(action, label, lambda c, lock_id: c.htlc_refund(lock_id, now), claimed=False)

    def _htlc_lock(self, action: Action, contract: EscrowContract, node: ChannelNode) -> None:
        payer_label, amount, secret, duration, label = action.args
        config = self.configs[action.channel]
        payer = self.keys[payer_label].address(config.currency)
        payee = config.counterparty(payer)
        if label in self.locks:
            self._reject(f"t={action.tick} {action.channel} htlc {label} already locked")
            return
        if node.state.spendable(payer) < amount:
            self._reject(f"t={action.tick} {action.channel} htlc {label} InsufficientFunds")
            return
        try:
            lock_id = contract.htlc_lock(payer, payee, amount, digest(secret.encode("utf-8")), action.tick + duration, action.tick)
        except EscrowError as e:
            self._reject(f"t={action.tick} {action.channel} htlc {label} {type(e).__name__}")
            return
        node.reserve_htlc(lock_id, payer, payee, amount)
        self.locks[label] = (action.channel, lock_id)

    def _htlc_resolve(self, action: Action, label: str, call: Callable, claimed: bool) -> None:
        if label not in self.locks:
            self._reject(f"t={action.tick} {action.channel} htlc {label} UnknownLock")
            return
        channel, lock_id = self.locks[label]
        try:
            call(self.registry.get(channel), lock_id)
        except EscrowError as e:
            self._reject(f"t={action.tick} {channel} htlc {label} {type(e).__name__}")
            return
        self.nodes[channel].resolve_htlc(lock_id, claimed)

    def _sync_refunds(self, channel: str) -> None:
        """Release node-side mirrors of locks the contract refunded while finalizing."""
        node = self.nodes[channel]
        htlcs = self.registry.get(channel).state.htlcs
        for lock_id in sorted(node.state.htlc_locks):
            if htlcs[lock_id].status is HtlcStatus.REFUNDED:
                node.resolve_htlc(lock_id, claimed=False)

    def _close(self, now: int) -> None:
        """Scheduled settlement: commit every open channel's latest state, then finalize after all windows."""
        for name in sorted(self.nodes):
            node, contract = self.nodes[name], self.registry.get(name)
            if contract.finalized is not None:
                continue
            pending = contract.pending
            if pending is None or pending.sequence < node.state.last_applied_sequence:
                control = ControlMessage(name, ControlKind.UNSCHEDULED_SETTLEMENT, node.config.party_a)
                self._dispatch([node.handle_control(control, now)], now)

        open_contracts = [c for c in self.registry if c.finalized is None and c.pending is not None]
        if not open_contracts:
            return
        latest = max(
            max([c.pending.challenge_deadline] + [h.timeout for h in c.state.htlcs.values() if h.status is HtlcStatus.OPEN])
            for c in open_contracts
        )
        finalize_at = max(now, latest + 1)
        for contract in open_contracts:
            self._call(finalize_at, contract.channel, "FINALIZE", contract.pending.sequence, lambda c=contract: c.finalize(finalize_at))
            self._sync_refunds(contract.channel)

    def _build_report(self) -> SimReport:
        report = self.report
        total_paid = 0
        for spec in self.scenario.channel_specs:
            name = spec.name
            config, node, contract, producer = self.configs[name], self.nodes[name], self.registry.get(name), self.producers[name]
            state = node.state
            try:
                oracle = oracle_replay(producer.chain, config)
            except InvalidChain as e:
                report.divergence.append(f"{name}: oracle rejected produced chain: {e}")
                oracle = OracleResult(dict(config.deposits), Hash256.ZERO, 0)

            outcome = ChannelOutcome(
                channel=name,
                currency=config.currency.value,
                deposits=self._labelled(config.deposits),
                node_balances=self._labelled(state.balances),
                node_sequence=state.last_applied_sequence,
                node_head=state.chain_head.hex(),
                oracle_balances=self._labelled(oracle.balances),
                oracle_sequence=oracle.final_sequence,
                oracle_head=oracle.chain_head.hex(),
                payments=producer.payments,
                refused=producer.refused,
                forks=len(state.forks),
            )
            if (state.balances, state.chain_head, state.last_applied_sequence) != (
                oracle.balances, oracle.chain_head, oracle.final_sequence
            ):
                report.divergence.append(
                    f"{name}: node seq={state.last_applied_sequence} {outcome.node_balances} "
                    f"vs oracle seq={oracle.final_sequence} {outcome.oracle_balances}"
                )

            settled = contract.finalized
            if settled is None:
                report.settlement_flags.append(f"{name}: not finalized")
            else:
                outcome.payouts = self._labelled(settled.payouts)
                outcome.settled_sequence = settled.sequence
                total_paid += sum(settled.payouts.values())
                expected = {party: oracle.balances[party] + contract.net(party) for party in config.parties}
                if settled.payouts != expected:
                    report.settlement_flags.append(
                        f"{name}: payout {outcome.payouts} differs from oracle {self._labelled(expected)}"
                    )
            report.channels.append(outcome)

        deposits = sum(config.total_deposits for config in self.configs.values())
        if total_paid and total_paid != deposits:
            report.settlement_flags.append(f"payouts total {total_paid}, deposits total {deposits}")

        for label, (channel, lock_id) in self.locks.items():
            htlc = self.registry.get(channel).state.htlcs[lock_id]
            report.htlcs.append(
                HtlcEntry(channel, label, lock_id, self._label(htlc.payer), self._label(htlc.payee), htlc.amount, htlc.timeout, htlc.status.value)
            )

        delivery = DeliveryStats()
        for job in self.jobs:
            delivery.merge(job.stream.stats)
        report.delivery = delivery
        if report.divergence:
            logger.warning(f"Scenario {self.scenario.name}: {len(report.divergence)} divergence flag(s)")
        return report


def run_scenario(scenario: Scenario, parallel: bool = False) -> SimReport:
    return Simulation(scenario, parallel=parallel).run()


def sweep(seeds: Iterable[int], max_payments: int = 1000, parallel: bool = False) -> pd.DataFrame:
    """Run one generated scenario per seed and tabulate the outcome."""
    rows = []
    for seed in seeds:
        report = run_scenario(generate_scenario(seed, max_payments), parallel=parallel)
        rows.append({
            "seed": seed,
            "channels": len(report.channels),
            "payments": sum(outcome.payments for outcome in report.channels),
            "refused": sum(outcome.refused for outcome in report.channels),
            "deliveries": report.delivery.deliveries,
            "duplicates": report.delivery.duplicates,
            "max_displacement": report.delivery.max_displacement,
            "max_reorder": report.max_reorder_distance,
            "divergence": len(report.divergence),
            "settlement_flags": len(report.settlement_flags),
        })
    return pd.DataFrame(rows, columns=[
        "seed", "channels", "payments", "refused", "deliveries", "duplicates",
        "max_displacement", "max_reorder", "divergence", "settlement_flags",
    ])
