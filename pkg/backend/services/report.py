"""
Simulation report model and its two renderings (text and key=value records).
NOTE: Rendering must be byte-stable for a given report; every collection is emitted in a fixed order.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from services.event_log import DeliveryStats

REPORT_HEADER = "parsec-report v1"


@dataclass
class ChannelOutcome:
    channel: str
    currency: str
    deposits: Dict[str, int]
    node_balances: Dict[str, int]
    node_sequence: int
    node_head: str
    oracle_balances: Dict[str, int]
    oracle_sequence: int
    oracle_head: str
    payouts: Dict[str, int] = field(default_factory=dict)
    settled_sequence: Optional[int] = None
    payments: int = 0
    refused: int = 0
    forks: int = 0


@dataclass(frozen=True)
class CheckpointEntry:
    tick: int
    channel: str
    sequence: int
    reason: str
    outcome: str


@dataclass(frozen=True)
class ContractEntry:
    """One settlement-path contract call: REQUEST, STALE_REQUEST, DISPUTE or FINALIZE."""
    tick: int
    channel: str
    action: str
    sequence: Optional[int]
    outcome: str


@dataclass(frozen=True)
class HtlcEntry:
    channel: str
    label: str
    lock_id: str
    payer: str
    payee: str
    amount: int
    timeout: int
    status: str


@dataclass
class SimReport:
    scenario: str
    seed: int
    partitions: int
    duplicate_probability: float
    max_reorder_distance: int
    challenge_period: int
    channels: List[ChannelOutcome] = field(default_factory=list)
    checkpoints: List[CheckpointEntry] = field(default_factory=list)
    contract_calls: List[ContractEntry] = field(default_factory=list)
    htlcs: List[HtlcEntry] = field(default_factory=list)
    rejections: List[str] = field(default_factory=list)
    delivery: DeliveryStats = field(default_factory=DeliveryStats)
    divergence: List[str] = field(default_factory=list)
    settlement_flags: List[str] = field(default_factory=list)

    @property
    def disputes(self) -> List[ContractEntry]:
        return [entry for entry in self.contract_calls if entry.action == "DISPUTE"]

    @property
    def ok(self) -> bool:
        """No node/oracle divergence and no settlement flag."""
        return not self.divergence and not self.settlement_flags

    def channel(self, name: str) -> ChannelOutcome:
        for outcome in self.channels:
            if outcome.channel == name:
                return outcome
        raise KeyError(name)


def _amounts(balances: Dict[str, int]) -> str:
    return " ".join(f"{party}={amount}" for party, amount in sorted(balances.items()))


def render_text(report: SimReport) -> str:
    lines = [
        REPORT_HEADER,
        f"scenario {report.scenario} seed={report.seed} partitions={report.partitions} "
        f"dup={report.duplicate_probability} reorder={report.max_reorder_distance} "
        f"challenge={report.challenge_period}",
        f"delivery deliveries={report.delivery.deliveries} duplicates={report.delivery.duplicates} "
        f"max_displacement={report.delivery.max_displacement}",
    ]
    for outcome in report.channels:
        settled = "-" if outcome.settled_sequence is None else outcome.settled_sequence
        lines += [
            f"channel {outcome.channel} {outcome.currency} deposits {_amounts(outcome.deposits)}",
            f"  node   seq={outcome.node_sequence} head={outcome.node_head} {_amounts(outcome.node_balances)}",
            f"  oracle seq={outcome.oracle_sequence} head={outcome.oracle_head} {_amounts(outcome.oracle_balances)}",
            f"  payout seq={settled} {_amounts(outcome.payouts)}".rstrip(),
            f"  payments produced={outcome.payments} refused={outcome.refused} forks={outcome.forks}",
        ]
    for cp in report.checkpoints:
        lines.append(f"checkpoint t={cp.tick} {cp.channel} seq={cp.sequence} {cp.reason} {cp.outcome}")
    for call in report.contract_calls:
        sequence = "-" if call.sequence is None else call.sequence
        lines.append(f"contract t={call.tick} {call.channel} {call.action} seq={sequence} {call.outcome}")
    for htlc in report.htlcs:
        lines.append(
            f"htlc {htlc.channel} {htlc.label} {htlc.lock_id} {htlc.payer}->{htlc.payee} "
            f"amount={htlc.amount} timeout={htlc.timeout} {htlc.status}"
        )
    lines += [f"rejected {rejection}" for rejection in report.rejections]
    lines += [f"divergence {flag}" for flag in report.divergence] or ["divergence none"]
    lines += [f"settlement_flag {flag}" for flag in report.settlement_flags] or ["settlement_flags none"]
    lines.append(f"result {'OK' if report.ok else 'FAILED'}")
    return "\n".join(lines) + "\n"


def render_kv(report: SimReport) -> str:
    """One `key=value` record per line, keys dotted by section."""
    records = [
        ("report.version", "1"),
        ("scenario.name", report.scenario),
        ("scenario.seed", report.seed),
        ("scenario.partitions", report.partitions),
        ("faults.dup", report.duplicate_probability),
        ("faults.reorder", report.max_reorder_distance),
        ("challenge.period", report.challenge_period),
        ("delivery.deliveries", report.delivery.deliveries),
        ("delivery.duplicates", report.delivery.duplicates),
        ("delivery.max_displacement", report.delivery.max_displacement),
    ]
    for outcome in report.channels:
        prefix = f"channel.{outcome.channel}"
        records += [(f"{prefix}.currency", outcome.currency)]
        for view, balances in (
            ("deposit", outcome.deposits),
            ("node", outcome.node_balances),
            ("oracle", outcome.oracle_balances),
            ("payout", outcome.payouts),
        ):
            records += [(f"{prefix}.{view}.{party}", amount) for party, amount in sorted(balances.items())]
        records += [
            (f"{prefix}.node.sequence", outcome.node_sequence),
            (f"{prefix}.node.head", outcome.node_head),
            (f"{prefix}.oracle.sequence", outcome.oracle_sequence),
            (f"{prefix}.oracle.head", outcome.oracle_head),
            (f"{prefix}.settled_sequence", "" if outcome.settled_sequence is None else outcome.settled_sequence),
            (f"{prefix}.payments", outcome.payments),
            (f"{prefix}.refused", outcome.refused),
            (f"{prefix}.forks", outcome.forks),
        ]
    for index, cp in enumerate(report.checkpoints):
        records.append((f"checkpoint.{index}", f"{cp.tick},{cp.channel},{cp.sequence},{cp.reason},{cp.outcome}"))
    for index, call in enumerate(report.contract_calls):
        sequence = "" if call.sequence is None else call.sequence
        records.append((f"contract.{index}", f"{call.tick},{call.channel},{call.action},{sequence},{call.outcome}"))
    for htlc in report.htlcs:
        records.append(
            (f"htlc.{htlc.label}", f"{htlc.channel},{htlc.lock_id},{htlc.payer},{htlc.payee},{htlc.amount},{htlc.timeout},{htlc.status}")
        )
    records += [(f"rejected.{index}", rejection) for index, rejection in enumerate(report.rejections)]
    records += [(f"divergence.{index}", flag) for index, flag in enumerate(report.divergence)]
    records += [(f"settlement_flag.{index}", flag) for index, flag in enumerate(report.settlement_flags)]
    records.append(("result", "OK" if report.ok else "FAILED"))
    return "".join(f"{key}={value}\n" for key, value in records)


def render(report: SimReport, fmt: str = "text") -> str:
    if fmt == "kv":
        return render_kv(report)
    if fmt == "text":
        return render_text(report)
    raise ValueError(f"unknown report format {fmt!r}")
