"""
Parsec command line: key and invoice tooling, chain verification, scenario runs and the settlement ledger.
NOTE: Reports go to stdout, diagnostics to stderr. Exit 1 means a verification failure, a divergence
or a settlement flag, exit 2 a usage, parse or domain error.
"""
import argparse
import logging
import random
import sys
from pathlib import Path
from typing import List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

import database
from config import DATABASE_URL, LOG_LEVEL, configure_logging
from services.channel_node import ChannelConfig
from services.event_log import LogError
from services.ledger import get_ledger_statistics, list_runs, store_report
from services.protocol import (
    Address,
    Currency,
    Invoice,
    KeyPair,
    ProtocolError,
    SignedInvoice,
    chain_violations,
    make_signed_invoice,
    pack_message,
    produce_invoice_hash,
    read_frames,
    unpack_message,
    write_frames,
)
from services.report import render
from services.scenario import ScenarioError, load_scenario
from services.simulator import InvalidChain, oracle_replay, run_scenario, sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


class ParseError(Exception):
    pass


class KeyFile(BaseModel):
    private_key: str
    public_key: str
    eth_address: str
    btc_address: str

    @classmethod
    def from_keys(cls, keys: KeyPair) -> "KeyFile":
        return cls(
            private_key=keys.private_key.hex(),
            public_key=keys.public_key.hex(),
            eth_address=str(keys.address(Currency.ETH)),
            btc_address=str(keys.address(Currency.BTC)),
        )

    def keys(self) -> KeyPair:
        return KeyPair.from_private(bytes.fromhex(self.private_key))


class CliConfig(BaseModel):
    """Every option that can change a command's output."""
    command: str
    seed: Optional[int] = Field(None, ge=0, lt=2**64)
    report: Optional[Path] = None
    format: Literal["text", "kv"] = "text"
    verbose: int = 0
    parallel: bool = False
    ledger: Optional[str] = None

    @property
    def log_level(self) -> str:
        if self.verbose >= 2:
            return "DEBUG"
        return "INFO" if self.verbose == 1 else LOG_LEVEL


def _load_keys(path: Path) -> KeyPair:
    try:
        return KeyFile.model_validate_json(Path(path).read_text(encoding="utf-8")).keys()
    except (ValidationError, ValueError) as e:
        raise ParseError(f"{path}: not a key file ({e})") from None


def _read_chain(path: Path) -> List[SignedInvoice]:
    try:
        messages = [unpack_message(value) for value in read_frames(path)]
    except ProtocolError as e:
        raise ParseError(f"{path}: {e}") from None
    if not messages:
        raise ParseError(f"{path}: chain file is empty")
    for index, message in enumerate(messages, start=1):
        if not isinstance(message, SignedInvoice):
            raise ParseError(f"{path}: record {index} is a {type(message).__name__}, not a signed invoice")
    return messages


def cmd_keygen(args: argparse.Namespace, config: CliConfig) -> int:
    keys = KeyPair.generate(config.seed)
    key_file = KeyFile.from_keys(keys)
    Path(args.out).write_text(key_file.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print(f"public_key {key_file.public_key}")
    print(f"eth_address {key_file.eth_address}")
    print(f"btc_address {key_file.btc_address}")
    return EXIT_OK


def cmd_invoice(args: argparse.Namespace, config: CliConfig) -> int:
    invoice = Invoice(Address.parse(args.address), args.price, Currency.parse(args.currency), args.type)
    write_frames(args.out, [pack_message(invoice)])
    print(f"invoice_hash {produce_invoice_hash(invoice).hex()}")
    return EXIT_OK


def cmd_sign(args: argparse.Namespace, config: CliConfig) -> int:
    try:
        frames = read_frames(args.invoice)
        invoice = unpack_message(frames[0]) if frames else None
    except ProtocolError as e:
        raise ParseError(f"{args.invoice}: {e}") from None
    if not isinstance(invoice, Invoice):
        raise ParseError(f"{args.invoice}: expected one invoice record")

    chain_path = Path(args.chain)
    chain = _read_chain(chain_path) if chain_path.exists() and chain_path.stat().st_size else []
    predecessor = chain[-1] if chain else None
    rng = None if config.seed is None else random.Random(config.seed + len(chain))
    si = make_signed_invoice(
        invoice,
        predecessor,
        args.channel,
        len(chain) + 1,
        buyer_keys=_load_keys(args.buyer),
        seller_keys=_load_keys(args.seller),
        rng=rng,
    )
    write_frames(chain_path, [pack_message(tx) for tx in chain + [si]])
    print(f"signed {si.invoice_id} sequence={si.sequence} hash={si.storage_digest.hex()}")
    return EXIT_OK


def cmd_verify_chain(args: argparse.Namespace, config: CliConfig) -> int:
    chain = _read_chain(args.chain)
    violations = chain_violations(chain)
    for found in violations:
        print(f"violation index={found.index} {found.violation.value}")
    if violations:
        print(f"chain INVALID length={len(chain)} first_violation={violations[0].index}")
        return EXIT_FAILED
    print(f"chain OK length={len(chain)} head={chain[-1].storage_digest.hex()}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, config: CliConfig) -> int:
    chain = _read_chain(args.chain)
    first = chain[0]
    channel_config = ChannelConfig(
        channel=first.channel,
        currency=first.currency,
        party_a=first.buyer_address,
        party_b=first.supplier_address,
        key_a=first.buyer_public_key,
        key_b=first.supplier_public_key,
        deposit_a=args.deposit_a,
        deposit_b=args.deposit_b,
    )
    try:
        result = oracle_replay(chain, channel_config)
    except InvalidChain as e:
        print(f"replay INVALID {e}")
        return EXIT_FAILED
    print(f"replay channel={channel_config.channel} sequence={result.final_sequence} head={result.chain_head.hex()}")
    for party in channel_config.parties:
        print(f"balance {party} {result.balances[party]}")
    return EXIT_OK


def _store(report, url: str) -> None:
    database.configure(url)
    database.create_tables()
    with database.get_db_session() as db:
        run_id = store_report(db, report)
    logger.info(f"Ledger run {run_id} stored")


def cmd_run(args: argparse.Namespace, config: CliConfig) -> int:
    scenario = load_scenario(args.scenario)
    if config.seed is not None:
        scenario = scenario.with_seed(config.seed)
    report = run_scenario(scenario, parallel=config.parallel)
    rendered = render(report, config.format)
    if config.report is not None:
        config.report.write_bytes(rendered.encode("utf-8"))
    sys.stdout.write(rendered)
    if config.ledger:
        _store(report, config.ledger)
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_sweep(args: argparse.Namespace, config: CliConfig) -> int:
    summary = sweep(range(args.first, args.last + 1), args.max_payments, parallel=config.parallel)
    if args.out:
        summary.to_csv(args.out, index=False)
    failed = summary[(summary["divergence"] > 0) | (summary["settlement_flags"] > 0)]
    print(f"sweep seeds={len(summary)} payments={int(summary['payments'].sum())} "
          f"duplicates={int(summary['duplicates'].sum())} max_displacement={int(summary['max_displacement'].max())} "
          f"failed={len(failed)}")
    for seed in failed["seed"]:
        print(f"failed seed={seed}")
    return EXIT_FAILED if len(failed) else EXIT_OK


def cmd_history(args: argparse.Namespace, config: CliConfig) -> int:
    database.configure(config.ledger or DATABASE_URL)
    database.create_tables()
    with database.get_db_session() as db:
        runs = list_runs(db)
        stats = get_ledger_statistics(db)
    print(runs.to_string(index=False) if len(runs) else "no runs stored")
    for key, value in stats.items():
        print(f"{key} {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parsec", description="Parsec state channel tooling and simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG on stderr")
    parser.add_argument("--seed", type=int, help="u64 seed overriding randomness")
    commands = parser.add_subparsers(dest="command", required=True)

    keygen = commands.add_parser("keygen", help="write an Ed25519 key file")
    keygen.add_argument("out", type=Path)
    keygen.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    keygen.set_defaults(handler=cmd_keygen)

    invoice = commands.add_parser("invoice", help="write an invoice record")
    invoice.add_argument("--address", required=True, help="seller address, e.g. ETH:0x...")
    invoice.add_argument("--price", type=int, required=True)
    invoice.add_argument("--currency", default="ETH")
    invoice.add_argument("--type", default="")
    invoice.add_argument("--out", type=Path, required=True)
    invoice.set_defaults(handler=cmd_invoice)

    sign = commands.add_parser("sign", help="append a co-signed invoice to a chain file")
    sign.add_argument("--invoice", type=Path, required=True)
    sign.add_argument("--buyer", type=Path, required=True, help="buyer key file")
    sign.add_argument("--seller", type=Path, required=True, help="seller key file")
    sign.add_argument("--chain", type=Path, required=True)
    sign.add_argument("--channel", default="default")
    sign.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="reproducible invoice id")
    sign.set_defaults(handler=cmd_sign)

    verify = commands.add_parser("verify-chain", help="verify a .plog chain file")
    verify.add_argument("chain", type=Path)
    verify.set_defaults(handler=cmd_verify_chain)

    replay = commands.add_parser("replay", help="replay a chain file from deposits")
    replay.add_argument("chain", type=Path)
    replay.add_argument("--deposit-a", type=int, required=True, help="deposit of the first buyer")
    replay.add_argument("--deposit-b", type=int, required=True, help="deposit of the first seller")
    replay.set_defaults(handler=cmd_replay)

    for name, help_text in (("run", "run a scenario file"), ("sweep", "run generated scenarios for a seed range")):
        sub = commands.add_parser(name, help=help_text)
        if name == "run":
            sub.add_argument("scenario", type=Path)
            sub.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the scenario seed")
            sub.add_argument("--report", type=Path)
            sub.add_argument("--format", choices=("text", "kv"), default="text")
            sub.add_argument("--ledger", nargs="?", const=DATABASE_URL, help="store the report (default URL from PARSEC_DATABASE_URL)")
            sub.set_defaults(handler=cmd_run)
        else:
            sub.add_argument("--first", type=int, default=1)
            sub.add_argument("--last", type=int, default=200)
            sub.add_argument("--max-payments", type=int, default=1000)
            sub.add_argument("--out", type=Path)
            sub.set_defaults(handler=cmd_sweep)
        sub.add_argument("--parallel", action="store_true", help="run partitions on a thread pool")

    history = commands.add_parser("history", help="list runs stored in the ledger")
    history.add_argument("--ledger", help="ledger database URL")
    history.set_defaults(handler=cmd_history)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = CliConfig(
            command=args.command,
            seed=args.seed,
            report=getattr(args, "report", None),
            format=getattr(args, "format", "text"),
            verbose=args.verbose,
            parallel=getattr(args, "parallel", False),
            ledger=getattr(args, "ledger", None),
        )
    except ValidationError as e:
        print(f"parsec: invalid options: {e.errors()[0]['msg']}", file=sys.stderr)
        return EXIT_ERROR
    configure_logging(config.log_level)

    try:
        return args.handler(args, config)
    except (ParseError, ScenarioError, ProtocolError, LogError, ValidationError, ValueError, OSError) as e:
        print(f"parsec {config.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
