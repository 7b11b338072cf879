import random
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import pytest

from services.channel_node import ChannelConfig, ChannelNode
from services.escrow import ChallengeParams, EscrowContract
from services.protocol import Currency, Invoice, KeyPair, SignedInvoice, make_signed_invoice

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
TESTDATA = ROOT / "testdata"

Payment = Tuple[KeyPair, KeyPair, int]


@pytest.fixture
def alice() -> KeyPair:
    return KeyPair.from_label(7, "alice")


@pytest.fixture
def bob() -> KeyPair:
    return KeyPair.from_label(7, "bob")


@pytest.fixture
def mallory() -> KeyPair:
    return KeyPair.from_label(7, "mallory")


@pytest.fixture
def make_config(alice, bob) -> Callable[..., ChannelConfig]:
    def factory(**overrides) -> ChannelConfig:
        fields = dict(deposit_a=100, deposit_b=50, n=4, m=100, checkpoint_timeout=50)
        fields.update(overrides)
        return ChannelConfig.for_keys(alice, bob, **fields)
    return factory


@pytest.fixture
def config(make_config) -> ChannelConfig:
    return make_config()


@pytest.fixture
def make_node(alice, bob) -> Callable[[ChannelConfig], ChannelNode]:
    def factory(channel_config: ChannelConfig) -> ChannelNode:
        return ChannelNode(channel_config, {channel_config.party_a: alice, channel_config.party_b: bob})
    return factory


@pytest.fixture
def node(config, make_node) -> ChannelNode:
    return make_node(config)


@pytest.fixture
def contract(config) -> EscrowContract:
    return EscrowContract(config, ChallengeParams(challenge_period=10))


def extend_chain(
    chain: Sequence[SignedInvoice],
    payments: Sequence[Payment],
    channel: str = "default",
    seed: int = 0,
    currency: Currency = Currency.ETH,
) -> List[SignedInvoice]:
    """Continue `chain` with co-signed payments (payer, payee, amount)."""
    rng = random.Random(f"{seed}:{channel}:{len(chain)}")
    extended = list(chain)
    for payer, payee, amount in payments:
        predecessor: Optional[SignedInvoice] = extended[-1] if extended else None
        invoice = Invoice(payee.address(currency), amount, currency, "test")
        extended.append(make_signed_invoice(
            invoice, predecessor, channel, len(extended) + 1,
            buyer_keys=payer, seller_keys=payee, channel_currency=currency, rng=rng,
        ))
    return extended


@pytest.fixture
def make_chain() -> Callable[..., List[SignedInvoice]]:
    def factory(payments: Sequence[Payment], channel: str = "default", seed: int = 0, prefix=()) -> List[SignedInvoice]:
        return extend_chain(prefix, payments, channel=channel, seed=seed)
    return factory


@pytest.fixture
def alternating_chain(make_chain, alice, bob) -> Callable[[int], List[SignedInvoice]]:
    """k payments of 1, alternating alice -> bob and bob -> alice."""
    def factory(k: int, seed: int = 0) -> List[SignedInvoice]:
        payments = [(alice, bob, 1) if i % 2 == 0 else (bob, alice, 1) for i in range(k)]
        return make_chain(payments, seed=seed)
    return factory
