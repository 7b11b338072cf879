import random
from dataclasses import replace

import pytest

from conftest import TESTDATA, extend_chain
from services.protocol import (
    GENESIS,
    Address,
    ChainViolation,
    Checkpoint,
    ControlKind,
    ControlMessage,
    Currency,
    CurrencyMismatch,
    DecodeError,
    EncodingMode,
    Hash256,
    HashPointer,
    Invoice,
    KeyPair,
    MalformedKey,
    MalformedSignature,
    SequenceMismatch,
    SignedInvoice,
    UnsupportedCurrency,
    Violation,
    canonical_encode,
    chain_violations,
    derive_address,
    digest,
    make_signed_invoice,
    new_invoice_id,
    pack_message,
    produce_invoice_hash,
    read_frames,
    sign,
    sign_checkpoint,
    unpack_message,
    verify,
    verify_chain,
    verify_checkpoint_signatures,
    verify_signed_invoice,
    write_frames,
)

PK = bytes(range(1, 33))
SUPPLIER_PK = bytes(range(33, 65))


def golden(name: str) -> str:
    return (TESTDATA / name).read_text().strip()


@pytest.fixture
def fixed_signed_invoice() -> SignedInvoice:
    return SignedInvoice(
        invoice_id="11111111-1111-4111-8111-111111111111+default",
        seller_signature=b"\x11" * 64,
        buyer_signature=b"\x22" * 64,
        supplier_address=Address(b"\xbb" * 20, Currency.ETH),
        buyer_public_key=PK,
        buyer_address=Address(b"\xaa" * 20, Currency.ETH),
        currency=Currency.ETH,
        price=30,
        channel="default",
        sequence=2,
        hash_pointer_to_previous=HashPointer(
            "00000000-0000-4000-8000-000000000000+default", Hash256(b"\xcc" * 32)
        ),
        invoice_type="coffee",
        supplier_public_key=SUPPLIER_PK,
    )


class TestGoldenVectors:
    def test_empty_digest(self):
        assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

    def test_signed_invoice_storage_bytes(self, fixed_signed_invoice):
        assert canonical_encode(fixed_signed_invoice).hex() == golden("signed_invoice_storage.hex")
        assert fixed_signed_invoice.storage_digest.hex() == golden("signed_invoice_storage.sha256")

    def test_signed_invoice_signing_bytes_exclude_signatures(self, fixed_signed_invoice):
        signing = canonical_encode(fixed_signed_invoice, EncodingMode.SIGNING)
        assert signing.hex() == golden("signed_invoice_signing.hex")
        assert b"\x11" * 64 not in signing

    def test_invoice_hash(self):
        invoice = Invoice(Address(b"\xbb" * 20, Currency.ETH), 30, Currency.ETH, "coffee")
        assert canonical_encode(invoice).hex() == golden("invoice_signing.hex")
        assert produce_invoice_hash(invoice).hex() == golden("invoice_hash.sha256")

    @pytest.mark.parametrize("currency, name", [
        (Currency.ETH, "eth_address_pk_1_to_32.hex"),
        (Currency.BTC, "btc_address_pk_1_to_32.hex"),
    ])
    def test_derive_address(self, currency, name):
        assert derive_address(PK, currency).value.hex() == golden(name)

    def test_decode_storage_bytes(self, fixed_signed_invoice):
        assert unpack_message(pack_message(fixed_signed_invoice)) == fixed_signed_invoice


class TestCurrencyAndAddresses:
    def test_unsupported_currency_message(self):
        with pytest.raises(UnsupportedCurrency, match="Currency XRP is not an allowed currency. Use: ETH or BTC"):
            Currency.parse("XRP")

    def test_eth_and_btc_addresses_differ(self, alice):
        assert alice.address(Currency.ETH).value != alice.address(Currency.BTC).value

    def test_address_text_form(self, alice):
        address = alice.address(Currency.BTC)
        assert Address.parse(str(address)) == address
        assert str(address).startswith("BTC:0x")

    def test_derive_rejects_short_key(self):
        with pytest.raises(MalformedKey):
            derive_address(b"\x01" * 31, Currency.ETH)


class TestSignatures:
    def test_sign_and_verify(self, alice):
        signature = sign(alice.private_key, b"message")
        assert len(signature) == 64
        assert verify(alice.public_key, b"message", signature)
        assert not verify(alice.public_key, b"other", signature)

    def test_wrong_signature_length(self, alice):
        with pytest.raises(MalformedSignature):
            verify(alice.public_key, b"message", b"\x00" * 63)

    def test_wrong_key_length(self, alice):
        with pytest.raises(MalformedKey):
            verify(b"\x00" * 31, b"message", b"\x00" * 64)

    def test_seeded_keys_are_reproducible(self):
        assert KeyPair.generate(42) == KeyPair.generate(42)
        assert KeyPair.generate(42) != KeyPair.generate(43)
        assert KeyPair.generate().public_key != KeyPair.generate().public_key


class TestInvoices:
    def test_negative_price_rejected(self, bob):
        with pytest.raises(ValueError):
            Invoice(bob.address(Currency.ETH), -1, Currency.ETH)

    def test_address_currency_must_match(self, bob):
        with pytest.raises(CurrencyMismatch):
            Invoice(bob.address(Currency.BTC), 5, Currency.ETH)

    def test_invoice_id_format(self):
        rng = random.Random(1)
        invoice_id = new_invoice_id("default", rng)
        token, _, channel = invoice_id.partition("+")
        assert channel == "default"
        assert len(token) == 36 and token[14] == "4"
        assert invoice_id == new_invoice_id("default", random.Random(1))

    def test_genesis_transaction(self, alice, bob):
        invoice = Invoice(bob.address(Currency.ETH), 30, Currency.ETH)
        si = make_signed_invoice(invoice, None, "default", 1, buyer_keys=alice, seller_keys=bob)
        assert si.hash_pointer_to_previous == GENESIS
        assert si.buyer_address == alice.address(Currency.ETH)
        assert verify_signed_invoice(si, Currency.ETH) == []

    def test_successor_points_at_predecessor_storage(self, make_chain, alice, bob):
        first, second = make_chain([(alice, bob, 30), (bob, alice, 5)])
        assert second.hash_pointer_to_previous == HashPointer(first.invoice_id, digest(first.storage_bytes))

    def test_sequence_must_follow(self, make_chain, alice, bob):
        (first,) = make_chain([(alice, bob, 30)])
        invoice = Invoice(bob.address(Currency.ETH), 1, Currency.ETH)
        with pytest.raises(SequenceMismatch):
            make_signed_invoice(invoice, first, "default", 3, buyer_keys=alice, seller_keys=bob)

    def test_channel_currency_enforced(self, alice, bob):
        invoice = Invoice(bob.address(Currency.BTC), 1, Currency.BTC)
        with pytest.raises(CurrencyMismatch):
            make_signed_invoice(invoice, None, "default", 1, alice, bob, channel_currency=Currency.ETH)

    def test_hash_pointer_halves_must_agree(self):
        with pytest.raises(ValueError):
            HashPointer("", Hash256(b"\x01" * 32))
        with pytest.raises(ValueError):
            HashPointer("x+default", Hash256.ZERO)


class TestVerification:
    def test_price_zero_is_a_violation(self, alice, bob):
        invoice = Invoice(bob.address(Currency.ETH), 0, Currency.ETH)
        si = make_signed_invoice(invoice, None, "default", 1, alice, bob)
        assert Violation.NON_POSITIVE_PRICE in verify_signed_invoice(si, Currency.ETH)

    def test_currency_mismatch(self, make_chain, alice, bob):
        (si,) = make_chain([(alice, bob, 3)])
        assert verify_signed_invoice(si, Currency.BTC) == [Violation.CURRENCY_MISMATCH]

    def test_forged_buyer_address(self, make_chain, alice, bob, mallory):
        (si,) = make_chain([(alice, bob, 3)])
        forged = replace(si, buyer_address=mallory.address(Currency.ETH))
        violations = verify_signed_invoice(forged, Currency.ETH)
        assert Violation.INVALID_BUYER_ADDRESS in violations
        assert Violation.BAD_SELLER_SIGNATURE in violations

    def test_channel_suffix(self, make_chain, alice, bob):
        (si,) = make_chain([(alice, bob, 3)], channel="ab")
        assert Violation.CHANNEL_MISMATCH in verify_signed_invoice(replace(si, channel="cd"), Currency.ETH)

    def test_valid_chain(self, alternating_chain):
        assert verify_chain(alternating_chain(10)) is None

    def test_empty_chain_rejected(self):
        with pytest.raises(ValueError):
            verify_chain([])

    def test_reordered_chain(self, alternating_chain):
        chain = alternating_chain(4)
        chain[1], chain[2] = chain[2], chain[1]
        assert verify_chain(chain) == ChainViolation(2, Violation.SEQUENCE_MISMATCH)

    def test_all_violations_listed(self, alternating_chain):
        chain = alternating_chain(5)
        chain[2] = replace(chain[2], price=chain[2].price + 1)
        found = chain_violations(chain)
        assert ChainViolation(3, Violation.BAD_SELLER_SIGNATURE) in found
        assert ChainViolation(4, Violation.HASH_POINTER_MISMATCH) in found
        assert found[0].index == 3

    @pytest.mark.parametrize("field, value", [
        ("price", -1),
        ("price", 2**64),
        ("sequence", -1),
        ("sequence", 2**64),
    ])
    def test_out_of_range_integers_are_violations(self, make_chain, alice, bob, field, value):
        (si,) = make_chain([(alice, bob, 3)])
        violations = verify_signed_invoice(replace(si, **{field: value}), Currency.ETH)
        assert Violation.BAD_SELLER_SIGNATURE in violations
        assert Violation.BAD_BUYER_SIGNATURE in violations
        if field == "price" and value < 0:
            assert Violation.NON_POSITIVE_PRICE in violations

    def test_negative_price_inside_chain(self, alternating_chain):
        chain = alternating_chain(3)
        chain[1] = replace(chain[1], price=-5)
        found = chain_violations(chain)
        assert ChainViolation(2, Violation.NON_POSITIVE_PRICE) in found
        assert ChainViolation(3, Violation.HASH_POINTER_MISMATCH) in found
        assert verify_chain(chain).index == 2


def _mutations(si: SignedInvoice, other: KeyPair):
    flipped = bytes([si.seller_signature[0] ^ 1]) + si.seller_signature[1:]
    return [
        replace(si, price=si.price + 1),
        replace(si, invoice_id=new_invoice_id(si.channel, random.Random(999))),
        replace(si, seller_signature=flipped),
        replace(si, buyer_signature=si.seller_signature),
        replace(si, supplier_address=si.buyer_address),
        replace(si, buyer_address=si.supplier_address),
        replace(si, buyer_public_key=other.public_key),
        replace(si, supplier_public_key=other.public_key),
        replace(si, currency=Currency.BTC),
        replace(si, channel=si.channel + "x"),
        replace(si, sequence=si.sequence + 1),
        replace(si, hash_pointer_to_previous=HashPointer("f+default", Hash256(b"\xee" * 32))),
        replace(si, invoice_type="tampered"),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_single_field_tampering_is_caught(seed, alice, bob, mallory):
    rng = random.Random(seed)
    payments = [(alice, bob, 1) if rng.random() < 0.5 else (bob, alice, 1) for _ in range(12)]
    chain = extend_chain([], payments, seed=seed)
    target = rng.randrange(len(chain))
    for mutated in _mutations(chain[target], mallory):
        tampered = chain[:target] + [mutated] + chain[target + 1:]
        violation = verify_chain(tampered)
        assert violation is not None
        assert violation.index <= target + 2


@pytest.mark.slow
def test_tamper_detection_sweep(alice, bob, mallory):
    for seed in range(100):
        rng = random.Random(seed)
        payments = [(alice, bob, 1) if rng.random() < 0.5 else (bob, alice, 1) for _ in range(50)]
        chain = extend_chain([], payments, seed=seed)
        target = rng.randrange(len(chain))
        for mutated in _mutations(chain[target], mallory):
            violation = verify_chain(chain[:target] + [mutated] + chain[target + 1:])
            assert violation is not None and violation.index <= target + 2


class TestEncodingProperties:
    def test_single_bit_flips_change_the_digest(self, fixed_signed_invoice):
        data = fixed_signed_invoice.storage_bytes
        original = digest(data)
        rng = random.Random(17)
        for _ in range(100):
            position = rng.randrange(len(data) * 8)
            flipped = bytearray(data)
            flipped[position // 8] ^= 1 << (position % 8)
            assert digest(bytes(flipped)) != original

    def test_distinct_invoices_encode_differently(self, alice, bob):
        rng = random.Random(23)
        addresses = [party.address(currency) for party in (alice, bob) for currency in Currency]

        def random_invoice():
            address = rng.choice(addresses)
            return Invoice(address, rng.randint(0, 5), address.currency, rng.choice(["", "a", "b"]))

        for _ in range(500):
            one, two = random_invoice(), random_invoice()
            if one != two:
                assert canonical_encode(one) != canonical_encode(two)
                assert produce_invoice_hash(one) != produce_invoice_hash(two)

    def test_distinct_signed_invoices_encode_differently(self, alternating_chain, mallory):
        chain = alternating_chain(6)
        variants = chain + [m for si in chain for m in _mutations(si, mallory)]
        encodings = {canonical_encode(si, EncodingMode.STORAGE): si for si in variants}
        assert len(encodings) == len(set(variants))

    def test_eth_and_btc_addresses_never_collide(self):
        rng = random.Random(31)
        keys = {rng.randbytes(32) for _ in range(10_000)}
        eth = {derive_address(key, Currency.ETH).value for key in keys}
        btc = {derive_address(key, Currency.BTC).value for key in keys}
        assert len(eth) == len(btc) == len(keys)
        assert eth.isdisjoint(btc)


class TestMessages:
    def test_checkpoint_signatures(self, alice, bob):
        balances = {alice.address(Currency.ETH): 70, bob.address(Currency.ETH): 80}
        checkpoint = sign_checkpoint(Checkpoint("default", 3, balances, digest(b"head")), alice, bob)
        assert verify_checkpoint_signatures(checkpoint, alice.public_key, bob.public_key)
        assert not verify_checkpoint_signatures(checkpoint, bob.public_key, alice.public_key)
        assert unpack_message(pack_message(checkpoint)) == checkpoint

    def test_balance_map_encoding_is_order_independent(self, alice, bob):
        a, b = alice.address(Currency.ETH), bob.address(Currency.ETH)
        one = Checkpoint("default", 1, {a: 1, b: 2}, Hash256.ZERO)
        two = Checkpoint("default", 1, {b: 2, a: 1}, Hash256.ZERO)
        assert canonical_encode(one) == canonical_encode(two)

    def test_control_message(self, alice):
        message = ControlMessage("default", ControlKind.DISPUTED_SETTLEMENT, alice.address(Currency.ETH))
        assert unpack_message(pack_message(message)) == message

    def test_unknown_tag(self):
        with pytest.raises(DecodeError):
            unpack_message(b"\x09payload")

    def test_truncated_value(self, fixed_signed_invoice):
        with pytest.raises(DecodeError):
            unpack_message(pack_message(fixed_signed_invoice)[:-3])

    def test_frames_file(self, tmp_path, alternating_chain):
        chain = alternating_chain(3)
        path = tmp_path / "chain.plog"
        assert write_frames(path, [pack_message(si) for si in chain]) == 3
        assert [unpack_message(value) for value in read_frames(path)] == chain

    def test_truncated_frame(self, tmp_path):
        path = tmp_path / "broken.plog"
        path.write_bytes(b"\x00\x00\x00\x10abc")
        with pytest.raises(DecodeError):
            read_frames(path)
