"""
Parsec protocol core: wire types, canonical encoding, hashing, address derivation and signatures.
NOTE: Every function here is pure and every value is immutable once built, so they can be
shared between partition jobs without locking.
"""
from __future__ import annotations

import hashlib
import random
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import ClassVar, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Union

from nacl.exceptions import BadSignatureError
from nacl.signing import SigningKey, VerifyKey

DEFAULT_CHANNEL = "default"

PRIVATE_KEY_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
ADDRESS_SIZE = 20
DIGEST_SIZE = 32
U64_LIMIT = 2**64


class ProtocolError(Exception):
    """Base class for protocol-level failures."""


class UnsupportedCurrency(ProtocolError, ValueError):
    pass


class MalformedKey(ProtocolError, ValueError):
    pass


class MalformedSignature(ProtocolError, ValueError):
    pass


class SequenceMismatch(ProtocolError):
    pass


class CurrencyMismatch(ProtocolError):
    pass


class DecodeError(ProtocolError, ValueError):
    """Raised when bytes do not decode to exactly one protocol message."""


class Currency(str, Enum):
    ETH = "ETH"
    BTC = "BTC"

    @classmethod
    def parse(cls, symbol: Union[str, "Currency"]) -> "Currency":
        try:
            return cls(symbol)
        except ValueError:
            raise UnsupportedCurrency(
                f"Currency {symbol} is not an allowed currency. Use: " + " or ".join(ALLOWED_CURRENCIES)
            ) from None


ALLOWED_CURRENCIES = tuple(currency.value for currency in Currency)

# Single-byte domain tags for address derivation
_ADDRESS_TAGS = {Currency.ETH: b"\x01", Currency.BTC: b"\x02"}


@dataclass(frozen=True)
class Hash256:
    value: bytes

    ZERO: ClassVar["Hash256"]

    def __post_init__(self):
        if len(self.value) != DIGEST_SIZE:
            raise ValueError(f"Hash256 needs {DIGEST_SIZE} bytes, got {len(self.value)}")

    @classmethod
    def from_hex(cls, text: str) -> "Hash256":
        return cls(bytes.fromhex(text))

    def is_zero(self) -> bool:
        return self.value == bytes(DIGEST_SIZE)

    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.hex()


Hash256.ZERO = Hash256(bytes(DIGEST_SIZE))


def digest(data: bytes) -> Hash256:
    """SHA-256 of `data`."""
    return Hash256(hashlib.sha256(data).digest())


@dataclass(frozen=True)
class Address:
    value: bytes
    currency: Currency

    def __post_init__(self):
        if len(self.value) != ADDRESS_SIZE:
            raise ValueError(f"Address needs {ADDRESS_SIZE} bytes, got {len(self.value)}")
        object.__setattr__(self, "currency", Currency.parse(self.currency))

    @classmethod
    def parse(cls, text: str) -> "Address":
        """Parse the `ETH:0x...` form produced by `str(address)`."""
        symbol, _, body = text.partition(":")
        if not body:
            raise ValueError(f"Address must look like ETH:0x<40 hex>, got {text!r}")
        return cls(bytes.fromhex(body.removeprefix("0x")), Currency.parse(symbol))

    def hex(self) -> str:
        return "0x" + self.value.hex()

    def __str__(self) -> str:
        return f"{self.currency.value}:{self.hex()}"


def derive_address(public_key: bytes, currency: Currency) -> Address:
    """Last 20 bytes of digest(tag || public_key); the tag separates ETH from BTC."""
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"public key must be {PUBLIC_KEY_SIZE} bytes, got {len(public_key)}")
    currency = Currency.parse(currency)
    return Address(digest(_ADDRESS_TAGS[currency] + public_key).value[-ADDRESS_SIZE:], currency)


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: bytes

    @classmethod
    def from_private(cls, private_key: bytes) -> "KeyPair":
        if len(private_key) != PRIVATE_KEY_SIZE:
            raise MalformedKey(f"private key must be {PRIVATE_KEY_SIZE} bytes, got {len(private_key)}")
        return cls(private_key, SigningKey(private_key).verify_key.encode())

    @classmethod
    def generate(cls, seed: Optional[int] = None) -> "KeyPair":
        """Fresh random key pair, or a reproducible one when `seed` is given."""
        if seed is None:
            return cls.from_private(SigningKey.generate().encode())
        material = b"parsec-keygen" + (seed % 2**64).to_bytes(8, "big")
        return cls.from_private(hashlib.sha256(material).digest())

    @classmethod
    def from_label(cls, seed: int, label: str) -> "KeyPair":
        """Reproducible key pair for a named scenario party."""
        material = b"parsec-party" + (seed % 2**64).to_bytes(8, "big") + label.encode("utf-8")
        return cls.from_private(hashlib.sha256(material).digest())

    def address(self, currency: Currency) -> Address:
        return derive_address(self.public_key, currency)


def sign(private_key: bytes, message: bytes) -> bytes:
    if len(private_key) != PRIVATE_KEY_SIZE:
        raise MalformedKey(f"private key must be {PRIVATE_KEY_SIZE} bytes, got {len(private_key)}")
    return SigningKey(private_key).sign(message).signature


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"public key must be {PUBLIC_KEY_SIZE} bytes, got {len(public_key)}")
    if len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature(f"signature must be {SIGNATURE_SIZE} bytes, got {len(signature)}")
    try:
        VerifyKey(public_key).verify(message, signature)
        return True
    except (BadSignatureError, ValueError):
        return False


def _verifies(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        return verify(public_key, message, signature)
    except (MalformedKey, MalformedSignature):
        return False


@dataclass(frozen=True)
class Invoice:
    """
    Produced by the seller: where to pay, how much, in which currency.
    `invoice_type` is opaque metadata, but it is hashed and signed.
    """
    invoice_address: Address
    price: int
    currency: Currency
    invoice_type: str = ""

    def __post_init__(self):
        object.__setattr__(self, "currency", Currency.parse(self.currency))
        if isinstance(self.price, bool) or not isinstance(self.price, int) or not 0 <= self.price < U64_LIMIT:
            raise ValueError(f"price must be an unsigned 64-bit integer amount, got {self.price!r}")
        if self.invoice_address.currency != self.currency:
            raise CurrencyMismatch(
                f"invoice address is {self.invoice_address.currency.value}, invoice is {self.currency.value}"
            )


@dataclass(frozen=True)
class HashPointer:
    transaction_id: str
    transaction_hash: Hash256

    def __post_init__(self):
        if (self.transaction_id == "") != self.transaction_hash.is_zero():
            raise ValueError("hash pointer must be genesis (empty id, zero hash) or fully populated")

    @property
    def is_genesis(self) -> bool:
        return self.transaction_id == "" and self.transaction_hash.is_zero()


GENESIS = HashPointer("", Hash256.ZERO)


@dataclass(frozen=True)
class SignedInvoice:
    """One channel transaction, linked to its predecessor and signed by both sides."""
    invoice_id: str
    seller_signature: bytes
    buyer_signature: bytes
    supplier_address: Address
    buyer_public_key: bytes
    buyer_address: Address
    currency: Currency
    price: int
    channel: str
    sequence: int
    hash_pointer_to_previous: HashPointer
    invoice_type: str = ""
    supplier_public_key: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "currency", Currency.parse(self.currency))

    @cached_property
    def signing_bytes(self) -> bytes:
        return canonical_encode(self, EncodingMode.SIGNING)

    @cached_property
    def storage_bytes(self) -> bytes:
        return canonical_encode(self, EncodingMode.STORAGE)

    @cached_property
    def storage_digest(self) -> Hash256:
        return digest(self.storage_bytes)

    @property
    def pointer(self) -> HashPointer:
        """The hash pointer a successor must carry."""
        return HashPointer(self.invoice_id, self.storage_digest)


class CheckpointReason(str, Enum):
    MODULO = "MODULO"
    TIMEOUT = "TIMEOUT"
    UNSCHEDULED = "UNSCHEDULED"


@dataclass(frozen=True)
class Checkpoint:
    """
    Dual-signed balance statement at `sequence`.
    NOTE: `seller_signature` is party A's signature and `buyer_signature` is party B's.
    """
    channel: str
    sequence: int
    balances: Mapping[Address, int] = field(hash=False)
    chain_head: Hash256
    seller_signature: bytes = b""
    buyer_signature: bytes = b""
    reason: CheckpointReason = CheckpointReason.MODULO

    @property
    def total(self) -> int:
        return sum(self.balances.values())


class ControlKind(str, Enum):
    UNSCHEDULED_SETTLEMENT = "UNSCHEDULED_SETTLEMENT"
    DISPUTED_SETTLEMENT = "DISPUTED_SETTLEMENT"


@dataclass(frozen=True)
class ControlMessage:
    channel: str
    kind: ControlKind
    requester: Address


Message = Union[Invoice, SignedInvoice, Checkpoint, ControlMessage]


class EncodingMode(str, Enum):
    SIGNING = "signing"
    STORAGE = "storage"


def _field(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def _int_field(value: int) -> bytes:
    return _field(value.to_bytes(8, "big"))


def _text_field(text: str) -> bytes:
    return _field(text.encode("utf-8"))


def _address_field(address: Address) -> bytes:
    return _field(_field(address.value) + _text_field(address.currency.value))


def _pointer_field(pointer: HashPointer) -> bytes:
    return _field(_text_field(pointer.transaction_id) + _field(pointer.transaction_hash.value))


def _balances_field(balances: Mapping[Address, int]) -> bytes:
    entries = sorted(balances.items(), key=lambda item: (item[0].value, item[0].currency.value))
    body = _int_field(len(entries)) + b"".join(_address_field(a) + _int_field(v) for a, v in entries)
    return _field(body)


def canonical_encode(message: Message, mode: EncodingMode = EncodingMode.STORAGE) -> bytes:
    """
    Deterministic length-prefixed encoding in field declaration order.
    Signatures are left out in SIGNING mode and kept in STORAGE mode.
    """
    with_signatures = EncodingMode(mode) is EncodingMode.STORAGE
    if isinstance(message, Invoice):
        return (
            _address_field(message.invoice_address)
            + _int_field(message.price)
            + _text_field(message.currency.value)
            + _text_field(message.invoice_type)
        )
    if isinstance(message, SignedInvoice):
        parts = [_text_field(message.invoice_id)]
        if with_signatures:
            parts += [_field(message.seller_signature), _field(message.buyer_signature)]
        parts += [
            _address_field(message.supplier_address),
            _field(message.buyer_public_key),
            _address_field(message.buyer_address),
            _text_field(message.currency.value),
            _int_field(message.price),
            _text_field(message.channel),
            _int_field(message.sequence),
            _pointer_field(message.hash_pointer_to_previous),
            _text_field(message.invoice_type),
            _field(message.supplier_public_key),
        ]
        return b"".join(parts)
    if isinstance(message, Checkpoint):
        parts = [
            _text_field(message.channel),
            _int_field(message.sequence),
            _balances_field(message.balances),
            _field(message.chain_head.value),
        ]
        if with_signatures:
            parts += [_field(message.seller_signature), _field(message.buyer_signature)]
        parts.append(_text_field(message.reason.value))
        return b"".join(parts)
    if isinstance(message, ControlMessage):
        return _text_field(message.channel) + _text_field(message.kind.value) + _address_field(message.requester)
    raise TypeError(f"cannot encode {type(message).__name__}")


class _Reader:
    """Cursor over one length-prefixed field sequence."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def field(self) -> bytes:
        if self._pos + 4 > len(self._data):
            raise DecodeError("truncated length prefix")
        size = int.from_bytes(self._data[self._pos:self._pos + 4], "big")
        start = self._pos + 4
        end = start + size
        if end > len(self._data):
            raise DecodeError("field runs past end of input")
        self._pos = end
        return self._data[start:end]

    def integer(self) -> int:
        raw = self.field()
        if len(raw) != 8:
            raise DecodeError(f"integer field must be 8 bytes, got {len(raw)}")
        return int.from_bytes(raw, "big")

    def text(self) -> str:
        try:
            return self.field().decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"invalid utf-8 text: {e}") from e

    def address(self) -> Address:
        inner = _Reader(self.field())
        value = inner.field()
        currency = Currency.parse(inner.text())
        inner.done()
        try:
            return Address(value, currency)
        except ValueError as e:
            raise DecodeError(str(e)) from e

    def pointer(self) -> HashPointer:
        inner = _Reader(self.field())
        transaction_id = inner.text()
        raw_hash = inner.field()
        inner.done()
        try:
            return HashPointer(transaction_id, Hash256(raw_hash))
        except ValueError as e:
            raise DecodeError(str(e)) from e

    def hash256(self) -> Hash256:
        try:
            return Hash256(self.field())
        except ValueError as e:
            raise DecodeError(str(e)) from e

    def balances(self) -> Dict[Address, int]:
        inner = _Reader(self.field())
        count = inner.integer()
        balances = {}
        for _ in range(count):
            address = inner.address()
            balances[address] = inner.integer()
        inner.done()
        return balances

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")


def decode_invoice(data: bytes) -> Invoice:
    reader = _Reader(data)
    address = reader.address()
    price = reader.integer()
    currency = Currency.parse(reader.text())
    invoice_type = reader.text()
    reader.done()
    return Invoice(address, price, currency, invoice_type)


def decode_signed_invoice(data: bytes) -> SignedInvoice:
    """Decode the STORAGE form of a SignedInvoice."""
    reader = _Reader(data)
    invoice_id = reader.text()
    seller_signature = reader.field()
    buyer_signature = reader.field()
    supplier_address = reader.address()
    buyer_public_key = reader.field()
    buyer_address = reader.address()
    currency = Currency.parse(reader.text())
    price = reader.integer()
    channel = reader.text()
    sequence = reader.integer()
    pointer = reader.pointer()
    invoice_type = reader.text()
    supplier_public_key = reader.field()
    reader.done()
    return SignedInvoice(
        invoice_id=invoice_id,
        seller_signature=seller_signature,
        buyer_signature=buyer_signature,
        supplier_address=supplier_address,
        buyer_public_key=buyer_public_key,
        buyer_address=buyer_address,
        currency=currency,
        price=price,
        channel=channel,
        sequence=sequence,
        hash_pointer_to_previous=pointer,
        invoice_type=invoice_type,
        supplier_public_key=supplier_public_key,
    )


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    channel = reader.text()
    sequence = reader.integer()
    balances = reader.balances()
    chain_head = reader.hash256()
    seller_signature = reader.field()
    buyer_signature = reader.field()
    try:
        reason = CheckpointReason(reader.text())
    except ValueError as e:
        raise DecodeError(str(e)) from e
    reader.done()
    return Checkpoint(channel, sequence, balances, chain_head, seller_signature, buyer_signature, reason)


def decode_control(data: bytes) -> ControlMessage:
    reader = _Reader(data)
    channel = reader.text()
    try:
        kind = ControlKind(reader.text())
    except ValueError as e:
        raise DecodeError(str(e)) from e
    requester = reader.address()
    reader.done()
    return ControlMessage(channel, kind, requester)


# Record value = one tag byte + STORAGE encoding
_TAGS = {SignedInvoice: 0x01, Checkpoint: 0x02, ControlMessage: 0x03, Invoice: 0x04}
_DECODERS = {0x01: decode_signed_invoice, 0x02: decode_checkpoint, 0x03: decode_control, 0x04: decode_invoice}


def pack_message(message: Message) -> bytes:
    return bytes([_TAGS[type(message)]]) + canonical_encode(message, EncodingMode.STORAGE)


def unpack_message(value: bytes) -> Message:
    if not value:
        raise DecodeError("empty record value")
    decoder = _DECODERS.get(value[0])
    if decoder is None:
        raise DecodeError(f"unknown message tag 0x{value[0]:02x}")
    return decoder(value[1:])


def frame(value: bytes) -> bytes:
    return len(value).to_bytes(4, "big") + value


def iter_frames(data: bytes) -> Iterator[bytes]:
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("truncated frame header")
        size = int.from_bytes(data[pos:pos + 4], "big")
        end = pos + 4 + size
        if end > len(data):
            raise DecodeError("truncated frame body")
        yield data[pos + 4:end]
        pos = end


def write_frames(path: Union[str, Path], values: Iterable[bytes]) -> int:
    count = 0
    with open(path, "wb") as handle:
        for value in values:
            handle.write(frame(value))
            count += 1
    return count


def read_frames(path: Union[str, Path]) -> List[bytes]:
    return list(iter_frames(Path(path).read_bytes()))


def produce_invoice_hash(invoice: Invoice) -> Hash256:
    return digest(canonical_encode(invoice, EncodingMode.SIGNING))


def new_invoice_id(channel: str, rng: Optional[random.Random] = None) -> str:
    """Lowercase UUID4 + "+" + channel; seeded when `rng` is given."""
    token = uuid.uuid4() if rng is None else uuid.UUID(int=rng.getrandbits(128), version=4)
    return f"{token}+{channel}"


def make_signed_invoice(
    invoice: Invoice,
    predecessor: Optional[SignedInvoice],
    channel: str,
    sequence: int,
    buyer_keys: KeyPair,
    seller_keys: KeyPair,
    channel_currency: Optional[Currency] = None,
    rng: Optional[random.Random] = None,
) -> SignedInvoice:
    """
    Link `invoice` after `predecessor` (None for genesis) and collect both signatures.
    NOTE: Both parties sign the SIGNING-mode bytes; the pointer hashes the predecessor's STORAGE bytes.
    """
    expected = 1 if predecessor is None else predecessor.sequence + 1
    if sequence != expected:
        raise SequenceMismatch(f"sequence {sequence} does not follow predecessor (expected {expected})")
    if predecessor is not None and predecessor.channel != channel:
        raise ProtocolError(f"predecessor belongs to channel {predecessor.channel!r}, not {channel!r}")
    reference = channel_currency if channel_currency is not None else (predecessor.currency if predecessor else None)
    if reference is not None and Currency.parse(reference) != invoice.currency:
        raise CurrencyMismatch(f"invoice is {invoice.currency.value}, channel is {Currency.parse(reference).value}")

    draft = SignedInvoice(
        invoice_id=new_invoice_id(channel, rng),
        seller_signature=b"",
        buyer_signature=b"",
        supplier_address=invoice.invoice_address,
        buyer_public_key=buyer_keys.public_key,
        buyer_address=derive_address(buyer_keys.public_key, invoice.currency),
        currency=invoice.currency,
        price=invoice.price,
        channel=channel,
        sequence=sequence,
        hash_pointer_to_previous=GENESIS if predecessor is None else predecessor.pointer,
        invoice_type=invoice.invoice_type,
        supplier_public_key=seller_keys.public_key,
    )
    message = draft.signing_bytes
    return replace(
        draft,
        seller_signature=sign(seller_keys.private_key, message),
        buyer_signature=sign(buyer_keys.private_key, message),
    )


class Violation(str, Enum):
    CURRENCY_MISMATCH = "CURRENCY_MISMATCH"
    INVALID_BUYER_ADDRESS = "INVALID_BUYER_ADDRESS"
    INVALID_SUPPLIER_ADDRESS = "INVALID_SUPPLIER_ADDRESS"
    BAD_SELLER_SIGNATURE = "BAD_SELLER_SIGNATURE"
    BAD_BUYER_SIGNATURE = "BAD_BUYER_SIGNATURE"
    NON_POSITIVE_PRICE = "NON_POSITIVE_PRICE"
    CHANNEL_MISMATCH = "CHANNEL_MISMATCH"
    BAD_GENESIS_LINK = "BAD_GENESIS_LINK"
    SEQUENCE_MISMATCH = "SEQUENCE_MISMATCH"
    HASH_POINTER_MISMATCH = "HASH_POINTER_MISMATCH"
    UNKNOWN_PARTY = "UNKNOWN_PARTY"
    INSUFFICIENT_FUNDS = "INSUFFICIENT_FUNDS"
    UNKNOWN_BASE = "UNKNOWN_BASE"


def _encodable(si: SignedInvoice) -> bool:
    return 0 <= si.price < U64_LIMIT and 0 <= si.sequence < U64_LIMIT


class ChainViolation(NamedTuple):
    index: int  # 1-based
    violation: Violation


def verify_signed_invoice(si: SignedInvoice, expected_currency: Currency) -> List[Violation]:
    """All stateless violations of `si`; an empty list means the transaction is well formed."""
    violations = []
    if si.currency.value not in ALLOWED_CURRENCIES or si.currency != Currency.parse(expected_currency):
        violations.append(Violation.CURRENCY_MISMATCH)
    try:
        if si.buyer_address != derive_address(si.buyer_public_key, si.currency):
            violations.append(Violation.INVALID_BUYER_ADDRESS)
    except MalformedKey:
        violations.append(Violation.INVALID_BUYER_ADDRESS)
    try:
        if si.supplier_address != derive_address(si.supplier_public_key, si.currency):
            violations.append(Violation.INVALID_SUPPLIER_ADDRESS)
    except MalformedKey:
        violations.append(Violation.INVALID_SUPPLIER_ADDRESS)

    # no signature can cover integers the wire format cannot carry
    message = si.signing_bytes if _encodable(si) else None
    if message is None or not _verifies(si.supplier_public_key, message, si.seller_signature):
        violations.append(Violation.BAD_SELLER_SIGNATURE)
    if message is None or not _verifies(si.buyer_public_key, message, si.buyer_signature):
        violations.append(Violation.BAD_BUYER_SIGNATURE)

    if si.price <= 0:
        violations.append(Violation.NON_POSITIVE_PRICE)
    _, separator, suffix = si.invoice_id.partition("+")
    if not separator or suffix != si.channel:
        violations.append(Violation.CHANNEL_MISMATCH)
    if si.sequence < 1 or (si.sequence == 1) != si.hash_pointer_to_previous.is_genesis:
        violations.append(Violation.BAD_GENESIS_LINK)
    return violations


def chain_violations(transactions: List[SignedInvoice]) -> List[ChainViolation]:
    """Every violation in the chain, in index order."""
    if not transactions:
        raise ValueError("a chain needs at least one transaction")
    expected_currency = transactions[0].currency
    found = []
    previous: Optional[SignedInvoice] = None
    for index, si in enumerate(transactions, start=1):
        found.extend(ChainViolation(index, v) for v in verify_signed_invoice(si, expected_currency))
        if si.sequence != index:
            found.append(ChainViolation(index, Violation.SEQUENCE_MISMATCH))
        if previous is None:
            expected_pointer = GENESIS
        else:
            expected_pointer = previous.pointer if _encodable(previous) else None
        if expected_pointer is None or si.hash_pointer_to_previous != expected_pointer:
            found.append(ChainViolation(index, Violation.HASH_POINTER_MISMATCH))
        previous = si
    return found


def verify_chain(transactions: List[SignedInvoice]) -> Optional[ChainViolation]:
    """None when the chain is valid, otherwise its first violation."""
    violations = chain_violations(transactions)
    return violations[0] if violations else None


def checkpoint_signing_bytes(checkpoint: Checkpoint) -> bytes:
    return canonical_encode(checkpoint, EncodingMode.SIGNING)


def sign_checkpoint(checkpoint: Checkpoint, keys_a: KeyPair, keys_b: KeyPair) -> Checkpoint:
    message = checkpoint_signing_bytes(checkpoint)
    return replace(
        checkpoint,
        seller_signature=sign(keys_a.private_key, message),
        buyer_signature=sign(keys_b.private_key, message),
    )


def verify_checkpoint_signatures(checkpoint: Checkpoint, key_a: bytes, key_b: bytes) -> bool:
    message = checkpoint_signing_bytes(checkpoint)
    return _verifies(key_a, message, checkpoint.seller_signature) and _verifies(key_b, message, checkpoint.buyer_signature)
