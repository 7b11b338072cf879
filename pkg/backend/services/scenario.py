"""
Line-oriented scenario files: channel declarations, fault settings and a timed workload.

    parsec-scenario v1
    name happy
    seed 7
    faults dup=0.2 reorder=3
    channel ab currency=ETH a=alice b=bob deposit_a=100 deposit_b=50 n=8 m=5 timeout=50
    1 pay ab alice 30 coffee
    4 control ab unscheduled bob

NOTE: Parties are labels; their keys are derived from the scenario seed.
"""
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import DEFAULT_CHALLENGE_PERIOD, DEFAULT_PARTITIONS
from services.channel_node import ChannelConfig
from services.escrow import ChallengeParams
from services.event_log import FaultProfile
from services.protocol import Currency, KeyPair

logger = logging.getLogger(__name__)

HEADER = "parsec-scenario v1"

_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")

PRODUCER_VERBS = ("pay", "control")
CONTRACT_VERBS = ("settle-stale", "settle", "htlc-lock", "htlc-claim", "htlc-refund")
VERBS = PRODUCER_VERBS + CONTRACT_VERBS + ("relay", "advance")


class ScenarioError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<scenario>"):
        self.message = message
        self.line = line
        self.source = source
        location = source if line is None else f"{source}:{line}"
        super().__init__(f"{location}: {message}")


class InsufficientCapacity(ScenarioError):
    pass


class ChannelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(pattern=_NAME.pattern)
    currency: Currency = Currency.ETH
    a: str = Field(pattern=_NAME.pattern)
    b: str = Field(pattern=_NAME.pattern)
    deposit_a: int = Field(ge=0)
    deposit_b: int = Field(ge=0)
    n: int = Field(8, ge=1)
    m: int = Field(100, ge=1)
    timeout: int = Field(50, ge=1)

    @property
    def parties(self) -> Tuple[str, str]:
        return self.a, self.b

    def deposit_of(self, party: str) -> int:
        return self.deposit_a if party == self.a else self.deposit_b

    def counterparty(self, party: str) -> str:
        return self.b if party == self.a else self.a

    def to_config(self, seed: int) -> ChannelConfig:
        return ChannelConfig.for_keys(
            KeyPair.from_label(seed, self.a),
            KeyPair.from_label(seed, self.b),
            currency=self.currency,
            channel=self.name,
            deposit_a=self.deposit_a,
            deposit_b=self.deposit_b,
            n=self.n,
            m=self.m,
            checkpoint_timeout=self.timeout,
        )


@dataclass(frozen=True)
class Action:
    tick: int
    verb: str
    channel: Optional[str]
    args: Tuple = ()
    line: int = 0
    order: int = 0

    @property
    def sort_key(self) -> Tuple[int, int, int]:
        return self.tick, self.line, self.order


@dataclass
class Scenario:
    name: str
    seed: int = 0
    partitions: int = DEFAULT_PARTITIONS
    duplicate_probability: float = 0.0
    max_reorder_distance: int = 0
    challenge: ChallengeParams = field(default_factory=lambda: ChallengeParams(challenge_period=DEFAULT_CHALLENGE_PERIOD))
    channel_specs: List[ChannelSpec] = field(default_factory=list)
    workload: List[Action] = field(default_factory=list)
    source: str = "<scenario>"

    @property
    def fault_profile(self) -> FaultProfile:
        return FaultProfile(
            seed=self.seed % 2**64,
            duplicate_probability=self.duplicate_probability,
            max_reorder_distance=self.max_reorder_distance,
        )

    @property
    def channels(self) -> List[ChannelConfig]:
        return [spec.to_config(self.seed) for spec in self.channel_specs]

    def spec(self, channel: str) -> ChannelSpec:
        for spec in self.channel_specs:
            if spec.name == channel:
                return spec
        raise ScenarioError(f"unknown channel {channel!r}", source=self.source)

    def parties(self) -> Dict[str, KeyPair]:
        labels = sorted({label for spec in self.channel_specs for label in spec.parties})
        return {label: KeyPair.from_label(self.seed, label) for label in labels}

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    @property
    def last_tick(self) -> int:
        return max((action.tick for action in self.schedule()), default=0)

    def schedule(self) -> List[Action]:
        """Workload with relays expanded, ordered by tick then declaration."""
        expanded = []
        for action in self.workload:
            if action.verb == "relay":
                expanded.extend(relay_payment(self, action))
            else:
                expanded.append(action)
        return sorted(expanded, key=lambda a: a.sort_key)

    def validate(self) -> "Scenario":
        if not self.channel_specs:
            raise ScenarioError("scenario declares no channels", source=self.source)
        names = [spec.name for spec in self.channel_specs]
        if len(names) != len(set(names)):
            raise ScenarioError("channel declared twice", source=self.source)
        for spec in self.channel_specs:
            if spec.a == spec.b:
                raise ScenarioError(f"channel {spec.name} needs two distinct parties", source=self.source)
            if self.max_reorder_distance > spec.n:
                raise ScenarioError(
                    f"reorder distance {self.max_reorder_distance} exceeds buffer n={spec.n} of {spec.name}",
                    source=self.source,
                )
        for action in self.workload:
            self._validate_action(action)
        self.schedule()
        return self

    def _validate_action(self, action: Action) -> None:
        if action.verb == "advance":
            return
        if action.channel not in {spec.name for spec in self.channel_specs}:
            raise ScenarioError(f"unknown channel {action.channel!r}", action.line, self.source)
        spec = self.spec(action.channel)
        if action.verb == "relay" and action.args[0] not in {s.name for s in self.channel_specs}:
            raise ScenarioError(f"unknown channel {action.args[0]!r}", action.line, self.source)
        party = None
        if action.verb in ("pay", "htlc-lock"):
            party = action.args[0]
        elif action.verb == "control" and len(action.args) > 1:
            party = action.args[1]
        if party is not None and party not in spec.parties:
            raise ScenarioError(f"{party!r} is not a party of channel {spec.name}", action.line, self.source)


def relay_payment(scenario: Scenario, action: Action) -> List[Action]:
    """
    Expand `relay up down amount secret timeout delta mode` over the fixed route A -> R -> B.
    The downstream lock (R -> B) expires after `timeout` ticks, the upstream one (A -> R) `delta` later.
    """
    down, amount, secret, timeout, delta, mode = action.args
    up_spec, down_spec = scenario.spec(action.channel), scenario.spec(down)
    if delta < 1:
        raise ScenarioError("relay timeouts must be staggered by at least one tick", action.line, scenario.source)

    route = nx.MultiGraph()
    route.add_edge(up_spec.a, up_spec.b, key=up_spec.name)
    route.add_edge(down_spec.a, down_spec.b, key=down_spec.name)
    shared = set(up_spec.parties) & set(down_spec.parties)
    if up_spec.name == down_spec.name or len(shared) != 1:
        raise ScenarioError(
            f"channels {up_spec.name} and {down_spec.name} must share exactly one relay party",
            action.line,
            scenario.source,
        )
    relay = shared.pop()
    payer, payee = up_spec.counterparty(relay), down_spec.counterparty(relay)
    if not nx.is_path(route, [payer, relay, payee]) or payer == payee:
        raise ScenarioError(f"no two-hop route {payer} -> {relay} -> {payee}", action.line, scenario.source)
    for spec, sender in ((up_spec, payer), (down_spec, relay)):
        if spec.deposit_of(sender) < amount:
            raise InsufficientCapacity(
                f"{sender} holds {spec.deposit_of(sender)} in {spec.name}, relay needs {amount}",
                action.line,
                scenario.source,
            )

    label = f"relay{action.line}"
    t = action.tick
    expanded = [
        Action(t, "htlc-lock", down, (relay, amount, secret, timeout, f"{label}.down"), action.line, 0),
        Action(t, "htlc-lock", action.channel, (payer, amount, secret, timeout + delta, f"{label}.up"), action.line, 1),
    ]
    if mode == "reveal":
        expanded += [
            Action(t + 1, "htlc-claim", down, (f"{label}.down", secret), action.line, 2),
            Action(t + 2, "htlc-claim", action.channel, (f"{label}.up", f"@{label}.down"), action.line, 3),
        ]
    else:
        expanded += [
            Action(t + timeout + 1, "htlc-refund", down, (f"{label}.down",), action.line, 2),
            Action(t + timeout + delta + 1, "htlc-refund", action.channel, (f"{label}.up",), action.line, 3),
        ]
    return expanded


def _int(text: str, what: str, line: int, source: str, minimum: int = 0) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ScenarioError(f"{what} must be an integer, got {text!r}", line, source) from None
    if value < minimum:
        raise ScenarioError(f"{what} must be >= {minimum}, got {value}", line, source)
    return value


def _pairs(tokens: List[str], line: int, source: str) -> Dict[str, str]:
    pairs = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep:
            raise ScenarioError(f"expected key=value, got {token!r}", line, source)
        pairs[key] = value
    return pairs


def _arity(tokens: List[str], low: int, high: int, verb: str, line: int, source: str) -> None:
    if not low <= len(tokens) <= high:
        raise ScenarioError(f"{verb} takes {low}..{high} arguments, got {len(tokens)}", line, source)


def _parse_action(tokens: List[str], line: int, source: str) -> Action:
    tick = _int(tokens[0], "tick", line, source)
    if len(tokens) < 2:
        raise ScenarioError("action needs a verb", line, source)
    verb = tokens[1]
    if verb not in VERBS:
        raise ScenarioError(f"unknown verb {verb!r}", line, source)
    if verb == "advance":
        return Action(tick, verb, None, (), line)
    if len(tokens) < 3:
        raise ScenarioError(f"{verb} needs a channel", line, source)
    channel, rest = tokens[2], tokens[3:]

    if verb == "pay":
        _arity(rest, 2, 3, verb, line, source)
        args = (rest[0], _int(rest[1], "amount", line, source, 1), rest[2] if len(rest) > 2 else "")
    elif verb == "control":
        _arity(rest, 1, 2, verb, line, source)
        if rest[0] not in ("unscheduled", "dispute"):
            raise ScenarioError(f"control kind must be unscheduled or dispute, got {rest[0]!r}", line, source)
        args = tuple(rest)
    elif verb == "settle-stale":
        _arity(rest, 1, 1, verb, line, source)
        args = (_int(rest[0], "sequence", line, source),)
    elif verb == "settle":
        _arity(rest, 0, 0, verb, line, source)
        args = ()
    elif verb == "htlc-lock":
        _arity(rest, 5, 5, verb, line, source)
        args = (
            rest[0],
            _int(rest[1], "amount", line, source, 1),
            rest[2],
            _int(rest[3], "timeout", line, source, 1),
            rest[4],
        )
    elif verb == "htlc-claim":
        _arity(rest, 2, 2, verb, line, source)
        args = tuple(rest)
    elif verb == "htlc-refund":
        _arity(rest, 1, 1, verb, line, source)
        args = tuple(rest)
    else:
        _arity(rest, 5, 6, verb, line, source)
        mode = rest[5] if len(rest) > 5 else "reveal"
        if mode not in ("reveal", "withhold"):
            raise ScenarioError(f"relay mode must be reveal or withhold, got {mode!r}", line, source)
        args = (
            rest[0],
            _int(rest[1], "amount", line, source, 1),
            rest[2],
            _int(rest[3], "timeout", line, source, 1),
            _int(rest[4], "delta", line, source),
            mode,
        )
    return Action(tick, verb, channel, args, line)


def parse_scenario(text: str, name: str = "scenario", source: str = "<scenario>") -> Scenario:
    scenario = Scenario(name=name, source=source)
    seen_header = False
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if not seen_header:
            if content != HEADER:
                raise ScenarioError(f"expected header {HEADER!r}", number, source)
            seen_header = True
            continue

        tokens = content.split()
        keyword = tokens[0]
        if keyword[0].isdigit():
            scenario.workload.append(_parse_action(tokens, number, source))
        elif keyword == "name":
            _arity(tokens[1:], 1, 1, keyword, number, source)
            scenario.name = tokens[1]
        elif keyword == "seed":
            _arity(tokens[1:], 1, 1, keyword, number, source)
            scenario.seed = _int(tokens[1], "seed", number, source)
        elif keyword == "partitions":
            _arity(tokens[1:], 1, 1, keyword, number, source)
            scenario.partitions = _int(tokens[1], "partitions", number, source, 1)
        elif keyword == "faults":
            pairs = _pairs(tokens[1:], number, source)
            try:
                scenario.duplicate_probability = float(pairs.pop("dup", "0"))
            except ValueError:
                raise ScenarioError("dup must be a probability", number, source) from None
            scenario.max_reorder_distance = _int(pairs.pop("reorder", "0"), "reorder", number, source)
            if pairs:
                raise ScenarioError(f"unknown fault setting(s): {', '.join(sorted(pairs))}", number, source)
            if not 0.0 <= scenario.duplicate_probability <= 1.0:
                raise ScenarioError("dup must be within 0..1", number, source)
        elif keyword == "challenge":
            pairs = _pairs(tokens[1:], number, source)
            try:
                scenario.challenge = ChallengeParams(challenge_period=int(pairs.get("period", DEFAULT_CHALLENGE_PERIOD)))
            except (ValueError, ValidationError) as e:
                raise ScenarioError(f"invalid challenge period: {e}", number, source) from None
        elif keyword == "channel":
            if len(tokens) < 2:
                raise ScenarioError("channel needs a name", number, source)
            try:
                scenario.channel_specs.append(ChannelSpec(name=tokens[1], **_pairs(tokens[2:], number, source)))
            except ValidationError as e:
                raise ScenarioError(f"invalid channel {tokens[1]}: {e.errors()[0]['msg']}", number, source) from None
        else:
            raise ScenarioError(f"unknown directive {keyword!r}", number, source)

    if not seen_header:
        raise ScenarioError(f"missing header {HEADER!r}", 1, source)
    return scenario.validate()


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e.strerror}", source=str(path)) from None
    return parse_scenario(text, name=path.stem, source=str(path))


def generate_scenario_text(seed: int, max_payments: int = 1000) -> str:
    """Random valid scenario: 1-3 channels, reorder below every n, dup <= 0.5."""
    rng = random.Random(f"parsec-scenario:{seed}")
    channels = []
    labels = [f"p{i}" for i in range(4)]
    for index in range(rng.randint(1, 3)):
        a, b = rng.sample(labels, 2)
        channels.append(
            (f"ch{index}", a, b, rng.randint(50, 500), rng.randint(50, 500), rng.randint(2, 8), rng.randint(1, 20), rng.randint(5, 50))
        )
    min_n = min(channel[5] for channel in channels)

    lines = [
        HEADER,
        f"name generated-{seed}",
        f"seed {seed}",
        f"partitions {rng.randint(1, 4)}",
        f"faults dup={rng.choice([0.0, 0.1, 0.25, 0.5])} reorder={rng.randint(0, min_n - 1)}",
        f"challenge period={rng.randint(10, 100)}",
    ]
    for name, a, b, deposit_a, deposit_b, n, m, timeout in channels:
        lines.append(
            f"channel {name} currency=ETH a={a} b={b} deposit_a={deposit_a} deposit_b={deposit_b} n={n} m={m} timeout={timeout}"
        )

    tick = 1
    for _ in range(rng.randint(1, max(1, max_payments))):
        name, a, b = rng.choice(channels)[:3]
        lines.append(f"{tick} pay {name} {rng.choice((a, b))} {rng.randint(1, 10)}")
        if rng.random() < 0.2:
            tick += rng.randint(1, 3)
    return "\n".join(lines) + "\n"


def generate_scenario(seed: int, max_payments: int = 1000) -> Scenario:
    return parse_scenario(generate_scenario_text(seed, max_payments), name=f"generated-{seed}")
