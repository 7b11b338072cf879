"""
Deterministic in-process partitioned log standing in for the broker.
NOTE: Records are durable; a FaultProfile only changes delivery order and duplication.
"""
import heapq
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.protocol import ProtocolError, digest, read_frames, unpack_message, write_frames

logger = logging.getLogger(__name__)

PLOG_SUFFIX = ".plog"


class LogError(Exception):
    """Base class for event log failures."""


class DuplicateTopic(LogError):
    pass


class UnknownTopic(LogError):
    pass


class UnknownPartition(LogError):
    pass


class InvalidTopic(LogError, ValueError):
    pass


@dataclass(frozen=True)
class Record:
    offset: int
    key: bytes
    value: bytes


@dataclass
class Partition:
    records: List[Record] = field(default_factory=list)

    @property
    def next_offset(self) -> int:
        return len(self.records)

    def append(self, key: bytes, value: bytes) -> Record:
        record = Record(self.next_offset, bytes(key), bytes(value))
        self.records.append(record)
        return record


@dataclass
class Topic:
    name: str
    partitions: List[Partition]

    def partition_for(self, key: bytes) -> int:
        """digest(key) mod partition count, so one channel never spans partitions."""
        return int.from_bytes(digest(key).value, "big") % len(self.partitions)


class FaultProfile(BaseModel):
    """Seeded delivery faults: duplication and bounded reordering, never loss."""
    model_config = ConfigDict(frozen=True)

    seed: int = Field(0, ge=0, lt=2**64)
    duplicate_probability: float = Field(0.0, ge=0.0, le=1.0)
    max_reorder_distance: int = Field(0, ge=0)
    drop_probability: float = 0.0

    @field_validator("drop_probability")
    @classmethod
    def _durable(cls, value: float) -> float:
        if value != 0:
            raise ValueError("the log is durable: drop_probability must be 0")
        return value

    @classmethod
    def identity(cls, seed: int = 0) -> "FaultProfile":
        return cls(seed=seed)


@dataclass(frozen=True)
class Delivery:
    partition: int
    record: Record
    duplicate: bool = False


@dataclass
class DeliveryStats:
    deliveries: int = 0
    duplicates: int = 0
    max_displacement: int = 0

    def merge(self, other: "DeliveryStats") -> None:
        self.deliveries += other.deliveries
        self.duplicates += other.duplicates
        self.max_displacement = max(self.max_displacement, other.max_displacement)


class DeliveryStream:
    """
    Pull-based consumer over a set of partitions.
    Each record gets the key (offset + U{0..d}, offset) and is released in key order once no
    record still to be appended could sort before it; `flush=True` treats the log end as final.
    Displacement is counted among first deliveries within a partition.
    """

    def __init__(self, topic: Topic, partitions: Iterable[int], profile: FaultProfile):
        self._topic = topic
        self._partitions = sorted(set(partitions))
        self._profile = profile
        self._rng = random.Random(f"{topic.name}:{','.join(map(str, self._partitions))}:{profile.seed}")
        self._admitted = {p: 0 for p in self._partitions}
        self._first_deliveries = {p: 0 for p in self._partitions}
        self._pending: Dict[int, List[Tuple[int, int]]] = {p: [] for p in self._partitions}
        self._redeliveries: List[Tuple[int, Record]] = []
        self.stats = DeliveryStats()

    @property
    def partitions(self) -> List[int]:
        return list(self._partitions)

    def _admit(self) -> None:
        distance = self._profile.max_reorder_distance
        for p in self._partitions:
            partition = self._topic.partitions[p]
            while self._admitted[p] < partition.next_offset:
                offset = self._admitted[p]
                jitter = self._rng.randint(0, distance) if distance else 0
                heapq.heappush(self._pending[p], (offset + jitter, offset))
                self._admitted[p] += 1

    def _is_ready(self, p: int, flush: bool) -> bool:
        if not self._pending[p]:
            return False
        key, _ = self._pending[p][0]
        return flush or key <= self._admitted[p]

    def poll(self, flush: bool = False) -> Optional[Delivery]:
        """Next delivery, or None when nothing can be released yet."""
        self._admit()
        ready = [p for p in self._partitions if self._is_ready(p, flush)]
        if self._redeliveries and (not ready or self._rng.random() < 0.5):
            p, record = self._redeliveries.pop(self._rng.randrange(len(self._redeliveries)))
            self.stats.deliveries += 1
            self.stats.duplicates += 1
            logger.debug(f"redelivering {self._topic.name}[{p}]@{record.offset}")
            return Delivery(p, record, duplicate=True)
        if not ready:
            return None

        p = ready[0] if len(ready) == 1 else self._rng.choice(ready)
        _, offset = heapq.heappop(self._pending[p])
        record = self._topic.partitions[p].records[offset]
        displacement = abs(self._first_deliveries[p] - offset)
        self.stats.max_displacement = max(self.stats.max_displacement, displacement)
        self._first_deliveries[p] += 1
        self.stats.deliveries += 1
        probability = self._profile.duplicate_probability
        if probability and self._rng.random() < probability:
            self._redeliveries.append((p, record))
        return Delivery(p, record)

    def poll_batch(self, flush: bool = False) -> List[Delivery]:
        batch = []
        while (delivery := self.poll(flush)) is not None:
            batch.append(delivery)
        return batch

    def __iter__(self) -> Iterator[Delivery]:
        while (delivery := self.poll(flush=True)) is not None:
            yield delivery


class EventLog:
    """Named topics of append-only partitions. Confined to one thread of control."""

    def __init__(self):
        self._topics: Dict[str, Topic] = {}

    @property
    def topics(self) -> List[str]:
        return sorted(self._topics)

    def create_topic(self, name: str, partitions: int) -> Topic:
        if partitions < 1:
            raise InvalidTopic(f"topic {name!r} needs at least one partition, got {partitions}")
        if name in self._topics:
            raise DuplicateTopic(f"topic {name!r} already exists")
        topic = Topic(name, [Partition() for _ in range(partitions)])
        self._topics[name] = topic
        logger.info(f"Created topic {name} with {partitions} partition(s)")
        return topic

    def topic(self, name: Union[str, Topic]) -> Topic:
        if isinstance(name, Topic):
            name = name.name
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(f"unknown topic {name!r}") from None

    def append(self, topic: Union[str, Topic], key: bytes, value: bytes) -> Tuple[int, int]:
        """Content-agnostic append; returns (partition index, offset)."""
        target = self.topic(topic)
        index = target.partition_for(key)
        record = target.partitions[index].append(key, value)
        return index, record.offset

    def subscribe(
        self,
        topic: Union[str, Topic],
        partitions: Optional[Iterable[int]] = None,
        profile: Optional[FaultProfile] = None,
    ) -> DeliveryStream:
        target = self.topic(topic)
        chosen = list(range(len(target.partitions))) if partitions is None else list(partitions)
        for p in chosen:
            if not 0 <= p < len(target.partitions):
                raise UnknownPartition(f"topic {target.name!r} has no partition {p}")
        return DeliveryStream(target, chosen, profile or FaultProfile.identity())

    def dump(self, directory: Union[str, Path]) -> List[Path]:
        """One `<topic>.<partition>.plog` file per partition, values framed by 4-byte lengths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in self.topics:
            for index, partition in enumerate(self._topics[name].partitions):
                path = directory / f"{name}.{index}{PLOG_SUFFIX}"
                write_frames(path, (record.value for record in partition.records))
                written.append(path)
        return written

    @classmethod
    def restore(cls, directory: Union[str, Path]) -> "EventLog":
        """
        Rebuild a log from `.plog` files. Record keys are recovered from the decoded
        message's channel; undecodable values keep an empty key.
        """
        layout: Dict[str, Dict[int, Path]] = {}
        for path in sorted(Path(directory).glob(f"*{PLOG_SUFFIX}")):
            name, index, _ = path.name.rsplit(".", 2)
            layout.setdefault(name, {})[int(index)] = path

        log = cls()
        for name, files in sorted(layout.items()):
            topic = log.create_topic(name, max(files) + 1)
            for index, path in sorted(files.items()):
                for value in read_frames(path):
                    try:
                        key = unpack_message(value).channel.encode("utf-8")
                    except (ProtocolError, AttributeError):
                        key = b""
                    topic.partitions[index].append(key, value)
        return log
