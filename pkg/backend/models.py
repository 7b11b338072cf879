# NOTE: SQLAlchemy models for the settlement ledger: one run, its channel settlements and checkpoints
from datetime import datetime, timezone

from sqlalchemy import Boolean, CheckConstraint, Column, DateTime, Float, ForeignKey, Index, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class ScenarioRun(Base):
    """One simulator run as reported."""
    __tablename__ = "scenario_runs"

    run_id = Column(Integer, primary_key=True, autoincrement=True)
    scenario = Column(String(100), nullable=False, index=True)
    seed = Column(String(20), nullable=False)  # u64 does not fit a signed BIGINT
    partitions = Column(Integer, nullable=False)
    duplicate_probability = Column(Float, nullable=False)
    max_reorder_distance = Column(Integer, nullable=False)
    challenge_period = Column(Integer, nullable=False)
    deliveries = Column(Integer, nullable=False)
    duplicates = Column(Integer, nullable=False)
    max_displacement = Column(Integer, nullable=False)
    diverged = Column(Boolean, nullable=False)
    report_text = Column(Text, nullable=False)
    created_at = Column(DateTime, default=_utcnow)

    settlements = relationship("SettlementRecord", back_populates="run", cascade="all, delete-orphan")
    checkpoints = relationship("CheckpointRecord", back_populates="run", cascade="all, delete-orphan")

    __table_args__ = (
        CheckConstraint("partitions >= 1", name="chk_run_partitions"),
        CheckConstraint("challenge_period > 0", name="chk_run_challenge_period"),
        Index("idx_runs_scenario_seed", "scenario", "seed"),
    )


class SettlementRecord(Base):
    """Final payout of one party on one channel."""
    __tablename__ = "settlements"

    settlement_id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("scenario_runs.run_id", ondelete="CASCADE"), nullable=False, index=True)
    channel = Column(String(100), nullable=False)
    party = Column(String(100), nullable=False)
    deposit = Column(Integer, nullable=False)
    payout = Column(Integer, nullable=True)
    settled_sequence = Column(Integer, nullable=True)

    run = relationship("ScenarioRun", back_populates="settlements")

    __table_args__ = (
        CheckConstraint("deposit >= 0", name="chk_settlement_deposit"),
        CheckConstraint("payout IS NULL OR payout >= 0", name="chk_settlement_payout"),
        Index("idx_settlements_channel_party", "channel", "party"),
    )


class CheckpointRecord(Base):
    __tablename__ = "checkpoints"

    checkpoint_id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("scenario_runs.run_id", ondelete="CASCADE"), nullable=False, index=True)
    tick = Column(Integer, nullable=False)
    channel = Column(String(100), nullable=False)
    sequence = Column(Integer, nullable=False)
    reason = Column(String(20), nullable=False)
    outcome = Column(String(50), nullable=False)

    run = relationship("ScenarioRun", back_populates="checkpoints")

    __table_args__ = (
        CheckConstraint("reason IN ('MODULO', 'TIMEOUT', 'UNSCHEDULED')", name="chk_checkpoint_reason"),
        CheckConstraint("sequence >= 0", name="chk_checkpoint_sequence"),
        Index("idx_checkpoints_channel_sequence", "channel", "sequence"),
    )
