import logging
from typing import Any, Dict

import pandas as pd
from sqlalchemy import func
from sqlalchemy.orm import Session

from models import CheckpointRecord, ScenarioRun, SettlementRecord
from services.report import SimReport, render_text

logger = logging.getLogger(__name__)


def store_report(db: Session, report: SimReport) -> int:
    """
    Persist a simulation report with its settlements and checkpoints.
    NOTE: The rendered text is stored verbatim so a run can be diffed later.
    """
    try:
        run = ScenarioRun(
            scenario=report.scenario,
            seed=str(report.seed),
            partitions=report.partitions,
            duplicate_probability=report.duplicate_probability,
            max_reorder_distance=report.max_reorder_distance,
            challenge_period=report.challenge_period,
            deliveries=report.delivery.deliveries,
            duplicates=report.delivery.duplicates,
            max_displacement=report.delivery.max_displacement,
            diverged=not report.ok,
            report_text=render_text(report),
        )
        for outcome in report.channels:
            for party, deposit in sorted(outcome.deposits.items()):
                run.settlements.append(SettlementRecord(
                    channel=outcome.channel,
                    party=party,
                    deposit=deposit,
                    payout=outcome.payouts.get(party),
                    settled_sequence=outcome.settled_sequence,
                ))
        for entry in report.checkpoints:
            run.checkpoints.append(CheckpointRecord(
                tick=entry.tick,
                channel=entry.channel,
                sequence=entry.sequence,
                reason=entry.reason,
                outcome=entry.outcome,
            ))
        db.add(run)
        db.flush()
        logger.info(f"Stored run {run.run_id} of {report.scenario} seed {report.seed}")
        return run.run_id
    except Exception:
        db.rollback()
        raise


def list_runs(db: Session) -> pd.DataFrame:
    query = db.query(
        ScenarioRun.run_id,
        ScenarioRun.scenario,
        ScenarioRun.seed,
        ScenarioRun.deliveries,
        ScenarioRun.duplicates,
        ScenarioRun.max_displacement,
        ScenarioRun.diverged,
    ).order_by(ScenarioRun.run_id)
    return pd.read_sql(query.statement, db.connection())


def list_settlements(db: Session, run_id: int) -> pd.DataFrame:
    query = (
        db.query(SettlementRecord.channel, SettlementRecord.party, SettlementRecord.deposit,
                 SettlementRecord.payout, SettlementRecord.settled_sequence)
        .filter(SettlementRecord.run_id == run_id)
        .order_by(SettlementRecord.channel, SettlementRecord.party)
    )
    return pd.read_sql(query.statement, db.connection())


def get_ledger_statistics(db: Session) -> Dict[str, Any]:
    total_runs = db.query(ScenarioRun).count()
    diverged_runs = db.query(ScenarioRun).filter(ScenarioRun.diverged.is_(True)).count()
    total_deposits = db.query(func.coalesce(func.sum(SettlementRecord.deposit), 0)).scalar()
    total_payouts = db.query(func.coalesce(func.sum(SettlementRecord.payout), 0)).scalar()
    reasons = dict(
        db.query(CheckpointRecord.reason, func.count(CheckpointRecord.checkpoint_id))
        .group_by(CheckpointRecord.reason)
        .all()
    )
    return {
        "total_runs": total_runs,
        "diverged_runs": diverged_runs,
        "total_deposits": int(total_deposits),
        "total_payouts": int(total_payouts),
        "checkpoints_by_reason": {reason: reasons[reason] for reason in sorted(reasons)},
    }
