"""Store finished experiments in the SQLAlchemy run registry and read them back."""
import json
import logging

from sqlalchemy.exc import IntegrityError

import models
from database import engine as default_engine
from results import aggregate_rows
from schemas import EvalRow, ExperimentResult

logger = logging.getLogger(__name__)


def init_registry(engine=None):
    models.Base.metadata.create_all(bind=engine or default_engine)


def store_experiment(db, result: ExperimentResult, name: str) -> models.Experiments:
    """Insert one experiment with all its runs and eval points in a single transaction."""
    experiment = models.Experiments(
        name=name,
        kind=result.config.experiment.value,
        software_version=result.software_version,
        config_json=result.config.model_dump_json(),
    )
    for record in result.records:
        run = models.Runs(
            pass_id=record.pass_id,
            method=record.method,
            lambda_value=record.lambda_,
            learning_rate=record.learning_rate,
            failed=record.failed,
            failure=record.failure,
            early_stop_json=json.dumps({str(k): v for k, v in record.early_stop_steps.items()}),
        )
        run.points = [
            models.EvalPoints(
                training_task=row.training_task,
                global_step=row.global_step,
                mean_accuracy=row.mean_accuracy,
                accuracies_json=json.dumps(row.accuracies),
                selected=row.selected,
            )
            for row in record.rows
        ]
        experiment.runs.append(run)
    db.add(experiment)
    try:
        db.commit()
    except IntegrityError:
        db.rollback()
        raise
    db.refresh(experiment)
    logger.info("Stored experiment %r as id %d (%d runs)", name, experiment.experiment_id, len(result.records))
    return experiment


def experiment_rows(experiment: models.Experiments):
    """Eval rows of the experiment's successful runs, as harness ``EvalRow`` objects."""
    return [
        EvalRow(
            pass_id=run.pass_id,
            method=run.method,
            training_task=point.training_task,
            global_step=point.global_step,
            accuracies=point.accuracies,
            mean_accuracy=point.mean_accuracy,
            selected=point.selected,
        )
        for run in experiment.runs if not run.failed
        for point in run.points
    ]


def experiment_aggregate(experiment: models.Experiments):
    return aggregate_rows(experiment_rows(experiment))
