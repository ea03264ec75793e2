from contextlib import asynccontextmanager
from typing import List, Optional

from fastapi import Depends, FastAPI, HTTPException
from sqlalchemy.orm import Session

import models
from database import get_db
from registry import experiment_aggregate, init_registry
from schemas import (
    SOFTWARE_VERSION,
    AggregatePointRead,
    EvalPointRead,
    ExperimentDetail,
    ExperimentRead,
    RunRead,
)


@asynccontextmanager
async def lifespan(_app: FastAPI):
    init_registry()
    yield


app = FastAPI(title="Sequential Training Results API", version=SOFTWARE_VERSION, lifespan=lifespan)


def _experiment_or_404(db: Session, experiment_id: int) -> models.Experiments:
    e = db.query(models.Experiments).get(experiment_id)
    if not e:
        raise HTTPException(404, "Experiment not found")
    return e


# ---------------- Read-only results endpoints ----------------

@app.get("/experiments", response_model=List[ExperimentRead])
def list_experiments(db: Session = Depends(get_db)):
    return db.query(models.Experiments).order_by(models.Experiments.experiment_id).all()


@app.get("/experiments/{experiment_id}", response_model=ExperimentDetail)
def get_experiment(experiment_id: int, db: Session = Depends(get_db)):
    return _experiment_or_404(db, experiment_id)


@app.get("/experiments/{experiment_id}/runs", response_model=List[RunRead])
def get_experiment_runs(experiment_id: int, method: Optional[str] = None, db: Session = Depends(get_db)):
    _experiment_or_404(db, experiment_id)
    q = db.query(models.Runs).filter(models.Runs.experiment_id == experiment_id)
    if method is not None:
        q = q.filter(models.Runs.method == method)
    return q.order_by(models.Runs.run_id).all()


@app.get("/experiments/{experiment_id}/aggregate", response_model=List[AggregatePointRead])
def get_experiment_aggregate(experiment_id: int, db: Session = Depends(get_db)):
    return experiment_aggregate(_experiment_or_404(db, experiment_id))


@app.get("/runs/{run_id}/points", response_model=List[EvalPointRead])
def get_run_points(run_id: int, db: Session = Depends(get_db)):
    run = db.query(models.Runs).get(run_id)
    if not run:
        raise HTTPException(404, "Run not found")
    return run.points
