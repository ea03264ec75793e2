import json

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Index, Integer, String, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from database import Base


class Experiments(Base):
    __tablename__ = "experiments"

    experiment_id = Column(Integer, primary_key=True, index=True)
    name = Column(String(200), nullable=False, index=True)
    kind = Column(String(20), nullable=False)
    software_version = Column(String(20), nullable=False)
    config_json = Column(Text, nullable=False)
    created_at = Column(DateTime, server_default=func.now(), nullable=False)
    # One experiment -> many (pass, method) runs
    runs = relationship("Runs", back_populates="experiment", cascade="all, delete-orphan",
                        order_by="Runs.run_id")

    @property
    def config(self):
        return json.loads(self.config_json)

    @property
    def num_runs(self):
        return len(self.runs)


class Runs(Base):
    __tablename__ = "runs"

    run_id = Column(Integer, primary_key=True, index=True)
    experiment_id = Column(Integer, ForeignKey("experiments.experiment_id"), nullable=False, index=True)
    pass_id = Column(Integer, nullable=False)
    method = Column(String(10), nullable=False)
    lambda_value = Column(Float, nullable=False, default=0.0)
    learning_rate = Column(Float, nullable=False)
    failed = Column(Boolean, nullable=False, default=False)
    failure = Column(Text, nullable=True)
    early_stop_json = Column(Text, nullable=False, default="{}")
    # relationships
    experiment = relationship("Experiments", back_populates="runs")
    points = relationship("EvalPoints", back_populates="run", cascade="all, delete-orphan",
                          order_by="EvalPoints.global_step")


class EvalPoints(Base):
    __tablename__ = "eval_points"

    point_id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.run_id"), nullable=False, index=True)
    training_task = Column(Integer, nullable=False)
    global_step = Column(Integer, nullable=False)
    mean_accuracy = Column(Float, nullable=False)
    accuracies_json = Column(Text, nullable=False)
    selected = Column(Boolean, nullable=False, default=False)
    run = relationship("Runs", back_populates="points")

    @property
    def accuracies(self):
        return json.loads(self.accuracies_json)


Index('ix_runs_experiment_method', Runs.experiment_id, Runs.method)
Index('ix_eval_points_run_step', EvalPoints.run_id, EvalPoints.global_step)
