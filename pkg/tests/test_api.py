import pytest
from fastapi.testclient import TestClient
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from conftest import make_record
from database import get_db, make_engine
from main import app
from registry import init_registry, store_experiment
from schemas import ExperimentResult, parse_config


@pytest.fixture
def client():
    engine = make_engine("sqlite://", poolclass=StaticPool)
    init_registry(engine)
    TestingSession = sessionmaker(autocommit=False, autoflush=False, bind=engine)

    config = parse_config({"methods": ["sgd", "wva-s"], "lambdas": {"wva-s": 10.0}, "tasks": 2})
    records = [
        make_record(0, "sgd", [(0, 0, [0.1, 0.1]), (0, 5, [0.9, 0.2]), (1, 10, [0.7, 0.9])]),
        make_record(0, "wva-s", [(0, 0, [0.1, 0.1]), (0, 5, [0.9, 0.2]), (1, 10, [0.85, 0.88])]),
        make_record(1, "sgd", [(0, 0, [0.1, 0.1]), (0, 5, [0.7, 0.2]), (1, 10, [0.5, 0.9])]),
        make_record(1, "wva-s", [(0, 0, [0.1, 0.1]), (0, 5, [0.7, 0.2]), (1, 10, [0.8, 0.9])], failed=True),
    ]
    db = TestingSession()
    store_experiment(db, ExperimentResult(config=config, records=records), "desk-run")
    db.close()

    def override_get_db():
        session = TestingSession()
        try:
            yield session
        finally:
            session.close()

    app.dependency_overrides[get_db] = override_get_db
    yield TestClient(app)
    app.dependency_overrides.clear()


def test_list_experiments(client):
    body = client.get("/experiments").json()
    assert len(body) == 1
    assert body[0]["name"] == "desk-run"
    assert body[0]["kind"] == "permuted"
    assert body[0]["num_runs"] == 4


def test_experiment_detail_carries_config(client):
    body = client.get("/experiments/1").json()
    assert body["config"]["methods"] == ["sgd", "wva-s"]
    assert body["config"]["lambdas"] == {"wva-s": 10.0}


def test_runs_can_be_filtered_by_method(client):
    runs = client.get("/experiments/1/runs").json()
    assert [(r["pass_id"], r["method"]) for r in runs] == [(0, "sgd"), (0, "wva-s"), (1, "sgd"), (1, "wva-s")]
    assert runs[3]["failed"] is True
    sgd = client.get("/experiments/1/runs", params={"method": "sgd"}).json()
    assert len(sgd) == 2


def test_run_points(client):
    points = client.get("/runs/1/points").json()
    assert [p["global_step"] for p in points] == [0, 5, 10]
    assert points[-1]["accuracies"] == [0.7, 0.9]


def test_aggregate_skips_failed_runs(client):
    points = client.get("/experiments/1/aggregate").json()
    wva_end = next(p for p in points if p["method"] == "wva-s" and p["global_step"] == 10)
    assert wva_end["n"] == 1
    assert wva_end["sd_accuracy"] is None
    sgd_mid = next(p for p in points if p["method"] == "sgd" and p["global_step"] == 5)
    assert sgd_mid["n"] == 2
    assert sgd_mid["sd_accuracy"] == pytest.approx(0.1414, abs=1e-4)


@pytest.mark.parametrize("url", ["/experiments/99", "/experiments/99/runs", "/experiments/99/aggregate",
                                 "/runs/99/points"])
def test_missing_rows_are_404(client, url):
    response = client.get(url)
    assert response.status_code == 404
    assert response.json()["detail"].endswith("not found")
