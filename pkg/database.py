import os

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import sessionmaker

load_dotenv()

# Run registry; any SQLAlchemy URL works, SQLite file by default
SQLALCHEMY_DATABASE_URL = os.getenv("WVA_DATABASE_URL", "sqlite:///./wva_runs.db")


def make_engine(url: str = SQLALCHEMY_DATABASE_URL, **kwargs):
    if url.startswith("sqlite"):
        kwargs.setdefault("connect_args", {"check_same_thread": False})
    return create_engine(url, **kwargs)


engine = make_engine()

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


# FastAPI dependency yielding a registry session
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
