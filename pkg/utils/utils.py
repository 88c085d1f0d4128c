import re
from pathlib import Path

from fastapi import HTTPException
from slowapi import Limiter
from slowapi.util import get_ipaddr

from .config import Config


config = Config()

limiter = Limiter(key_func=get_ipaddr, key_style="endpoint")

RUN_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


def dynamic_limit(key: str):
    if key in {"::1", "127.0.0.1"}:
        return "1000/second"
    return "5/minute"


def results_root() -> Path:
    return Path(config.results_dir)


def run_directory(run_id: str) -> Path:
    if not RUN_ID.match(run_id):
        raise HTTPException(status_code=400, detail=f"Invalid run id {run_id!r}")
    directory = results_root() / run_id
    if not (directory / "manifest.txt").is_file():
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return directory


def list_runs() -> list[str]:
    root = results_root()
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "manifest.txt").is_file())
