from os import getenv
from dotenv import load_dotenv
from dataclasses import dataclass
load_dotenv()

@dataclass(frozen=True, slots=True)
class Config:
    results_dir = getenv("RESULTS_DIR", "out")
    log_level = getenv("LOG_LEVEL", "INFO").upper()

    sweep_jobs = int(getenv("SWEEP_JOBS", "1"))

    is_local = (getenv("LOCAL") == "TRUE")
    api_port = int(getenv("API_PORT", "8010"))
