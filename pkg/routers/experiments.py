import logging

from fastapi import APIRouter, Body, HTTPException, Query, Request, Response
from fastapi.concurrency import run_in_threadpool
from fastapi_cache.decorator import cache

from models.experiment import ExperimentSpec, PolicyKind
from models.reports import CdfSummary, ComparisonReport, RunRecord
from simulator import experiments
from simulator.errors import ConfigError, EmptySeriesError, EventFault, SpecMismatchError
from simulator.metrics import cdf, load_run
from utils.utils import config, dynamic_limit, limiter, list_runs, run_directory

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["Experiments"])


@router.post("/run",
             name="Run an experiment",
             response_model=RunRecord)
@limiter.limit(dynamic_limit)
async def run_experiment(request: Request, response: Response, spec: ExperimentSpec,
                         policy: PolicyKind | None = None, seed: int | None = None):
    update = {k: v for k, v in {"policy": policy, "seed": seed}.items() if v is not None}
    if update:
        spec = ExperimentSpec.model_validate({**spec.model_dump(), **update})
    try:
        return await run_in_threadpool(experiments.run, spec, config.results_dir)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    except EventFault as exc:
        raise HTTPException(status_code=500, detail=f"Run failed, partial output kept: {exc}")


@router.post("/parse",
             name="Validate a flat key=value spec",
             response_model=ExperimentSpec)
async def parse_spec(text: str = Body(..., media_type="text/plain")):
    try:
        return experiments.parse_spec_text(text)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


@router.get("",
            name="List exported runs")
async def runs(request: Request, response: Response):
    return {"items": list_runs()}


@router.get("/compare",
            name="Compare an AMAP run with a KIST run",
            response_model=ComparisonReport)
async def compare(run_a: str, run_b: str):
    try:
        return experiments.compare(run_directory(run_a), run_directory(run_b))
    except SpecMismatchError as exc:
        raise HTTPException(status_code=409, detail=str(exc))


@router.get("/{run_id}",
            name="Run manifest")
async def manifest(run_id: str):
    return load_run(run_directory(run_id)).manifest


@router.get("/{run_id}/cdf/{series}",
            name="CDF summary of one series",
            response_model=CdfSummary)
@cache(expire=300)
async def cdf_summary(request: Request, response: Response, run_id: str, series: str,
                      at_most: list[int] = Query(default=[10_000_000], max_length=10)):
    stored = load_run(run_directory(run_id))
    if series not in stored.manifest.get("series", "").split(","):
        raise HTTPException(status_code=404, detail=f"Run {run_id} has no series {series}")
    try:
        table = cdf(stored.values(series))
    except EmptySeriesError:
        raise HTTPException(status_code=404, detail=f"Series {series} of run {run_id} is empty")
    return CdfSummary(series=series, **table.summary(),
                      at_most={str(x): table.fraction_at_most(x) for x in at_most})
