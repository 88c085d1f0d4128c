from pydantic import BaseModel, Field


class MetricDelta(BaseModel):
    series: str
    q10: int
    q50: int
    q90: int


class ComparisonReport(BaseModel):
    run_a: str
    run_b: str
    policy_a: str
    policy_b: str
    deltas: list[MetricDelta] = []
    goodput_delta: int = 0

    def delta(self, series: str) -> MetricDelta | None:
        return next((d for d in self.deltas if d.series == series), None)


class RunRecord(BaseModel):
    run_id: str
    directory: str
    status: str = "complete"
    events: int = 0
    clock_ns: int = 0
    counters: dict[str, int] = {}
    error: str | None = None


class SweepCell(BaseModel):
    label: str
    policy: str
    load_factor: float
    loss_model: str
    run: RunRecord | None = None
    error: str | None = None


class SweepReport(BaseModel):
    cells: list[SweepCell] = []
    comparisons: list[ComparisonReport] = []

    @property
    def failures(self) -> list[SweepCell]:
        return [c for c in self.cells if c.error is not None]


class CdfSummary(BaseModel):
    series: str
    n: int
    min: int
    max: int
    q10: int
    q25: int
    q50: int
    q75: int
    q90: int
    q99: int
    at_most: dict[str, float] = Field(default_factory=dict, description="fraction of samples <= threshold (ns)")
