from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from simulator.netgraph import MAX_LATENCY_MS, LossModel


class PolicyKind(str, Enum):
    AMAP = "amap"
    KIST = "kist"


class ClientKind(str, Enum):
    WEB = "web"
    BULK = "bulk"
    SHADOWPERF = "shadowperf"


class PolicyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    policy: PolicyKind = PolicyKind.KIST
    kist_interval_ms: float = Field(default=10.0, gt=0)
    per_socket_limit_enabled: bool = True
    kist_use_socket_space: bool = False
    kist_global_write_limit: int = Field(default=0, ge=0, description="bytes per tick across sockets, 0 disables")


class ExperimentSpec(BaseModel):
    """Everything one run needs. Field names are the keys of the flat spec file."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=1, ge=0)
    duration_s: float = Field(default=600.0, gt=0)

    n_relays: int = Field(default=20, ge=0)
    web_clients: int = Field(default=480, ge=0)
    bulk_clients: int = Field(default=15, ge=0)
    shadowperf_clients: int = Field(default=3, ge=0)
    circuit_hops: int = 3
    load_factor: float = Field(default=1.0, ge=0)
    pinned_exit: int | None = Field(default=None, ge=0)

    relay_bw_min_mbit: float = Field(default=20.0, gt=0)
    relay_bw_max_mbit: float = Field(default=80.0, gt=0)
    client_bw_mbit: float = Field(default=10.0, gt=0)

    graph_file: str | None = None
    graph_vertices: int = Field(default=50, ge=2)
    latency_min_ms: float = Field(default=5.0, gt=0)
    latency_max_ms: float = Field(default=150.0, gt=0, le=MAX_LATENCY_MS)
    latency_tail_fraction: float = Field(default=0.0, ge=0, le=1)
    intra_vertex_latency_ms: float = Field(default=1.0, gt=0, le=MAX_LATENCY_MS)
    loss_model: LossModel = LossModel.BASE

    policy: PolicyKind = PolicyKind.KIST
    kist_interval_ms: float = Field(default=10.0, gt=0)
    per_socket_limit_enabled: bool = True
    kist_use_socket_space: bool = False
    kist_global_write_limit: int = Field(default=0, ge=0)
    ewma_halflife_s: float = Field(default=30.0, gt=0)

    nic_queue_limit: int = Field(default=1000, ge=1)
    send_buffer_initial: int = Field(default=64 * 1024, ge=512)
    send_buffer_max: int = Field(default=4 * 1024 * 1024, ge=512)

    download_timeout_s: float = Field(default=120.0, gt=0)
    client_start_window_s: float = Field(default=30.0, ge=0)
    trace_every: int = Field(default=1, ge=1)

    @field_validator("circuit_hops")
    @classmethod
    def check_hops(cls, value: int) -> int:
        if value not in (3, 6):
            raise ValueError("circuit_hops must be 3 or 6")
        return value

    @model_validator(mode="after")
    def check_ranges(self):
        if self.relay_bw_min_mbit > self.relay_bw_max_mbit:
            raise ValueError("relay_bw_min_mbit exceeds relay_bw_max_mbit")
        if self.latency_min_ms > self.latency_max_ms:
            raise ValueError("latency_min_ms exceeds latency_max_ms")
        if self.send_buffer_initial > self.send_buffer_max:
            raise ValueError("send_buffer_initial exceeds send_buffer_max")
        if self.pinned_exit is not None and self.pinned_exit >= self.n_relays:
            raise ValueError("pinned_exit must name a relay index below n_relays")
        return self

    @property
    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            policy=self.policy,
            kist_interval_ms=self.kist_interval_ms,
            per_socket_limit_enabled=self.per_socket_limit_enabled,
            kist_use_socket_space=self.kist_use_socket_space,
            kist_global_write_limit=self.kist_global_write_limit,
        )

    def client_counts(self) -> dict[ClientKind, int]:
        """Client population per model after applying the load factor; ratios are preserved."""
        scale = lambda n: int(n * self.load_factor + 0.5)
        return {
            ClientKind.WEB: scale(self.web_clients),
            ClientKind.BULK: scale(self.bulk_clients),
            ClientKind.SHADOWPERF: scale(self.shadowperf_clients),
        }
