from fastapi import APIRouter, HTTPException, Query

from simulator.errors import ConfigError
from simulator.netgraph import MAX_LATENCY_MS, LossModel, loss_rate
from simulator.sched import socket_limit
from simulator.tcp import TcpInfo

router = APIRouter(prefix="/network", tags=["Network Model"])


@router.get("/loss-rate",
            name="Edge loss probability for a latency")
async def edge_loss_rate(latency_ms: float = Query(gt=0, le=MAX_LATENCY_MS), model: LossModel = LossModel.BASE):
    try:
        return {"latency_ms": latency_ms, "model": model.value, "loss": loss_rate(latency_ms, model)}
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


@router.get("/socket-limit",
            name="Per-socket KIST write limit")
async def kist_socket_limit(cwnd: int = Query(ge=0), una: int = Query(ge=0),
                            mss: int = Query(default=1448, gt=0), notsent: int = Query(default=0, ge=0)):
    info = TcpInfo(cwnd=cwnd, una=una, mss=mss, notsent=notsent)
    return {"limit": socket_limit(info), **{k: getattr(info, k) for k in ("cwnd", "una", "mss", "notsent")}}
