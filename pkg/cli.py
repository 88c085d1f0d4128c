import argparse
import logging
import sys

import orjson

from models.experiment import PolicyKind
from simulator import experiments
from simulator.engine import RngStream
from simulator.errors import SimulationError
from simulator.netgraph import LatencyLaw, LossModel, build_graph, write_graph
from utils.config import Config

logger = logging.getLogger("cli")


def build_parser() -> argparse.ArgumentParser:
    config = Config()
    parser = argparse.ArgumentParser(prog="cli.py", description="Relay socket scheduling experiments")
    parser.add_argument("--log-level", default=config.log_level)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one experiment")
    run.add_argument("spec")
    run.add_argument("--policy", choices=[p.value for p in PolicyKind])
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default=config.results_dir)
    run.add_argument("--run-id")

    sweep = commands.add_parser("sweep", help="run the policy x load x loss matrix")
    sweep.add_argument("spec")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=config.sweep_jobs)

    compare = commands.add_parser("compare", help="quantile deltas between two exported runs")
    compare.add_argument("run_a")
    compare.add_argument("run_b")

    graph = commands.add_parser("graph", help="write a synthetic graph file")
    graph.add_argument("path")
    graph.add_argument("--vertices", type=int, default=50)
    graph.add_argument("--seed", type=int, default=1)
    graph.add_argument("--latency-min-ms", type=float, default=5.0)
    graph.add_argument("--latency-max-ms", type=float, default=150.0)
    graph.add_argument("--loss-model", choices=[m.value for m in LossModel], default=LossModel.BASE.value)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            spec = experiments.parse_spec(args.spec, policy=args.policy, seed=args.seed)
            record = experiments.run(spec, args.out, run_id=args.run_id)
            print(record.directory)
        elif args.command == "sweep":
            spec = experiments.parse_spec(args.spec)
            report = experiments.sweep(spec, args.out, jobs=args.jobs)
            for cell in report.cells:
                print(f"{cell.label}\t{'failed: ' + cell.error if cell.error else cell.run.directory}")
            if report.failures:
                return 1
        elif args.command == "compare":
            report = experiments.compare(args.run_a, args.run_b)
            sys.stdout.write(orjson.dumps(report.model_dump(mode="json"),
                                          option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2).decode() + "\n")
        elif args.command == "graph":
            law = LatencyLaw(args.latency_min_ms, args.latency_max_ms)
            graph = build_graph(args.vertices, law, LossModel(args.loss_model), RngStream(args.seed, "graph"))
            write_graph(graph, args.path)
            print(args.path)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
