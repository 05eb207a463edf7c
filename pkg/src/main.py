"""Command-line entry point for the latency-aware detection-head search engine."""

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from src import __version__
from src.arch import NetworkPlan, decode_genome
from src.config import CommaSeparatedFloats, CommaSeparatedInts, settings
from src.cost import (
    LatencyModel,
    LatencyTable,
    cost_report,
    cost_report_to_json,
    sdo_grid_violations,
    synth_lut_for_space,
)
from src.errors import ConfigurationError, SearchEngineError
from src.evaluator import SurrogateSpec
from src.graph import expand_network, graph_to_dot, graph_to_json
from src.history import read_history, write_candidates_table
from src.search import (
    PolicyConfig,
    RewardConfig,
    SearchConfig,
    default_lut,
    make_evaluator,
    pareto_frontier,
    run_search,
    select_at_latency,
    sweep_repeats,
)
from src.spaces import (
    Genome,
    SearchSpaceDef,
    cardinality,
    check_genome,
    read_genomes,
    resolve_space,
    sample_uniform,
    token_schema,
    write_genomes,
)

logger = logging.getLogger(__name__)


class RunManifest(BaseModel):
    """Everything needed to reproduce one output file at parallelism 1.

    ``arguments`` holds the parsed flags; ``resolved`` holds the configuration
    actually used, including values that came from the environment or ``.env``.
    """

    command: str
    arguments: Dict[str, Any]
    resolved: Dict[str, Any] = Field(default_factory=dict)
    version: str = __version__
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def write_manifest(
    out: Path, args: argparse.Namespace, resolved: Optional[Dict[str, Any]] = None
) -> Path:
    arguments = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "handler"
    }
    manifest = RunManifest(command=args.command, arguments=arguments, resolved=resolved or {})
    path = manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


# Helpers


def _load_lut(path: Optional[Path], space: SearchSpaceDef, input_image_size: int) -> LatencyTable:
    if path is not None:
        return LatencyTable.load(path)
    return default_lut(space, input_image_size)


def _resolved(config: Optional[SearchConfig] = None, lut_path: Optional[Path] = None) -> Dict[str, Any]:
    """Configuration block of a manifest; the latency model only when no table file is given."""
    resolved: Dict[str, Any] = {}
    if config is not None:
        resolved["search"] = config.model_dump(mode="json")
    if lut_path is None:
        resolved["latency_model"] = LatencyModel().model_dump(mode="json")
    return resolved


def _genomes_from_args(args: argparse.Namespace, space: SearchSpaceDef) -> List[Genome]:
    if args.genome is not None:
        genomes = [Genome.from_line(args.genome)]
    elif args.genomes is not None:
        genomes = read_genomes(args.genomes)
    else:
        raise ConfigurationError("pass --genome or --genomes")
    for g in genomes:
        check_genome(g, space)
    return genomes


def _plan(genome: Genome, space: SearchSpaceDef, args: argparse.Namespace) -> NetworkPlan:
    cell = decode_genome(genome, space, args.input_image_size)
    return NetworkPlan(
        cell,
        repeats=args.repeats,
        input_image_size=args.input_image_size,
        space_flavor=space.cell_flavor,
        sdo_enabled=space.sdo_enabled and not getattr(args, "no_sdo", False),
    )


def _write_or_print(
    text: str, out: Optional[Path], args: argparse.Namespace, resolved: Optional[Dict[str, Any]] = None
) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    write_manifest(out, args, resolved)


# Subcommands


def cmd_search(args: argparse.Namespace) -> int:
    config = SearchConfig(
        space=args.space,
        budget=args.budget,
        batch_size=min(args.batch_size, args.budget),
        controller=args.controller,
        seed=args.seed,
        reward=RewardConfig(w=args.w),
        policy=PolicyConfig(learning_rate=args.learning_rate),
        repeats=args.repeats,
        input_image_size=args.input_image_size,
        parallelism=args.parallelism,
        evaluator=args.evaluator,
        surrogate=SurrogateSpec(seed=args.surrogate_seed),
        exchange_dir=args.exchange_dir,
        history_path=args.history,
        lut_path=args.lut,
    )
    resolved = _resolved(config, args.lut)
    write_manifest(args.history, args, resolved)
    result = run_search(config)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_candidates_table(result.frontier, args.out)
        write_manifest(args.out, args, resolved)

    ok = [c for c in result.history if c.ok]
    best = max(ok, key=lambda c: c.reward, default=None)
    print(f"candidates\t{len(result.history)}")
    print(f"failed\t{len(result.history) - len(ok)}")
    print(f"frontier\t{len(result.frontier)}")
    if best is not None:
        print(f"best_reward\t{best.reward!r}")
        print(f"best_candidate\t{best.candidate_id}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    space = resolve_space(args.space)
    genomes = [sample_uniform(space, args.seed + i) for i in range(args.count)]
    if args.out is None:
        for g in genomes:
            print(g.to_line())
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_genomes(args.out, genomes)
    write_manifest(args.out, args)
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    space = resolve_space(args.space)
    lut = _load_lut(args.lut, space, args.input_image_size)
    lines = []
    for genome in _genomes_from_args(args, space):
        graph = expand_network(_plan(genome, space, args))
        report = cost_report(graph, lut)
        if args.json:
            lines.append(cost_report_to_json(report))
            continue
        groups = report.grouped_latency()
        lines.append(
            "\t".join(
                [
                    f"madds={report.madds}",
                    f"params={report.params}",
                    f"latency_ms={report.latency_ms!r}",
                    f"overhead_ms={groups['overhead']!r}",
                    f"blocks_ms={groups['blocks']!r}",
                    f"cell_adds_ms={groups['cell_adds']!r}",
                ]
            )
        )
    _write_or_print("\n".join(lines), args.out, args, _resolved(lut_path=args.lut))
    return 0


def cmd_cardinality(args: argparse.Namespace) -> int:
    space = resolve_space(args.space)
    exact = cardinality(space)
    print(f"space\t{space.name}")
    print(f"exact\t{exact}")
    print(f"genome_count\t{token_schema(space).size}")
    if space.quoted_cardinality is not None:
        print(f"quoted\t{space.quoted_cardinality:.3g}")
        print(f"exact/quoted\t{exact / space.quoted_cardinality:.4g}")
    return 0


def cmd_frontier(args: argparse.Namespace) -> int:
    frontier = pareto_frontier(read_history(args.history))
    if args.out is None:
        write_candidates_table(frontier, None, out=sys.stdout)
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_candidates_table(frontier, args.out)
    write_manifest(args.out, args)
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    frontier = pareto_frontier(read_history(args.history))
    picks = select_at_latency(frontier, args.targets)
    for target, pick in zip(args.targets, picks):
        if pick is None:
            logger.warning(
                f"No frontier candidate at or under {target} ms", extra={"target_ms": target}
            )
    if args.out is None:
        write_candidates_table(picks, None, out=sys.stdout)
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_candidates_table(picks, args.out)
    write_manifest(args.out, args)
    return 0


def cmd_sweep_repeats(args: argparse.Namespace) -> int:
    config = SearchConfig(
        space=args.space,
        reward=RewardConfig(w=args.w),
        input_image_size=args.input_image_size,
        evaluator=args.evaluator,
        surrogate=SurrogateSpec(seed=args.surrogate_seed),
        exchange_dir=args.exchange_dir,
        lut_path=args.lut,
    )
    space = resolve_space(config.space)
    history = read_history(args.history)
    base = list(pareto_frontier(history)) if not args.all else [c for c in history if c.ok]
    result = sweep_repeats(
        base,
        args.repeats_values,
        space,
        make_evaluator(config, space),
        _load_lut(config.lut_path, space, config.input_image_size),
        config.reward,
        config.input_image_size,
    )
    rows = result.frontier if args.frontier_only else result.candidates
    if args.out is None:
        write_candidates_table(rows, None, out=sys.stdout)
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_candidates_table(rows, args.out)
    write_manifest(args.out, args, _resolved(config, args.lut))
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    space = resolve_space(args.space)
    genomes = _genomes_from_args(args, space)
    if len(genomes) != 1:
        raise ConfigurationError(f"export takes exactly one genome, got {len(genomes)}")
    graph = expand_network(_plan(genomes[0], space, args))
    text = graph_to_dot(graph) if args.format == "dot" else graph_to_json(graph)
    _write_or_print(text, args.out, args)
    return 0


def cmd_verify_sdo(args: argparse.Namespace) -> int:
    checked, violations = sdo_grid_violations()
    if violations:
        for k, c, f, r in violations:
            print(f"violation\tk={k}\tC={c}\tF={f}\tR={r}")
        print(f"FAIL\t{len(violations)}/{checked}")
        return 1
    print(f"PASS\t{checked} cases")
    return 0


def cmd_lut_synth(args: argparse.Namespace) -> int:
    space = resolve_space(args.space)
    model = LatencyModel(
        ms_per_madd=args.ms_per_madd,
        fixed_ms=args.fixed_ms,
        overhead_ms=args.overhead_ms,
        noise=args.noise,
        seed=args.seed,
    )
    lut = synth_lut_for_space(space, model, args.input_image_size)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    lut.save(args.out)
    write_manifest(args.out, args)
    print(f"entries\t{len(lut.entries)}")
    return 0


# Parser


def _add_space(p: argparse.ArgumentParser) -> None:
    p.add_argument("--space", default=settings.default_space, help="preset name or space JSON file")
    p.add_argument("--input-image-size", type=int, default=settings.input_image_size)


def _add_genome_input(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--genome", help="whitespace-separated tokens")
    group.add_argument("--genomes", type=Path, help="file with one genome per line")


def _float_list(text: str) -> List[float]:
    try:
        return CommaSeparatedFloats._validate(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _int_list(text: str) -> List[int]:
    try:
        return CommaSeparatedInts._validate(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnasfpn-search", description="Latency-aware search over detection-head cells."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace], int], help: str):
        p = sub.add_parser(name, help=help)
        p.set_defaults(handler=handler)
        return p

    p = command("search", cmd_search, "run an architecture search")
    _add_space(p)
    p.add_argument("--budget", type=int, default=settings.budget)
    p.add_argument("--batch-size", type=int, default=settings.batch_size)
    p.add_argument("--controller", choices=["policy-gradient", "random", "evolution"], default=settings.controller)
    p.add_argument("--w", type=float, default=settings.reward_w, help="latency exponent of the reward")
    p.add_argument("--learning-rate", type=float, default=settings.learning_rate)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--surrogate-seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=settings.repeats)
    p.add_argument("--parallelism", type=int, default=settings.parallelism)
    p.add_argument("--lut", type=Path)
    p.add_argument("--evaluator", choices=["surrogate", "external"], default="surrogate")
    p.add_argument("--exchange-dir", type=Path)
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--out", type=Path, help="frontier table")

    p = command("sample", cmd_sample, "sample genomes uniformly")
    _add_space(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = command("cost", cmd_cost, "MAdds, params and latency of genomes")
    _add_space(p)
    _add_genome_input(p)
    p.add_argument("--repeats", type=int, default=settings.repeats)
    p.add_argument("--lut", type=Path)
    p.add_argument("--no-sdo", action="store_true", help="cost with size-dependent ordering off")
    p.add_argument("--json", action="store_true", help="full per-node report")
    p.add_argument("--out", type=Path)

    p = command("cardinality", cmd_cardinality, "exact search-space size")
    _add_space(p)

    p = command("frontier", cmd_frontier, "Pareto frontier of a history file")
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = command("select", cmd_select, "frontier picks under latency targets")
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--targets", type=_float_list, default=list(settings.target_latencies))
    p.add_argument("--out", type=Path)

    p = command("sweep-repeats", cmd_sweep_repeats, "re-cost candidates at several repeat counts")
    _add_space(p)
    p.add_argument("--history", type=Path, required=True)
    p.add_argument(
        "--repeats",
        dest="repeats_values",
        type=_int_list,
        default=list(settings.sweep_repeats),
        help="comma-separated cell repeat counts",
    )
    p.add_argument("--all", action="store_true", help="sweep every ok candidate, not just the frontier")
    p.add_argument("--frontier-only", action="store_true")
    p.add_argument("--w", type=float, default=settings.reward_w)
    p.add_argument("--surrogate-seed", type=int, default=0)
    p.add_argument("--evaluator", choices=["surrogate", "external"], default="surrogate")
    p.add_argument("--exchange-dir", type=Path)
    p.add_argument("--lut", type=Path)
    p.add_argument("--out", type=Path)

    p = command("export", cmd_export, "resolved graph as JSON or DOT")
    _add_space(p)
    _add_genome_input(p)
    p.add_argument("--repeats", type=int, default=settings.repeats)
    p.add_argument("--no-sdo", action="store_true")
    p.add_argument("--format", choices=["json", "dot"], default="json")
    p.add_argument("--out", type=Path)

    p = command("verify-sdo", cmd_verify_sdo, "check size-dependent ordering over a grid")
    p.add_argument("--grid", choices=["default"], default="default")

    lut = sub.add_parser("lut", help="latency table tools")
    lut_sub = lut.add_subparsers(dest="lut_command", required=True)
    p = lut_sub.add_parser("synth", help="synthesize a table covering a space")
    p.set_defaults(handler=cmd_lut_synth)
    _add_space(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--ms-per-madd", type=float, default=settings.lut_ms_per_madd)
    p.add_argument("--fixed-ms", type=float, default=settings.lut_fixed_ms)
    p.add_argument("--overhead-ms", type=float, default=settings.lut_overhead_ms)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except (SearchEngineError, ValueError, OSError) as e:
        logger.debug(f"Command '{args.command}' failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
