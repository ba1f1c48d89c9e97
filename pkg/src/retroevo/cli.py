"""Command-line entry point: plan, validate, search and design.

Exit codes: 0 solved (or top-1 synthesizable), 2 unsolved, 1 usage or
input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import TOY_WORLDS, __version__, toy_dir
from .design import DesignConfig, make_oracle, run_designer
from .evolve import DependencyError, PlannerConfig, run_planner
from .molgraph import ParseError, parse_smiles
from .proposer import ProposerConfig, ProposerError, RouteDatabase, load_route_db, make_proposer
from .route import Route, RouteFormatError, evaluate_route, parse_route_block, route_reward
from .search import ProposerPredictor, SearchConfig, run_search
from .stock import load_stock
from .template import TemplateError, load_reaction_db, load_templates

log = logging.getLogger("retroevo")

EXIT_SOLVED, EXIT_ERROR, EXIT_UNSOLVED = 0, 1, 2
SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# argument groups


def _add_deps(p: argparse.ArgumentParser, with_target: bool = True):
    g = p.add_argument_group("inputs")
    if with_target:
        g.add_argument("--target", help="target SMILES")
    g.add_argument("--toy", choices=TOY_WORLDS, help="fill unset inputs from a packaged toy world")
    g.add_argument("--stock", help="purchasable molecules (.smi)")
    g.add_argument("--templates", help="reaction templates (JSONL)")
    g.add_argument("--reactions-db", help="known reactions (JSONL)")
    g.add_argument("--routes-db", help="reference routes (JSONL)")
    g.add_argument("--strict", action="store_true", help="fail on malformed stock lines")


def _add_proposer(p: argparse.ArgumentParser):
    g = p.add_argument_group("proposer")
    g.add_argument("--proposer", choices=("scripted", "http"), default="scripted")
    g.add_argument("--script", help="scripted proposer responses (JSON)")
    g.add_argument("--endpoint", help="chat-completion URL (default $LLM_ENDPOINT)")
    g.add_argument("--api-key", help="bearer token (default $LLM_API_KEY)")
    g.add_argument("--model", default=ProposerConfig.model)
    g.add_argument("--temperature", type=float, default=ProposerConfig.temperature)
    g.add_argument("--max-retries", type=int, default=ProposerConfig.max_retries)
    g.add_argument("--request-timeout", type=float, default=ProposerConfig.timeout)


def _add_planner(p: argparse.ArgumentParser, prefix: str = ""):
    d = PlannerConfig()
    g = p.add_argument_group("planner")
    g.add_argument(f"--{prefix}n-c", type=int, default=d.n_c, help="population size")
    g.add_argument(f"--{prefix}n-o", type=int, default=d.n_o, help="reference routes per prompt")
    g.add_argument(f"--{prefix}num-mutations", type=int, default=d.num_mutations)
    g.add_argument(f"--{prefix}budget", type=int, default=d.budget, help="generations")
    g.add_argument(f"--{prefix}max-calls", type=int, default=d.max_calls, help="proposer call ceiling")
    g.add_argument(f"--{prefix}init-retrieval", choices=("top", "sample"), default=d.init_retrieval)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time-limit", type=float, default=3600.0, help="wall clock seconds")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out", default="retroevo_out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retroevo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="evolve synthesis routes for a target")
    _add_deps(p)
    _add_proposer(p)
    _add_planner(p)
    _add_common(p)

    p = sub.add_parser("validate", help="check a route step by step")
    p.add_argument("--route", required=True, help="route JSON, planner result JSON or <ROUTE> text")
    _add_deps(p)
    p.add_argument("--json", dest="json_out", help="write the report JSON here")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("search", help="step-wise MCTS or Retro*-0 search")
    _add_deps(p)
    _add_proposer(p)
    d = SearchConfig()
    p.add_argument("--algo", choices=("mcts", "retrostar"), default=d.algorithm)
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--k", type=int, default=d.k, help="samples per expansion")
    p.add_argument("--ucb-c", type=float, default=d.ucb_c)
    p.add_argument("--policy-temperature", type=float, default=d.policy_temperature)
    p.add_argument("--value-constant", type=float, default=d.value_constant)
    p.add_argument("--prob-floor", type=float, default=d.prob_floor)
    p.add_argument("--max-depth", type=int, default=d.max_depth)
    _add_common(p)

    p = sub.add_parser("design", help="design synthesizable molecules for an oracle")
    _add_deps(p, with_target=False)
    _add_proposer(p)
    dc = DesignConfig()
    p.add_argument("--oracle", help="isomers:<formula> (default from --toy, else %s)" % dc.oracle)
    p.add_argument("--oracle-budget", type=int, default=dc.oracle_budget)
    p.add_argument("--population", type=int, default=dc.population_size)
    p.add_argument("--max-rounds", type=int, default=dc.max_rounds)
    p.add_argument("--sc-threshold", type=float, default=dc.sc_threshold)
    p.add_argument("--plan-mode", choices=("every_round", "final"), default=dc.plan_mode)
    _add_planner(p, prefix="planner-")
    _add_common(p)
    return parser


# --------------------------------------------------------------------------
# helpers


def _digest(path: str | None) -> str | None:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_inputs(args, require_target: bool = True):
    if getattr(args, "toy", None):
        base = toy_dir(args.toy)
        for attr, name in (("stock", "stock.smi"), ("templates", "templates.jsonl"),
                           ("reactions_db", "reactions.jsonl"), ("routes_db", "routes.jsonl")):
            if getattr(args, attr, None) is None and (base / name).exists():
                setattr(args, attr, str(base / name))
        if hasattr(args, "script") and args.script is None and args.proposer == "scripted":
            name = "search_script.json" if args.command == "search" else "script.json"
            if (base / name).exists():
                args.script = str(base / name)
        if require_target and hasattr(args, "target") and args.target is None \
                and (base / "targets.txt").exists():
            args.target = (base / "targets.txt").read_text().split()[0]
        if getattr(args, "oracle", "x") is None and (base / "oracle.txt").exists():
            args.oracle = (base / "oracle.txt").read_text().strip()
    missing = [f"--{a.replace('_', '-')}" for a in ("stock", "templates", "reactions_db")
               if getattr(args, a, None) is None]
    if require_target and hasattr(args, "target") and args.target is None:
        missing.insert(0, "--target")
    if missing:
        raise UsageError("missing required argument(s): " + ", ".join(missing))


def _load_deps(args):
    stock = load_stock(args.stock, strict=args.strict)
    templates = load_templates(args.templates)
    db = load_reaction_db(args.reactions_db)
    routes = load_route_db(args.routes_db) if args.routes_db else RouteDatabase()
    return stock, templates, db, routes


def _proposer(args):
    if args.proposer == "http":
        endpoint = args.endpoint or os.environ.get("LLM_ENDPOINT")
        if not endpoint:
            raise UsageError("--proposer http needs --endpoint or LLM_ENDPOINT")
        cfg = ProposerConfig("http", endpoint, args.api_key or os.environ.get("LLM_API_KEY"), args.model,
                             args.temperature, args.max_retries, args.request_timeout)
        return make_proposer(cfg), cfg
    if not args.script:
        raise UsageError("--proposer scripted needs --script (or --toy)")
    cfg = ProposerConfig("scripted", temperature=args.temperature)
    return make_proposer(cfg, args.script, args.seed), cfg


def _planner_config(args, prefix: str = "") -> PlannerConfig:
    g = lambda name: getattr(args, prefix + name)  # noqa: E731
    return PlannerConfig(n_c=g("n_c"), n_o=g("n_o"), num_mutations=g("num_mutations"), budget=g("budget"),
                         max_calls=g("max_calls"), time_limit=args.time_limit,
                         parallelism=args.parallelism, seed=args.seed, init_retrieval=g("init_retrieval"))


def _write_json(path: Path, data) -> None:
    data = {"schema_version": SCHEMA_VERSION, **data}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _manifest(args, config: dict, started: str) -> dict:
    inputs = {}
    for attr in ("stock", "templates", "reactions_db", "routes_db", "script"):
        p = getattr(args, attr, None)
        if p:
            inputs[attr] = {"path": str(p), "sha256": _digest(p)}
    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config": config,
        "inputs": inputs,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _report_text(report) -> str:
    lines = [f"target: {report.target}", f"solved: {report.solved}"]
    for v in report.verdicts:
        vec = v.verdict_vector()
        flags = " ".join(f"{k}={'-' if x is None else ('ok' if x else 'FAIL')}" for k, x in vec.items())
        lines.append(f"step {v.index + 1}: {flags} grounding={v.grounding}")
        for msg in v.messages:
            lines.append(f"    {msg}")
    lines.append("frontier: " + ", ".join(report.frontier))
    return "\n".join(lines)


def _public_proposer_config(cfg: ProposerConfig) -> dict:
    d = dict(cfg.__dict__)
    d.pop("api_key", None)
    return d


# --------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    started = _now()
    _resolve_inputs(args)
    stock, templates, db, routes = _load_deps(args)
    proposer, pcfg = _proposer(args)
    config = _planner_config(args)
    t0 = time.monotonic()
    result = run_planner(args.target, config, stock, templates, db, routes, proposer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "result.json", result.to_dict())
    _write_jsonl(out / "run_log.jsonl", result.log)
    _write_json(out / "manifest.json", _manifest(
        args, {"planner": config.to_dict(), "proposer": _public_proposer_config(pcfg)}, started))
    best = result.routes[0] if result.routes else result.population[0]
    print(f"{'solved' if result.solved else 'unsolved'}: {result.target} "
          f"(calls={result.calls}, generations={result.generations}, "
          f"best F={best.reward:.4f}, {time.monotonic() - t0:.2f}s)")
    print(_report_text(best.report))
    return EXIT_SOLVED if result.solved else EXIT_UNSOLVED


def _load_route(path: str, target: str | None) -> Route:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return parse_route_block(text, target=target)
    if isinstance(data, dict) and ("solved_routes" in data or "population" in data):
        cands = data.get("solved_routes") or data.get("population") or []
        if not cands:
            raise RouteFormatError("result file holds no routes")
        data = cands[0]["route"]
    elif isinstance(data, dict) and "route" in data and isinstance(data["route"], dict):
        data = data["route"]
    if isinstance(data, list):
        if target is None:
            raise UsageError("a bare step list needs --target")
        data = {"target": target, "steps": data}
    if target is not None:
        data = dict(data, target=target)
    return Route.from_dict(data)


def cmd_validate(args) -> int:
    _resolve_inputs(args, require_target=False)  # the route file names its target
    stock, templates, db, _ = _load_deps(args)
    route = _load_route(args.route, args.target)
    report = evaluate_route(route, stock, db, templates)
    data = report.to_dict()
    data["reward"] = route_reward(report.frontier, stock=stock)
    if args.json_out:
        _write_json(Path(args.json_out), data)
    print(_report_text(report))
    return EXIT_SOLVED if report.solved else EXIT_UNSOLVED


def cmd_search(args) -> int:
    started = _now()
    _resolve_inputs(args)
    stock, templates, db, _ = _load_deps(args)
    proposer, pcfg = _proposer(args)
    config = SearchConfig(args.algo, args.iterations, args.k, args.ucb_c, args.policy_temperature,
                          args.value_constant, args.prob_floor, args.max_depth, args.time_limit, True, args.seed)
    target = parse_smiles(args.target).canonical_smiles
    predictor = ProposerPredictor(proposer, templates, db, args.k, args.parallelism)
    result = run_search(target, predictor, lambda s: s in stock.smiles, config)
    data = result.to_dict()
    report = evaluate_route(result.to_route(), stock, db, templates) if result.solved else None
    data["report"] = None if report is None else report.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "result.json", data)
    _write_json(out / "manifest.json", _manifest(
        args, {"search": config.to_dict(), "proposer": _public_proposer_config(pcfg)}, started))
    cost = "inf" if not result.solved else f"{result.cost:.6f}"
    print(f"{'solved' if result.solved else 'unsolved'}: {target} ({args.algo}, "
          f"iterations={result.iterations}, cost={cost})")
    if report is not None:
        print(_report_text(report))
    return EXIT_SOLVED if result.solved and report.solved else EXIT_UNSOLVED


def cmd_design(args) -> int:
    started = _now()
    _resolve_inputs(args)
    stock, templates, db, routes = _load_deps(args)
    proposer, pcfg = _proposer(args)
    config = DesignConfig(oracle=args.oracle or DesignConfig.oracle, population_size=args.population,
                          max_rounds=args.max_rounds, oracle_budget=args.oracle_budget,
                          sc_threshold=args.sc_threshold, planner=_planner_config(args, "planner_"),
                          plan_mode=args.plan_mode, seed=args.seed)
    oracle = make_oracle(config.oracle)
    result = run_designer(config, stock, templates, db, routes, proposer, oracle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "result.json", result.to_dict())
    _write_jsonl(out / "archive.jsonl", [e.to_dict() for e in result.archive])
    _write_json(out / "manifest.json", _manifest(
        args, {"design": config.to_dict(), "proposer": _public_proposer_config(pcfg)}, started))
    top = result.top1
    if top is None:
        print("no molecules archived")
        return EXIT_UNSOLVED
    print(f"top-1: {top.smiles} score={top.score:.4f} synthesizable={top.synthesizable} "
          f"(oracle calls={result.oracle_calls}, rounds={result.rounds})")
    return EXIT_SOLVED if top.synthesizable else EXIT_UNSOLVED


COMMANDS = {"plan": cmd_plan, "validate": cmd_validate, "search": cmd_search, "design": cmd_design}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"retroevo: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ParseError, TemplateError, RouteFormatError, DependencyError, ProposerError,
            ValueError) as exc:
        print(f"retroevo: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
