"""Command-line entry point: ``treecoder run|bench|kb|inspect``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import config as cfg
from .domain import format_address, parse_address
from .errors import (
    AddressingError,
    ConfigurationError,
    FixtureError,
    KnowledgeBaseError,
    PoolError,
    TreecoderError,
    ValidationError,
)
from .evaluation import CommandGenerator, CompareMode, PipelineGenerator, discover_fixtures, run_benchmark
from .knowledge import KnowledgeIndex, build_index, format_hits, retrieve, seed_index
from .manifest import load_project
from .pipeline import Pipeline, Stage
from .pool import Kind, ThoughtPool
from .sandbox import Sandbox, SandboxSpec, load_catalog
from .templates import TemplateSet

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130

DATA = Path(str(resources.files("treecoder") / "data"))
BENCH_FIXTURES = DATA / "bench" / "fixtures"
BENCH_SCRIPTS = DATA / "bench" / "scripts"


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML settings file")
    p.add_argument("--backend-decision", dest="backend_decision",
                   help="decision-maker backend: 'scripted' or 'remote,model=M,endpoint=URL,key_env=VAR'")
    p.add_argument("--backend-implementer", dest="backend_implementer", help="implementer backend, same format")
    p.add_argument("--scripted", help="scripted fixture file or directory; selects scripted backends by default")
    p.add_argument("--sandbox", choices=("container", "subprocess"), help="sandbox backend")
    p.add_argument("--sandbox-timeout", dest="sandbox_timeout", type=float, help="seconds per sandbox execution")
    p.add_argument("--catalog", help="runtime image catalog file")
    p.add_argument("--templates", help="directory overriding prompt templates")
    p.add_argument("--run-root", dest="run_root", help="directory holding run directories")
    p.add_argument("--max-retries", dest="max_retries", type=int, help="coder regenerations per function")
    p.add_argument("--parallelism", type=int, help="concurrent module branches / sandbox runs")
    p.add_argument("--assembly", choices=("deterministic", "llm"), help="assembly mode")
    p.add_argument("--no-review", dest="pair_programming", action="store_const", const=False,
                   help="skip the coder's review of tester scripts")
    p.add_argument("--no-kb", dest="knowledge_base", action="store_const", const=False,
                   help="do not retrieve knowledge-base examples")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treecoder", description="Hierarchical multi-agent code generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="generate a project from a manifest")
    run.add_argument("manifest", help="project manifest file")
    run.add_argument("--run-dir", dest="run_dir", help="explicit run directory (default: <run-root>/<id>)")
    run.add_argument("--dry-run", dest="dry_run", action="store_true", help="plan only, no sandbox use")
    _common(run)

    bench = sub.add_parser("bench", help="run the benchmark harness")
    bench.add_argument("fixtures", nargs="?", default=str(BENCH_FIXTURES), help="fixtures root directory")
    bench.add_argument("--compare", choices=[m.value for m in CompareMode], help="output comparison mode")
    bench.add_argument("--generator-cmd", dest="generator_cmd",
                       help="external generator command; {description} {fixture} {output} are substituted")
    bench.add_argument("--out", help="report directory (default: <run-root>/bench)")
    _common(bench)

    kb = sub.add_parser("kb", help="knowledge base tooling")
    kbsub = kb.add_subparsers(dest="kb_command", required=True)
    b = kbsub.add_parser("build", help="embed entries into an index file")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--entries", help="JSONL file of entries")
    src.add_argument("--seed", choices=("team_leader", "coder"), help="use the shipped seed entries")
    b.add_argument("--out", required=True, help="index file to write")
    q = kbsub.add_parser("query", help="top-k retrieval from an index")
    q.add_argument("index", help="index file")
    q.add_argument("text", help="query text")
    q.add_argument("-k", type=int, default=2, help="number of results")

    ins = sub.add_parser("inspect", help="audit a run's thought pool")
    ins.add_argument("run_dir", help="run directory")
    ins.add_argument("--address", default="root", help="node address, e.g. root, 1, 1.0")
    ins.add_argument("--kind", choices=[k.value for k in Kind], help="only records of this kind")
    ins.add_argument("--subtree", action="store_true", help="include descendants of the address")
    ins.add_argument("--payload", action="store_true", help="print full payloads")
    return parser


def _settings(args: argparse.Namespace) -> cfg.Settings:
    flags = {k: v for k, v in vars(args).items() if v is not None}
    return cfg.resolve(flags, os.environ, args.config)


def _fresh_dir(path: Path) -> Path:
    if not path.exists() or not any(path.iterdir()):
        return path
    n = 2
    while Path(f"{path}-{n}").exists():
        n += 1
    return Path(f"{path}-{n}")


def _knowledge(settings: cfg.Settings) -> dict[str, KnowledgeIndex] | None:
    if not settings.knowledge_base:
        return None
    out = {}
    for role, path in (("team_leader", settings.kb_team_leader), ("coder", settings.kb_coder)):
        out[role] = KnowledgeIndex.load(path) if path else seed_index(role)
    return out


def cmd_run(args: argparse.Namespace) -> int:
    settings = _settings(args)
    requirement = load_project(args.manifest)
    run_config = cfg.run_config(settings)
    catalog = load_catalog(settings.catalog)
    run_dir = Path(args.run_dir) if args.run_dir else _fresh_dir(Path(settings.run_root) / requirement.id)
    pipeline = Pipeline(run_config, run_dir, sandbox=Sandbox(settings.parallelism),
                        templates=TemplateSet(settings.templates), catalog=catalog,
                        sandbox_backend=settings.sandbox, knowledge=_knowledge(settings),
                        price_table=settings.prices, input_root=Path(args.manifest).parent)
    result = pipeline.run_project(requirement, stop_after=Stage.PLANNING if args.dry_run else None)
    print(f"run directory: {run_dir}")
    if args.dry_run and result.state.stage is Stage.PLANNING:
        print((run_dir / "plan.txt").read_text(encoding="utf-8"), end="")
        return EXIT_OK
    r = result.report
    print(f"stage: {r['stage']}")
    if r["error"]:
        print(f"error: {r['error']}")
    print(f"modules: {r['counts']['modules']}  functions: {r['counts']['functions']}")
    for m in r["modules"]:
        print(f"  [{m['address']}] {m['name']}: {m['validation']}")
        for f in m["functions"]:
            print(f"    [{f['address']}] {f['name']}: {f['validation']} (attempts {f.get('attempts', 0)})")
    if r["flagged"]:
        print(f"unvalidated: {', '.join(r['flagged'])}")
    cost = r["cost"]
    print(f"cost: {cost['total_cost']:.4f}" if "total_cost" in cost else f"cost: {cost.get('error')}")
    if result.ok:
        print(f"project: {run_dir / 'project' / 'main.py'}")
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_bench(args: argparse.Namespace) -> int:
    if args.scripted is None and args.backend_decision is None and args.generator_cmd is None \
            and args.fixtures == str(BENCH_FIXTURES):
        args.scripted = str(BENCH_SCRIPTS)
    settings = _settings(args)
    try:
        dirs = discover_fixtures(args.fixtures)
    except FixtureError as exc:
        raise UsageError(str(exc)) from None
    if not dirs:
        raise UsageError(f"no fixtures under {args.fixtures}")
    catalog = load_catalog(settings.catalog)
    out = Path(args.out) if args.out else _fresh_dir(Path(settings.run_root) / "bench")
    sandbox = Sandbox(settings.parallelism)
    if args.generator_cmd:
        generator = CommandGenerator(args.generator_cmd)
        method = "external"
    else:
        if settings.scripted is None:
            cfg.backends(settings)  # fail fast on incomplete remote settings
        generator = PipelineGenerator(
            lambda fx: cfg.run_config(settings, fx.id), sandbox=sandbox,
            templates=TemplateSet(settings.templates), catalog=catalog, sandbox_backend=settings.sandbox,
            knowledge=_knowledge(settings), price_table=settings.prices)
        method = "treecoder"
    spec = SandboxSpec(next(iter(catalog)), out / "sandboxes", settings.sandbox_timeout, settings.sandbox, catalog)
    compare = settings.compare if args.compare is None else args.compare
    report = run_benchmark(args.fixtures, generator, sandbox, spec, compare, out_dir=out,
                           price_table=settings.prices, method=method)
    print(report.render_table(), end="")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK if not report.fixture_errors else EXIT_FAILED


def cmd_kb(args: argparse.Namespace) -> int:
    if args.kb_command == "build":
        index = seed_index(args.seed) if args.seed else build_index(Path(args.entries))
        index.save(args.out)
        print(f"indexed {len(index)} entries ({index.embedder_identity}) -> {args.out}")
        return EXIT_OK
    if args.k < 0:
        raise UsageError("-k must be >= 0")
    index = KnowledgeIndex.load(args.index)
    hits = retrieve(index, args.text, args.k)
    for rank, h in enumerate(hits, 1):
        print(f"{rank}. {h.entry.id}  score={h.score:.4f}  {h.entry.task_text.splitlines()[0][:70]}")
    if not hits:
        print("(no results)")
    logger.debug("%s", format_hits(hits))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    journal = Path(args.run_dir) / "pool.jsonl"
    if not journal.is_file():
        raise UsageError(f"no pool journal in {args.run_dir}")
    pool = ThoughtPool.load(journal)
    address = parse_address(args.address)
    if address not in pool.addresses():
        raise UsageError(f"address {args.address!r} has no records in this run")
    records = pool.select(address, args.kind, subtree=args.subtree)
    for r in records:
        summary = r.payload if isinstance(r.payload, str) else r.payload.get("name") or \
            r.payload.get("validation") or r.payload.get("id") or ""
        if isinstance(r.payload, dict) and "hyper" in r.payload and "name" not in r.payload:
            summary = r.payload.get("validation") or r.payload["hyper"].get("module_name", "")
        summary = str(summary).splitlines()[0] if str(summary) else ""
        print(f"#{r.id:<5} {format_address(r.address):<6} {r.kind.value:<16} {r.author}/{r.stage}  {summary[:80]}")
        if args.payload:
            body = r.payload if isinstance(r.payload, str) else r.payload.get("source", r.payload)
            print(body if isinstance(body, str) else repr(body))
    if not records:
        print("(no matching records)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "kb": cmd_kb, "inspect": cmd_inspect}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, AddressingError, ValidationError, FixtureError,
            KnowledgeBaseError, PoolError) as exc:
        print(f"treecoder {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TreecoderError as exc:
        print(f"treecoder {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except KeyboardInterrupt:
        # the pool journal is flushed on every append, so nothing is lost here
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
