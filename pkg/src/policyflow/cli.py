"""Command-line interface. Exit codes: 0 ok, 1 findings, 2 usage or input error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .bpmn import parse_bpmn, serialize_bpmn
from .cohort import CohortSpec, generate as generate_cohort, load_csv, save_csv
from .engine import ExecutionTrace, augment, run_cohort, write_traces
from .errors import PolicyFlowError
from .pipeline import PipelineConfig, load_run, make_backend, render_report, run_pipeline
from .provider import GenerationRequest, generate
from .repair import RepairStatus, repair_loop
from .schema import PatientSchema
from .validation import validate

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _schema(path: str) -> PatientSchema:
    try:
        return PatientSchema.from_json(_read(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise _UsageError(f"invalid schema {path}: {exc}") from None


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_validate(args) -> int:
    model = parse_bpmn(_read(args.model))
    report = validate(model, _schema(args.schema))
    print(report.to_json())
    return EXIT_OK if report.passed else EXIT_FINDINGS


def cmd_repair(args) -> int:
    model = parse_bpmn(_read(args.model))
    outcome = repair_loop(model, _schema(args.schema), args.max_iterations)
    _write(serialize_bpmn(outcome.model), args.output)
    if args.explain:
        for i, a in enumerate(outcome.actions, start=1):
            line = f"{i:>3}. [{a.rule.value}] {a.description}"
            if a.warning:
                line += f"  (warning: {a.warning})"
            print(line, file=sys.stderr)
        for f in outcome.failures:
            print(f"  irreparable: {f}", file=sys.stderr)
        print(f"status: {outcome.status.value} after {outcome.iterations} iteration(s)", file=sys.stderr)
    if args.actions:
        Path(args.actions).write_text(outcome.actions_json(), encoding="utf-8")
    return EXIT_OK if outcome.status is RepairStatus.REPAIRED else EXIT_FINDINGS


def cmd_augment(args) -> int:
    model = parse_bpmn(_read(args.model))
    schema = _schema(args.schema) if args.schema else None
    _write(serialize_bpmn(augment(model, schema)), args.output)
    return EXIT_OK


def cmd_run(args) -> int:
    schema = _schema(args.schema)
    model = augment(parse_bpmn(_read(args.model)), schema)
    cohort = load_csv(args.cohort, schema)
    results = run_cohort(model, cohort, schema)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fp:
            write_traces(results, fp)
    else:
        write_traces(results, sys.stdout)
    return EXIT_OK if all(isinstance(r, ExecutionTrace) for r in results) else EXIT_FINDINGS


def cmd_cohort(args) -> int:
    schema = _schema(args.schema)
    eps = json.loads(args.epsilon) if args.epsilon else {}
    cohort = generate_cohort(CohortSpec(schema, args.size, args.seed, eps))
    save_csv(cohort, args.output, schema)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = PipelineConfig.load(args.config)
    schema = PatientSchema.load(cfg.schema_path)
    narrative = cfg.narrative_path.read_text(encoding="utf-8") if cfg.narrative_path else ""
    count = args.count or cfg.M
    cands = generate(GenerationRequest(narrative, schema, count), make_backend(cfg.provider), cfg.parallelism)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(count)))
    for c in cands:
        if c.ok:
            (out / f"{c.slot + 1:0{width}d}.bpmn").write_text(c.raw_xml, encoding="utf-8")
        else:
            print(f"slot {c.slot}: {c.error}", file=sys.stderr)
    return EXIT_OK if not cands.failures else EXIT_FINDINGS


def cmd_pipeline(args) -> int:
    run = run_pipeline(PipelineConfig.load(args.config), args.run_name)
    print(run.directory)
    return EXIT_OK


def cmd_report(args) -> int:
    dist, agreement = load_run(args.run_dir)
    if args.format == "json":
        sys.stdout.write(json.dumps({"distribution": dist, "agreement": agreement},
                                    indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(render_report(dist, agreement))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policyflow", description="Validate, repair, execute and evaluate "
                                "data-aware BPMN policy models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a model against rules R1-R8")
    s.add_argument("model")
    s.add_argument("--schema", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("repair", help="run the validate-repair loop")
    s.add_argument("model")
    s.add_argument("--schema", required=True)
    s.add_argument("-o", "--output")
    s.add_argument("--max-iterations", type=int, default=5)
    s.add_argument("--explain", action="store_true", help="print the repair actions to stderr")
    s.add_argument("--actions", help="write the action log as JSON")
    s.set_defaults(func=cmd_repair)

    s = sub.add_parser("augment", help="convert a compliant model into an executable one")
    s.add_argument("model")
    s.add_argument("--schema")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("run", help="execute a model over a cohort CSV; writes JSON-lines traces")
    s.add_argument("model")
    s.add_argument("--schema", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("cohort", help="generate a synthetic threshold-stratified cohort CSV")
    s.add_argument("--schema", required=True)
    s.add_argument("--size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", help='JSON object of per-column boundary offsets, e.g. {"age": 1}')
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_cohort)

    s = sub.add_parser("generate", help="fetch candidate models from the configured provider")
    s.add_argument("--config", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("pipeline", help="run the full batch evaluation")
    s.add_argument("--config", required=True)
    s.add_argument("--run-name", help="run directory name (default: UTC timestamp)")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("report", help="render a finished run")
    s.add_argument("run_dir")
    s.add_argument("--format", choices=("json", "table"), default="table")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except PolicyFlowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
