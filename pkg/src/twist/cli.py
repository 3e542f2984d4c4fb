"""Command-line driver: check, analyze, run, verify, bench and corpus regression."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import statistics
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import corpus
from .analysis import AnalysisReport, analyze_program
from .density import DEFAULT_MAX_QUBITS as MIXED_CAP
from .density import DensityError
from .interpreter import (
    Bottom, InterpreterError, SplitAbort, check_agreement, enumerate_executions, eval_denot,
    run_pure, value_to_json,
)
from .qstate import DEFAULT_TOL, QStateError
from .syntax import ParseError, TwistError, desugar, format_type, parse_program
from .typecheck import TypedProgram, check_program

EXIT_OK, EXIT_TYPE, EXIT_STATIC, EXIT_DYNAMIC, EXIT_PARSE = 0, 1, 2, 3, 4
EXIT_MISMATCH, EXIT_CONFIG = 5, 6
PURE_CAP = 24
CROSS_CHECK_QUBITS = 10


class ConfigError(Exception):
    pass


class FrontEndError(Exception):
    def __init__(self, err: TwistError, exit_code: int):
        super().__init__(err.message)
        self.err = err
        self.exit_code = exit_code


def compile_source(source: str) -> TypedProgram:
    """Parse, desugar and typecheck; raises FrontEndError carrying the exit code."""
    try:
        prog = desugar(parse_program(source))
    except ParseError as e:
        raise FrontEndError(e, EXIT_PARSE) from e
    except TwistError as e:
        raise FrontEndError(e, EXIT_TYPE) from e
    try:
        return check_program(prog)
    except TwistError as e:
        raise FrontEndError(e, EXIT_TYPE) from e


def resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("TWIST_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"TWIST_SEED={env!r} is not an integer") from None
    return 0


# ---------------------------------------------------------------- verify


@dataclass
class VerifyReport:
    name: str
    qubits: Optional[int] = None
    typecheck: str = "skipped"
    static: str = "skipped"
    dynamic: str = "skipped"
    mode: Optional[str] = None
    details: list[str] = field(default_factory=list)
    exit_code: int = EXIT_OK

    def to_json(self) -> dict:
        return asdict(self)

    def cells(self) -> list[str]:
        dyn = _mark(self.dynamic)
        if self.mode == "mixed" and self.dynamic != "skipped":
            dyn += " (mixed)"
        return [self.name, "" if self.qubits is None else str(self.qubits),
                _mark(self.typecheck), _mark(self.static), dyn]


def _mark(verdict: str) -> str:
    return {"pass": "ok", "fail": "FAIL", "skipped": "N/A"}[verdict]


def verify_source(source: str, name: str, *, mode: str = "auto", seed: int = 0,
                  tol: float = DEFAULT_TOL, max_qubits: Optional[int] = None,
                  cross_check: bool = True) -> VerifyReport:
    """Type check, then static analysis, then one dynamic check.

    ``auto`` runs the sampled pure-state checker when the analysis passes and the
    mixed-state denotation otherwise. Later stages are skipped after a type error,
    and ``pure`` mode never executes a program whose analysis failed.
    """
    rep = VerifyReport(name)
    try:
        tp = compile_source(source)
    except FrontEndError as e:
        rep.typecheck = "fail"
        rep.details.append(e.err.render(name))
        rep.exit_code = e.exit_code
        return rep
    rep.typecheck = "pass"
    analysis = analyze_program(tp)
    rep.static = "pass" if analysis.ok else "fail"
    for err in analysis.errors:
        rep.details.append(err.render(name))
    if mode == "auto":
        mode = "pure" if analysis.ok else "mixed"
    rep.mode = mode
    if mode == "pure" and not analysis.ok:
        rep.exit_code = EXIT_STATIC
        return rep
    if mode == "pure":
        _dynamic_pure(rep, tp, name, seed, tol, max_qubits or PURE_CAP)
        if cross_check and rep.qubits is not None and rep.qubits <= CROSS_CHECK_QUBITS:
            _cross_check(rep, tp, tol)
    else:
        _dynamic_mixed(rep, tp, name, tol, max_qubits or MIXED_CAP)
    if rep.dynamic == "fail":
        rep.exit_code = EXIT_DYNAMIC
    elif rep.dynamic == "skipped":
        rep.exit_code = EXIT_DYNAMIC
    return rep


def _dynamic_pure(rep: VerifyReport, tp, name, seed, tol, cap) -> None:
    try:
        r = run_pure(tp, seed, tol=tol, max_qubits=cap)
        rep.dynamic = "pass"
        rep.qubits = r.peak_qubits
        rep.details.append(f"pure run: {len(r.events)} split checks, seed {seed}")
    except SplitAbort as e:
        rep.dynamic = "fail"
        rep.details.append(e.render(name))
    except (InterpreterError, QStateError) as e:
        rep.details.append(f"pure run did not complete: {e}")


def _dynamic_mixed(rep: VerifyReport, tp, name, tol, cap) -> None:
    try:
        d = eval_denot(tp, max_qubits=cap, tol=tol)
        rep.dynamic = "pass"
        rep.qubits = d.peak_qubits
        rep.details.append(f"mixed denotation: {len(d.events)} assertions hold, trace {d.rho.trace():.6g}")
    except Bottom as e:
        rep.dynamic = "fail"
        rep.details.append(e.render(name))
    except (InterpreterError, DensityError) as e:
        rep.details.append(f"mixed denotation did not complete: {e}")


def _cross_check(rep: VerifyReport, tp, tol) -> None:
    """Evaluate the denotation too; it decides every assertion over all executions."""
    try:
        eval_denot(tp, tol=tol)
        rep.details.append("mixed cross-check: all assertions hold")
    except Bottom as e:
        rep.details.append(f"mixed cross-check: {e.kind} assertion fails at line "
                           f"{e.span[0] if e.span else 0}")
    except (InterpreterError, DensityError) as e:
        rep.details.append(f"mixed cross-check skipped: {e}")


def format_table(reports: Sequence[VerifyReport]) -> str:
    head = ["program", "qubits", "types", "static", "dynamic"]
    rows = [head] + [r.cells() for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------- corpus


@dataclass
class RowDiff:
    name: str
    column: str
    expected: object
    actual: object


COMPARED = ("types", "static", "dynamic", "dynamic_mode")


def _row_verdicts(rep: VerifyReport) -> dict:
    return {"types": rep.typecheck, "static": rep.static, "dynamic": rep.dynamic,
            "dynamic_mode": rep.mode if rep.dynamic != "skipped" else None}


def run_corpus(expected: dict, *, seed: int = 0, tol: float = DEFAULT_TOL,
               overrides: Optional[dict[str, str]] = None,
               cross_check: bool = False) -> tuple[list[VerifyReport], list[RowDiff]]:
    """Verify every golden row; ``overrides`` maps row names to replacement sources."""
    overrides = overrides or {}
    reports, diffs = [], []
    for bench, row in zip(corpus.benchmarks(expected), expected["rows"]):
        source = overrides.get(bench.name)
        if source is None:
            source = bench.source()
        rep = verify_source(source, bench.name, seed=seed, tol=tol, cross_check=cross_check)
        reports.append(rep)
        got = _row_verdicts(rep)
        for col in COMPARED:
            if got[col] != row.get(col):
                diffs.append(RowDiff(bench.name, col, row.get(col), got[col]))
    return reports, diffs


def load_expected(path: Optional[str]) -> dict:
    try:
        data = corpus.load_golden(path)
    except FileNotFoundError:
        raise ConfigError(f"golden file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"golden file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict) or not isinstance(data.get("rows"), list):
        raise ConfigError("golden file must be an object with a 'rows' list")
    return data


# ---------------------------------------------------------------- bench


@dataclass
class BenchRecord:
    name: str
    n: Optional[int]
    mean_total_s: Optional[float]
    sem_total: Optional[float]
    mean_verify_s: Optional[float]
    overhead_pct: Optional[float]
    reps: int
    seed: int
    mode: str
    error: str = ""

    @property
    def overhead_fraction(self) -> Optional[float]:
        return None if self.overhead_pct is None else self.overhead_pct / 100


BENCH_COLUMNS = ("name", "n", "mean_total_s", "sem_total", "mean_verify_s", "overhead_pct",
                 "reps", "seed", "mode", "error")


def bench_program(tp: TypedProgram, name: str, *, reps: int = 10, seed: int = 0,
                  mode: str = "pure", tol: float = DEFAULT_TOL,
                  max_qubits: Optional[int] = None) -> BenchRecord:
    """Mean wall time and verification time over ``reps`` sequential runs."""
    totals, verifies, n = [], [], None
    try:
        for i in range(-1, reps):  # rep -1 warms caches and is discarded
            if mode == "pure":
                r = run_pure(tp, seed + max(i, 0), tol=tol, max_qubits=max_qubits or PURE_CAP)
            else:
                r = eval_denot(tp, tol=tol, max_qubits=max_qubits or MIXED_CAP)
            if i < 0:
                continue
            totals.append(r.total_seconds)
            verifies.append(r.verify_seconds)
            n = r.peak_qubits
    except (InterpreterError, DensityError, QStateError, MemoryError) as e:
        return BenchRecord(name, n, None, None, None, None, reps, seed, mode,
                           f"{type(e).__name__}: {e}")
    mean_total = statistics.fmean(totals)
    sem = statistics.stdev(totals) / math.sqrt(reps) if reps > 1 else None
    overhead = 100 * sum(verifies) / sum(totals) if sum(totals) > 0 else 0.0
    return BenchRecord(name, n, mean_total, sem, statistics.fmean(verifies), overhead,
                       reps, seed, mode)


def write_bench_csv(records: Sequence[BenchRecord], out) -> None:
    w = csv.writer(out)
    w.writerow(BENCH_COLUMNS)
    for r in records:
        row = asdict(r)
        w.writerow(["" if row[c] is None else row[c] for c in BENCH_COLUMNS])


def _bench_targets(paths: Sequence[str], sizes: Sequence[int], not_inverse: bool):
    for p in paths:
        yield os.path.basename(p), lambda p=p: _read(p)
    for n in sizes:
        label = f"ModMul({n})" + ("-NotInverse" if not_inverse else "")
        yield label, lambda n=n: corpus.modmul_source(n, not_inverse)


# ---------------------------------------------------------------- commands


def _read(path: str) -> str:
    try:
        with open(path) as f:
            return f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None


def _emit(args, text: str) -> None:
    if args.out:
        with open(args.out, "w") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def _front_end(args, source: str) -> Optional[TypedProgram]:
    try:
        return compile_source(source)
    except FrontEndError as e:
        print(e.err.render(args.path), file=sys.stderr)
        args.exit_code = e.exit_code
        return None


def cmd_check(args) -> int:
    tp = _front_end(args, _read(args.path))
    if tp is None:
        return args.exit_code
    sigs = {d.name: f"{format_type(d.param_type)} -> {format_type(d.ret)}"
            for d in tp.program.decls}
    if args.json:
        _emit(args, json.dumps({"verdict": "pass", "functions": sigs}, indent=2))
    else:
        _emit(args, "\n".join(f"{k} : {v}" for k, v in sigs.items()))
    return EXIT_OK


def _analysis_text(rep: AnalysisReport, path: str) -> str:
    lines = []
    for s in rep.merged_sites():
        verdict = "pass" if s.ok else "FAIL"
        lines.append(f"{s.kind}<P> in {s.function} at line {s.line}: {verdict} (history {s.residual})")
    for e in rep.errors:
        lines.append(e.render(path))
    lines.append("static analysis: " + ("pass" if rep.ok else "FAIL"))
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    tp = _front_end(args, _read(args.path))
    if tp is None:
        return args.exit_code
    rep = analyze_program(tp)
    _emit(args, json.dumps(rep.to_json(), indent=2) if args.json else _analysis_text(rep, args.path))
    return EXIT_OK if rep.ok else EXIT_STATIC


def cmd_run(args) -> int:
    tp = _front_end(args, _read(args.path))
    if tp is None:
        return args.exit_code
    seed = resolve_seed(args.seed)
    if args.mode == "pure" and not args.unsafe_skip_analysis:
        rep = analyze_program(tp)
        if not rep.ok:
            print(_analysis_text(rep, args.path), file=sys.stderr)
            print("refusing to run the pure-state simulator on a program the static analysis "
                  "rejects; use --mode mixed, or --unsafe-skip-analysis", file=sys.stderr)
            return EXIT_STATIC
    try:
        if args.mode == "pure":
            r = run_pure(tp, seed, tol=args.tol, max_qubits=args.max_qubits or PURE_CAP)
            out = r.to_json()
        elif args.mode == "enumerate":
            branches = enumerate_executions(tp, tol=args.tol)
            out = {"branches": [{"prob": b.prob, "outcomes": [[k, v] for k, v in b.outcomes.items()],
                                 "value": value_to_json(b.value)} for b in branches]}
        else:
            d = eval_denot(tp, tol=args.tol, max_qubits=args.max_qubits or MIXED_CAP)
            out = {"value": value_to_json(d.value), "qubits": d.rho.names, "trace": d.rho.trace(),
                   "verification": [ev.to_json() for ev in d.events]}
            if d.rho.n <= 6:
                out["rho"] = [[[z.real, z.imag] for z in row] for row in d.rho.mat]
            if args.agreement:
                a = check_agreement(tp, tol=args.tol)
                out["agreement"] = {"ok": a.ok, "deviation": a.deviation, "branches": a.branches}
    except (InterpreterError, DensityError, QStateError) as e:
        print(e.render(args.path) if isinstance(e, TwistError) else f"{args.path}: {e}",
              file=sys.stderr)
        if isinstance(e, SplitAbort):
            print(f"schmidt coefficients: {[round(float(c), 6) for c in e.coefficients]}", file=sys.stderr)
        return EXIT_DYNAMIC
    _emit(args, json.dumps(out, indent=2 if args.pretty else None))
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = resolve_seed(args.seed)
    rep = verify_source(_read(args.path), args.path, mode=args.mode, seed=seed, tol=args.tol,
                        max_qubits=args.max_qubits, cross_check=not args.no_cross_check)
    if args.json:
        _emit(args, json.dumps(rep.to_json(), indent=2))
    else:
        _emit(args, format_table([rep]) + "\n" + "\n".join("  " + d for d in rep.details))
    return rep.exit_code


def cmd_bench(args) -> int:
    seed = resolve_seed(args.seed)
    records = []
    for label, load in _bench_targets(args.paths, args.modmul, args.not_inverse):
        try:
            tp = compile_source(load())
        except FrontEndError as e:
            records.append(BenchRecord(label, None, None, None, None, None, args.reps, seed,
                                       args.mode, e.err.render(label)))
            continue
        if args.mode == "pure" and not analyze_program(tp).ok:
            records.append(BenchRecord(label, None, None, None, None, None, args.reps, seed,
                                       args.mode, "static analysis failed"))
            continue
        records.append(bench_program(tp, label, reps=args.reps, seed=seed, mode=args.mode,
                                     tol=args.tol, max_qubits=args.max_qubits))
    buf = io.StringIO()
    write_bench_csv(records, buf)
    _emit(args, buf.getvalue().rstrip("\n"))
    return EXIT_OK


def cmd_corpus(args) -> int:
    seed = resolve_seed(args.seed)
    expected = load_expected(args.expected)
    reports, diffs = run_corpus(expected, seed=seed, tol=args.tol, cross_check=args.cross_check)
    if args.json:
        text = json.dumps({"rows": [r.to_json() for r in reports],
                           "diffs": [asdict(d) for d in diffs]}, indent=2)
    else:
        text = format_table(reports)
        if diffs:
            text += "\n\nmismatches against the golden table:\n" + "\n".join(
                f"  {d.name}: {d.column} expected {d.expected}, got {d.actual}" for d in diffs)
        else:
            text += f"\n\nall {len(reports)} rows match the golden table"
    _emit(args, text)
    return EXIT_MISMATCH if diffs else EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (falls back to $TWIST_SEED, then 0)")
    common.add_argument("--tol", type=float, default=DEFAULT_TOL, help="separability tolerance")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--out", help="write output to this file")
    common.add_argument("--max-qubits", type=int, default=None, help="simulator qubit cap")

    p = argparse.ArgumentParser(prog="twist", description="Type check, analyze, run and verify "
                                "quantum programs with purity assertions.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("check", parents=[common], help="type check a program")
    s.add_argument("path")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("analyze", parents=[common], help="static purity analysis")
    s.add_argument("path")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("run", parents=[common], help="execute a program")
    s.add_argument("path")
    s.add_argument("--mode", choices=("pure", "mixed", "enumerate"), default="pure")
    s.add_argument("--unsafe-skip-analysis", action="store_true",
                   help="run the pure simulator even when the static analysis fails")
    s.add_argument("--agreement", action="store_true",
                   help="with --mode mixed, also compare against enumerated executions")
    s.add_argument("--pretty", action="store_true", help="indent the JSON output")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", parents=[common], help="type check, analyze and run checks")
    s.add_argument("path")
    s.add_argument("--mode", choices=("auto", "pure", "mixed"), default="auto")
    s.add_argument("--no-cross-check", action="store_true",
                   help="skip the mixed-state cross-check of small pure runs")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", parents=[common], help="time runs and verification overhead")
    s.add_argument("paths", nargs="*")
    s.add_argument("--modmul", type=int, nargs="*", default=[], metavar="N",
                   help="generated modular multiplication sizes")
    s.add_argument("--not-inverse", action="store_true", help="bench the faulty variant")
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--mode", choices=("pure", "mixed"), default="pure")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("corpus", parents=[common], help="verify the bundled benchmarks")
    s.add_argument("--expected", default=None, help="golden verdict file (default: bundled)")
    s.add_argument("--cross-check", action="store_true")
    s.set_defaults(func=cmd_corpus)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "reps", 1) < 1:
        print("twist: --reps must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"twist: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
