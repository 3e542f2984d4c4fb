"""Static purity analysis: histories over split symbols and an abstract interpreter.

A history is either ``Mixed`` or a finite map from split indices to exact dyadic
coefficients in (0, 1); the empty map means pure. The analysis walks a typed program
from ``main``, inlining every call so each dynamic ``split<M>`` gets its own index,
and checks that every ``cast<P>`` argument ends up with the empty history.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Union

from .syntax import (
    App, Arrow, Bind, BoolLit, Cast, Decl, Entangle, Expr, FunRef, Gate, If, Let, Measure,
    MIXED, PURE, Pair, PairPat, Prod, Purity, QInit, QVal, Quantum, Span, Split, TwistError,
    UnitLit, Var, Wildcard, purity_vars,
)
from .typecheck import TypedProgram

HALF = Fraction(1, 2)


class AnalysisError(TwistError):
    code = "AnalysisError"


class IndexReuse(AnalysisError):
    code = "IndexReuse"


class CastNotPure(AnalysisError):
    code = "CastNotPure"


class MixedLeak(AnalysisError):
    code = "MixedLeak"


# ---------------------------------------------------------------- histories


@dataclass(frozen=True)
class History:
    """``mixed`` absorbs everything; otherwise ``terms`` holds (index, coefficient) pairs."""

    terms: tuple[tuple[int, Fraction], ...] = ()
    mixed: bool = False

    def __post_init__(self):
        if self.mixed and self.terms:
            raise ValueError("the mixed history carries no terms")
        idx = [j for j, _ in self.terms]
        if idx != sorted(set(idx)):
            raise ValueError("history indices must be sorted and distinct")
        for j, c in self.terms:
            if not isinstance(c, Fraction) or not 0 < c < 1:
                raise ValueError(f"coefficient {c} of x{j} outside (0, 1)")
            d = c.denominator
            if d & (d - 1):
                raise ValueError(f"coefficient {c} of x{j} is not dyadic")

    @classmethod
    def of(cls, coeffs: dict[int, Fraction]) -> "History":
        return cls(tuple(sorted((j, Fraction(c)) for j, c in coeffs.items() if c != 0)))

    @property
    def is_pure(self) -> bool:
        return not self.mixed and not self.terms

    def as_dict(self) -> dict[int, Fraction]:
        return dict(self.terms)

    def __str__(self) -> str:
        if self.mixed:
            return "M"
        if not self.terms:
            return "P"
        return " + ".join(f"{c}*x{j}" for j, c in self.terms)

    def to_json(self) -> Union[str, dict[str, str]]:
        if self.mixed:
            return "M"
        return {f"x{j}": str(c) for j, c in self.terms}


PURE_H = History()
MIXED_H = History(mixed=True)


def h_split(f: History, j: int) -> History:
    """Half of f plus half of the fresh symbol x_j."""
    if f.mixed:
        return MIXED_H
    coeffs = f.as_dict()
    if j in coeffs:
        raise IndexReuse(f"split index x{j} already occurs in {f}")
    out = {i: c * HALF for i, c in coeffs.items()}
    out[j] = HALF
    return History.of(out)


def h_combine(f: History, g: History) -> History:
    """Termwise sum keeping fractional parts, so halves of one split cancel."""
    if f.mixed or g.mixed:
        return MIXED_H
    out = f.as_dict()
    for j, c in g.terms:
        out[j] = (out.get(j, Fraction(0)) + c) % 1
    return History.of(out)


class SplitIndexGen:
    def __init__(self, start: int = 1):
        self._next = start

    def fresh(self) -> int:
        j = self._next
        self._next += 1
        return j

    @property
    def used(self) -> int:
        return self._next - 1


# ---------------------------------------------------------------- abstract values


@dataclass(frozen=True)
class AClassical:
    pass


@dataclass(frozen=True)
class AQuantum:
    history: History


@dataclass(frozen=True)
class APair:
    fst: "AValue"
    snd: "AValue"


@dataclass(frozen=True)
class AFun:
    name: str
    inst: tuple[tuple[str, Purity], ...]


@dataclass(frozen=True)
class AOpaque:
    """A function parameter whose body is unknown (standalone analysis only)."""

    ret: object


AValue = Union[AClassical, AQuantum, APair, AFun, AOpaque]
CLASSICAL = AClassical()


def _top(t, gen: SplitIndexGen, purity_env: dict[str, Purity]) -> AValue:
    """Abstract value for an unknown input of type t: P leaves pure, M leaves half a split."""
    if isinstance(t, Quantum):
        p = purity_env.get(t.purity.name, MIXED) if t.purity.is_var else t.purity
        return AQuantum(PURE_H if p == PURE else h_split(PURE_H, gen.fresh()))
    if isinstance(t, Prod):
        return APair(_top(t.fst, gen, purity_env), _top(t.snd, gen, purity_env))
    if isinstance(t, Arrow):
        return AOpaque(t.ret)
    return CLASSICAL


# ---------------------------------------------------------------- report


@dataclass
class SiteResult:
    kind: str  # "cast" or "split"
    function: str
    span: Span
    ok: bool
    residual: History

    @property
    def line(self) -> int:
        return self.span[0] if self.span else 0

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "function": self.function, "line": self.line,
            "col": self.span[1] if self.span else 0,
            "verdict": "pass" if self.ok else "fail", "residual": self.residual.to_json(),
        }


@dataclass
class AnalysisReport:
    sites: list[SiteResult] = field(default_factory=list)
    histories: list[tuple[str, str, Span, History]] = field(default_factory=list)
    errors: list[AnalysisError] = field(default_factory=list)
    splits: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors

    def cast_sites(self) -> list[SiteResult]:
        return [s for s in self.sites if s.kind == "cast"]

    def merged_sites(self) -> list[SiteResult]:
        """One entry per source site; a site fails if any inlined visit failed."""
        merged: dict[tuple, SiteResult] = {}
        for s in self.sites:
            key = (s.kind, s.function, s.span)
            prev = merged.get(key)
            if prev is None or (prev.ok and not s.ok):
                merged[key] = s
        return list(merged.values())

    def raise_first(self) -> None:
        if self.errors:
            raise self.errors[0]

    def to_json(self) -> dict:
        return {
            "verdict": "pass" if self.ok else "fail",
            "splits": self.splits,
            "sites": [s.to_json() for s in self.merged_sites()],
            "errors": [{"code": e.code, "message": e.message,
                        "line": e.span[0] if e.span else 0} for e in self.errors],
        }


# ---------------------------------------------------------------- abstract interpreter


class Analyzer:
    def __init__(self, tp: TypedProgram, report: AnalysisReport, gen: SplitIndexGen):
        self.decls = {d.name: d for d in tp.program.decls}
        self.report = report
        self.gen = gen
        self.reached: set[str] = set()

    def _purity(self, p: Purity, penv: dict[str, Purity]) -> Purity:
        return penv.get(p.name, MIXED) if p.is_var else p

    def call(self, name: str, inst: dict[str, Purity], arg: AValue) -> AValue:
        d = self.decls[name]
        self.reached.add(name)
        env: dict[str, AValue] = {}
        if isinstance(d.param, Bind):
            env[d.param.name] = arg
        return self.eval(d.body, env, inst, name)

    def eval(self, e: Expr, env: dict[str, AValue], penv: dict[str, Purity], fn: str) -> AValue:
        if isinstance(e, Var):
            return env[e.name]
        if isinstance(e, FunRef):
            return AFun(e.name, tuple((k, self._purity(v, penv)) for k, v in e.inst))
        if isinstance(e, (UnitLit, BoolLit, Measure)):
            if isinstance(e, Measure):
                self.eval(e.arg, env, penv, fn)
            return CLASSICAL
        if isinstance(e, QInit):
            return AQuantum(PURE_H)
        if isinstance(e, QVal):
            return AQuantum(PURE_H if e.purity == PURE else MIXED_H)
        if isinstance(e, Pair):
            return APair(self.eval(e.fst, env, penv, fn), self.eval(e.snd, env, penv, fn))
        if isinstance(e, Gate):
            return self.eval(e.arg, env, penv, fn)
        if isinstance(e, App):
            f = self.eval(e.fn, env, penv, fn)
            a = self.eval(e.arg, env, penv, fn)
            if isinstance(f, AFun):
                return self.call(f.name, dict(f.inst), a)
            if isinstance(f, AOpaque):
                return _top(f.ret, self.gen, penv)
            raise AnalysisError(f"cannot apply abstract value {f}", e.span)
        if isinstance(e, Let):
            v = self.eval(e.bound, env, penv, fn)
            env2 = dict(env)
            self._bind(e.pattern, v, env2, fn)
            return self.eval(e.body, env2, penv, fn)
        if isinstance(e, If):
            self.eval(e.cond, env, penv, fn)
            a = self.eval(e.then, env, penv, fn)
            self.eval(e.else_, env, penv, fn)
            return AQuantum(MIXED_H) if isinstance(a, AQuantum) else CLASSICAL
        if isinstance(e, Entangle):
            v = self.eval(e.arg, env, penv, fn)
            return AQuantum(h_combine(self._hist(v.fst), self._hist(v.snd)))
        if isinstance(e, Split):
            h = self._hist(self.eval(e.arg, env, penv, fn))
            if self._purity(e.purity, penv) == PURE:
                ok = h.is_pure
                self.report.sites.append(SiteResult("split", fn, e.span, ok, h))
                if not ok:
                    self.report.errors.append(MixedLeak(
                        f"split<P> in '{fn}' applied to a value with history {h}", e.span))
                return APair(AQuantum(PURE_H), AQuantum(PURE_H))
            g = h_split(h, self.gen.fresh())
            self.report.splits += 1
            return APair(AQuantum(g), AQuantum(g))
        if isinstance(e, Cast):
            h = self._hist(self.eval(e.arg, env, penv, fn))
            if self._purity(e.purity, penv) == PURE:
                ok = h.is_pure
                self.report.sites.append(SiteResult("cast", fn, e.span, ok, h))
                if not ok:
                    self.report.errors.append(CastNotPure(
                        f"cast<P> in '{fn}' applied to a value with history {h}", e.span))
                return AQuantum(PURE_H)
            return AQuantum(h)
        raise AnalysisError(f"unexpected expression {type(e).__name__}", e.span)

    def _hist(self, v: AValue) -> History:
        if not isinstance(v, AQuantum):
            raise AnalysisError(f"expected a quantum value, got {v}")
        return v.history

    def _bind(self, pat, v: AValue, env: dict[str, AValue], fn: str) -> None:
        if isinstance(pat, PairPat):
            if not isinstance(v, APair):
                raise AnalysisError(f"pattern expects a pair, got {v}", pat.span)
            self._bind(pat.left, v.fst, env, fn)
            self._bind(pat.right, v.snd, env, fn)
        elif isinstance(pat, Bind):
            env[pat.name] = v
            if isinstance(v, AQuantum):
                self.report.histories.append((fn, pat.name, pat.span, v.history))
        elif not isinstance(pat, Wildcard):  # pragma: no cover
            raise AnalysisError(f"unexpected pattern {pat}")


def _assignments(names: Iterable[str]) -> list[dict[str, Purity]]:
    names = sorted(names)
    return [dict(zip(names, combo)) for combo in itertools.product((PURE, MIXED), repeat=len(names))]


def analyze_standalone(tp: TypedProgram, d: Decl, report: AnalysisReport,
                       gen: SplitIndexGen) -> set[str]:
    """Analyze ``d`` for every purity assignment with unknown inputs; returns reached names."""
    an = Analyzer(tp, report, gen)
    s = tp.schemes[d.name]
    for penv in _assignments(purity_vars(s.param)):
        arg = _top(s.param, gen, penv)
        an.call(d.name, penv, arg)
    return an.reached


def analyze_program(tp: TypedProgram, entry: str = "main") -> AnalysisReport:
    """Run the analysis from ``entry`` and then over every function it never reaches."""
    report = AnalysisReport()
    gen = SplitIndexGen()
    reached: set[str] = set()
    names = [d.name for d in tp.program.decls]
    if entry in names:
        reached |= analyze_standalone(tp, tp.decl(entry), report, gen)
    for d in tp.program.decls:
        if d.name not in reached:
            reached |= analyze_standalone(tp, d, report, gen)
    return report
