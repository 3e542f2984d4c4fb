"""Program execution: sampled pure-state runs, branch enumeration, density denotation.

All evaluators share one environment-based big-step walker and one qubit naming rule:
qubits are named ``q<k>`` from a counter, both arms of an ``if`` start from the same
counter value, and afterwards the counter skips past the larger arm and hands out fresh
names for the result. Because the rule only depends on the program text, an enumerated
branch and the density denotation use the same names, which makes the agreement check
a direct entrywise comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import density as dm
from .density import PartialDensity
from .gates import GateSpec
from .qstate import (
    DEFAULT_TOL, PureState, alloc_qubit, apply_gate, equal_up_to_phase, lambda2,
    measure_qubit, outcome_probability, schmidt_coefficients,
)
from .syntax import (
    App, Bind, BoolLit, BoolT, Cast, Entangle, Expr, FunRef, Gate, If, Let, Measure,
    MIXED, PURE, Pair, PairPat, Prod, Purity, QInit, QPair, QVal, Quantum, QuantumValue, Ref,
    Span, Split, TwistError, UnitLit, Var, Wildcard, children, pattern_names, qtype_size, refs,
    subst_purity,
)
from .typecheck import TypedProgram, check_expr

PRUNE = 1e-12
_UNIT_CUT = np.ones(1)
DEFAULT_BRANCH_POINTS = 20


class InterpreterError(TwistError):
    code = "InterpreterError"


class SplitAbort(InterpreterError):
    code = "SplitAbort"

    def __init__(self, message: str, span: Span = None, coefficients: Sequence[float] = ()):
        super().__init__(message, span)
        self.coefficients = list(coefficients)


class Stuck(InterpreterError):
    code = "Stuck"


class PreservationError(InterpreterError):
    """A reduction step produced a term that no longer has the program's type."""

    code = "Preservation"


class BranchExplosion(InterpreterError):
    code = "BranchExplosion"


class Bottom(InterpreterError):
    """A purity assertion failed in the density denotation."""

    code = "Bottom"

    def __init__(self, message: str, span: Span = None, kind: str = ""):
        super().__init__(message, span)
        self.kind = kind


class UnsupportedBranch(InterpreterError):
    code = "UnsupportedBranch"


# ---------------------------------------------------------------- values


@dataclass(frozen=True)
class FunVal:
    name: str
    inst: tuple[tuple[str, Purity], ...] = ()


@dataclass(frozen=True)
class PairVal:
    fst: "Value"
    snd: "Value"


@dataclass(frozen=True)
class QV:
    q: QuantumValue
    purity: Purity


@dataclass(frozen=True)
class DeferredRef:
    """A measurement outcome kept as the qubit it will be read from."""

    name: str


UNIT_VAL = ()
Value = Union[bool, tuple, FunVal, PairVal, QV, DeferredRef]


def value_refs(v: Value) -> list[str]:
    """Qubits owned by a value, in order."""
    if isinstance(v, QV):
        return refs(v.q)
    if isinstance(v, PairVal):
        return value_refs(v.fst) + value_refs(v.snd)
    return []


def value_to_json(v: Value) -> Any:
    if isinstance(v, bool):
        return v
    if v == UNIT_VAL:
        return None
    if isinstance(v, PairVal):
        return [value_to_json(v.fst), value_to_json(v.snd)]
    if isinstance(v, QV):
        return {"qubits": refs(v.q), "purity": str(v.purity)}
    if isinstance(v, FunVal):
        return {"function": v.name}
    if isinstance(v, DeferredRef):
        return {"deferred": v.name}
    raise TypeError(v)


def _rename_q(q: QuantumValue, mapping: dict[str, str]) -> QuantumValue:
    if isinstance(q, Ref):
        return Ref(mapping.get(q.name, q.name))
    return QPair(_rename_q(q.left, mapping), _rename_q(q.right, mapping))


def _result_names(t) -> int:
    """Fresh names an ``if`` of this type hands out for its result."""
    if isinstance(t, Quantum):
        return qtype_size(t.qtype)
    if isinstance(t, BoolT):
        return 1
    if isinstance(t, Prod):
        return _result_names(t.fst) + _result_names(t.snd)
    return 0


# ---------------------------------------------------------------- allocation sizes


class AllocSizer:
    """Counts the names an expression consumes under the shared naming rule."""

    def __init__(self, tp: TypedProgram):
        self.decls = {d.name: d for d in tp.program.decls}
        self.memo: dict[tuple, tuple[int, Any]] = {}

    def call(self, f: Any, arg: Any) -> tuple[int, Any]:
        if not isinstance(f, str):
            return 0, None
        d = self.decls[f]
        fenv = {d.param.name: arg} if isinstance(d.param, Bind) and arg is not None else {}
        return self.size(d.body, fenv)

    def size(self, e: Expr, fenv: dict[str, Any]) -> tuple[int, Any]:
        """(names consumed, abstract function value) for e; functions are tracked by name."""
        key = (id(e), tuple(sorted(fenv.items())))
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        out = self._size(e, fenv)
        self.memo[key] = out
        return out

    def _size(self, e: Expr, fenv: dict[str, Any]) -> tuple[int, Any]:
        if isinstance(e, QInit):
            return 1, None
        if isinstance(e, Var):
            return 0, fenv.get(e.name)
        if isinstance(e, FunRef):
            return 0, e.name
        if isinstance(e, App):
            nf, f = self.size(e.fn, fenv)
            na, a = self.size(e.arg, fenv)
            nb, r = self.call(f, a)
            return nf + na + nb, r
        if isinstance(e, Pair):
            n1, a = self.size(e.fst, fenv)
            n2, b = self.size(e.snd, fenv)
            return n1 + n2, (a, b) if a is not None or b is not None else None
        if isinstance(e, Let):
            n1, a = self.size(e.bound, fenv)
            inner = dict(fenv)
            for x in pattern_names(e.pattern):
                inner.pop(x, None)
            if isinstance(a, tuple) and isinstance(e.pattern, PairPat):
                for leaf, sub in ((e.pattern.left, a[0]), (e.pattern.right, a[1])):
                    if isinstance(leaf, Bind) and sub is not None:
                        inner[leaf.name] = sub
            n2, r = self.size(e.body, inner)
            return n1 + n2, r
        if isinstance(e, If):
            nc, _ = self.size(e.cond, fenv)
            n1, a = self.size(e.then, fenv)
            n2, b = self.size(e.else_, fenv)
            return nc + max(n1, n2) + _result_names(e.ty), a if a == b else None
        total = 0
        for c in children(e):
            total += self.size(c, fenv)[0]
        return total, None


# ---------------------------------------------------------------- shared walker


@dataclass
class VerifyEvent:
    kind: str
    span: Span
    lambda2: float
    passed: bool
    seconds: float = 0.0

    def to_json(self) -> dict:
        line, col = self.span if self.span else (0, 0)
        return {"site": f"{line}:{col}", "kind": self.kind, "lambda2": self.lambda2,
                "passed": self.passed}


class _Walker:
    """Big-step evaluator over an environment; subclasses supply the quantum primitives."""

    def __init__(self, tp: TypedProgram, sizer: Optional[AllocSizer] = None, counter: int = 0,
                 prefix: str = "q"):
        self.tp = tp
        self.decls = {d.name: d for d in tp.program.decls}
        self.sizer = sizer or AllocSizer(tp)
        self.counter = counter
        self.prefix = prefix
        self.events: list[VerifyEvent] = []

    # -- primitives
    def fresh(self) -> str:
        name = f"{self.prefix}{self.counter}"
        self.counter += 1
        return name

    def alloc(self) -> str:
        raise NotImplementedError

    def gate(self, g: GateSpec, targets: list[str]) -> None:
        raise NotImplementedError

    def measure(self, name: str) -> Value:
        raise NotImplementedError

    def check_split(self, node: Split, left: QuantumValue, right: QuantumValue) -> None:
        raise NotImplementedError

    def check_cast(self, node: Cast, q: QuantumValue) -> None:
        raise NotImplementedError

    def eval_if(self, e: If, cond: Value, env: dict, penv: dict) -> Value:
        raise NotImplementedError

    def before_assertion(self, e: Union[Cast, Split], env: dict, penv: dict) -> None:
        """Called with the configuration just before a P assertion evaluates its argument."""

    # -- evaluation
    def run_main(self, entry: str = "main") -> Value:
        return self.call(FunVal(entry), UNIT_VAL)

    def call(self, f: FunVal, arg: Value) -> Value:
        d = self.decls[f.name]
        env = {d.param.name: arg} if isinstance(d.param, Bind) else {}
        return self.eval(d.body, env, dict(f.inst))

    @staticmethod
    def resolve(p: Purity, penv: dict) -> Purity:
        return penv.get(p.name, MIXED) if p.is_var else p

    def eval(self, e: Expr, env: dict, penv: dict) -> Value:
        while isinstance(e, Let):
            v = self.eval(e.bound, env, penv)
            env = dict(env)
            self.bind(e.pattern, v, env)
            e = e.body
        if isinstance(e, Var):
            return env[e.name]
        if isinstance(e, FunRef):
            return FunVal(e.name, tuple((k, self.resolve(p, penv)) for k, p in e.inst))
        if isinstance(e, UnitLit):
            return UNIT_VAL
        if isinstance(e, BoolLit):
            return e.value
        if isinstance(e, QInit):
            return QV(Ref(self.alloc()), PURE)
        if isinstance(e, QVal):
            return QV(e.q, e.purity)
        if isinstance(e, Pair):
            a = self.eval(e.fst, env, penv)
            return PairVal(a, self.eval(e.snd, env, penv))
        if isinstance(e, App):
            f = self.eval(e.fn, env, penv)
            a = self.eval(e.arg, env, penv)
            if not isinstance(f, FunVal):
                raise Stuck(f"cannot apply {f!r}", e.span)
            return self.call(f, a)
        if isinstance(e, Gate):
            v = self.eval(e.arg, env, penv)
            self.gate(GateSpec(e.name, e.phase), refs(v.q))
            return v
        if isinstance(e, Measure):
            v = self.eval(e.arg, env, penv)
            if not (isinstance(v, QV) and isinstance(v.q, Ref)):
                raise Stuck(f"measure of {v!r}", e.span)
            return self.measure(v.q.name)
        if isinstance(e, If):
            c = self.eval(e.cond, env, penv)
            return self.eval_if(e, c, env, penv)
        if isinstance(e, Entangle):
            v = self.eval(e.arg, env, penv)
            if not (isinstance(v, PairVal) and isinstance(v.fst, QV) and isinstance(v.snd, QV)):
                raise Stuck(f"entangle of {v!r}", e.span)
            return QV(QPair(v.fst.q, v.snd.q), self.resolve(e.purity, penv))
        if isinstance(e, Split):
            p = self.resolve(e.purity, penv)
            if p == PURE:
                self.before_assertion(e, env, penv)
            v = self.eval(e.arg, env, penv)
            if not (isinstance(v, QV) and isinstance(v.q, QPair)):
                raise Stuck(f"split of {v!r}", e.span)
            if p == PURE:
                self.check_split(e, v.q.left, v.q.right)
            return PairVal(QV(v.q.left, p), QV(v.q.right, p))
        if isinstance(e, Cast):
            p = self.resolve(e.purity, penv)
            if p == PURE:
                self.before_assertion(e, env, penv)
            v = self.eval(e.arg, env, penv)
            if p == PURE:
                self.check_cast(e, v.q)
            return QV(v.q, p)
        raise Stuck(f"unexpected expression {type(e).__name__}", e.span)

    def bind(self, pat, v: Value, env: dict) -> None:
        if isinstance(pat, PairPat):
            if not isinstance(v, PairVal):
                raise Stuck(f"pattern expects a pair, got {v!r}", pat.span)
            self.bind(pat.left, v.fst, env)
            self.bind(pat.right, v.snd, env)
        elif isinstance(pat, Bind):
            env[pat.name] = v
        elif not isinstance(pat, Wildcard):  # pragma: no cover
            raise Stuck(f"unexpected pattern {pat!r}")

    def arm_span(self, e: If, env: dict) -> int:
        fenv = {k: v.name for k, v in env.items() if isinstance(v, FunVal)}
        n1 = self.sizer.size(e.then, fenv)[0]
        n2 = self.sizer.size(e.else_, fenv)[0]
        return max(n1, n2)


# ---------------------------------------------------------------- pure-state machine


class _PureMachine(_Walker):
    def __init__(self, tp: TypedProgram, state: Optional[PureState] = None, *,
                 rng: Optional[np.random.Generator] = None, forced: Sequence[bool] = (),
                 max_branch_points: Optional[int] = None, tol: float = DEFAULT_TOL,
                 max_qubits: int = 24, sizer: Optional[AllocSizer] = None, counter: int = 0):
        super().__init__(tp, sizer, counter)
        self.state = state if state is not None else PureState(max_qubits=max_qubits)
        self.rng = rng
        self.forced = list(forced)
        self.max_branch_points = max_branch_points
        self.tol = tol
        self.taken: list[bool] = []
        self.alternatives: list[list[bool]] = []
        self.branch_points = 0
        self.prob = 1.0
        self.outcomes: dict[str, bool] = {}
        self.verify_seconds = 0.0
        self.peak_qubits = self.state.n

    def alloc(self) -> str:
        name = self.fresh()
        alloc_qubit(self.state, name)
        self.peak_qubits = max(self.peak_qubits, self.state.n)
        return name

    def gate(self, g: GateSpec, targets: list[str]) -> None:
        apply_gate(self.state, g, targets)

    def measure(self, name: str) -> Value:
        k = len(self.taken)
        if k < len(self.forced):
            outcome, prob, _ = measure_qubit(self.state, name, 0.0, force=self.forced[k])
        elif self.rng is not None:
            outcome, prob, _ = measure_qubit(self.state, name, float(self.rng.random()))
        else:
            p1 = outcome_probability(self.state, name)
            p0 = 1.0 - p1
            if p0 > PRUNE and p1 > PRUNE:
                self.branch_points += 1
                if self.max_branch_points is not None and self.branch_points > self.max_branch_points:
                    raise BranchExplosion(f"more than {self.max_branch_points} branching measurements")
                self.alternatives.append(self.taken + [True])
            outcome, prob, _ = measure_qubit(self.state, name, 0.0, force=p0 <= PRUNE)
        self.taken.append(outcome)
        self.prob *= prob
        self.outcomes[name] = outcome
        return outcome

    def check_split(self, node: Split, left: QuantumValue, right: QuantumValue) -> None:
        t0 = time.perf_counter()
        a = refs(left)
        ab = a + refs(right)
        c1 = schmidt_coefficients(self.state, a).coefficients
        # a cut with an empty complement is trivially a product
        c2 = (schmidt_coefficients(self.state, ab).coefficients if len(ab) < self.state.n
              else _UNIT_CUT)
        lam = max(lambda2(c1), lambda2(c2))
        ok = lam <= self.tol and min(c1[0], c2[0]) >= 1 - self.tol
        dt = time.perf_counter() - t0
        self.verify_seconds += dt
        self.events.append(VerifyEvent("split", node.span, lam, ok, dt))
        if not ok:
            bad = c1 if lambda2(c1) > self.tol or c1[0] < 1 - self.tol else c2
            raise SplitAbort(f"split<P> argument is entangled (lambda2 = {lam:.3g})", node.span, bad)

    def check_cast(self, node: Cast, q: QuantumValue) -> None:
        pass  # trusted: the static analysis discharges cast<P>

    def eval_if(self, e: If, cond: Value, env: dict, penv: dict) -> Value:
        if not isinstance(cond, bool):
            raise Stuck(f"if condition {cond!r}", e.span)
        start = self.counter
        v = self.eval(e.then if cond else e.else_, env, penv)
        self.counter = start + self.arm_span(e, env)
        return self._relabel(e.ty, v)

    def _relabel(self, t, v: Value) -> Value:
        """Move an ``if`` result onto fresh names; Booleans become virtual outcomes."""
        if isinstance(t, Quantum):
            mapping = {x: self.fresh() for x in refs(v.q)}
            self.state.rename(mapping)
            return QV(_rename_q(v.q, mapping), MIXED)
        if isinstance(t, BoolT):
            self.outcomes[self.fresh()] = v
            return v
        if isinstance(t, Prod):
            a = self._relabel(t.fst, v.fst)
            return PairVal(a, self._relabel(t.snd, v.snd))
        return v


@dataclass
class RunResult:
    value: Value
    state: PureState
    outcomes: dict[str, bool]
    events: list[VerifyEvent]
    seed: Optional[int] = None
    total_seconds: float = 0.0
    verify_seconds: float = 0.0
    peak_qubits: int = 0

    def to_json(self) -> dict:
        return {
            "value": value_to_json(self.value),
            "outcomes": [[k, v] for k, v in self.outcomes.items()],
            "verification": [ev.to_json() for ev in self.events],
            "seed": self.seed,
        }


def run_pure(tp: TypedProgram, seed: Optional[int] = 0, *, entry: str = "main",
             tol: float = DEFAULT_TOL, max_qubits: int = 24) -> RunResult:
    """Sample one execution; split<P> is checked by two Schmidt cuts, cast<P> is trusted."""
    m = _PureMachine(tp, rng=np.random.default_rng(seed), tol=tol, max_qubits=max_qubits)
    t0 = time.perf_counter()
    v = m.run_main(entry)
    total = time.perf_counter() - t0
    return RunResult(v, m.state, m.outcomes, m.events, seed, total, m.verify_seconds, m.peak_qubits)


# ---------------------------------------------------------------- enumeration


@dataclass
class ExecBranch:
    prob: float
    state: PureState
    value: Value
    outcomes: dict[str, bool]


def _explore(make: Callable[[list[bool]], _PureMachine],
             body: Callable[[_PureMachine], Value]) -> list[ExecBranch]:
    out: list[ExecBranch] = []
    stack: list[list[bool]] = [[]]
    while stack:
        forced = stack.pop()
        m = make(forced)
        v = body(m)
        out.append(ExecBranch(m.prob, m.state, v, m.outcomes))
        stack.extend(reversed(m.alternatives))
    return out


def enumerate_executions(tp: TypedProgram, *, entry: str = "main",
                         max_branch_points: int = DEFAULT_BRANCH_POINTS,
                         tol: float = DEFAULT_TOL, max_qubits: int = 24) -> list[ExecBranch]:
    """Every execution with its probability; both outcomes are explored at each measurement."""
    sizer = AllocSizer(tp)

    def make(forced):
        return _PureMachine(tp, forced=forced, max_branch_points=max_branch_points, tol=tol,
                            max_qubits=max_qubits, sizer=sizer)

    return _explore(make, lambda m: m.run_main(entry))


# ---------------------------------------------------------------- density denotation


class _DensityMachine(_Walker):
    def __init__(self, tp: TypedProgram, *, max_qubits: int = dm.DEFAULT_MAX_QUBITS,
                 tol: float = DEFAULT_TOL):
        super().__init__(tp)
        self.rho = dm.empty()
        self.max_qubits = max_qubits
        self.tol = tol
        self.peak_qubits = 0
        self.verify_seconds = 0.0

    def alloc(self) -> str:
        name = self.fresh()
        dm.alloc_qubit(self.rho, name, self.max_qubits)
        self.peak_qubits = max(self.peak_qubits, self.rho.n)
        return name

    def gate(self, g: GateSpec, targets: list[str]) -> None:
        dm.conjugate(self.rho, g, targets)

    def measure(self, name: str) -> Value:
        dm.dephase(self.rho, name)
        return DeferredRef(name)

    def _substate(self, names: list[str]) -> bool:
        if self.rho.trace() <= self.tol:
            return True  # unreachable arm: the assertion holds vacuously
        return dm.pure_substate_test(self.rho, names, self.tol)

    def _record(self, kind: str, node, ok: bool, t0: float) -> None:
        dt = time.perf_counter() - t0
        self.verify_seconds += dt
        self.events.append(VerifyEvent(kind, node.span, float("nan"), ok, dt))

    def check_split(self, node: Split, left: QuantumValue, right: QuantumValue) -> None:
        t0 = time.perf_counter()
        ok = self._substate(refs(left)) and self._substate(refs(right))
        self._record("split", node, ok, t0)
        if not ok:
            raise Bottom("split<P> components are not pure separable factors", node.span, "split")

    def check_cast(self, node: Cast, q: QuantumValue) -> None:
        t0 = time.perf_counter()
        ok = self._substate(refs(q))
        self._record("cast", node, ok, t0)
        if not ok:
            raise Bottom("cast<P> argument is not a pure factor of the state", node.span, "cast")

    def eval_if(self, e: If, cond: Value, env: dict, penv: dict) -> Value:
        start = self.counter
        span = self.arm_span(e, env)
        if isinstance(cond, bool):
            v = self.eval(e.then if cond else e.else_, env, penv)
            self.counter = start + span
            names = [self.fresh() for _ in range(_result_names(e.ty))]
            return self._relabel(e.ty, v, names)
        if not isinstance(cond, DeferredRef):
            raise Stuck(f"if condition {cond!r}", e.span)
        rho = self.rho
        self.rho = dm.project(rho, cond.name, True)
        v1 = self.eval(e.then, env, penv)
        rho1 = self.rho
        self.counter = start
        self.rho = dm.project(rho, cond.name, False, in_place=True)
        v2 = self.eval(e.else_, env, penv)
        rho2 = self.rho
        self.counter = start + span
        names = [self.fresh() for _ in range(_result_names(e.ty))]
        self.rho = rho1
        r1 = self._relabel(e.ty, v1, list(names))
        rho1 = self.rho
        self.rho = rho2
        r2 = self._relabel(e.ty, v2, list(names))
        rho2 = self.rho
        if r1 != r2:
            raise UnsupportedBranch("if arms return different classical values", e.span)
        union = len(set(rho1.names) | set(rho2.names))
        if union > self.max_qubits:
            raise dm.DensityError(f"mixed-state simulation capped at {self.max_qubits} qubits")
        rho1, rho2 = dm.match_sizes(rho1, rho2)
        self.rho = dm.add(rho1, rho2)
        self.peak_qubits = max(self.peak_qubits, self.rho.n)
        return r1

    def _relabel(self, t, v: Value, names: list[str]) -> Value:
        if isinstance(t, Quantum):
            mapping = {x: names.pop(0) for x in refs(v.q)}
            self.rho.rename(mapping)
            return QV(_rename_q(v.q, mapping), MIXED)
        if isinstance(t, BoolT):
            f = names.pop(0)
            dm.alloc_qubit(self.rho, f, self.max_qubits)
            if v is True:
                dm.conjugate(self.rho, GateSpec("X"), [f])
            elif isinstance(v, DeferredRef):
                dm.conjugate(self.rho, GateSpec("CNOT"), [v.name, f])
            return DeferredRef(f)
        if isinstance(t, Prod):
            a = self._relabel(t.fst, v.fst, names)
            return PairVal(a, self._relabel(t.snd, v.snd, names))
        return v


@dataclass
class DenotResult:
    rho: PartialDensity
    value: Value
    events: list[VerifyEvent] = field(default_factory=list)
    peak_qubits: int = 0
    total_seconds: float = 0.0
    verify_seconds: float = 0.0


def eval_denot(tp: TypedProgram, *, entry: str = "main", max_qubits: int = dm.DEFAULT_MAX_QUBITS,
               tol: float = DEFAULT_TOL) -> DenotResult:
    """Density denotation; raises Bottom when a purity assertion fails."""
    m = _DensityMachine(tp, max_qubits=max_qubits, tol=tol)
    t0 = time.perf_counter()
    v = m.run_main(entry)
    total = time.perf_counter() - t0
    return DenotResult(m.rho, v, m.events, m.peak_qubits, total, m.verify_seconds)


# ---------------------------------------------------------------- equivalence and oracles


def _align(v1: Value, v2: Value, mapping: dict[str, str]) -> bool:
    """Extend ``mapping`` (v2 names to v1 names) by walking both values together."""
    if isinstance(v1, QV) and isinstance(v2, QV):
        r1, r2 = refs(v1.q), refs(v2.q)
        if _shape(v1.q) != _shape(v2.q):
            return False
        for a, b in zip(r1, r2):
            if mapping.setdefault(b, a) != a:
                return False
        return True
    if isinstance(v1, PairVal) and isinstance(v2, PairVal):
        return _align(v1.fst, v2.fst, mapping) and _align(v1.snd, v2.snd, mapping)
    if isinstance(v1, (QV, PairVal)) or isinstance(v2, (QV, PairVal)):
        return False
    return type(v1) is type(v2) and v1 == v2


def _shape(q: QuantumValue):
    return None if isinstance(q, Ref) else (_shape(q.left), _shape(q.right))


def qubit_equivalent(s1: PureState, v1: Value, s2: PureState, v2: Value,
                     tol: float = DEFAULT_TOL) -> bool:
    """Equal up to renaming the qubits of (s2, v2) onto those of (s1, v1) and global phase."""
    mapping: dict[str, str] = {}
    if not _align(v1, v2, mapping):
        return False
    if len(set(mapping.values())) != len(mapping):
        return False
    for x in s2.names:
        if x not in mapping:
            mapping[x] = x
    if sorted(mapping[x] for x in s2.names) != sorted(s1.names):
        return False
    renamed = s2.copy().rename(mapping)
    return equal_up_to_phase(s1, renamed, tol)


def implicit_measurements(s: PureState, v: Value) -> list[tuple[float, PureState]]:
    """Measure every qubit the value does not own, in name order, over all outcomes."""
    owned = set(value_refs(v))
    pending = sorted(x for x in s.names if x not in owned)
    out: list[tuple[float, PureState]] = []
    stack = [(1.0, s.copy(), 0)]
    while stack:
        p, st, k = stack.pop()
        if k == len(pending):
            out.append((p, st))
            continue
        p1 = outcome_probability(st, pending[k])
        for outcome, q in ((False, 1 - p1), (True, p1)):
            if q > PRUNE:
                _, _, nxt = measure_qubit(st.copy(), pending[k], 0.0, force=outcome)
                stack.append((p * q, nxt, k + 1))
    return out


def _unique_up_to_equivalence(pairs: list[tuple[PureState, Value]], tol: float) -> bool:
    s0, v0 = pairs[0]
    return all(qubit_equivalent(s0, v0, s, v, tol) for s, v in pairs[1:])


def _focus_pairs(branches: list[ExecBranch], focus: Callable[[Value], Value]
                 ) -> list[tuple[PureState, Value]]:
    pairs = []
    for b in branches:
        v = focus(b.value)
        for _, st in implicit_measurements(b.state, v):
            pairs.append((st, v))
    return pairs


def _leaf_paths(t, path=()) -> list[tuple]:
    """Paths to the P-typed quantum leaves of a type."""
    if isinstance(t, Quantum):
        return [path] if t.purity == PURE else []
    if isinstance(t, Prod):
        return _leaf_paths(t.fst, path + (0,)) + _leaf_paths(t.snd, path + (1,))
    return []


def _at(v: Value, path: tuple) -> Value:
    for i in path:
        v = v.fst if i == 0 else v.snd
    return v


def purity_oracle(tp: TypedProgram, *, entry: str = "main", focus: Optional[tuple] = None,
                  max_branch_points: int = DEFAULT_BRANCH_POINTS, tol: float = 1e-7) -> bool:
    """Whether the entry's result (or the sub-value at ``focus``) is pure by brute force.

    Runs every execution, implicitly measures every qubit the focused value does not own,
    and checks all resulting (state, value) pairs are qubit-equivalent.
    """
    branches = enumerate_executions(tp, entry=entry, max_branch_points=max_branch_points)
    path = focus or ()
    return _unique_up_to_equivalence(_focus_pairs(branches, lambda v: _at(v, path)), tol)


@dataclass
class SiteCheck:
    kind: str
    span: Span
    pure: bool


@dataclass
class OracleReport:
    sites: list[SiteCheck]
    result_leaves: list[tuple[tuple, bool]]
    peak_qubits: int

    @property
    def ok(self) -> bool:
        return all(s.pure for s in self.sites) and all(ok for _, ok in self.result_leaves)


def assertion_oracle(tp: TypedProgram, *, entry: str = "main",
                     max_branch_points: int = DEFAULT_BRANCH_POINTS, tol: float = 1e-7) -> OracleReport:
    """Brute-force purity of every cast<P>/split<P> argument reached, and of main's P leaves.

    At each assertion the current configuration is snapshotted and the argument is
    re-run from it under every outcome sequence.
    """
    sizer = AllocSizer(tp)
    sites: list[SiteCheck] = []
    peak = [0]

    def sub_pure(node, env, penv, state, counter) -> bool:
        def make(forced):
            return _PureMachine(tp, state.copy(), forced=forced, max_branch_points=max_branch_points,
                                sizer=sizer, counter=counter)

        branches = _explore(make, lambda m: m.eval(node.arg, env, penv))
        if isinstance(node, Cast):
            focuses = [lambda v: v]
        else:
            focuses = [lambda v: QV(v.q.left, PURE), lambda v: QV(v.q.right, PURE)]
        return all(_unique_up_to_equivalence(_focus_pairs(branches, f), tol) for f in focuses)

    class _Hooked(_PureMachine):
        def before_assertion(self, e, env, penv):
            ok = sub_pure(e, env, penv, self.state, self.counter)
            sites.append(SiteCheck("cast" if isinstance(e, Cast) else "split", e.span, ok))

        def alloc(self):
            name = super().alloc()
            peak[0] = max(peak[0], self.state.n)
            return name

    def make_top(forced):
        return _Hooked(tp, forced=forced, max_branch_points=max_branch_points, sizer=sizer)

    branches = _explore(make_top, lambda m: m.run_main(entry))
    ret = tp.decl(entry).ret
    leaves = []
    for path in _leaf_paths(ret):
        pairs = _focus_pairs(branches, lambda v, p=path: _at(v, p))
        leaves.append((path, _unique_up_to_equivalence(pairs, tol)))
    return OracleReport(sites, leaves, peak[0])


# ---------------------------------------------------------------- agreement


@dataclass
class AgreementReport:
    ok: bool
    deviation: float
    branches: int
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _apply_outcomes(v: Value, outcomes: dict[str, bool]) -> Value:
    if isinstance(v, DeferredRef):
        return outcomes[v.name]
    if isinstance(v, PairVal):
        return PairVal(_apply_outcomes(v.fst, outcomes), _apply_outcomes(v.snd, outcomes))
    return v


def _same_value(a: Value, b: Value) -> bool:
    if isinstance(a, QV) and isinstance(b, QV):
        return a.q == b.q
    if isinstance(a, PairVal) and isinstance(b, PairVal):
        return _same_value(a.fst, b.fst) and _same_value(a.snd, b.snd)
    return type(a) is type(b) and a == b


def check_agreement(tp: TypedProgram, tol: float = 1e-9, *, entry: str = "main",
                    max_branch_points: int = DEFAULT_BRANCH_POINTS,
                    max_qubits: int = dm.DEFAULT_MAX_QUBITS) -> AgreementReport:
    """Rebuild the density matrix from enumerated executions and compare with the denotation."""
    den = eval_denot(tp, entry=entry, max_qubits=max_qubits)
    branches = enumerate_executions(tp, entry=entry, max_branch_points=max_branch_points)
    rho = den.rho
    names = rho.names
    acc = np.zeros_like(rho.mat)
    for b in branches:
        if not _same_value(b.value, _apply_outcomes(den.value, b.outcomes)):
            return AgreementReport(False, float("inf"), len(branches),
                                   f"branch value {b.value!r} does not match {den.value!r}")
        s = b.state.copy()
        for x in names:
            if x not in s.names:
                alloc_qubit(s, x)
                if b.outcomes.get(x):
                    apply_gate(s, GateSpec("X"), [x])
        extra = [x for x in s.names if x not in names]
        if extra:
            return AgreementReport(False, float("inf"), len(branches),
                                   f"branch holds qubits {extra} absent from the denotation")
        s.reorder(names)
        acc += b.prob * np.outer(s.amps, s.amps.conj())
    dev = float(np.max(np.abs(acc - rho.mat))) if acc.size else 0.0
    return AgreementReport(dev <= tol, dev, len(branches))


# ---------------------------------------------------------------- small-step reduction


def _is_value(e: Expr) -> bool:
    if isinstance(e, (QVal, BoolLit, UnitLit, FunRef)):
        return True
    return isinstance(e, Pair) and _is_value(e.fst) and _is_value(e.snd)


def _map_children(e: Expr, f: Callable[[Expr], Expr]) -> Expr:
    if isinstance(e, App):
        return replace(e, fn=f(e.fn), arg=f(e.arg))
    if isinstance(e, Pair):
        return replace(e, fst=f(e.fst), snd=f(e.snd))
    if isinstance(e, Let):
        return replace(e, bound=f(e.bound), body=f(e.body))
    if isinstance(e, If):
        return replace(e, cond=f(e.cond), then=f(e.then), else_=f(e.else_))
    if isinstance(e, (Gate, Measure, Entangle, Split, Cast)):
        return replace(e, arg=f(e.arg))
    return e


def substitute(e: Expr, name: str, v: Expr) -> Expr:
    """e[v/name] for a closed value v."""
    if isinstance(e, Var):
        return v if e.name == name else e
    if isinstance(e, Let):
        bound = substitute(e.bound, name, v)
        if name in pattern_names(e.pattern):
            return replace(e, bound=bound)
        return replace(e, bound=bound, body=substitute(e.body, name, v))
    return _map_children(e, lambda c: substitute(c, name, v))


def _subst_pattern(p, inst):
    if isinstance(p, PairPat):
        return replace(p, left=_subst_pattern(p.left, inst), right=_subst_pattern(p.right, inst))
    if p.ann is not None:
        return replace(p, ann=subst_purity(p.ann, inst))
    return p


def substitute_purity(e: Expr, inst: dict[str, Purity]) -> Expr:
    """Replace purity variables in annotations, operators and instantiations."""
    if not inst:
        return e

    def res(p: Purity) -> Purity:
        return inst.get(p.name, p) if p.is_var else p

    e = _map_children(e, lambda c: substitute_purity(c, inst))
    if e.ty is not None:
        e = replace(e, ty=subst_purity(e.ty, inst))
    if isinstance(e, (Entangle, Split, Cast, QVal)):
        return replace(e, purity=res(e.purity))
    if isinstance(e, FunRef):
        return replace(e, inst=tuple((k, res(p)) for k, p in e.inst))
    if isinstance(e, Let):
        return replace(e, pattern=_subst_pattern(e.pattern, inst))
    return e


class SmallStepper:
    """One-redex-at-a-time reduction over expressions with embedded qubit references."""

    def __init__(self, tp: TypedProgram, seed: Optional[int] = 0, tol: float = DEFAULT_TOL):
        self.tp = tp
        self.decls = {d.name: d for d in tp.program.decls}
        self.state = PureState()
        self.rng = np.random.default_rng(seed)
        self.tol = tol
        self.counter = 0

    def initial(self, entry: str = "main") -> Expr:
        d = self.decls[entry]
        body = d.body
        if isinstance(d.param, Bind):
            body = substitute(body, d.param.name, UnitLit())
        return body

    def step(self, e: Expr) -> Expr:
        if isinstance(e, App):
            if not _is_value(e.fn):
                return replace(e, fn=self.step(e.fn))
            if not _is_value(e.arg):
                return replace(e, arg=self.step(e.arg))
            if not isinstance(e.fn, FunRef):
                raise Stuck("application of a non-function", e.span)
            d = self.decls[e.fn.name]
            body = substitute_purity(d.body, dict(e.fn.inst))
            if isinstance(d.param, Bind):
                body = substitute(body, d.param.name, e.arg)
            return body
        if isinstance(e, Pair):
            if not _is_value(e.fst):
                return replace(e, fst=self.step(e.fst))
            return replace(e, snd=self.step(e.snd))
        if isinstance(e, Let):
            if not _is_value(e.bound):
                return replace(e, bound=self.step(e.bound))
            if not (isinstance(e.pattern, PairPat) and isinstance(e.bound, Pair)):
                raise Stuck("let of a non-pair value", e.span)
            body = e.body
            for leaf, v in ((e.pattern.right, e.bound.snd), (e.pattern.left, e.bound.fst)):
                if isinstance(leaf, Bind):
                    body = substitute(body, leaf.name, v)
            return body
        if isinstance(e, If):
            if not _is_value(e.cond):
                return replace(e, cond=self.step(e.cond))
            if not isinstance(e.cond, BoolLit):
                raise Stuck("if on a non-Boolean", e.span)
            arm = e.then if e.cond.value else e.else_
            if isinstance(e.ty, Quantum):
                return Cast(MIXED, arm, span=e.span, ty=e.ty)
            return arm
        if isinstance(e, QInit):
            name = f"q{self.counter}"
            self.counter += 1
            alloc_qubit(self.state, name)
            return QVal(Ref(name), PURE, span=e.span)
        if isinstance(e, (Gate, Measure, Entangle, Split, Cast)):
            if not _is_value(e.arg):
                return replace(e, arg=self.step(e.arg))
            return self._reduce(e)
        raise Stuck(f"no rule applies to {type(e).__name__}", e.span)

    def _reduce(self, e: Expr) -> Expr:
        a = e.arg
        if isinstance(e, Gate) and isinstance(a, QVal):
            apply_gate(self.state, GateSpec(e.name, e.phase), refs(a.q))
            return a
        if isinstance(e, Measure) and isinstance(a, QVal) and isinstance(a.q, Ref):
            outcome, _, _ = measure_qubit(self.state, a.q.name, float(self.rng.random()))
            return BoolLit(outcome, span=e.span)
        if isinstance(e, Entangle) and isinstance(a, Pair) and isinstance(a.fst, QVal) \
                and isinstance(a.snd, QVal):
            return QVal(QPair(a.fst.q, a.snd.q), e.purity, span=e.span)
        if isinstance(e, Split) and isinstance(a, QVal) and isinstance(a.q, QPair):
            if e.purity == PURE:
                left = refs(a.q.left)
                for cut in (left, left + refs(a.q.right)):
                    c = schmidt_coefficients(self.state, cut).coefficients
                    if c[0] < 1 - self.tol or lambda2(c) > self.tol:
                        raise SplitAbort("split<P> argument is entangled", e.span, c)
            return Pair(QVal(a.q.left, e.purity), QVal(a.q.right, e.purity), span=e.span)
        if isinstance(e, Cast) and isinstance(a, QVal):
            return QVal(a.q, e.purity, span=e.span)
        raise Stuck(f"{type(e).__name__} applied to {type(a).__name__}", e.span)


@dataclass
class SafetyResult:
    steps: int
    aborted: bool
    value: Optional[Expr]


def check_type_safety(tp: TypedProgram, seed: Optional[int] = 0, *, entry: str = "main",
                      max_steps: int = 100_000) -> SafetyResult:
    """Reduce to a value, re-typing after every step against the live qubit set.

    Raises Stuck when no rule applies (progress) and PreservationError when a step
    changes the type or the owned qubits.
    """
    st = SmallStepper(tp, seed)
    e = st.initial(entry)
    expected = tp.decl(entry).ret
    for n in range(max_steps):
        if _is_value(e):
            return SafetyResult(n, False, e)
        try:
            e = st.step(e)
        except SplitAbort:
            return SafetyResult(n + 1, True, None)
        try:
            typed = check_expr(e, tp.schemes, {}, delta=set(st.state.names))
        except TwistError as err:
            raise PreservationError(f"step {n + 1} is ill-typed: {err.message}", err.span) from err
        if typed.ty != expected:
            raise PreservationError(f"step {n + 1} changed the type to {typed.ty}")
    raise InterpreterError(f"no value after {max_steps} steps")
