"""Linear purity type checker with conversion inference, implicit discards and
purity polymorphism.

Each declaration goes through three passes, in order:

1. elaboration: synthesize types and insert ``cast``/``split``/``entangle``
   conversions wherever an annotation, argument or return type demands them;
2. implicit discards: unused pure binders are measured, unused mixed ones rejected;
3. a strict re-check with no conversions that enforces linearity and fills ``ty``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

from .syntax import (
    BOOL, MIXED, PURE, QUBIT, UNIT, App, Arrow, Bind, BoolLit, Cast, Decl, EPair,
    Entangle, Expr, FunRef, Gate, If, Let, Measure, Pair, PairPat, Pattern, Prod, Program,
    Purity, QInit, QType, QVal, Quantum, Qubit, Span, Split, TwistError, TypeExpr, UnitLit,
    Var, Wildcard, format_type, free_vars, gate_qtype, is_classical, pattern_names, purity_vars, qshape,
    qtype_size, refs, subst_purity, walk, GATE_ARITY,
)


class TwistTypeError(TwistError):
    code = "TypeError"


class LinearityError(TwistTypeError):
    code = "LinearityError"


class BranchTypeMismatch(TwistTypeError):
    code = "BranchTypeMismatch"


class ArityError(TwistTypeError):
    code = "ArityError"


class NoConversion(TwistTypeError):
    code = "NoConversion"


class PurityMismatch(NoConversion):
    code = "PurityMismatch"


class UnknownVariable(TwistTypeError):
    code = "UnknownVariable"


class PurityUnificationError(TwistTypeError):
    code = "PurityUnificationError"


class TypeMismatch(TwistTypeError):
    code = "TypeMismatch"


class ProgramError(TwistTypeError):
    code = "ProgramError"


# ---------------------------------------------------------------- type helpers


@dataclass(frozen=True)
class Scheme:
    """A declaration's signature; ``vars`` are the purity variables it generalizes."""

    param: TypeExpr
    ret: TypeExpr
    vars: frozenset[str] = frozenset()

    @property
    def arrow(self) -> Arrow:
        return Arrow(self.param, self.ret)


@dataclass
class TypedProgram:
    program: Program
    schemes: dict[str, Scheme] = field(default_factory=dict)

    def decl(self, name: str) -> Decl:
        return self.program.decl(name)


def is_linear(t: TypeExpr) -> bool:
    return not is_classical(t)


def quantum_leaves(t: TypeExpr) -> Optional[list[Quantum]]:
    """The Quantum leaves of a product-of-quantum type, or None if some leaf is classical."""
    if isinstance(t, Quantum):
        return [t]
    if isinstance(t, Prod):
        a, b = quantum_leaves(t.fst), quantum_leaves(t.snd)
        return None if a is None or b is None else a + b
    return None


def qubit_count(t: TypeExpr) -> Optional[int]:
    leaves = quantum_leaves(t)
    return None if leaves is None else sum(qtype_size(q.qtype) for q in leaves)


def common_purity(t: TypeExpr) -> Purity:
    """P if every leaf is P, the shared variable if every leaf carries it, else M."""
    leaves = quantum_leaves(t)
    if not leaves:
        return MIXED
    ps = {leaf.purity for leaf in leaves}
    return ps.pop() if len(ps) == 1 else MIXED


def to_qtype(t: TypeExpr) -> Optional[QType]:
    """The entangled-pair shape a product of quantum values converts to."""
    if isinstance(t, Quantum):
        return t.qtype
    if isinstance(t, Prod):
        a, b = to_qtype(t.fst), to_qtype(t.snd)
        return None if a is None or b is None else EPair(a, b)
    return None


def demands_pure(t: Optional[TypeExpr]) -> bool:
    if t is None:
        return False
    if isinstance(t, Quantum):
        return t.purity == PURE
    if isinstance(t, Prod):
        return demands_pure(t.fst) or demands_pure(t.snd)
    return False


def strip_purity(t: TypeExpr) -> TypeExpr:
    if isinstance(t, Quantum):
        return Quantum(t.qtype, MIXED)
    if isinstance(t, Prod):
        return Prod(strip_purity(t.fst), strip_purity(t.snd))
    if isinstance(t, Arrow):
        return Arrow(strip_purity(t.param), strip_purity(t.ret))
    return t


def unify_purity(scheme_t: TypeExpr, actual: TypeExpr, vars: frozenset[str],
                 inst: dict[str, Purity], span: Span = None) -> None:
    """Bind scheme variables by structural comparison against an actual type."""
    if isinstance(scheme_t, Quantum):
        if scheme_t.purity.is_var and scheme_t.purity.name in vars:
            if isinstance(actual, Quantum):
                found = actual.purity
            elif quantum_leaves(actual):
                found = common_purity(actual)
            else:
                return
            name = scheme_t.purity.name
            if name in inst and inst[name] != found:
                raise PurityUnificationError(
                    f"purity variable '{name} must be both {inst[name]} and {found}", span)
            inst[name] = found
        return
    if isinstance(scheme_t, Prod):
        if isinstance(actual, Prod):
            unify_purity(scheme_t.fst, actual.fst, vars, inst, span)
            unify_purity(scheme_t.snd, actual.snd, vars, inst, span)
        elif isinstance(actual, Quantum) and isinstance(actual.qtype, EPair):
            unify_purity(scheme_t.fst, Quantum(actual.qtype.left, actual.purity), vars, inst, span)
            unify_purity(scheme_t.snd, Quantum(actual.qtype.right, actual.purity), vars, inst, span)
        return
    if isinstance(scheme_t, Arrow) and isinstance(actual, Arrow):
        unify_purity(scheme_t.param, actual.param, vars, inst, span)
        unify_purity(scheme_t.ret, actual.ret, vars, inst, span)


def instantiate_purity(s: Scheme, arg_type: TypeExpr, span: Span = None) -> tuple[TypeExpr, dict[str, Purity]]:
    """Instantiate a scheme at an argument type; returns the result type and the binding."""
    inst: dict[str, Purity] = {}
    unify_purity(s.param, arg_type, s.vars, inst, span)
    missing = s.vars - set(inst)
    if missing:
        raise PurityUnificationError(
            f"cannot determine purity variable(s) {', '.join(sorted(missing))} from argument "
            f"type {format_type(arg_type)}", span)
    return subst_purity(s.ret, inst), inst


def _mismatch(actual: TypeExpr, expected: TypeExpr, span: Span, what: str = "") -> NoConversion:
    msg = f"cannot convert {format_type(actual)} to {format_type(expected)}"
    if what:
        msg = f"{what}: {msg}"
    if strip_purity(actual) == strip_purity(expected):
        return PurityMismatch(msg, span)
    return NoConversion(msg, span)


# ---------------------------------------------------------------- fresh names


class NameSupply:
    def __init__(self, reserved: set[str]):
        self.reserved = set(reserved)
        self.counters: Counter[str] = Counter()

    def fresh(self, prefix: str) -> str:
        while True:
            self.counters[prefix] += 1
            name = f"{prefix}{self.counters[prefix]}"
            if name not in self.reserved:
                self.reserved.add(name)
                return name


def _all_names(p: Program) -> set[str]:
    out: set[str] = set()
    for d in p.decls:
        out.add(d.name)
        if d.param is not None:
            out.update(pattern_names(d.param))
        for e in walk(d.body):
            if isinstance(e, Var):
                out.add(e.name)
            elif isinstance(e, Let):
                out.update(pattern_names(e.pattern))
    return out


def _syn(node: Expr, ty: TypeExpr) -> Expr:
    return replace(node, ty=ty, synthetic=True)


# ---------------------------------------------------------------- pass 1: elaboration


class Elaborator:
    def __init__(self, schemes: dict[str, Scheme], names: NameSupply, allowed_vars: frozenset[str]):
        self.schemes = schemes
        self.names = names
        self.allowed_vars = allowed_vars

    def check_annotation(self, t: Optional[TypeExpr], span: Span) -> None:
        if t is None:
            return
        stray = purity_vars(t) - self.allowed_vars
        if stray:
            raise PurityUnificationError(
                f"purity variable(s) {', '.join(sorted(stray))} not introduced by the parameter", span)

    # -- entry point
    def elab(self, e: Expr, env: dict[str, TypeExpr], expected: Optional[TypeExpr] = None) -> Expr:
        if isinstance(e, Let):
            return self.elab_let(e, env, expected)
        if isinstance(e, Pair) and isinstance(expected, Prod):
            a = self.elab(e.fst, env, expected.fst)
            b = self.elab(e.snd, env, expected.snd)
            return replace(e, fst=a, snd=b, ty=expected)
        if isinstance(e, FunRef):
            node = self.elab_funref(e, expected)
        else:
            node = self.synth(e, env)
        if expected is None:
            return node
        return self.conv(node, expected)

    def synth(self, e: Expr, env: dict[str, TypeExpr]) -> Expr:
        if isinstance(e, Var):
            if e.name not in env:
                raise UnknownVariable(f"unknown variable '{e.name}'", e.span)
            return replace(e, ty=env[e.name])
        if isinstance(e, UnitLit):
            return replace(e, ty=UNIT)
        if isinstance(e, BoolLit):
            return replace(e, ty=BOOL)
        if isinstance(e, QInit):
            return replace(e, ty=Quantum(QUBIT, PURE))
        if isinstance(e, QVal):
            return replace(e, ty=Quantum(qshape(e.q), e.purity))
        if isinstance(e, Pair):
            a = self.elab(e.fst, env)
            b = self.elab(e.snd, env)
            return replace(e, fst=a, snd=b, ty=Prod(a.ty, b.ty))
        if isinstance(e, App):
            return self.elab_app(e, env)
        if isinstance(e, If):
            return self.elab_if(e, env)
        if isinstance(e, Gate):
            return self.elab_gate(e, env)
        if isinstance(e, Measure):
            arg = self.elab(e.arg, env)
            t = arg.ty
            if isinstance(t, Quantum) and isinstance(t.qtype, Qubit):
                return replace(e, arg=arg, ty=BOOL)
            if quantum_leaves(t) is None and is_classical(t):
                raise TypeMismatch(f"measure expects a quantum value, got {format_type(t)}", e.span)
            return self.measure_all(arg, e.span)
        if isinstance(e, Entangle):
            self.check_annotation(Quantum(QUBIT, e.purity), e.span)
            arg = self.elab(e.arg, env)
            t = arg.ty
            if not (isinstance(t, Prod) and isinstance(t.fst, Quantum) and isinstance(t.snd, Quantum)):
                raise NoConversion(f"entangle<{e.purity}> expects a pair of quantum values, "
                                   f"got {format_type(t)}", e.span)
            if t.fst.purity != e.purity or t.snd.purity != e.purity:
                raise PurityMismatch(
                    f"entangle<{e.purity}> expects components of purity {e.purity}, got "
                    f"{format_type(t.fst)} and {format_type(t.snd)}", e.span)
            return replace(e, arg=arg, ty=Quantum(EPair(t.fst.qtype, t.snd.qtype), e.purity))
        if isinstance(e, Split):
            if e.purity.is_var:
                raise PurityMismatch(f"split on a generic purity {e.purity} is not allowed", e.span)
            arg = self.elab(e.arg, env)
            t = arg.ty
            if not (isinstance(t, Quantum) and isinstance(t.qtype, EPair)):
                raise NoConversion(f"split<{e.purity}> expects an entangled pair, got {format_type(t)}",
                                   e.span)
            if t.purity != e.purity:
                raise PurityMismatch(f"split<{e.purity}> applied to {format_type(t)}", e.span)
            q = t.qtype
            return replace(e, arg=arg, ty=Prod(Quantum(q.left, e.purity), Quantum(q.right, e.purity)))
        if isinstance(e, Cast):
            self.check_annotation(Quantum(QUBIT, e.purity), e.span)
            arg = self.elab(e.arg, env)
            t = arg.ty
            if not isinstance(t, Quantum):
                raise NoConversion(f"cast<{e.purity}> expects a quantum value, got {format_type(t)}",
                                   e.span)
            return replace(e, arg=arg, ty=Quantum(t.qtype, e.purity))
        if isinstance(e, FunRef):
            return self.elab_funref(e, None)
        raise TypeMismatch(f"unexpected expression {type(e).__name__}", e.span)

    def elab_funref(self, e: FunRef, expected: Optional[TypeExpr]) -> Expr:
        if e.name not in self.schemes:
            raise UnknownVariable(f"unknown function '{e.name}'", e.span)
        s = self.schemes[e.name]
        if not s.vars:
            return replace(e, inst=(), ty=s.arrow)
        if e.inst:
            inst = dict(e.inst)
        elif isinstance(expected, Arrow):
            inst = {}
            unify_purity(s.param, expected.param, s.vars, inst, e.span)
            if s.vars - set(inst):
                raise PurityUnificationError(f"cannot instantiate '{e.name}' at {format_type(expected)}",
                                             e.span)
        else:
            raise PurityUnificationError(
                f"purity-polymorphic function '{e.name}' needs an argument or expected type", e.span)
        return replace(e, inst=tuple(sorted(inst.items())), ty=subst_purity(s.arrow, inst))

    def elab_app(self, e: App, env: dict[str, TypeExpr]) -> Expr:
        if isinstance(e.fn, FunRef) and not e.fn.inst:
            if e.fn.name not in self.schemes:
                raise UnknownVariable(f"unknown function '{e.fn.name}'", e.fn.span)
            s = self.schemes[e.fn.name]
            arg = self.elab(e.arg, env)
            _, inst = instantiate_purity(s, arg.ty, e.span)
            param = subst_purity(s.param, inst)
            ret = subst_purity(s.ret, inst)
            fn = replace(e.fn, inst=tuple(sorted(inst.items())), ty=Arrow(param, ret))
            return replace(e, fn=fn, arg=self.conv(arg, param, what=f"argument of '{e.fn.name}'"),
                           ty=ret)
        fn = self.elab(e.fn, env)
        if not isinstance(fn.ty, Arrow):
            raise TypeMismatch(f"cannot apply a value of type {format_type(fn.ty)}", e.span)
        arg = self.elab(e.arg, env, fn.ty.param)
        return replace(e, fn=fn, arg=arg, ty=fn.ty.ret)

    def elab_if(self, e: If, env: dict[str, TypeExpr]) -> Expr:
        cond = self.elab(e.cond, env, BOOL)
        a = self.elab(e.then, env)
        b = self.elab(e.else_, env)
        if is_classical(a.ty) and is_classical(b.ty):
            if a.ty != b.ty:
                raise BranchTypeMismatch(
                    f"branches have types {format_type(a.ty)} and {format_type(b.ty)}", e.span)
            return replace(e, cond=cond, then=a, else_=b, ty=a.ty)
        qa, qb = to_qtype(a.ty), to_qtype(b.ty)
        if qa is None or qb is None or qa != qb:
            raise BranchTypeMismatch(
                f"branches have types {format_type(a.ty)} and {format_type(b.ty)}", e.span)
        target = Quantum(qa, MIXED)
        return replace(e, cond=cond, then=self.conv(a, target), else_=self.conv(b, target), ty=target)

    def elab_gate(self, e: Gate, env: dict[str, TypeExpr]) -> Expr:
        arg = self.elab(e.arg, env)
        n = qubit_count(arg.ty)
        if n is None:
            raise TypeMismatch(f"{e.name} expects quantum arguments, got {format_type(arg.ty)}", e.span)
        if n != GATE_ARITY[e.name]:
            raise ArityError(f"{e.name} acts on {GATE_ARITY[e.name]} qubit(s), got {n}", e.span)
        target = Quantum(gate_qtype(e.name), common_purity(arg.ty))
        return replace(e, arg=self.conv(arg, target, what=f"argument of {e.name}"), ty=target)

    # -- patterns and lets
    def elab_let(self, e: Let, env: dict[str, TypeExpr], expected: Optional[TypeExpr]) -> Expr:
        pat = e.pattern
        if not isinstance(pat, PairPat) or isinstance(pat.left, PairPat) or isinstance(pat.right, PairPat):
            raise TypeMismatch("let patterns must be desugared to a pair of binders", e.span)
        leaves = [pat.left, pat.right]
        anns = [leaf.ann for leaf in leaves]
        for leaf in leaves:
            self.check_annotation(leaf.ann, leaf.span)
        wrappers: list[tuple[Pattern, str, TypeExpr]] = []
        if isinstance(e.bound, Pair):
            a = self.elab(e.bound.fst, env, anns[0])
            b = self.elab(e.bound.snd, env, anns[1])
            bound = replace(e.bound, fst=a, snd=b, ty=Prod(a.ty, b.ty))
            comp = [a.ty, b.ty]
        else:
            bound = self.elab(e.bound, env)
            t = bound.ty
            if isinstance(t, Quantum) and isinstance(t.qtype, EPair):
                sigma = PURE if demands_pure(anns[0]) or demands_pure(anns[1]) else MIXED
                if t.purity != sigma:
                    bound = _syn(Cast(sigma, bound, span=e.span), Quantum(t.qtype, sigma))
                q = t.qtype
                bound = _syn(Split(sigma, bound, span=e.span),
                             Prod(Quantum(q.left, sigma), Quantum(q.right, sigma)))
                t = bound.ty
            if not isinstance(t, Prod):
                raise NoConversion(f"pattern expects a pair, bound expression has type {format_type(t)}",
                                   e.span)
            comp = [t.fst, t.snd]
            for i, leaf in enumerate(leaves):
                if leaf.ann is not None and leaf.ann != comp[i]:
                    name = self.names.fresh("_c")
                    wrappers.append((leaf, name, comp[i]))
                    leaves[i] = Bind(name, comp[i], span=leaf.span)
        new_leaves: list[Pattern] = []
        env2 = dict(env)
        for leaf, t in zip(leaves, comp):
            if isinstance(leaf, Bind):
                new_leaves.append(replace(leaf, ann=t))
                env2[leaf.name] = t
            elif is_classical(t):
                new_leaves.append(replace(leaf, ann=t))
            else:
                name = self.names.fresh("_w")
                new_leaves.append(Bind(name, t, span=leaf.span))
                env2[name] = t
        body = e.body
        for leaf, name, t in reversed(wrappers):
            body = Let(PairPat(leaf, Wildcard(span=leaf.span), span=leaf.span),
                       Pair(Var(name, span=leaf.span), BoolLit(True, synthetic=True), synthetic=True),
                       body, span=leaf.span, synthetic=True)
        body = self.elab(body, env2, expected)
        return replace(e, pattern=PairPat(new_leaves[0], new_leaves[1], span=pat.span), bound=bound,
                       body=body, ty=body.ty)

    def let_pair(self, e: Expr, t1: TypeExpr, t2: TypeExpr, build, span: Span) -> Expr:
        a, b = self.names.fresh("_p"), self.names.fresh("_p")
        body = build(_syn(Var(a, span=span), t1), _syn(Var(b, span=span), t2))
        pat = PairPat(Bind(a, t1, span=span), Bind(b, t2, span=span), span=span)
        return _syn(Let(pat, e, body, span=span), body.ty)

    # -- conversions
    def conv(self, e: Expr, expected: TypeExpr, what: str = "") -> Expr:
        actual = e.ty
        span = e.span
        if actual == expected:
            return e
        if isinstance(actual, Quantum) and isinstance(expected, Quantum):
            if actual.qtype == expected.qtype:
                return _syn(Cast(expected.purity, e, span=span), expected)
            if isinstance(actual.qtype, EPair):
                q = actual.qtype
                mixed = e if actual.purity == MIXED else _syn(Cast(MIXED, e, span=span),
                                                              Quantum(q, MIXED))
                parts = _syn(Split(MIXED, mixed, span=span),
                             Prod(Quantum(q.left, MIXED), Quantum(q.right, MIXED)))
                return self.conv(parts, expected, what)
            raise _mismatch(actual, expected, span, what)
        if isinstance(actual, Quantum) and isinstance(actual.qtype, EPair) and isinstance(expected, Prod):
            sigma = PURE if demands_pure(expected) else MIXED
            q = actual.qtype
            src = e if actual.purity == sigma else _syn(Cast(sigma, e, span=span), Quantum(q, sigma))
            parts = _syn(Split(sigma, src, span=span),
                         Prod(Quantum(q.left, sigma), Quantum(q.right, sigma)))
            return self.conv(parts, expected, what)
        if isinstance(actual, Prod) and isinstance(expected, Quantum) and isinstance(expected.qtype, EPair):
            q = expected.qtype

            def build(x: Expr, y: Expr) -> Expr:
                p1, p2 = common_purity(x.ty), common_purity(y.ty)
                if quantum_leaves(x.ty) is None or quantum_leaves(y.ty) is None:
                    raise _mismatch(actual, expected, span, what)
                sigma = p1 if p1 == p2 else MIXED
                cx = self.conv(x, Quantum(q.left, sigma), what)
                cy = self.conv(y, Quantum(q.right, sigma), what)
                pair = _syn(Pair(cx, cy, span=span), Prod(cx.ty, cy.ty))
                ent = _syn(Entangle(sigma, pair, span=span), Quantum(q, sigma))
                return self.conv(ent, expected, what)

            if isinstance(e, Pair):
                return build(e.fst, e.snd)
            return self.let_pair(e, actual.fst, actual.snd, build, span)
        if isinstance(actual, Prod) and isinstance(expected, Prod):
            if isinstance(e, Pair):
                a = self.conv(e.fst, expected.fst, what)
                b = self.conv(e.snd, expected.snd, what)
                return replace(e, fst=a, snd=b, ty=expected)

            def build2(x: Expr, y: Expr) -> Expr:
                a = self.conv(x, expected.fst, what)
                b = self.conv(y, expected.snd, what)
                return _syn(Pair(a, b, span=span), expected)

            return self.let_pair(e, actual.fst, actual.snd, build2, span)
        raise _mismatch(actual, expected, span, what)

    def measure_all(self, e: Expr, span: Span) -> Expr:
        """Measure every qubit in e left to right; the result mirrors e's shape with bools."""
        t = e.ty
        if is_classical(t):
            return e
        if isinstance(t, Quantum):
            if isinstance(t.qtype, Qubit):
                return _syn(Measure(e, span=span), BOOL)
            q = t.qtype
            src = e if t.purity == MIXED else _syn(Cast(MIXED, e, span=span), Quantum(q, MIXED))
            e = _syn(Split(MIXED, src, span=span), Prod(Quantum(q.left, MIXED), Quantum(q.right, MIXED)))
            t = e.ty
        assert isinstance(t, Prod)

        def build(x: Expr, y: Expr) -> Expr:
            a, b = self.measure_all(x, span), self.measure_all(y, span)
            return _syn(Pair(a, b, span=span), Prod(a.ty, b.ty))

        return self.let_pair(e, t.fst, t.snd, build, span)


# ---------------------------------------------------------------- pass 2: implicit discards


def _bound_names(e: Expr) -> set[str]:
    out: set[str] = set()
    for node in walk(e):
        if isinstance(node, Let):
            out.update(pattern_names(node.pattern))
    return out


def _free(e: Expr) -> set[str]:
    return free_vars(e)


def _shadow_span(name: str, e: Expr) -> Span:
    for node in walk(e):
        if isinstance(node, Let) and name in pattern_names(node.pattern):
            for leaf in (node.pattern.left, node.pattern.right):
                if isinstance(leaf, Bind) and leaf.name == name:
                    return leaf.span or node.span
            return node.span
    return None


class Discarder:
    def __init__(self, elab: Elaborator):
        self.elab = elab

    def wrap(self, name: str, t: TypeExpr, body: Expr, span: Span) -> Expr:
        if is_classical(t):
            return body
        if isinstance(t, Quantum):
            if t.purity != PURE:
                shadowed = name in _bound_names(body)
                label = "wildcard" if name.startswith("_w") else f"'{name}'"
                if shadowed:
                    raise LinearityError(f"drops shadowed {name} of non-pure type {format_type(t)}",
                                         _shadow_span(name, body) or span)
                raise LinearityError(
                    f"unused {label} of type {format_type(t)} is not pure and cannot be discarded", span)
            meas = self.elab.measure_all(_syn(Var(name, span=span), t), span)
            pat = PairPat(Wildcard(meas.ty, span=span), Wildcard(BOOL, span=span), span=span)
            bound = _syn(Pair(meas, _syn(BoolLit(True), BOOL), span=span), Prod(meas.ty, BOOL))
            return _syn(Let(pat, bound, body, span=span), body.ty)
        assert isinstance(t, Prod)
        a, b = self.elab.names.fresh("_d"), self.elab.names.fresh("_d")
        inner = self.wrap(a, t.fst, self.wrap(b, t.snd, body, span), span)
        pat = PairPat(Bind(a, t.fst, span=span), Bind(b, t.snd, span=span), span=span)
        return _syn(Let(pat, _syn(Var(name, span=span), t), inner, span=span), body.ty)

    def run(self, e: Expr) -> Expr:
        if isinstance(e, Let):
            bound = self.run(e.bound)
            body = self.run(e.body)
            used = _free(body)
            for leaf in reversed([e.pattern.left, e.pattern.right]):
                if isinstance(leaf, Bind) and leaf.name not in used:
                    body = self.wrap(leaf.name, leaf.ann, body, leaf.span or e.span)
            return replace(e, bound=bound, body=body)
        if isinstance(e, App):
            return replace(e, fn=self.run(e.fn), arg=self.run(e.arg))
        if isinstance(e, Pair):
            return replace(e, fst=self.run(e.fst), snd=self.run(e.snd))
        if isinstance(e, If):
            return replace(e, cond=self.run(e.cond), then=self.run(e.then), else_=self.run(e.else_))
        if isinstance(e, (Gate, Measure, Entangle, Split, Cast)):
            return replace(e, arg=self.run(e.arg))
        return e


def insert_implicit_discards(tp: TypedProgram) -> TypedProgram:
    """Apply the discard pass to every declaration of an elaborated program."""
    names = NameSupply(_all_names(tp.program))
    decls = []
    for d in tp.program.decls:
        s = tp.schemes[d.name]
        el = Elaborator(tp.schemes, names, s.vars)
        decls.append(_discard_decl(d, Discarder(el)))
    return TypedProgram(Program(tp.program.aliases, tuple(decls)), dict(tp.schemes))


def _discard_decl(d: Decl, disc: Discarder) -> Decl:
    body = disc.run(d.body)
    if isinstance(d.param, Bind) and d.param.name not in _free(body):
        body = disc.wrap(d.param.name, d.param.ann, body, d.param.span or d.span)
    return replace(d, body=body)


# ---------------------------------------------------------------- pass 3: strict check


class StrictChecker:
    """Conversion-free typing with linear usage of variables and qubit references."""

    def __init__(self, schemes: dict[str, Scheme]):
        self.schemes = schemes

    def check(self, e: Expr, env: dict[str, TypeExpr]) -> tuple[Expr, Counter, Counter]:
        """Returns (typed expr, free-variable use counts, qubit-reference counts)."""
        if isinstance(e, Var):
            if e.name not in env:
                raise UnknownVariable(f"unknown variable '{e.name}'", e.span)
            return replace(e, ty=env[e.name]), Counter({e.name: 1}), Counter()
        if isinstance(e, FunRef):
            if e.name not in self.schemes:
                raise UnknownVariable(f"unknown function '{e.name}'", e.span)
            s = self.schemes[e.name]
            inst = dict(e.inst)
            if set(inst) != set(s.vars):
                raise PurityUnificationError(f"'{e.name}' is not fully instantiated", e.span)
            return replace(e, ty=subst_purity(s.arrow, inst)), Counter(), Counter()
        if isinstance(e, UnitLit):
            return replace(e, ty=UNIT), Counter(), Counter()
        if isinstance(e, BoolLit):
            return replace(e, ty=BOOL), Counter(), Counter()
        if isinstance(e, QInit):
            return replace(e, ty=Quantum(QUBIT, PURE)), Counter(), Counter()
        if isinstance(e, QVal):
            r = Counter(refs(e.q))
            self._check_refs(r, e.span)
            return replace(e, ty=Quantum(qshape(e.q), e.purity)), Counter(), r
        if isinstance(e, Pair):
            a, ua, ra = self.check(e.fst, env)
            b, ub, rb = self.check(e.snd, env)
            r = ra + rb
            self._check_refs(r, e.span)
            return replace(e, fst=a, snd=b, ty=Prod(a.ty, b.ty)), ua + ub, r
        if isinstance(e, App):
            f, uf, rf = self.check(e.fn, env)
            a, ua, ra = self.check(e.arg, env)
            if not isinstance(f.ty, Arrow):
                raise TypeMismatch(f"cannot apply a value of type {format_type(f.ty)}", e.span)
            if a.ty != f.ty.param:
                raise _mismatch(a.ty, f.ty.param, e.span, "function argument")
            r = rf + ra
            self._check_refs(r, e.span)
            return replace(e, fn=f, arg=a, ty=f.ty.ret), uf + ua, r
        if isinstance(e, Let):
            return self._check_let(e, env)
        if isinstance(e, If):
            c, uc, rc = self.check(e.cond, env)
            if c.ty != BOOL:
                raise TypeMismatch(f"condition has type {format_type(c.ty)}, expected bool", e.span)
            a, ua, ra = self.check(e.then, env)
            b, ub, rb = self.check(e.else_, env)
            if a.ty != b.ty:
                raise BranchTypeMismatch(
                    f"branches have types {format_type(a.ty)} and {format_type(b.ty)}", e.span)
            lin_a = {x for x in ua if is_linear(env[x])}
            lin_b = {x for x in ub if is_linear(env[x])}
            if lin_a != lin_b or set(ra) != set(rb):
                raise LinearityError("if branches consume different quantum values", e.span)
            if isinstance(a.ty, Quantum):
                ty = Quantum(a.ty.qtype, MIXED)
            elif is_classical(a.ty):
                ty = a.ty
            else:
                raise BranchTypeMismatch(f"if branches of type {format_type(a.ty)}", e.span)
            uses = uc + (ua | ub)
            r = rc + ra
            self._check_refs(r, e.span)
            return replace(e, cond=c, then=a, else_=b, ty=ty), uses, r
        if isinstance(e, Gate):
            a, ua, ra = self.check(e.arg, env)
            shape = gate_qtype(e.name)
            if not isinstance(a.ty, Quantum):
                raise TypeMismatch(f"{e.name} expects a quantum value, got {format_type(a.ty)}", e.span)
            if a.ty.qtype != shape:
                n = qtype_size(a.ty.qtype)
                if n != GATE_ARITY[e.name]:
                    raise ArityError(f"{e.name} acts on {GATE_ARITY[e.name]} qubit(s), got {n}", e.span)
                raise NoConversion(f"{e.name} expects {shape}, got {format_type(a.ty)}", e.span)
            return replace(e, arg=a, ty=a.ty), ua, ra
        if isinstance(e, Measure):
            a, ua, ra = self.check(e.arg, env)
            if not (isinstance(a.ty, Quantum) and isinstance(a.ty.qtype, Qubit)):
                raise TypeMismatch(f"measure expects a qubit, got {format_type(a.ty)}", e.span)
            return replace(e, arg=a, ty=BOOL), ua, ra
        if isinstance(e, Entangle):
            a, ua, ra = self.check(e.arg, env)
            t = a.ty
            if not (isinstance(t, Prod) and isinstance(t.fst, Quantum) and isinstance(t.snd, Quantum)):
                raise NoConversion(f"entangle expects a pair of quantum values, got {format_type(t)}",
                                   e.span)
            if t.fst.purity != e.purity or t.snd.purity != e.purity:
                raise PurityMismatch(f"entangle<{e.purity}> applied to {format_type(t)}", e.span)
            return replace(e, arg=a, ty=Quantum(EPair(t.fst.qtype, t.snd.qtype), e.purity)), ua, ra
        if isinstance(e, Split):
            a, ua, ra = self.check(e.arg, env)
            t = a.ty
            if e.purity.is_var:
                raise PurityMismatch("split on a generic purity is not allowed", e.span)
            if not (isinstance(t, Quantum) and isinstance(t.qtype, EPair)):
                raise NoConversion(f"split expects an entangled pair, got {format_type(t)}", e.span)
            if t.purity != e.purity:
                raise PurityMismatch(f"split<{e.purity}> applied to {format_type(t)}", e.span)
            q = t.qtype
            ty = Prod(Quantum(q.left, e.purity), Quantum(q.right, e.purity))
            return replace(e, arg=a, ty=ty), ua, ra
        if isinstance(e, Cast):
            a, ua, ra = self.check(e.arg, env)
            if not isinstance(a.ty, Quantum):
                raise NoConversion(f"cast expects a quantum value, got {format_type(a.ty)}", e.span)
            return replace(e, arg=a, ty=Quantum(a.ty.qtype, e.purity)), ua, ra
        raise TypeMismatch(f"unexpected expression {type(e).__name__}", e.span)

    def _check_refs(self, r: Counter, span: Span) -> None:
        dup = [x for x, n in r.items() if n > 1]
        if dup:
            raise LinearityError(f"qubit(s) {', '.join(sorted(dup))} referenced twice", span)

    def _check_let(self, e: Let, env: dict[str, TypeExpr]):
        pat = e.pattern
        if not isinstance(pat, PairPat) or isinstance(pat.left, PairPat) or isinstance(pat.right, PairPat):
            raise TypeMismatch("let patterns must bind a pair of binders", e.span)
        b, ub, rb = self.check(e.bound, env)
        if not isinstance(b.ty, Prod):
            raise NoConversion(f"pattern expects a pair, got {format_type(b.ty)}", e.span)
        env2 = dict(env)
        for leaf, t in ((pat.left, b.ty.fst), (pat.right, b.ty.snd)):
            if leaf.ann is not None and leaf.ann != t:
                raise _mismatch(t, leaf.ann, leaf.span or e.span, "pattern annotation")
            if isinstance(leaf, Wildcard):
                if is_linear(t):
                    raise LinearityError(f"wildcard discards a quantum value of type {format_type(t)}",
                                         leaf.span or e.span)
            else:
                env2[leaf.name] = t
        body, uy, ry = self.check(e.body, env2)
        names = set(pattern_names(pat))
        for leaf in (pat.left, pat.right):
            if isinstance(leaf, Bind) and is_linear(env2[leaf.name]):
                n = uy.get(leaf.name, 0)
                if n != 1:
                    what = "unused" if n == 0 else "used more than once"
                    raise LinearityError(f"quantum value '{leaf.name}' is {what}", leaf.span or e.span)
        uy = Counter({k: v for k, v in uy.items() if k not in names})
        r = rb + ry
        self._check_refs(r, e.span)
        leaves = [replace(leaf, ann=t) for leaf, t in ((pat.left, b.ty.fst), (pat.right, b.ty.snd))]
        return (replace(e, pattern=PairPat(leaves[0], leaves[1], span=pat.span), bound=b, body=body,
                        ty=body.ty), ub + uy, r)

    def check_decl(self, d: Decl) -> Decl:
        env: dict[str, TypeExpr] = {}
        if isinstance(d.param, Bind):
            env[d.param.name] = d.param.ann
        body, uses, r = self.check(d.body, env)
        if r:
            raise LinearityError("source program contains runtime qubit references", d.span)
        if isinstance(d.param, Bind) and is_linear(d.param.ann) and uses.get(d.param.name, 0) != 1:
            what = "unused" if uses.get(d.param.name, 0) == 0 else "used more than once"
            raise LinearityError(f"parameter '{d.param.name}' is {what}", d.param.span or d.span)
        if body.ty != d.ret:
            raise _mismatch(body.ty, d.ret, d.span, f"body of '{d.name}'")
        return replace(d, body=body)


def check_expr(e: Expr, schemes: dict[str, Scheme], env: Optional[dict[str, TypeExpr]] = None,
               delta: Optional[set[str]] = None) -> Expr:
    """Strictly type a runtime expression; with ``delta`` its qubit references must equal it."""
    env = env or {}
    typed, uses, r = StrictChecker(schemes).check(e, env)
    for x, n in uses.items():
        if x in env and is_linear(env[x]) and n != 1:
            raise LinearityError(f"quantum value '{x}' used {n} times", e.span)
    if delta is not None and set(r) != set(delta):
        raise LinearityError(f"expression owns qubits {sorted(r)} but the state holds {sorted(delta)}",
                             e.span)
    return typed


# ---------------------------------------------------------------- driver


def scheme_of(d: Decl) -> Scheme:
    param_t = d.param.ann if isinstance(d.param, Bind) else (UNIT if d.param is None else d.param_type)
    if param_t is None:
        raise ProgramError(f"parameter of '{d.name}' needs a type annotation", d.span)
    pv = purity_vars(param_t)
    stray = purity_vars(d.ret) - pv
    if stray:
        raise PurityUnificationError(
            f"purity variable(s) {', '.join(sorted(stray))} of '{d.name}' must occur in its parameter",
            d.span)
    return Scheme(param_t, d.ret, frozenset(pv))


def check_program(p: Program, require_main: bool = True) -> TypedProgram:
    """Elaborate, insert discards and strictly check every declaration in order."""
    seen: set[str] = set()
    for d in p.decls:
        if d.name in seen:
            raise ProgramError(f"duplicate declaration of '{d.name}'", d.span)
        seen.add(d.name)
    if require_main and "main" not in seen:
        raise ProgramError("program has no 'main' declaration")
    names = NameSupply(_all_names(p))
    schemes: dict[str, Scheme] = {}
    decls = []
    for d in p.decls:
        s = scheme_of(d)
        el = Elaborator(schemes, names, s.vars)
        env: dict[str, TypeExpr] = {}
        if isinstance(d.param, Bind):
            el.check_annotation(d.param.ann, d.param.span)
            env[d.param.name] = d.param.ann
        body = el.elab(d.body, env, d.ret)
        d1 = replace(d, body=body)
        d2 = _discard_decl(d1, Discarder(el))
        d3 = StrictChecker(schemes).check_decl(d2)
        schemes[d.name] = s
        decls.append(d3)
    return TypedProgram(Program(p.aliases, tuple(decls)), schemes)


def infer_conversions(e: Expr, actual: TypeExpr, expected: TypeExpr,
                      schemes: Optional[dict[str, Scheme]] = None,
                      reserved: Optional[set[str]] = None) -> Expr:
    """Rewrite ``e`` (of type ``actual``) into an expression of type ``expected``."""
    names = NameSupply(reserved or set())
    el = Elaborator(schemes or {}, names, frozenset(purity_vars(actual) | purity_vars(expected)))
    return el.conv(replace(e, ty=actual), expected)
