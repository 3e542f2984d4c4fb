"""Concrete syntax for Twist: types, AST, lexer, parser, desugaring and printing."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Iterator, Optional, Union


Span = Optional[tuple[int, int]]


class TwistError(Exception):
    """Base class for diagnostics that carry a code and an optional source span."""

    code = "Error"

    def __init__(self, message: str, span: Span = None):
        super().__init__(message)
        self.message = message
        self.span = span

    def render(self, filename: str = "<input>") -> str:
        line, col = self.span if self.span else (0, 0)
        return f"{filename}:{line}:{col}: error[{self.code}]: {self.message}"


class ParseError(TwistError):
    code = "ParseError"

    def __init__(self, message: str, span: Span = None, expected: tuple[str, ...] = ()):
        super().__init__(message, span)
        self.expected = expected


class UnknownAlias(TwistError):
    code = "UnknownAlias"


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class Purity:
    kind: str  # "P", "M" or "var"
    name: str = ""

    @property
    def is_var(self) -> bool:
        return self.kind == "var"

    def __str__(self) -> str:
        return "'" + self.name if self.is_var else self.kind


PURE = Purity("P")
MIXED = Purity("M")


def purity_var(name: str) -> Purity:
    if not name:
        raise ValueError("purity variable names must be nonempty")
    return Purity("var", name)


@dataclass(frozen=True)
class Qubit:
    def __str__(self) -> str:
        return "qubit"


@dataclass(frozen=True)
class EPair:
    left: "QType"
    right: "QType"

    def __str__(self) -> str:
        return f"({self.left} & {self.right})"


QType = Union[Qubit, EPair]
QUBIT = Qubit()


def qtype_size(q: QType) -> int:
    return 1 if isinstance(q, Qubit) else qtype_size(q.left) + qtype_size(q.right)


@dataclass(frozen=True)
class BoolT:
    def __str__(self) -> str:
        return "bool"


@dataclass(frozen=True)
class UnitT:
    def __str__(self) -> str:
        return "unit"


@dataclass(frozen=True)
class Prod:
    fst: "TypeExpr"
    snd: "TypeExpr"

    def __str__(self) -> str:
        return f"({self.fst} * {self.snd})"


@dataclass(frozen=True)
class Arrow:
    param: "TypeExpr"
    ret: "TypeExpr"

    def __str__(self) -> str:
        return f"({self.param} -> {self.ret})"


@dataclass(frozen=True)
class Quantum:
    qtype: QType
    purity: Purity

    def __str__(self) -> str:
        q = str(self.qtype)
        return f"{q}<{self.purity}>"


@dataclass(frozen=True)
class AliasT:
    """A type-alias reference; only present before desugaring."""

    name: str

    def __str__(self) -> str:
        return self.name


TypeExpr = Union[BoolT, UnitT, Prod, Arrow, Quantum, AliasT]
BOOL = BoolT()
UNIT = UnitT()


def is_classical(t: TypeExpr) -> bool:
    if isinstance(t, Quantum):
        return False
    if isinstance(t, Prod):
        return is_classical(t.fst) and is_classical(t.snd)
    return True


def purity_vars(t: TypeExpr) -> set[str]:
    if isinstance(t, Quantum):
        return {t.purity.name} if t.purity.is_var else set()
    if isinstance(t, Prod):
        return purity_vars(t.fst) | purity_vars(t.snd)
    if isinstance(t, Arrow):
        return purity_vars(t.param) | purity_vars(t.ret)
    return set()


def subst_purity(t: TypeExpr, inst: dict[str, Purity]) -> TypeExpr:
    if isinstance(t, Quantum):
        if t.purity.is_var and t.purity.name in inst:
            return Quantum(t.qtype, inst[t.purity.name])
        return t
    if isinstance(t, Prod):
        return Prod(subst_purity(t.fst, inst), subst_purity(t.snd, inst))
    if isinstance(t, Arrow):
        return Arrow(subst_purity(t.param, inst), subst_purity(t.ret, inst))
    return t


# ---------------------------------------------------------------- expressions


@dataclass(frozen=True)
class Node:
    span: Span = field(default=None, compare=False, repr=False, kw_only=True)
    ty: Optional[TypeExpr] = field(default=None, compare=False, repr=False, kw_only=True)
    synthetic: bool = field(default=False, compare=False, repr=False, kw_only=True)


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class FunRef(Node):
    name: str
    inst: tuple[tuple[str, Purity], ...] = ()


@dataclass(frozen=True)
class UnitLit(Node):
    pass


@dataclass(frozen=True)
class BoolLit(Node):
    value: bool


@dataclass(frozen=True)
class App(Node):
    fn: "Expr"
    arg: "Expr"


@dataclass(frozen=True)
class Pair(Node):
    fst: "Expr"
    snd: "Expr"


@dataclass(frozen=True)
class Let(Node):
    pattern: "Pattern"
    bound: "Expr"
    body: "Expr"


@dataclass(frozen=True)
class If(Node):
    cond: "Expr"
    then: "Expr"
    else_: "Expr"


@dataclass(frozen=True)
class QInit(Node):
    pass


@dataclass(frozen=True)
class Gate(Node):
    name: str
    arg: "Expr"
    phase: Optional[Fraction] = None


@dataclass(frozen=True)
class Measure(Node):
    arg: "Expr"


@dataclass(frozen=True)
class Entangle(Node):
    purity: Purity
    arg: "Expr"


@dataclass(frozen=True)
class Split(Node):
    purity: Purity
    arg: "Expr"


@dataclass(frozen=True)
class Cast(Node):
    purity: Purity
    arg: "Expr"


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class QPair:
    left: "QuantumValue"
    right: "QuantumValue"


QuantumValue = Union[Ref, QPair]


def refs(q: QuantumValue) -> list[str]:
    if isinstance(q, Ref):
        return [q.name]
    return refs(q.left) + refs(q.right)


def qshape(q: QuantumValue) -> QType:
    if isinstance(q, Ref):
        return QUBIT
    return EPair(qshape(q.left), qshape(q.right))


@dataclass(frozen=True)
class QVal(Node):
    """A runtime quantum value embedded in an expression (never parsed)."""

    q: QuantumValue
    purity: Purity


Expr = Union[Var, FunRef, UnitLit, BoolLit, App, Pair, Let, If, QInit, Gate,
             Measure, Entangle, Split, Cast, QVal]


@dataclass(frozen=True)
class Bind:
    name: str
    ann: Optional[TypeExpr] = None
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Wildcard:
    ann: Optional[TypeExpr] = None
    span: Span = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class PairPat:
    left: "Pattern"
    right: "Pattern"
    span: Span = field(default=None, compare=False, repr=False)


Pattern = Union[Bind, Wildcard, PairPat]


def pattern_names(p: Pattern) -> list[str]:
    if isinstance(p, Bind):
        return [p.name]
    if isinstance(p, PairPat):
        return pattern_names(p.left) + pattern_names(p.right)
    return []


def pattern_type(p: Pattern) -> Optional[TypeExpr]:
    """The type a fully annotated pattern expects, or None if any leaf is bare."""
    if isinstance(p, PairPat):
        a, b = pattern_type(p.left), pattern_type(p.right)
        return Prod(a, b) if a is not None and b is not None else None
    return p.ann


@dataclass(frozen=True)
class Decl:
    name: str
    param: Optional[Pattern]
    ret: TypeExpr
    body: Expr
    span: Span = field(default=None, compare=False, repr=False)

    @property
    def param_type(self) -> TypeExpr:
        if self.param is None:
            return UNIT
        t = pattern_type(self.param)
        if t is None:
            raise ParseError(f"parameter of '{self.name}' needs a type annotation", self.span)
        return t


@dataclass(frozen=True)
class Program:
    aliases: tuple[tuple[str, TypeExpr], ...]
    decls: tuple[Decl, ...]

    def decl(self, name: str) -> Decl:
        for d in self.decls:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def entry(self) -> Optional[Decl]:
        mains = [d for d in self.decls if d.name == "main"]
        return mains[0] if mains else None


GATE_ARITY = {"X": 1, "Z": 1, "H": 1, "CNOT": 2, "CZ": 2, "SWAP": 2, "CPHASE": 2, "TOF": 3, "FRED": 3}


def gate_qtype(name: str) -> QType:
    """Argument shape for a gate: qubit, qubit & qubit, or qubit & (qubit & qubit)."""
    n = GATE_ARITY[name]
    if n == 1:
        return QUBIT
    if n == 2:
        return EPair(QUBIT, QUBIT)
    return EPair(QUBIT, EPair(QUBIT, QUBIT))


# ---------------------------------------------------------------- generic traversal


def children(e: Expr) -> list[Expr]:
    if isinstance(e, (App,)):
        return [e.fn, e.arg]
    if isinstance(e, Pair):
        return [e.fst, e.snd]
    if isinstance(e, Let):
        return [e.bound, e.body]
    if isinstance(e, If):
        return [e.cond, e.then, e.else_]
    if isinstance(e, (Gate, Measure, Entangle, Split, Cast)):
        return [e.arg]
    return []


def walk(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def free_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Let):
        return free_vars(e.bound) | (free_vars(e.body) - set(pattern_names(e.pattern)))
    out: set[str] = set()
    for c in children(e):
        out |= free_vars(c)
    return out


# ---------------------------------------------------------------- lexer

KEYWORDS = {
    "fun", "type", "let", "in", "if", "then", "else", "measure", "qinit",
    "entangle", "split", "cast", "true", "false", "T", "F", "qubit", "bool", "unit",
} | set(GATE_ARITY)

TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>\(\*)
  | (?P<arrow>->)
  | (?P<num>\d+(?:\.\d+)?)
  | (?P<tyvar>'[A-Za-z_][A-Za-z0-9_]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<punct>[()<>,:=*&])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # ident, kw, num, tyvar, punct, eof
    text: str
    line: int
    col: int


def tokenize(src: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    n = len(src)
    while pos < n:
        m = TOKEN_RE.match(src, pos)
        col = pos - line_start + 1
        if not m:
            raise ParseError(f"unexpected character {src[pos]!r}", (line, col))
        kind = m.lastgroup
        text = m.group(kind)
        if kind == "comment":
            depth, i = 1, m.end()
            while depth and i < n:
                if src.startswith("(*", i):
                    depth, i = depth + 1, i + 2
                elif src.startswith("*)", i):
                    depth, i = depth - 1, i + 2
                else:
                    i += 1
            if depth:
                raise ParseError("unterminated comment", (line, col))
            text = src[pos:i]
            end = i
        else:
            end = m.end()
        if kind not in ("ws", "comment"):
            if kind == "arrow":
                kind = "punct"
            elif kind == "ident":
                if text == "_":
                    kind = "punct"
                elif text in KEYWORDS:
                    kind = "kw"
            tokens.append(Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + text.rfind("\n") + 1
        pos = end
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, src: str):
        self.toks = tokenize(src)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("punct", "kw") and t.text in texts

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def fail(self, expected: tuple[str, ...]) -> ParseError:
        t = self.tok
        got = "end of input" if t.kind == "eof" else repr(t.text)
        return ParseError(f"expected {' or '.join(expected)}, got {got}", (t.line, t.col), expected)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.fail((repr(text),))
        return self.advance()

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            raise self.fail(("identifier",))
        return self.advance()

    # program
    def program(self) -> Program:
        aliases, decls = [], []
        while self.tok.kind != "eof":
            if self.at("type"):
                self.advance()
                name = self.ident().text
                self.expect("=")
                aliases.append((name, self.full_type()))
            elif self.at("fun"):
                decls.append(self.fundecl())
            else:
                raise self.fail(("'fun'", "'type'"))
        return Program(tuple(aliases), tuple(decls))

    def fundecl(self) -> Decl:
        start = self.expect("fun")
        name = self.ident().text
        self.expect("(")
        param = None
        if not self.at(")"):
            items = [self.pattern()]
            while self.at(","):
                self.advance()
                items.append(self.pattern())
            param = _nest_patterns(items)
        self.expect(")")
        self.expect(":")
        ret = self.full_type()
        self.expect("=")
        body = self.expr()
        return Decl(name, param, ret, body, span=(start.line, start.col))

    # types
    def full_type(self) -> TypeExpr:
        t = self.type_arrow()
        if isinstance(t, _BareQ):
            raise ParseError(f"quantum type {t.q} needs a purity annotation", t.span)
        return t

    def type_arrow(self):
        lhs = self.type_prod()
        if self.at("->"):
            self.advance()
            rhs = self.type_arrow()
            return Arrow(self._typed(lhs), self._typed(rhs))
        return lhs

    def type_prod(self):
        items = [self.type_postfix()]
        while self.at("*"):
            self.advance()
            items.append(self.type_postfix())
        if len(items) == 1:
            return items[0]
        out = self._typed(items[-1])
        for t in reversed(items[:-1]):
            out = Prod(self._typed(t), out)
        return out

    def _typed(self, t) -> TypeExpr:
        if isinstance(t, _BareQ):
            raise ParseError(f"quantum type {t.q} needs a purity annotation", t.span)
        return t

    def type_postfix(self):
        t = self.type_atom()
        while self.at("&"):
            tok = self.advance()
            rhs = self.type_atom()
            if not isinstance(t, _BareQ) or not isinstance(rhs, _BareQ):
                raise ParseError("'&' joins quantum types without purity", (tok.line, tok.col))
            t = _BareQ(EPair(t.q, rhs.q), t.span)
        if self.at("<"):
            tok = self.advance()
            if not isinstance(t, _BareQ):
                raise ParseError("purity annotation applies only to quantum types", (tok.line, tok.col))
            pur = self.purity()
            self.expect(">")
            return Quantum(t.q, pur)
        return t

    def type_atom(self):
        t = self.tok
        if self.at("qubit"):
            self.advance()
            return _BareQ(QUBIT, (t.line, t.col))
        if self.at("bool"):
            self.advance()
            return BOOL
        if self.at("unit"):
            self.advance()
            return UNIT
        if t.kind == "ident":
            self.advance()
            return AliasT(t.text)
        if self.at("("):
            self.advance()
            inner = self.type_arrow()
            self.expect(")")
            return inner
        raise self.fail(("type",))

    def purity(self) -> Purity:
        t = self.tok
        if t.kind == "ident" and t.text in ("P", "pure"):
            self.advance()
            return PURE
        if t.kind == "ident" and t.text in ("M", "mixed"):
            self.advance()
            return MIXED
        if t.kind == "tyvar":
            self.advance()
            return purity_var(t.text[1:])
        raise self.fail(("purity",))

    # patterns
    def pattern(self) -> Pattern:
        t = self.tok
        span = (t.line, t.col)
        if self.at("("):
            self.advance()
            items = [self.pattern()]
            while self.at(","):
                self.advance()
                items.append(self.pattern())
            self.expect(")")
            p = _nest_patterns(items)
            return p
        if self.at("_"):
            self.advance()
            ann = self._annotation()
            return Wildcard(ann, span=span)
        name = self.ident().text
        return Bind(name, self._annotation(), span=span)

    def _annotation(self) -> Optional[TypeExpr]:
        if self.at(":"):
            self.advance()
            return self.full_type()
        return None

    # expressions
    def expr(self) -> Expr:
        t = self.tok
        span = (t.line, t.col)
        if self.at("let"):
            self.advance()
            pat = self.pattern()
            self.expect("=")
            bound = self.expr()
            self.expect("in")
            body = self.expr()
            return Let(pat, bound, body, span=span)
        if self.at("if"):
            self.advance()
            c = self.expr()
            self.expect("then")
            a = self.expr()
            self.expect("else")
            b = self.expr()
            return If(c, a, b, span=span)
        return self.application()

    def application(self) -> Expr:
        e = self.primary()
        while self._starts_atom():
            t = self.tok
            arg = self.atom()
            e = App(e, arg, span=(t.line, t.col))
        return e

    def _starts_atom(self) -> bool:
        t = self.tok
        return t.kind == "ident" or self.at("(", "true", "false", "T", "F")

    def primary(self) -> Expr:
        t = self.tok
        span = (t.line, t.col)
        if self.at("measure"):
            self.advance()
            return Measure(self.primary(), span=span)
        if self.at("qinit"):
            self.advance()
            self.expect("(")
            self.expect(")")
            return QInit(span=span)
        if t.kind == "kw" and t.text in GATE_ARITY:
            self.advance()
            phase = None
            if t.text == "CPHASE":
                if self.tok.kind != "num":
                    raise self.fail(("phase literal",))
                phase = Fraction(Decimal(self.advance().text))
            return Gate(t.text, self.primary(), phase, span=span)
        if self.at("entangle", "split", "cast"):
            self.advance()
            self.expect("<")
            pur = self.purity()
            self.expect(">")
            self.expect("(")
            items = [self.expr()]
            while self.at(","):
                self.advance()
                items.append(self.expr())
            self.expect(")")
            arg = _nest_exprs(items)
            cls = {"entangle": Entangle, "split": Split, "cast": Cast}[t.text]
            return cls(pur, arg, span=span)
        return self.atom()

    def atom(self) -> Expr:
        t = self.tok
        span = (t.line, t.col)
        if t.kind == "ident":
            self.advance()
            return Var(t.text, span=span)
        if self.at("true", "T"):
            self.advance()
            return BoolLit(True, span=span)
        if self.at("false", "F"):
            self.advance()
            return BoolLit(False, span=span)
        if self.at("("):
            self.advance()
            if self.at(")"):
                self.advance()
                return UnitLit(span=span)
            items = [self.expr()]
            while self.at(","):
                self.advance()
                items.append(self.expr())
            self.expect(")")
            return _nest_exprs(items)
        raise self.fail(("expression",))


@dataclass(frozen=True)
class _BareQ:
    q: QType
    span: Span


def _nest_patterns(items: list[Pattern]) -> Pattern:
    out = items[-1]
    for p in reversed(items[:-1]):
        out = PairPat(p, out, span=_span_of(p))
    return out


def _nest_exprs(items: list[Expr]) -> Expr:
    out = items[-1]
    for e in reversed(items[:-1]):
        out = Pair(e, out, span=e.span)
    return out


def _span_of(p: Pattern) -> Span:
    return p.span


def parse_program(source: str) -> Program:
    return _Parser(source).program()


def parse_expr(source: str) -> Expr:
    p = _Parser(source)
    e = p.expr()
    if p.tok.kind != "eof":
        raise p.fail(("end of input",))
    return e


def parse_type(source: str) -> TypeExpr:
    p = _Parser(source)
    t = p.full_type()
    if p.tok.kind != "eof":
        raise p.fail(("end of input",))
    return t


# ---------------------------------------------------------------- desugaring


def resolve_type(t: TypeExpr, aliases: dict[str, TypeExpr], span: Span = None) -> TypeExpr:
    if isinstance(t, AliasT):
        if t.name not in aliases:
            raise UnknownAlias(f"unknown type '{t.name}'", span)
        return aliases[t.name]
    if isinstance(t, Prod):
        return Prod(resolve_type(t.fst, aliases, span), resolve_type(t.snd, aliases, span))
    if isinstance(t, Arrow):
        return Arrow(resolve_type(t.param, aliases, span), resolve_type(t.ret, aliases, span))
    return t


class _Desugarer:
    def __init__(self, aliases: dict[str, TypeExpr], prefix: str = "_s"):
        self.aliases = aliases
        self.counter = itertools.count(1)
        self.prefix = prefix

    def fresh(self) -> str:
        return f"{self.prefix}{next(self.counter)}"

    def ty(self, t: Optional[TypeExpr], span: Span) -> Optional[TypeExpr]:
        return None if t is None else resolve_type(t, self.aliases, span)

    def pattern(self, p: Pattern) -> Pattern:
        if isinstance(p, Bind):
            return replace(p, ann=self.ty(p.ann, p.span))
        if isinstance(p, Wildcard):
            return replace(p, ann=self.ty(p.ann, p.span))
        return replace(p, left=self.pattern(p.left), right=self.pattern(p.right))

    def decl(self, d: Decl, funs: set[str]) -> Decl:
        ret = self.ty(d.ret, d.span)
        if d.param is None:
            return Decl(d.name, None, ret, self.expr(d.body, funs, set()), span=d.span)
        p = self.pattern(d.param)
        if isinstance(p, Bind):
            if p.ann is None:
                raise ParseError(f"parameter '{p.name}' of '{d.name}' needs a type annotation", p.span)
            body = self.expr(d.body, funs, {p.name})
            return Decl(d.name, p, ret, body, span=d.span)
        ptype = pattern_type(p)
        if ptype is None:
            raise ParseError(f"parameter of '{d.name}' needs a type annotation", d.span)
        name = self.fresh()
        inner = Let(p, Var(name, span=p.span), d.body, span=p.span)
        body = self.expr(inner, funs, {name})
        return Decl(d.name, Bind(name, ptype, span=p.span), ret, body, span=d.span)

    def expr(self, e: Expr, funs: set[str], scope: set[str]) -> Expr:
        if isinstance(e, Var):
            if e.name not in scope and e.name in funs:
                return FunRef(e.name, span=e.span)
            return e
        if isinstance(e, Let):
            return self.let(e, funs, scope)
        if isinstance(e, Measure) and isinstance(e.arg, Pair):
            return self.expr(Pair(Measure(e.arg.fst, span=e.span), Measure(e.arg.snd, span=e.span),
                                  span=e.span), funs, scope)
        if isinstance(e, App):
            return replace(e, fn=self.expr(e.fn, funs, scope), arg=self.expr(e.arg, funs, scope))
        if isinstance(e, Pair):
            return replace(e, fst=self.expr(e.fst, funs, scope), snd=self.expr(e.snd, funs, scope))
        if isinstance(e, If):
            return replace(e, cond=self.expr(e.cond, funs, scope), then=self.expr(e.then, funs, scope),
                           else_=self.expr(e.else_, funs, scope))
        if isinstance(e, (Gate, Measure, Entangle, Split, Cast)):
            return replace(e, arg=self.expr(e.arg, funs, scope))
        return e

    def let(self, e: Let, funs: set[str], scope: set[str]) -> Expr:
        pat = self.pattern(e.pattern)
        bound = self.expr(e.bound, funs, scope)
        if not isinstance(pat, PairPat):
            # single binder: let p = e in e'  ~>  let (p, _) = (e, true) in e'
            pat = PairPat(pat, Wildcard(span=pat.span), span=pat.span)
            bound = Pair(bound, BoolLit(True, span=e.span), span=e.span)
        names = pattern_names(pat)
        if len(names) != len(set(names)):
            raise ParseError("duplicate name in pattern", pat.span)
        inner: list[tuple[Pattern, str]] = []
        leaves = []
        for sub in (pat.left, pat.right):
            if isinstance(sub, PairPat):
                name = self.fresh()
                leaves.append(Bind(name, pattern_type(sub), span=sub.span))
                inner.append((sub, name))
            else:
                leaves.append(sub)
        body = e.body
        for sub, name in reversed(inner):
            body = Let(sub, Var(name, span=sub.span), body, span=sub.span)
        new_scope = scope | set(pattern_names(PairPat(leaves[0], leaves[1])))
        body = self.expr(body, funs, new_scope)
        return Let(PairPat(leaves[0], leaves[1], span=pat.span), bound, body, span=e.span)


def desugar(p: Program) -> Program:
    """Lower a parsed program to the core language (aliases resolved, lets binary)."""
    aliases: dict[str, TypeExpr] = {}
    for name, t in p.aliases:
        aliases[name] = resolve_type(t, aliases)
    ds = _Desugarer(aliases)
    funs: set[str] = set()
    decls = []
    for d in p.decls:
        decls.append(ds.decl(d, set(funs)))
        funs.add(d.name)
    return Program((), tuple(decls))


# ---------------------------------------------------------------- printing


def format_type(t: TypeExpr) -> str:
    if isinstance(t, Quantum):
        return f"{t.qtype}<{t.purity}>"
    if isinstance(t, Prod):
        return f"({format_type(t.fst)} * {format_type(t.snd)})"
    if isinstance(t, Arrow):
        return f"({format_type(t.param)} -> {format_type(t.ret)})"
    return str(t)


def format_phase(f: Fraction) -> str:
    d = Decimal(f.numerator) / Decimal(f.denominator)
    if Fraction(d) != f:
        raise ValueError(f"phase {f} has no finite decimal expansion")
    s = format(d, "f")
    return s if "." in s else s + ".0"


def format_pattern(p: Pattern) -> str:
    if isinstance(p, PairPat):
        return f"({format_pattern(p.left)}, {format_pattern(p.right)})"
    head = p.name if isinstance(p, Bind) else "_"
    return head if p.ann is None else f"{head} : {format_type(p.ann)}"


def format_expr(e: Expr, indent: int = 2) -> str:
    pad = " " * indent
    if isinstance(e, Var):
        return e.name
    if isinstance(e, FunRef):
        return e.name
    if isinstance(e, UnitLit):
        return "()"
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, QInit):
        return "qinit ()"
    if isinstance(e, App):
        return f"{_wrap(e.fn)} {_arg(e.arg, indent)}"
    if isinstance(e, Pair):
        return f"({format_expr(e.fst, indent)}, {format_expr(e.snd, indent)})"
    if isinstance(e, Let):
        pat = e.pattern
        ptxt = format_pattern(pat)
        if isinstance(pat, (Bind, Wildcard)):
            ptxt = f"({ptxt})"
        return (f"let {ptxt} = {format_expr(e.bound, indent + 2)} in\n"
                f"{pad}{format_expr(e.body, indent)}")
    if isinstance(e, If):
        return (f"(if {format_expr(e.cond, indent)} then {format_expr(e.then, indent + 2)} "
                f"else {format_expr(e.else_, indent + 2)})")
    if isinstance(e, Gate):
        ph = f" {format_phase(e.phase)}" if e.phase is not None else ""
        return f"{e.name}{ph} {_arg(e.arg, indent)}"
    if isinstance(e, Measure):
        return f"measure ({format_expr(e.arg, indent)})"
    if isinstance(e, (Entangle, Split, Cast)):
        kw = type(e).__name__.lower()
        return f"{kw}<{e.purity}>({format_expr(e.arg, indent)})"
    if isinstance(e, QVal):
        return f"<{'&'.join(refs(e.q))}:{e.purity}>"
    raise TypeError(f"cannot print {e!r}")


def _arg(e: Expr, indent: int) -> str:
    s = format_expr(e, indent)
    return s if isinstance(e, (Pair, UnitLit)) else f"({s})"


def _wrap(e: Expr) -> str:
    s = format_expr(e)
    return s if isinstance(e, (Var, FunRef)) else f"({s})"


def pretty_print(p: Program) -> str:
    out = []
    for name, t in p.aliases:
        out.append(f"type {name} = {format_type(t)}")
    for d in p.decls:
        param = "" if d.param is None else format_pattern(d.param)
        out.append(f"fun {d.name} ({param}) : {format_type(d.ret)} =\n  {format_expr(d.body, 2)}")
    return "\n\n".join(out) + "\n"
