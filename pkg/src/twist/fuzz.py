"""Random well-typed programs for the progress and preservation harnesses.

Programs are let-chains over a pool of linear variables. Each step consumes some
variables and binds fresh ones whose types are tracked, so the output typechecks by
construction. Leftover mixed values are measured before the result, since only pure
values may be discarded implicitly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

PRELUDE = """\
fun coin () : bool = measure (H (qinit ()))
fun bell () : (qubit & qubit)<P> = CNOT (H (qinit ()), qinit ())
fun flip (q : qubit<'a>) : qubit<'a> = X (q)
fun hadamard (q : qubit<'a>) : qubit<'a> = H (q)
fun swap_pair (xy : (qubit & qubit)<'a>) : (qubit & qubit)<'a> = SWAP (xy)
"""

ONE_QUBIT = ("H", "X", "Z", "flip", "hadamard")
TWO_QUBIT = ("CNOT", "CZ", "SWAP")


@dataclass
class _Pool:
    qubits: dict[str, str] = field(default_factory=dict)  # name -> purity
    pairs: dict[str, str] = field(default_factory=dict)
    bools: list[str] = field(default_factory=list)
    counter: int = 0

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"{stem}{self.counter}"

    def live_qubits(self) -> int:
        return len(self.qubits) + 2 * len(self.pairs)


def _qt(p: str) -> str:
    return f"qubit<{p}>"


def _pt(p: str) -> str:
    return f"(qubit & qubit)<{p}>"


class ProgramGenerator:
    """Draws main bodies of ``steps`` let-bindings over at most ``max_qubits`` live qubits."""

    def __init__(self, rng: random.Random, *, steps: int = 12, max_qubits: int = 5):
        self.rng = rng
        self.steps = steps
        self.max_qubits = max_qubits

    def body(self) -> tuple[list[str], str, str]:
        pool = _Pool()
        lines: list[str] = []
        for _ in range(self.steps):
            lines.append(self._step(pool))
        result, ty = self._result(pool, lines)
        return lines, result, ty

    def source(self) -> str:
        lines, result, ty = self.body()
        body = "\n".join("  " + ln for ln in lines)
        return f"{PRELUDE}\nfun main () : {ty} =\n{body}\n  {result}\n"

    def _pick(self, d) -> str:
        return self.rng.choice(sorted(d))

    def _step(self, pool: _Pool) -> str:
        r = self.rng
        options = []
        if pool.live_qubits() < self.max_qubits:
            options += ["alloc", "alloc"]
            if pool.live_qubits() + 2 <= self.max_qubits:
                options.append("bell")
        if pool.qubits:
            options += ["gate1", "gate1", "measure", "cast"]
        if len(pool.qubits) >= 2:
            options += ["gate2", "gate2", "entangle"]
        if pool.pairs:
            options += ["split", "pairgate"]
        if pool.bools and pool.qubits:
            options += ["if_q", "if_b"]
        if len(pool.bools) < 3:
            options.append("coin")
        kind = r.choice(options)
        return getattr(self, "_" + kind)(pool)

    def _alloc(self, pool: _Pool) -> str:
        x = pool.fresh("q")
        pool.qubits[x] = "P"
        init = "qinit ()" if self.rng.random() < 0.6 else "H (qinit ())"
        return f"let {x} = {init} in"

    def _bell(self, pool: _Pool) -> str:
        w = pool.fresh("w")
        pool.pairs[w] = "P"
        return f"let {w} = bell () in"

    def _coin(self, pool: _Pool) -> str:
        b = pool.fresh("b")
        pool.bools.append(b)
        return f"let {b} = coin () in"

    def _gate1(self, pool: _Pool) -> str:
        x = self._pick(pool.qubits)
        g = self.rng.choice(ONE_QUBIT)
        p = pool.qubits.pop(x)
        y = pool.fresh("q")
        pool.qubits[y] = p
        return f"let {y} : {_qt(p)} = {g} ({x}) in"

    def _gate2(self, pool: _Pool) -> str:
        a, b = self.rng.sample(sorted(pool.qubits), 2)
        del pool.qubits[a], pool.qubits[b]
        g = self.rng.choice(TWO_QUBIT)
        c, d = pool.fresh("q"), pool.fresh("q")
        pool.qubits[c] = pool.qubits[d] = "M"
        return f"let ({c} : qubit<M>, {d} : qubit<M>) = {g} ({a}, {b}) in"

    def _entangle(self, pool: _Pool) -> str:
        a, b = self.rng.sample(sorted(pool.qubits), 2)
        pa, pb = pool.qubits.pop(a), pool.qubits.pop(b)
        p = "P" if pa == pb == "P" else "M"
        w = pool.fresh("w")
        pool.pairs[w] = p
        return f"let {w} : {_pt(p)} = ({a}, {b}) in"

    def _split(self, pool: _Pool) -> str:
        w = self._pick(pool.pairs)
        p = pool.pairs.pop(w)
        if p == "P" and self.rng.random() < 0.5:
            q = "P"  # runtime-checked split; may abort on an entangled pair
        else:
            q = "M"
        a, b = pool.fresh("q"), pool.fresh("q")
        pool.qubits[a] = pool.qubits[b] = q
        return f"let ({a} : {_qt(q)}, {b} : {_qt(q)}) = {w} in"

    def _pairgate(self, pool: _Pool) -> str:
        w = self._pick(pool.pairs)
        p = pool.pairs.pop(w)
        v = pool.fresh("w")
        pool.pairs[v] = p
        g = self.rng.choice(TWO_QUBIT + ("swap_pair",))
        return f"let {v} : {_pt(p)} = {g} ({w}) in"

    def _measure(self, pool: _Pool) -> str:
        x = self._pick(pool.qubits)
        del pool.qubits[x]
        b = pool.fresh("b")
        pool.bools.append(b)
        return f"let {b} = measure ({x}) in"

    def _cast(self, pool: _Pool) -> str:
        x = self._pick(pool.qubits)
        p = pool.qubits.pop(x)
        y = pool.fresh("q")
        target = "M" if p == "P" else "P"
        pool.qubits[y] = target
        if target == "M":
            return f"let {y} = cast<M> ({x}) in"
        return f"let {y} = cast<P> (H (H ({x}))) in"

    def _if_q(self, pool: _Pool) -> str:
        b = pool.bools.pop(self.rng.randrange(len(pool.bools)))
        x = self._pick(pool.qubits)
        del pool.qubits[x]
        g1, g2 = self.rng.choice(ONE_QUBIT), self.rng.choice(ONE_QUBIT)
        y = pool.fresh("q")
        pool.qubits[y] = "M"
        return f"let {y} : qubit<M> = if {b} then {g1} ({x}) else {g2} ({x}) in"

    def _if_b(self, pool: _Pool) -> str:
        b = pool.bools.pop(self.rng.randrange(len(pool.bools)))
        x = self._pick(pool.qubits)
        del pool.qubits[x]
        c = pool.fresh("b")
        pool.bools.append(c)
        return f"let {c} = if {b} then measure ({x}) else measure (H ({x})) in"

    def _result(self, pool: _Pool, lines: list[str]) -> tuple[str, str]:
        choices = [("q", x) for x in pool.qubits] + [("w", w) for w in pool.pairs]
        if not choices:
            if pool.bools:
                return pool.bools[-1], "bool"
            lines.append("let q0 = qinit () in")
            return "q0", "qubit<P>"
        kind, x = self.rng.choice(sorted(choices))
        ty = _qt(pool.qubits.pop(x)) if kind == "q" else _pt(pool.pairs.pop(x))
        lines.extend(self._drop_mixed(pool))
        return x, ty

    def _drop_mixed(self, pool: _Pool) -> list[str]:
        """Measure leftover M values; only pure ones may be discarded implicitly."""
        out = []
        for w in sorted(w for w, p in pool.pairs.items() if p == "M"):
            a, b = pool.fresh("q"), pool.fresh("q")
            out.append(f"let ({a} : qubit<M>, {b} : qubit<M>) = {w} in")
            pool.qubits[a] = pool.qubits[b] = "M"
        for x in sorted(x for x, p in pool.qubits.items() if p == "M"):
            out.append(f"let {pool.fresh('b')} = measure ({x}) in")
        return out


def generate(seed: int, *, steps: Optional[int] = None, max_qubits: int = 5) -> str:
    """A deterministic random program for ``seed``."""
    rng = random.Random(seed)
    n = steps if steps is not None else rng.randint(3, 14)
    return ProgramGenerator(rng, steps=n, max_qubits=max_qubits).source()
