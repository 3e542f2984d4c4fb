"""Bundled benchmark programs, the ModMul(n) generator and the golden verdict table."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional

GOLDEN_FILE = "golden.json"
MODMUL_SIZES = (4, 8, 12)


def _programs():
    return resources.files("twist").joinpath("programs")


def corpus_files() -> list[str]:
    return sorted(p.name for p in _programs().iterdir() if p.name.endswith(".tw"))


def load_source(filename: str) -> str:
    if not filename.endswith(".tw"):
        filename += ".tw"
    return _programs().joinpath(filename).read_text()


def golden_text() -> str:
    return _programs().joinpath(GOLDEN_FILE).read_text()


@dataclass(frozen=True)
class Benchmark:
    """One row of the verdict table; ``modmul`` rows are generated rather than bundled."""

    name: str
    file: Optional[str] = None
    modmul: Optional[tuple[int, bool]] = None

    def source(self) -> str:
        if self.modmul is not None:
            return modmul_source(*self.modmul)
        return load_source(self.file)


def benchmarks(expected: dict) -> list[Benchmark]:
    out = []
    for row in expected["rows"]:
        gen = row.get("modmul")
        if gen is not None:
            out.append(Benchmark(row["name"], modmul=(gen["n"], gen["not_inverse"])))
        else:
            out.append(Benchmark(row["name"], file=row["file"]))
    return out


def load_golden(path: Optional[str] = None) -> dict:
    text = golden_text() if path is None else open(path).read()
    return json.loads(text)


# ---------------------------------------------------------------- ModMul(n)

_SMALL = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
          "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
          "eighteen", "nineteen"]
_TENS = {2: "twenty", 3: "thirty", 4: "forty"}


def number_word(k: int) -> str:
    if k < 20:
        return _SMALL[k]
    tens, ones = divmod(k, 10)
    return _TENS[tens] + ("" if ones == 0 else "_" + _SMALL[ones])


def swap_schedule(n: int) -> list[tuple[int, int]]:
    """Adjacent swaps walking down from the top of the register, then a wrap-around swap."""
    return [(i, i + 1) for i in range(n - 2, 0, -1)] + [(1, n)]


def _apply_classically(n: int, swaps: list[tuple[int, int]], x: int) -> int:
    """Controlled negation then swaps on an n-bit value; bit 1 is the most significant."""
    bits = [(x >> (n - i)) & 1 for i in range(1, n + 1)]
    bits = [1 - b for b in bits]
    for a, b in swaps:
        bits[a - 1], bits[b - 1] = bits[b - 1], bits[a - 1]
    return int("".join(map(str, bits)), 2)


def multiplier(n: int, swaps: list[tuple[int, int]]) -> Optional[int]:
    """The constant k with f(x) = k*x mod 2^n - 1 on 1..2^n - 2, if there is one."""
    m = (1 << n) - 1
    k = _apply_classically(n, swaps, 1) % m
    if all(_apply_classically(n, swaps, x) % m == (k * x) % m for x in range(2, m)):
        return k
    return None


def _reg_type(n: int) -> str:
    t = "qubit"
    for _ in range(n - 1):
        t = f"({t} & qubit)"
    return t


def _reg_pattern(n: int, leaf) -> str:
    p = leaf(1)
    for i in range(2, n + 1):
        p = f"({p}, {leaf(i)})"
    return p


def _mult_fun(n: int, name: str, swaps: list[tuple[int, int]], full: str, reg_m: str,
              header: list[str], mark: Optional[int] = None) -> list[str]:
    lines = list(header)
    lines.append(f"fun {name} (cqs : {full}) : {full} =")
    lines.append(f"let (c : qubit<M>, qs : {reg_m}) = cqs in")
    lines.append(f"let {_reg_pattern(n, lambda i: f'q{i} : qubit<M>')} = qs in")
    for i in range(1, n + 1):
        lines.append(f"let (c : qubit<M>, q{i} : qubit<M>) = CNOT (c, q{i}) in")
    for k, (a, b) in enumerate(swaps):
        tail = " (* WRONG *)" if k == mark else ""
        lines.append(f"let (c : qubit<M>, (q{a} : qubit<M>, q{b} : qubit<M>)) = "
                     f"FRED (c, (q{a}, q{b})) in{tail}")
    lines.append(f"let res : {full} = (c, {_reg_pattern(n, lambda i: f'q{i}')}) in")
    lines.append("res")
    return lines


def modmul_source(n: int, not_inverse: bool = False) -> str:
    """Controlled modular multiplication by k then by k^-1 mod 2^n - 1 on an n-qubit register.

    The result splits the control back off the register, so the runtime check passes
    exactly when the second multiplication undoes the first.
    """
    if n < 3:
        raise ValueError("ModMul needs at least 3 register qubits")
    m = (1 << n) - 1
    fwd = swap_schedule(n)
    inv = list(reversed(fwd))
    mark = None
    if not_inverse:
        inv[1] = (1, 3)
        mark = 1
    k_fwd = multiplier(n, fwd)
    k_inv = multiplier(n, list(reversed(fwd)))
    full, reg_m, reg_p = number_word(n + 1), number_word(n) + "_m", number_word(n) + "_p"
    reg = _reg_type(n)
    lines = [
        f"type {full} = (qubit & {reg})<P>",
        f"type {reg_m} = {reg}<M>",
        f"type {reg_p} = {reg}<P>",
        "",
    ]
    swaps_word = number_word(len(fwd))
    lines += _mult_fun(n, f"mult{k_fwd}", fwd, full, reg_m, [
        f"(* controlled multiply by {k_fwd} mod {m},",
        f" * using negation followed by {swaps_word} controlled swaps *)"])
    lines.append("")
    lines += _mult_fun(n, f"mult{k_inv}", inv, full, reg_m,
                       [f"(* controlled multiply by {k_inv} mod {m} *)"], mark)
    num = "o ()"
    for i in range(2, n + 1):
        num = f"({num}, {'o ()' if i == n else 'z ()'})"
    value = (1 << (n - 1)) | 1
    lines += [
        "",
        "fun z () : qubit<P> = qinit ()",
        "fun o () : qubit<P> = H (qinit ())",
        f"fun main () : (qubit<P> * {reg_p}) =",
        "let c = o () in",
        f"(* 0b{value:0{n}b} = {value} *)",
        f"let num : {reg_p} = {num} in",
        f"let (c : qubit<P>, rest : {reg_p}) = mult{k_inv} (mult{k_fwd} (entangle<P>(c, num))) in",
        f"(* restored to 0b{value:0{n}b} *)",
        "(c, rest)",
    ]
    return "\n".join(lines) + "\n"
