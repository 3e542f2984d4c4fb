"""Gate specifications and in-place kernels over a (2,)*n amplitude tensor."""

from __future__ import annotations

import cmath
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .syntax import GATE_ARITY

SQRT_HALF = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class GateSpec:
    name: str
    phase: Optional[Fraction] = None

    def __post_init__(self):
        if self.name not in GATE_ARITY:
            raise ValueError(f"unknown gate {self.name}")
        if (self.name == "CPHASE") != (self.phase is not None):
            raise ValueError("CPHASE takes exactly one phase fraction; other gates take none")

    @property
    def arity(self) -> int:
        return GATE_ARITY[self.name]

    def matrix(self) -> np.ndarray:
        return gate_matrix(self)


def cphase_factor(f: Fraction) -> complex:
    """e^{2 pi i f}, snapping quarter turns to exact values."""
    f = f % 1
    exact = {Fraction(0): 1, Fraction(1, 4): 1j, Fraction(1, 2): -1, Fraction(3, 4): -1j}
    if f in exact:
        return complex(exact[f])
    return cmath.exp(2j * cmath.pi * float(f))


def _perm_matrix(perm: list[int]) -> np.ndarray:
    m = np.zeros((len(perm), len(perm)), dtype=complex)
    for src, dst in enumerate(perm):
        m[dst, src] = 1
    return m


def gate_matrix(g: GateSpec) -> np.ndarray:
    n = g.name
    if n == "X":
        return np.array([[0, 1], [1, 0]], dtype=complex)
    if n == "Z":
        return np.diag([1, -1]).astype(complex)
    if n == "H":
        return SQRT_HALF * np.array([[1, 1], [1, -1]], dtype=complex)
    if n == "CNOT":
        return _perm_matrix([0, 1, 3, 2])
    if n == "CZ":
        return np.diag([1, 1, 1, -1]).astype(complex)
    if n == "SWAP":
        return _perm_matrix([0, 2, 1, 3])
    if n == "CPHASE":
        return np.diag([1, 1, 1, cphase_factor(g.phase)]).astype(complex)
    if n == "TOF":
        return _perm_matrix([0, 1, 2, 3, 4, 5, 7, 6])
    if n == "FRED":
        return _perm_matrix([0, 1, 2, 3, 4, 6, 5, 7])
    raise ValueError(n)


def check_unitary(g: GateSpec, tol: float = 1e-12) -> bool:
    u = gate_matrix(g)
    return bool(np.allclose(u.conj().T @ u, np.eye(len(u)), atol=tol))


def _idx(n: int, fixed: dict[int, int]) -> tuple:
    return tuple(fixed.get(i, slice(None)) for i in range(n))


def apply_kernel(t: np.ndarray, g: GateSpec, axes: list[int], conj: bool = False) -> None:
    """Apply gate g in place on the given axes of tensor t (each axis has length 2).

    With conj=True the complex conjugate of U is applied, which is what the bra side
    of a density matrix needs.
    """
    n = t.ndim
    name = g.name
    if name == "X":
        (a,) = axes
        s0, s1 = _idx(n, {a: 0}), _idx(n, {a: 1})
        tmp = t[s0].copy()
        t[s0] = t[s1]
        t[s1] = tmp
    elif name == "Z":
        t[_idx(n, {axes[0]: 1})] *= -1
    elif name == "H":
        (a,) = axes
        s0, s1 = _idx(n, {a: 0}), _idx(n, {a: 1})
        x0 = t[s0].copy()
        x1 = t[s1]
        t[s0] = (x0 + x1) * SQRT_HALF
        t[s1] = (x0 - x1) * SQRT_HALF
    elif name == "CNOT":
        c, x = axes
        s0, s1 = _idx(n, {c: 1, x: 0}), _idx(n, {c: 1, x: 1})
        tmp = t[s0].copy()
        t[s0] = t[s1]
        t[s1] = tmp
    elif name == "CZ":
        t[_idx(n, {axes[0]: 1, axes[1]: 1})] *= -1
    elif name == "CPHASE":
        f = cphase_factor(g.phase)
        t[_idx(n, {axes[0]: 1, axes[1]: 1})] *= f.conjugate() if conj else f
    elif name == "SWAP":
        a, b = axes
        s0, s1 = _idx(n, {a: 0, b: 1}), _idx(n, {a: 1, b: 0})
        tmp = t[s0].copy()
        t[s0] = t[s1]
        t[s1] = tmp
    elif name == "TOF":
        c1, c2, x = axes
        s0, s1 = _idx(n, {c1: 1, c2: 1, x: 0}), _idx(n, {c1: 1, c2: 1, x: 1})
        tmp = t[s0].copy()
        t[s0] = t[s1]
        t[s1] = tmp
    elif name == "FRED":
        c, a, b = axes
        s0, s1 = _idx(n, {c: 1, a: 0, b: 1}), _idx(n, {c: 1, a: 1, b: 0})
        tmp = t[s0].copy()
        t[s0] = t[s1]
        t[s1] = tmp
    else:  # pragma: no cover - GateSpec validates names
        raise ValueError(name)


def apply_dense(t: np.ndarray, u: np.ndarray, axes: list[int]) -> np.ndarray:
    """Reference route: contract an explicit unitary against the target axes."""
    k = len(axes)
    ut = u.reshape((2,) * (2 * k))
    out = np.tensordot(ut, t, axes=(list(range(k, 2 * k)), axes))
    return np.moveaxis(out, list(range(k)), axes)
