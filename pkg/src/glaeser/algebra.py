"""Exact multivariate polynomials and a small closed-form expression language.

Polynomials keep exact rational coefficients (parse time); evaluation is done
in 64-bit floats because the limit machinery downstream dominates the error
budget anyway.  Expressions add division and ``abs`` so that the piecewise
test functions (written via abs identities, e.g. ``min(a,0) = (a-abs(a))/2``)
stay inside one small grammar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence, Union

import numpy as np

Exponent = tuple[int, ...]


class ParseError(ValueError):
    """Syntax or name error while parsing; carries the offending position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class EvalDomainError(ZeroDivisionError):
    """Division by zero while evaluating an expression at a point."""

    def __init__(self, point):
        super().__init__(f"expression undefined at {tuple(point)}: division by zero")
        self.point = tuple(point)


# ---------------------------------------------------------------------------
# Polynomials


@dataclass(frozen=True)
class Poly:
    """Sparse polynomial: map exponent-vector -> nonzero rational coefficient."""

    nvars: int
    terms: dict[Exponent, Fraction]

    def __post_init__(self):
        for exp, coeff in self.terms.items():
            if len(exp) != self.nvars:
                raise ValueError(f"exponent {exp} has wrong arity for nvars={self.nvars}")
            if any(e < 0 for e in exp):
                raise ValueError(f"negative exponent in {exp}")
            if coeff == 0:
                raise ValueError("zero coefficient stored")

    def sorted_terms(self) -> list[tuple[Exponent, Fraction]]:
        return sorted(self.terms.items())

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Float view (exponent matrix, coefficient vector) in sorted term order."""
        cached = _poly_cache.get(id(self))
        if cached is not None and cached[0] is self:
            return cached[1], cached[2]
        items = self.sorted_terms()
        if items:
            exps = np.array([e for e, _ in items], dtype=np.int64)
            coeffs = np.array([float(c) for _, c in items], dtype=np.float64)
        else:
            exps = np.zeros((0, self.nvars), dtype=np.int64)
            coeffs = np.zeros(0, dtype=np.float64)
        _poly_cache[id(self)] = (self, exps, coeffs)
        return exps, coeffs

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for exp, coeff in self.sorted_terms():
            factors = []
            if coeff != 1 or not any(exp):
                factors.append(str(coeff))
            for i, e in enumerate(exp):
                if e == 1:
                    factors.append(_default_names[i] if self.nvars <= len(_default_names) else f"x{i}")
                elif e > 1:
                    name = _default_names[i] if self.nvars <= len(_default_names) else f"x{i}"
                    factors.append(f"{name}^{e}")
            parts.append("*".join(factors))
        return " + ".join(parts)

    def to_text(self, names: Sequence[str]) -> str:
        """Render with the given variable names; output re-parses to the same Poly."""
        if not self.terms:
            return "0"
        parts = []
        for exp, coeff in self.sorted_terms():
            factors = []
            if coeff != 1 or not any(exp):
                factors.append(str(coeff))
            for i, e in enumerate(exp):
                if e == 1:
                    factors.append(names[i])
                elif e > 1:
                    factors.append(f"{names[i]}^{e}")
            parts.append("*".join(factors))
        return " + ".join(parts)


# id-keyed cache of float views; Poly is immutable so this is safe.
_poly_cache: dict[int, tuple[Poly, np.ndarray, np.ndarray]] = {}

_default_names = ["x", "y", "z", "w", "u", "v"]


def eval_poly(p: Poly, x: Sequence[float]) -> float:
    """Evaluate at one point; deterministic (sorted) term order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.nvars,):
        raise ValueError(f"point has dimension {x.shape}, expected ({p.nvars},)")
    exps, coeffs = p.arrays()
    if len(coeffs) == 0:
        return 0.0
    monos = np.prod(x[None, :] ** exps, axis=1)
    return float(np.dot(coeffs, monos))


def eval_poly_many(p: Poly, X: np.ndarray) -> np.ndarray:
    """Evaluate at an (m, nvars) batch of points."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.nvars:
        raise ValueError(f"batch has shape {X.shape}, expected (m, {p.nvars})")
    exps, coeffs = p.arrays()
    if len(coeffs) == 0:
        return np.zeros(X.shape[0])
    monos = np.prod(X[:, None, :] ** exps[None, :, :], axis=2)
    return monos @ coeffs


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class Expr:
    """Closed-form expression AST node.

    op is one of: const, var, add, sub, mul, div, pow, neg, abs.
    """

    op: str
    value: Fraction | None = None
    index: int | None = None
    power: int | None = None
    args: tuple["Expr", ...] = field(default_factory=tuple)

    def __str__(self) -> str:
        return expr_to_text(self, _default_names)


def expr_const(c: Union[int, Fraction]) -> Expr:
    return Expr("const", value=Fraction(c))


def expr_var(i: int) -> Expr:
    return Expr("var", index=i)


def expr_of(p: Poly) -> Expr:
    """Expression tree evaluating exactly like the polynomial."""
    node = None
    for exp, coeff in p.sorted_terms():
        term: Expr | None = None if coeff == 1 and any(exp) else expr_const(coeff)
        for i, e in enumerate(exp):
            v = expr_var(i) if e == 1 else Expr("pow", power=e, args=(expr_var(i),))
            if e == 0:
                continue
            term = v if term is None else Expr("mul", args=(term, v))
        if term is None:
            term = expr_const(coeff)
        node = term if node is None else Expr("add", args=(node, term))
    return node if node is not None else expr_const(0)


def expr_to_text(e: Expr, names: Sequence[str]) -> str:
    def rec(node: Expr, parent_prec: int) -> str:
        if node.op == "const":
            s = str(node.value)
            return f"({s})" if node.value < 0 and parent_prec > 0 else s
        if node.op == "var":
            return names[node.index]
        if node.op == "abs":
            return f"abs({rec(node.args[0], 0)})"
        if node.op == "neg":
            inner = rec(node.args[0], 3)
            s = f"-{inner}"
            return f"({s})" if parent_prec > 2 else s
        if node.op == "pow":
            base = rec(node.args[0], 4)
            return f"{base}^{node.power}"
        prec = {"add": 1, "sub": 1, "mul": 2, "div": 2}[node.op]
        sym = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[node.op]
        left = rec(node.args[0], prec)
        right = rec(node.args[1], prec + 1)
        s = f"{left}{sym}{right}"
        return f"({s})" if parent_prec > prec else s

    return rec(e, 0)


def eval_expr(e: Expr, x: Sequence[float]) -> float:
    """Evaluate at one point; raises EvalDomainError when a divisor vanishes."""
    x = np.asarray(x, dtype=np.float64)

    def rec(node: Expr) -> float:
        if node.op == "const":
            return float(node.value)
        if node.op == "var":
            return float(x[node.index])
        if node.op == "add":
            return rec(node.args[0]) + rec(node.args[1])
        if node.op == "sub":
            return rec(node.args[0]) - rec(node.args[1])
        if node.op == "mul":
            return rec(node.args[0]) * rec(node.args[1])
        if node.op == "div":
            denom = rec(node.args[1])
            if denom == 0.0:
                raise EvalDomainError(x)
            return rec(node.args[0]) / denom
        if node.op == "pow":
            base = rec(node.args[0])
            if node.power < 0 and base == 0.0:
                raise EvalDomainError(x)
            return float(base ** node.power)
        if node.op == "neg":
            return -rec(node.args[0])
        if node.op == "abs":
            return abs(rec(node.args[0]))
        raise AssertionError(f"unknown op {node.op}")

    return rec(e)


def eval_expr_many(e: Expr, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch evaluation; returns (values, defined_mask).

    Entries where some divisor vanished are NaN with defined_mask False; the
    probing machinery treats those points as excluded rather than erroring.
    """
    X = np.asarray(X, dtype=np.float64)
    undefined = np.zeros(X.shape[0], dtype=bool)

    def rec(node: Expr) -> np.ndarray:
        if node.op == "const":
            return np.full(X.shape[0], float(node.value))
        if node.op == "var":
            return X[:, node.index].copy()
        if node.op == "add":
            return rec(node.args[0]) + rec(node.args[1])
        if node.op == "sub":
            return rec(node.args[0]) - rec(node.args[1])
        if node.op == "mul":
            return rec(node.args[0]) * rec(node.args[1])
        if node.op == "div":
            num, den = rec(node.args[0]), rec(node.args[1])
            bad = den == 0.0
            undefined[bad] = True
            den = np.where(bad, 1.0, den)
            out = num / den
            out[bad] = np.nan
            return out
        if node.op == "pow":
            base = rec(node.args[0])
            if node.power < 0:
                bad = base == 0.0
                undefined[bad] = True
                base = np.where(bad, 1.0, base)
                out = base ** float(node.power)
                out[bad] = np.nan
                return out
            return base ** node.power
        if node.op == "neg":
            return -rec(node.args[0])
        if node.op == "abs":
            return np.abs(rec(node.args[0]))
        raise AssertionError(f"unknown op {node.op}")

    values = rec(e)
    values = np.where(undefined, np.nan, values)
    return values, ~undefined


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_KINDS = ("num", "name", "op", "end")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            tokens.append(("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        if c in "+-*/^()":
            tokens.append(("op", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", "", n))
    return tokens


class _ExprParser:
    """Recursive-descent parser for the expression grammar.

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' int)?            (right-assoc not needed: int exponent)
    atom   := number | name | name '(' expr ')' | '(' expr ')'
    """

    def __init__(self, text: str, vars: Sequence[str], allow_division: bool = True):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.vars = {name: i for i, name in enumerate(vars)}
        self.allow_division = allow_division

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, val, p = self.peek()
        if kind != "op" or val != value:
            raise ParseError(f"expected {value!r}", p)
        return self.advance()

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, p = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {val!r}", p)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                rhs = self.term()
                node = Expr("add" if val == "+" else "sub", args=(node, rhs))
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            kind, val, p = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                rhs = self.unary()
                if val == "/":
                    if not self.allow_division:
                        raise ParseError("division is not allowed in polynomials", p)
                    node = Expr("div", args=(node, rhs))
                else:
                    node = Expr("mul", args=(node, rhs))
            else:
                return node

    def unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            return Expr("neg", args=(self.unary(),))
        if kind == "op" and val == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        node = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            expo = self.integer()
            node = Expr("pow", power=expo, args=(node,))
        return node

    def integer(self) -> int:
        sign = 1
        kind, val, p = self.peek()
        if kind == "op" and val in "+-":
            self.advance()
            if val == "-":
                sign = -1
            kind, val, p = self.peek()
        if kind != "num" or "." in val:
            raise ParseError("expected integer exponent", p)
        self.advance()
        return sign * int(val)

    def atom(self) -> Expr:
        kind, val, p = self.advance()
        if kind == "num":
            if "." in val:
                return expr_const(Fraction(val))
            return expr_const(int(val))
        if kind == "name":
            nkind, nval, _ = self.peek()
            if nkind == "op" and nval == "(":
                if val != "abs":
                    raise ParseError(f"unknown function {val!r}", p)
                self.advance()
                inner = self.expr()
                self.expect(")")
                return Expr("abs", args=(inner,))
            if val not in self.vars:
                raise ParseError(f"unknown variable {val!r}", p)
            return expr_var(self.vars[val])
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        raise ParseError(f"unexpected token {val!r}", p)


def parse_expr(text: str, vars: Sequence[str]) -> Expr:
    """Parse a closed-form expression over the named variables."""
    return _ExprParser(text, vars).parse()


def _expr_to_poly(e: Expr, nvars: int, pos: int) -> dict[Exponent, Fraction]:
    """Expand an expression with poly-only operations into canonical terms."""
    zero_exp = (0,) * nvars

    def mul(a: dict, b: dict) -> dict:
        out: dict[Exponent, Fraction] = {}
        for ea, ca in a.items():
            for eb, cb in b.items():
                key = tuple(x + y for x, y in zip(ea, eb))
                out[key] = out.get(key, Fraction(0)) + ca * cb
        return {k: v for k, v in out.items() if v != 0}

    def rec(node: Expr) -> dict[Exponent, Fraction]:
        if node.op == "const":
            return {zero_exp: node.value} if node.value != 0 else {}
        if node.op == "var":
            exp = list(zero_exp)
            exp[node.index] = 1
            return {tuple(exp): Fraction(1)}
        if node.op == "add" or node.op == "sub":
            a, b = rec(node.args[0]), rec(node.args[1])
            sign = 1 if node.op == "add" else -1
            out = dict(a)
            for k, v in b.items():
                out[k] = out.get(k, Fraction(0)) + sign * v
            return {k: v for k, v in out.items() if v != 0}
        if node.op == "mul":
            return mul(rec(node.args[0]), rec(node.args[1]))
        if node.op == "neg":
            return {k: -v for k, v in rec(node.args[0]).items()}
        if node.op == "pow":
            if node.power < 0:
                raise ParseError("negative exponents are not allowed in polynomials", pos)
            base = rec(node.args[0])
            out = {zero_exp: Fraction(1)}
            for _ in range(node.power):
                out = mul(out, base)
            return out
        if node.op == "div":
            raise ParseError("division is not allowed in polynomials", pos)
        if node.op == "abs":
            raise ParseError("abs is not allowed in polynomials", pos)
        raise AssertionError(node.op)

    return rec(e)


def parse_poly(text: str, vars: Sequence[str]) -> Poly:
    """Parse a sum of monomials with integer or rational coefficients.

    Rational coefficients may be written ``3/2*x``; division is only allowed
    between constants.
    """
    tree = _ExprParser(text, vars, allow_division=True).parse()
    tree = _fold_constant_division(tree, text)
    terms = _expr_to_poly(tree, len(vars), 0)
    return Poly(len(vars), terms)


def _fold_constant_division(e: Expr, text: str) -> Expr:
    """Replace const/const division nodes by exact rational constants."""
    if e.op in ("const", "var"):
        return e
    args = tuple(_fold_constant_division(a, text) for a in e.args)
    e = Expr(e.op, value=e.value, index=e.index, power=e.power, args=args)
    if e.op == "div":
        num, den = e.args
        if num.op == "const" and den.op == "const":
            if den.value == 0:
                raise ParseError("division by zero constant", 0)
            return expr_const(num.value / den.value)
    if e.op == "neg" and e.args[0].op == "const":
        return expr_const(-e.args[0].value)
    return e
