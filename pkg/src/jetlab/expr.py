"""Exact symbolic expressions over jet-space coordinates.

Normal form: a sum of monomials with nonzero rational coefficients.  A
monomial is a finite product of bases raised to rational exponents under a
fixed total base ordering, so structural equality decides equality on the
polynomial fragment.  Bases are the independent variables t and x, the jet
variables u, u1, u2, ... (uk stands for the k-th x-derivative of u), named
parameters, opaque function calls with registered partial derivatives, and
two wrapper kinds: exp(arg) and pow(payload, q) for non-integer or negative
powers of compound expressions.  No identity crossing a wrapper is applied:
exp(a)*exp(b) stays a product, radicals never denest, pow(a*b, q) of a
multi-term payload stays opaque.

Fractional powers use the positive-branch convention; numeric evaluation
raises DomainError outside it.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable, Iterable, Mapping

Q = Fraction

__all__ = [
    "ExprError",
    "DomainError",
    "NonTerminatingRules",
    "Base",
    "Var",
    "Jet",
    "Param",
    "CallSpec",
    "Call",
    "ExpWrap",
    "PowWrap",
    "Mono",
    "Expr",
    "rational",
    "atom",
    "t",
    "x",
    "u",
    "param",
    "exp_of",
    "pow_of",
    "add",
    "mul",
    "normalize",
    "combine",
    "partial_deriv",
    "substitute",
    "eval_numeric",
    "free_atoms",
    "max_jet_order",
    "coefficient_of",
]


class ExprError(Exception):
    """Malformed symbolic operation."""


class DomainError(ExprError):
    """Numeric evaluation left the domain of a radical or denominator."""

    def __init__(self, message, culprit=None):
        super().__init__(message)
        self.culprit = culprit


class NonTerminatingRules(ExprError):
    """Exhaustive substitution exceeded its step bound."""


# ---------------------------------------------------------------------------
# bases


class Base:
    """An atomic factor of a monomial.  Immutable, interned where possible."""

    __slots__ = ("key", "_hash")

    def _seal(self, key):
        self.key = key
        self._hash = hash(key)

    def __eq__(self, other):
        return self is other or (isinstance(other, Base) and self.key == other.key)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return self.display()

    def display(self):  # pragma: no cover - overridden
        return str(self.key)


class Var(Base):
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self._seal((0, name))

    def display(self):
        return self.name


class Jet(Base):
    """The k-th x-derivative of u as an independent coordinate; k=0 is u."""

    __slots__ = ("order",)

    def __init__(self, order):
        if order < 0:
            raise ExprError("jet order must be non-negative")
        self.order = order
        self._seal((1, order))

    def display(self):
        return "u" if self.order == 0 else f"u{self.order}"


class Param(Base):
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self._seal((2, name))

    def display(self):
        return self.name


T_VAR = Var("t")
X_VAR = Var("x")

_JETS: dict[int, Jet] = {}
_PARAMS: dict[str, Param] = {}


def t_atom() -> Var:
    return T_VAR


def x_atom() -> Var:
    return X_VAR


def jet(order: int) -> Jet:
    a = _JETS.get(order)
    if a is None:
        a = _JETS[order] = Jet(order)
    return a


def param_atom(name: str) -> Param:
    a = _PARAMS.get(name)
    if a is None:
        a = _PARAMS[name] = Param(name)
    return a


class CallSpec:
    """Shared description of an opaque function: name, arguments, partials.

    Partial derivatives are opaque symbols themselves; mixed partials are
    canonicalized by sorting the differentiation multi-index.  Display names
    may be overridden per multi-index (used for the dphi convention).
    """

    __slots__ = ("name", "argnames", "partial_names")

    def __init__(self, name, argnames, partial_names=None):
        self.name = name
        self.argnames = tuple(argnames)
        self.partial_names = dict(partial_names or {})

    @property
    def arity(self):
        return len(self.argnames)

    def display(self, dmulti):
        if not dmulti:
            return self.name
        override = self.partial_names.get(tuple(dmulti))
        if override is not None:
            return override
        return self.name + "_" + "_".join(self.argnames[i] for i in dmulti)


class Call(Base):
    """Application of an opaque function, possibly a partial derivative."""

    __slots__ = ("spec", "args", "dmulti")

    def __init__(self, spec, args, dmulti=()):
        args = tuple(args)
        if len(args) != spec.arity:
            raise ExprError(f"{spec.name} expects {spec.arity} arguments, got {len(args)}")
        self.spec = spec
        self.args = args
        self.dmulti = tuple(sorted(dmulti))
        self._seal((3, spec.name, self.dmulti, tuple(a.key for a in args)))

    def display(self):
        inner = ", ".join(a.display() for a in self.args)
        return f"{self.spec.display(self.dmulti)}({inner})"


class ExpWrap(Base):
    __slots__ = ("arg",)

    def __init__(self, arg):
        self.arg = arg
        self._seal((4, arg.key))

    def display(self):
        return f"exp({self.arg.display()})"


class PowWrap(Base):
    """A compound expression kept opaque under a rational exponent."""

    __slots__ = ("payload",)

    def __init__(self, payload):
        if not payload.terms:
            raise ExprError("pow of syntactic zero")
        self.payload = payload
        self._seal((5, payload.key))

    def display(self):
        return f"pow({self.payload.display()}, ...)"


# ---------------------------------------------------------------------------
# monomials


class Mono:
    """Sorted tuple of (base, rational exponent) pairs; exponents nonzero."""

    __slots__ = ("pairs", "key", "_hash")

    def __init__(self, pairs):
        pairs = tuple(sorted(pairs, key=lambda be: be[0].key))
        self.pairs = pairs
        self.key = tuple((b.key, (e.numerator, e.denominator)) for b, e in pairs)
        self._hash = hash(self.key)

    def __eq__(self, other):
        return self is other or (isinstance(other, Mono) and self.key == other.key)

    def __hash__(self):
        return self._hash

    def __len__(self):
        return len(self.pairs)


MONO_ONE = Mono(())


# ---------------------------------------------------------------------------
# expressions


class Expr:
    """Immutable normal-form expression: map monomial -> rational coeff."""

    __slots__ = ("terms", "key", "_hash")

    def __init__(self, terms: dict):
        self.terms = terms
        self.key = tuple(
            (m.key, (c.numerator, c.denominator))
            for m, c in sorted(terms.items(), key=lambda mc: mc[0].key)
        )
        self._hash = hash(self.key)

    def __eq__(self, other):
        return self is other or (isinstance(other, Expr) and self.key == other.key)

    def __hash__(self):
        return self._hash

    def __bool__(self):
        return bool(self.terms)

    def is_zero_form(self) -> bool:
        return not self.terms

    def as_rational(self):
        """The value if the expression is a constant, else None."""
        if not self.terms:
            return Q(0)
        if len(self.terms) == 1:
            m, c = next(iter(self.terms.items()))
            if m is MONO_ONE or not m.pairs:
                return c
        return None

    # -- python operator glue (exact; ints and Fractions are coerced) --

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return mul(self, expr_pow(_coerce(other), Q(-1)))

    def __rtruediv__(self, other):
        return mul(_coerce(other), expr_pow(self, Q(-1)))

    def __pow__(self, exponent):
        return expr_pow(self, Q(exponent))

    def display(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in sorted(self.terms.items(), key=lambda mc: mc[0].key):
            factors = []
            if c != 1 or not m.pairs:
                factors.append(str(c))
            for b, e in m.pairs:
                if e == 1:
                    factors.append(b.display())
                else:
                    factors.append(f"{b.display()}^({e})")
            parts.append("*".join(factors))
        return " + ".join(parts)

    def __repr__(self):
        return f"Expr[{self.display()}]"


ZERO = Expr({})
ONE = Expr({MONO_ONE: Q(1)})


def _coerce(obj):
    if isinstance(obj, Expr):
        return obj
    if isinstance(obj, (int, Fraction)):
        return rational(obj)
    raise ExprError(f"cannot coerce {obj!r} into an expression")


def rational(q) -> Expr:
    q = Q(q)
    if q == 0:
        return ZERO
    return Expr({MONO_ONE: q})


def atom(base: Base) -> Expr:
    return Expr({Mono(((base, Q(1)),)): Q(1)})


def t() -> Expr:
    return atom(T_VAR)


def x() -> Expr:
    return atom(X_VAR)


def u(order: int = 0) -> Expr:
    return atom(jet(order))


def param(name: str) -> Expr:
    return atom(param_atom(name))


def exp_of(e: Expr) -> Expr:
    e = _coerce(e)
    if not e.terms:
        return ONE
    return atom(ExpWrap(e))


def pow_of(e, q) -> Expr:
    return expr_pow(_coerce(e), Q(q))


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Expr, b: Expr) -> Expr:
    if not a.terms:
        return b
    if not b.terms:
        return a
    terms = dict(a.terms)
    for m, c in b.terms.items():
        s = terms.get(m, Q(0)) + c
        if s:
            terms[m] = s
        else:
            terms.pop(m, None)
    return Expr(terms)


def neg(a: Expr) -> Expr:
    if not a.terms:
        return a
    return Expr({m: -c for m, c in a.terms.items()})


def _mono_times_mono(m1: Mono, m2: Mono):
    """Merge two monomials.  Returns (pairs, splices) where splices are
    payload expressions of pow-wrappers whose exponent landed exactly on 1
    and must be multiplied back in as ordinary expressions."""
    merged: dict[Base, Q] = {}
    for b, e in m1.pairs:
        merged[b] = e
    for b, e in m2.pairs:
        s = merged.get(b, Q(0)) + e
        if s:
            merged[b] = s
        else:
            merged.pop(b, None)
    pairs = []
    splices = []
    for b, e in merged.items():
        if isinstance(b, PowWrap) and e == 1:
            splices.append(b.payload)
        else:
            pairs.append((b, e))
    return pairs, splices


def mul(a: Expr, b: Expr) -> Expr:
    if not a.terms or not b.terms:
        return ZERO
    ra = a.as_rational()
    if ra is not None:
        if ra == 1:
            return b
        return Expr({m: c * ra for m, c in b.terms.items()})
    rb = b.as_rational()
    if rb is not None:
        if rb == 1:
            return a
        return Expr({m: c * rb for m, c in a.terms.items()})
    acc: dict[Mono, Q] = {}
    pending = []  # (coeff, mono, splice exprs)
    for m1, c1 in a.terms.items():
        for m2, c2 in b.terms.items():
            pairs, splices = _mono_times_mono(m1, m2)
            if splices:
                pending.append((c1 * c2, Mono(pairs), splices))
            else:
                m = Mono(pairs)
                s = acc.get(m, Q(0)) + c1 * c2
                if s:
                    acc[m] = s
                else:
                    acc.pop(m, None)
    result = Expr(acc)
    for coeff, m, splices in pending:
        piece = Expr({m: coeff})
        for payload in splices:
            piece = mul(piece, payload)
        result = add(result, piece)
    return result


def _int_root(n: int, r: int):
    """Exact r-th root of a non-negative integer, or None."""
    if n < 0:
        return None
    root = round(n ** (1.0 / r))
    for cand in (root - 1, root, root + 1):
        if cand >= 0 and cand**r == n:
            return cand
    return None


def _rational_power(c: Q, q: Q):
    """c**q when exact in the rationals, else None.  c > 0 required for
    fractional q; integer q always resolves."""
    if q.denominator == 1:
        return c**q.numerator
    if c < 0:
        raise ExprError(f"fractional power of negative rational {c}")
    num = _int_root(c.numerator, q.denominator)
    den = _int_root(c.denominator, q.denominator)
    if num is None or den is None:
        return None
    return Q(num, den) ** q.numerator


def expr_pow(e: Expr, q) -> Expr:
    q = Q(q)
    if q == 0:
        if not e.terms:
            raise ExprError("0^0 is undefined here")
        return ONE
    if q == 1:
        return e
    if not e.terms:
        if q < 0:
            raise ExprError("zero base with negative exponent")
        return ZERO
    r = e.as_rational()
    if r is not None:
        if r < 0 and q.denominator != 1:
            raise ExprError(f"fractional power of negative rational {r}")
        if r == 0:
            raise ExprError("zero base")  # unreachable, kept for clarity
        exact = _rational_power(r, q)
        if exact is not None:
            return rational(exact)
        return atom(PowWrap(e)) if q.denominator == 1 else _pow_wrap(e, q)
    if q.denominator == 1 and q > 0:
        # positive integer power: expand by squaring
        n = q.numerator
        result = ONE
        square = e
        while n:
            if n & 1:
                result = mul(result, square)
            n >>= 1
            if n:
                square = mul(square, square)
        return result
    if len(e.terms) == 1:
        # single monomial: distribute the exponent across factors
        m, c = next(iter(e.terms.items()))
        if c < 0 and q.denominator != 1:
            raise ExprError(f"fractional power of negative-coefficient monomial {e.display()}")
        coeff = _rational_power(c, q)
        pairs = []
        splices = []
        extra = ONE
        for b, s in m.pairs:
            ns = s * q
            if ns == 0:
                continue
            if isinstance(b, PowWrap) and ns == 1:
                splices.append(b.payload)
            elif isinstance(b, PowWrap) and ns.denominator == 1 and ns > 1:
                pairs.append((b, ns))
            else:
                pairs.append((b, ns))
        if coeff is None:
            # keep the residual rational under the wrapper
            extra = _pow_wrap(rational(c), q)
            coeff = Q(1)
        result = Expr({Mono(pairs): coeff})
        for payload in splices:
            result = mul(result, payload)
        if extra is not ONE:
            result = mul(result, extra)
        return result
    return _pow_wrap(e, q)


def _pow_wrap(e: Expr, q: Q) -> Expr:
    return Expr({Mono(((PowWrap(e), q),)): Q(1)})


def normalize(obj) -> Expr:
    """Identity on Expr (already normal), coercion for rationals."""
    return _coerce(obj)


def combine(op: str, a, b) -> Expr:
    """Spec-facing ring operations: op in {add, mul, pow}."""
    a = _coerce(a)
    if op == "add":
        return add(a, _coerce(b))
    if op == "mul":
        return mul(a, _coerce(b))
    if op == "pow":
        return expr_pow(a, Q(b))
    raise ExprError(f"unknown combine op {op!r}")


# ---------------------------------------------------------------------------
# differentiation


def _base_expr(b: Base, e: Q) -> Expr:
    if isinstance(b, PowWrap) and e == 1:
        return b.payload
    if e == 0:
        return ONE
    return Expr({Mono(((b, e),)): Q(1)})


def _mono_without(m: Mono, b: Base) -> Mono:
    return Mono(tuple(pair for pair in m.pairs if pair[0] is not b and pair[0] != b))


def partial_deriv(e: Expr, v: Base) -> Expr:
    """Partial derivative treating every base as independent except through
    explicit occurrences of v (in wrapper payloads and call arguments the
    chain rule applies).  Derivative with respect to an absent atom is 0."""
    if isinstance(v, (ExpWrap, PowWrap)):
        raise ExprError("derivatives are taken with respect to atoms, not wrappers")
    result = ZERO
    for m, c in e.terms.items():
        for b, s in m.pairs:
            rest = Expr({_mono_without(m, b): c})
            db = _d_base(b, s, v)
            if db is not None and db.terms:
                result = add(result, mul(rest, db))
    return result


def _d_base(b: Base, s: Q, v: Base) -> Expr | None:
    """d/dv of b**s, or None when identically zero."""
    if b == v:
        return mul(rational(s), _base_expr(b, s - 1))
    if isinstance(b, (Var, Jet, Param)):
        return None
    if isinstance(b, ExpWrap):
        inner = partial_deriv(b.arg, v)
        if not inner.terms:
            return None
        return mul(rational(s), mul(_base_expr(b, s), inner))
    if isinstance(b, PowWrap):
        inner = partial_deriv(b.payload, v)
        if not inner.terms:
            return None
        return mul(rational(s), mul(_base_expr(b, s - 1), inner))
    if isinstance(b, Call):
        total = ZERO
        for i, arg in enumerate(b.args):
            inner = partial_deriv(arg, v)
            if not inner.terms:
                continue
            partial = Call(b.spec, b.args, b.dmulti + (i,))
            total = add(total, mul(atom(partial), inner))
        if not total.terms:
            return None
        return mul(rational(s), mul(_base_expr(b, s - 1), total))
    raise ExprError(f"cannot differentiate base {b!r}")


# ---------------------------------------------------------------------------
# substitution


def _rebuild_base(b: Base, rules, cache) -> Expr | None:
    """Substitute inside a base.  Returns replacement Expr for b**1, or None
    if untouched."""
    if b in rules:
        return rules[b]
    if isinstance(b, (Var, Jet, Param)):
        return None
    if isinstance(b, ExpWrap):
        arg2 = _substitute_once(b.arg, rules, cache)
        if arg2 == b.arg:
            return None
        return exp_of(arg2)
    if isinstance(b, PowWrap):
        p2 = _substitute_once(b.payload, rules, cache)
        if p2 == b.payload:
            return None
        return p2  # caller re-applies the exponent via expr_pow
    if isinstance(b, Call):
        args2 = tuple(_substitute_once(a, rules, cache) for a in b.args)
        if args2 == b.args:
            return None
        return atom(Call(b.spec, args2, b.dmulti))
    raise ExprError(f"cannot substitute in base {b!r}")


def _substitute_once(e: Expr, rules, cache) -> Expr:
    hit = cache.get(e)
    if hit is not None:
        return hit
    result = ZERO
    for m, c in e.terms.items():
        piece = rational(c)
        for b, s in m.pairs:
            replacement = _rebuild_base(b, rules, cache)
            if replacement is None:
                piece = mul(piece, _base_expr(b, s))
            else:
                piece = mul(piece, expr_pow(replacement, s))
        result = add(result, piece)
    cache[e] = result
    return result


def substitute(e: Expr, rules: Mapping[Base, Expr], mode: str = "simultaneous",
               max_steps: int = 2000) -> Expr:
    """Apply atom -> expression rewrite rules.

    simultaneous: one parallel pass.  exhaustive: iterate to a fixpoint; the
    caller guarantees termination (e.g. every rule lowers jet order) and a
    step bound guards against non-terminating systems.
    """
    rules = {k: _coerce(v) for k, v in rules.items()}
    if mode == "simultaneous":
        return _substitute_once(e, rules, {})
    if mode != "exhaustive":
        raise ExprError(f"unknown substitution mode {mode!r}")
    current = e
    for _ in range(max_steps):
        nxt = _substitute_once(current, rules, {})
        if nxt == current:
            return nxt
        current = nxt
    raise NonTerminatingRules(f"no fixpoint after {max_steps} passes")


# ---------------------------------------------------------------------------
# numeric evaluation


def eval_numeric(e: Expr, point: Mapping[Base, float],
                 opaque: Callable[[Call, tuple], float] | None = None) -> float:
    return _eval(e, point, opaque)[0]


def eval_with_scale(e: Expr, point: Mapping[Base, float],
                    opaque: Callable[[Call, tuple], float] | None = None):
    """Value plus a cancellation scale: the sum of absolute term values."""
    return _eval(e, point, opaque)


def _eval_base(b: Base, s: Q, point, opaque) -> float:
    if b in point:
        v = float(point[b])
        return _safe_pow(v, s, b)
    if isinstance(b, ExpWrap):
        inner = _eval(b.arg, point, opaque)[0]
        try:
            v = math.exp(inner)
        except OverflowError:
            raise DomainError("exp overflow", b.display())
        return _safe_pow(v, s, b)
    if isinstance(b, PowWrap):
        inner = _eval(b.payload, point, opaque)[0]
        return _safe_pow(inner, s, b)
    if isinstance(b, Call):
        if opaque is None:
            raise ExprError(f"no binding for opaque call {b.display()}")
        argvals = tuple(_eval(a, point, opaque)[0] for a in b.args)
        return _safe_pow(float(opaque(b, argvals)), s, b)
    raise ExprError(f"no binding for atom {b.display()}")


def _safe_pow(v: float, s: Q, b: Base) -> float:
    if s == 1:
        return v
    if v == 0.0 and s < 0:
        raise DomainError("zero denominator", b.display())
    if v < 0.0 and s.denominator != 1:
        raise DomainError("negative radicand", b.display())
    try:
        return v ** float(s)
    except (OverflowError, ValueError, ZeroDivisionError) as exc:
        raise DomainError(str(exc), b.display())


def _eval(e: Expr, point, opaque):
    total = 0.0
    scale = 0.0
    for m, c in e.terms.items():
        v = float(c)
        for b, s in m.pairs:
            v *= _eval_base(b, s, point, opaque)
        total += v
        scale += abs(v)
    return total, scale


# ---------------------------------------------------------------------------
# structure queries


def free_atoms(e: Expr) -> set[Base]:
    """Leaf atoms (variables, jets, parameters) and opaque calls, recursing
    through wrapper payloads and call arguments."""
    out: set[Base] = set()
    _collect_atoms(e, out)
    return out


def _collect_atoms(e: Expr, out: set):
    for m in e.terms:
        for b, _ in m.pairs:
            if isinstance(b, (Var, Jet, Param)):
                out.add(b)
            elif isinstance(b, Call):
                out.add(b)
                for a in b.args:
                    _collect_atoms(a, out)
            elif isinstance(b, ExpWrap):
                _collect_atoms(b.arg, out)
            elif isinstance(b, PowWrap):
                _collect_atoms(b.payload, out)


def max_jet_order(e: Expr) -> int:
    """Highest jet order present, -1 when no jet variable occurs."""
    best = -1
    for a in free_atoms(e):
        if isinstance(a, Jet):
            best = max(best, a.order)
        elif isinstance(a, Call):
            for arg in a.args:
                best = max(best, max_jet_order(arg))
    return best


def coefficient_of(e: Expr, b: Base) -> Expr:
    """Coefficient of b**1 for terms linear in b (used for term lookups)."""
    result = ZERO
    for m, c in e.terms.items():
        for bb, s in m.pairs:
            if bb == b:
                if s != 1:
                    raise ExprError(f"{b.display()} appears with exponent {s}")
                result = add(result, Expr({_mono_without(m, bb): c}))
                break
    return result
