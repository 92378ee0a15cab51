"""Forward-mode automatic differentiation with multiple directional seeds.

A :class:`Dual` carries a value together with a fixed-width array of
directional derivatives (the trailing axis indexes the seed directions).
Values may be scalars or numpy arrays, so a single expression evaluates a
whole batch of points and their derivatives in one pass.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "seed",
    "seed_component",
    "jacobian",
    "value_of",
    "derivs_of",
    "sqrt",
    "exp",
    "log",
    "cos",
    "sin",
    "where",
]


class Dual:
    """Value plus directional derivatives under the usual chain rule.

    ``val`` has any shape ``S``; ``der`` has shape ``S + (width,)`` where
    ``width`` is the number of active seed directions.
    """

    __slots__ = ("val", "der")

    # make numpy defer to the reflected operators instead of building
    # object arrays elementwise
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float) if np.ndim(val) else float(val)
        self.der = np.asarray(der, dtype=float)

    @property
    def width(self):
        return self.der.shape[-1]

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        return Dual(self.val + other, _bcast(self.der, np.shape(self.val + other)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        return Dual(self.val - other, _bcast(self.der, np.shape(self.val - other)))

    def __rsub__(self, other):
        return Dual(other - self.val, _bcast(-self.der, np.shape(other - self.val)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                _x(self.val) * other.der + _x(other.val) * self.der,
            )
        return Dual(self.val * other, _x(np.asarray(other)) * self.der)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            v = self.val * inv
            return Dual(v, _x(inv) * self.der - _x(v * inv) * other.der)
        inv = 1.0 / np.asarray(other)
        return Dual(self.val * inv, _x(inv) * self.der)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        v = other * inv
        return Dual(v, _x(-v * inv) * self.der)

    def __pow__(self, n):
        if isinstance(n, Dual):
            # x**y = exp(y log x); requires x > 0
            return exp(n * log(self))
        v = self.val ** n
        # guard the derivative at val == 0 (one-sided, keeps masked lanes clean)
        base = np.where(np.asarray(self.val) == 0.0, 0.0, n * self.val ** (n - 1))
        return Dual(v, _x(base) * self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    # comparisons act on values (used only for masks / tests)

    def __lt__(self, other):
        return self.val < _val(other)

    def __le__(self, other):
        return self.val <= _val(other)

    def __gt__(self, other):
        return self.val > _val(other)

    def __ge__(self, other):
        return self.val >= _val(other)

    def __getitem__(self, idx):
        return Dual(np.asarray(self.val)[idx], self.der[idx])

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"


def _val(x):
    return x.val if isinstance(x, Dual) else x


def _x(a):
    """Append a broadcast axis for the seed dimension."""
    return np.asarray(a)[..., None]


def _bcast(der, shape):
    """Broadcast a derivative array to a value shape + seed axis."""
    return np.broadcast_to(der, tuple(shape) + (der.shape[-1],)).copy() \
        if der.shape[:-1] != tuple(shape) else der


# -- elementary functions ---------------------------------------------------


def sqrt(x):
    if isinstance(x, Dual):
        v = np.sqrt(x.val)
        return Dual(v, _x(0.5 / v) * x.der)
    return np.sqrt(x)


def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.val)
        return Dual(v, _x(v) * x.der)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(np.log(x.val), _x(1.0 / x.val) * x.der)
    return np.log(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), _x(-np.sin(x.val)) * x.der)
    return np.cos(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), _x(np.cos(x.val)) * x.der)
    return np.sin(x)


def where(cond, a, b):
    """Select between two scalar-like quantities; derivatives follow values."""
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return np.where(cond, a, b)
    wa = a if isinstance(a, Dual) else Dual(np.asarray(a, float), np.zeros(np.shape(a) + (1,)))
    wb = b if isinstance(b, Dual) else Dual(np.asarray(b, float), np.zeros(np.shape(b) + (1,)))
    k = max(wa.width, wb.width)
    da = wa.der if wa.width == k else np.broadcast_to(wa.der, wa.der.shape[:-1] + (k,))
    db = wb.der if wb.width == k else np.broadcast_to(wb.der, wb.der.shape[:-1] + (k,))
    c = np.asarray(cond)
    return Dual(np.where(c, wa.val, wb.val), np.where(c[..., None], da, db))


def value_of(x):
    """Plain value of a float, ndarray, or Dual."""
    return x.val if isinstance(x, Dual) else x


def derivs_of(x, width):
    """Derivative rows of ``x``, zeros if it carries none."""
    if isinstance(x, Dual):
        return x.der
    return np.zeros(np.shape(x) + (width,))


# -- seeding ---------------------------------------------------------------


def seed(values, which=None):
    """Lift a vector to duals, seeding the entries in ``which``.

    Seeded entries carry identity derivative rows; the rest carry zeros.
    Returns a list of Dual scalars with width ``len(which)``.
    """
    values = np.asarray(values, dtype=float)
    if which is None:
        which = range(values.size)
    which = list(which)
    k = len(which)
    out = []
    for i, v in enumerate(values):
        d = np.zeros(k)
        if i in which:
            d[which.index(i)] = 1.0
        out.append(Dual(v, d))
    return out


def seed_component(vals, index, width):
    """Batched seed: one component of a larger variable block.

    ``vals`` is the component's value array; the returned Dual carries a
    single 1.0 in derivative column ``index`` of ``width`` columns.
    """
    vals = np.asarray(vals, dtype=float)
    der = np.zeros(vals.shape + (width,))
    der[..., index] = 1.0
    return Dual(vals, der)


def jacobian(f, at):
    """Dense Jacobian of ``f`` at the point ``at`` by one forward pass.

    ``f`` maps a sequence of scalar-like numbers to a sequence of
    scalar-like numbers; all inputs are seeded.
    """
    at = np.asarray(at, dtype=float)
    rows = f(seed(at))
    out = np.empty((len(rows), at.size))
    for i, r in enumerate(rows):
        out[i] = derivs_of(r, at.size)
    return out
