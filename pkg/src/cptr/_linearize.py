"""Tiny forward-mode linearisation over numpy arrays.

A ``Lin`` carries a value array and a dict of partial-derivative arrays keyed
by unknown name (e.g. ``"p"``, ``"T+"``).  Only the handful of operations the
residual needs are supported.  Partials seeded from analytic property
derivatives stay analytic through the chain rule.
"""
import numpy as np


def _grad_of(x):
    return x.grad if isinstance(x, Lin) else {}


def _val_of(x):
    return x.val if isinstance(x, Lin) else x


class Lin:
    __slots__ = ("val", "grad")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, val, grad=None):
        self.val = np.asarray(val, dtype=float)
        self.grad = grad if grad is not None else {}

    @classmethod
    def variable(cls, val, name):
        val = np.asarray(val, dtype=float)
        return cls(val, {name: np.ones_like(val)})

    @classmethod
    def from_prop(cls, ev, dp_name="p", dT_name="T"):
        grad = {}
        if np.any(ev.d_dp):
            grad[dp_name] = ev.d_dp
        if np.any(ev.d_dT):
            grad[dT_name] = ev.d_dT
        return cls(ev.value, grad)

    def __add__(self, other):
        g = dict(self.grad)
        for k, v in _grad_of(other).items():
            g[k] = g[k] + v if k in g else v
        return Lin(self.val + _val_of(other), g)

    __radd__ = __add__

    def __neg__(self):
        return Lin(-self.val, {k: -v for k, v in self.grad.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, Lin) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Lin):
            other = np.asarray(other, dtype=float)
            return Lin(self.val * other, {k: v * other for k, v in self.grad.items()})
        g = {k: v * other.val for k, v in self.grad.items()}
        for k, v in other.grad.items():
            term = v * self.val
            g[k] = g[k] + term if k in g else term
        return Lin(self.val * other.val, g)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Lin):
            return self * (1.0 / np.asarray(other, dtype=float))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self):
        inv = 1.0 / self.val
        return Lin(inv, {k: -v * inv * inv for k, v in self.grad.items()})

    def take(self, index, suffix):
        """Gather entries at ``index``; partial names get ``suffix`` appended."""
        return Lin(self.val[index], {k + suffix: v[index] for k, v in self.grad.items()})


def where(mask, a, b):
    """Elementwise select, propagating partials from the chosen branch."""
    g = {}
    ga, gb = _grad_of(a), _grad_of(b)
    for k in sorted(set(ga) | set(gb)):
        va = ga.get(k, 0.0)
        vb = gb.get(k, 0.0)
        g[k] = np.where(mask, va, vb)
    return Lin(np.where(mask, _val_of(a), _val_of(b)), g)
