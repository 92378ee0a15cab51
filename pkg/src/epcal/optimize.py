"""Bound-constrained quasi-Newton minimization in normalized coordinates.

Wraps the scipy L-BFGS-B implementation behind the project's result
contract: optimization runs in box-normalized variables so heterogeneous
parameter magnitudes (MPa moduli vs dimensionless ratios) share one
curvature scale, and bound hits are reported explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

__all__ = [
    "Bounds",
    "OptimizerOptions",
    "OptResult",
    "EvaluationError",
    "minimize",
    "multistart",
]

_FAILED_EVAL = 1e12


class EvaluationError(Exception):
    """An objective evaluation failed; the optimizer rejects the point."""


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("bounds must satisfy lower < upper componentwise")

    @property
    def size(self):
        return self.lower.size

    def contains(self, p, tol=0.0):
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def normalize(self, p):
        return (np.asarray(p, dtype=float) - self.lower) / (self.upper - self.lower)

    def denormalize(self, z):
        return self.lower + np.asarray(z, dtype=float) * (self.upper - self.lower)


@dataclass
class OptimizerOptions:
    pgtol: float = 1e-9  # projected gradient, normalized coordinates
    ftol: float = 1e-12  # relative objective progress
    max_iter: int = 500
    max_linesearch: int = 20
    memory: int = 10


@dataclass
class OptResult:
    p: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_fev: int
    reason: str
    active_bounds: list
    history: list = field(default_factory=list)


def _termination_reason(res):
    msg = str(res.message)
    if "PROJECTED_GRADIENT" in msg or "PGTOL" in msg:
        return "gradient-tol"
    if "REL_REDUCTION" in msg or "FACTR" in msg or "F <=" in msg:
        return "objective-progress"
    if "LNSRCH" in msg or "line search" in msg.lower():
        return "max-linesearch"
    if res.status == 1:
        return "max-iter"
    return msg


def _active_bounds(p, bounds):
    rng = bounds.upper - bounds.lower
    out = []
    for i, v in enumerate(p):
        for b in (bounds.lower[i], bounds.upper[i]):
            if abs(v - b) <= max(1e-12 * abs(b), 1e-14 * rng[i]):
                out.append(i)
                break
    return out


def minimize(fun_and_grad, x0, bounds: Bounds, opts: OptimizerOptions = None,
             callback=None) -> OptResult:
    """L-BFGS-B on the box-normalized problem.

    ``fun_and_grad(p) -> (f, g)`` works in physical parameters; evaluation
    failures raise :class:`EvaluationError` and are treated as very high
    objective values with zero gradient. A failure at the initial point
    aborts immediately.
    """
    opts = opts or OptimizerOptions()
    x0 = np.asarray(x0, dtype=float)
    if not bounds.contains(x0, tol=0.0):
        raise ValueError("initial guess outside bounds")
    scale = bounds.upper - bounds.lower
    history = []
    state = {"last": None, "nfev": 0, "first": True}

    def fg(z):
        p = bounds.denormalize(np.clip(z, 0.0, 1.0))
        state["nfev"] += 1
        try:
            f, g = fun_and_grad(p)
        except EvaluationError:
            if state["first"]:
                raise
            state["last"] = (float(_FAILED_EVAL), np.zeros_like(z), p)
            return _FAILED_EVAL, np.zeros_like(z)
        state["first"] = False
        gz = np.asarray(g, dtype=float) * scale
        state["last"] = (float(f), gz, p)
        return float(f), gz

    def cb(z):
        assert np.all(z >= -1e-12) and np.all(z <= 1 + 1e-12), "iterate left the box"
        f, gz, p = state["last"]
        history.append(
            {"iter": len(history) + 1, "f": f, "gnorm": float(np.abs(gz).max()),
             "p": p.copy()}
        )
        if callback is not None:
            callback(p, f)

    res = scipy.optimize.minimize(
        fg,
        bounds.normalize(x0),
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * bounds.size,
        callback=cb,
        options={
            "maxcor": opts.memory,
            "ftol": opts.ftol,
            "gtol": opts.pgtol,
            "maxiter": opts.max_iter,
            "maxls": opts.max_linesearch,
        },
    )
    p_star = bounds.denormalize(np.clip(res.x, 0.0, 1.0))
    grad = np.asarray(res.jac, dtype=float) / scale
    return OptResult(
        p=p_star,
        fun=float(res.fun),
        grad=grad,
        n_iter=int(res.nit),
        n_fev=state["nfev"],
        reason=_termination_reason(res),
        active_bounds=_active_bounds(p_star, bounds),
        history=history,
    )


def multistart(fun_and_grad, count, bounds: Bounds, rng_seed,
               opts: OptimizerOptions = None, callback=None):
    """Independent runs from uniform-random starts inside the box."""
    rng = np.random.default_rng(rng_seed)
    starts = bounds.lower + rng.random((count, bounds.size)) * (
        bounds.upper - bounds.lower
    )
    results = []
    for x0 in starts:
        results.append(minimize(fun_and_grad, x0, bounds, opts, callback))
    return starts, results


def summarize(results, truth=None):
    """Mean calibrated parameters and, given truth, normalized errors."""
    ps = np.stack([r.p for r in results])
    mean = ps.mean(axis=0)
    out = {"mean": mean}
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        out["normalized_error"] = np.abs(mean - truth) / np.abs(truth)
    return out
