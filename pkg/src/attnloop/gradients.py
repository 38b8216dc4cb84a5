"""Gradients, Hessian-vector products, and a damped conjugate-gradient solver.

A scalar objective is any callable ``f(params, batch) -> Tensor`` where
``params`` maps segment names to traced tensors. Everything here treats the
objective as a black box; callers own determinism (explicit seeds in f).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import NonFiniteError, PreconditionError, ShapeError
from .params import ParamVector
from .tensor import Tensor, backward, no_grad

ScalarFunction = Callable[[dict[str, Tensor], Any], Tensor]


def _check_finite_loss(value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("objective evaluated to a non-finite value", segment="loss")


def gradient(f: ScalarFunction, params: ParamVector, batch: Any) -> ParamVector:
    """Reverse-mode gradient of ``f`` with the same segment structure as ``params``."""
    leaves = params.as_tensors(requires_grad=True)
    loss = f(leaves, batch)
    _check_finite_loss(loss.data)
    names = list(leaves)
    grads = backward(loss, [leaves[n] for n in names])
    out = {}
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteError(f"gradient of segment {name!r} is non-finite",
                                 segment=name)
        out[name] = g.data
    return ParamVector(out, validate=False)


def hvp(f: ScalarFunction, params: ParamVector, batch: Any,
        v: ParamVector) -> ParamVector:
    """Hessian-vector product H·v via differentiating ``∇f·v``."""
    if v.n_params != params.n_params:
        raise ShapeError(f"v has {v.n_params} entries, expected {params.n_params}")
    leaves = params.as_tensors(requires_grad=True)
    loss = f(leaves, batch)
    _check_finite_loss(loss.data)
    names = list(leaves)
    grads = backward(loss, [leaves[n] for n in names])
    gv = None
    for name, g in zip(names, grads):
        term = (g * Tensor(v[name])).sum()
        gv = term if gv is None else gv + term
    hv = backward(gv, [leaves[n] for n in names])
    out = {}
    for name, h in zip(names, hv):
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError(f"hvp segment {name!r} is non-finite", segment=name)
        out[name] = h.data
    return ParamVector(out, validate=False)


@dataclass
class CGResult:
    x: ParamVector
    iterations: int
    residual: float          # relative: ||Ax - b|| / ||b||
    converged: bool
    stagnated: bool = False


def cg_solve(hvp_fn: Callable[[ParamVector], ParamVector], b: ParamVector,
             damping: float = 0.01, max_iter: int = 100,
             tol: float = 1e-6) -> CGResult:
    """Solve (H + damping·I)x = b by conjugate gradients.

    ``hvp_fn`` applies the undamped H. Returns the best iterate seen if the
    residual stagnates or the operator turns out not positive-definite.
    """
    if damping < 0:
        raise PreconditionError("damping must be >= 0")
    if max_iter < 1:
        raise PreconditionError("max_iter must be >= 1")

    b_norm = b.norm()
    if b_norm == 0.0:
        return CGResult(b.zeros_like(), 0, 0.0, True)

    def apply_A(p: ParamVector) -> ParamVector:
        out = hvp_fn(p)
        return out.axpy(damping, p) if damping else out

    x = b.zeros_like()
    r = b.copy()
    p = r.copy()
    rs = r.dot(r)
    best_x, best_res = x, float(np.sqrt(rs)) / b_norm
    stagnated = False
    iters = 0
    stall = 0
    for iters in range(1, max_iter + 1):
        Ap = apply_A(p)
        pAp = p.dot(Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            stagnated = True
            break
        alpha = rs / pAp
        x = x.axpy(alpha, p)
        r = r.axpy(-alpha, Ap)
        rs_new = r.dot(r)
        res = float(np.sqrt(rs_new)) / b_norm
        if res < best_res:
            best_x, best_res = x, res
            stall = 0
        else:
            stall += 1
        if res <= tol:
            return CGResult(x, iters, res, True)
        if stall >= 10:
            stagnated = True
            break
        beta = rs_new / rs
        p = r.axpy(beta, p)
        rs = rs_new

    # report the true residual of the returned iterate
    true_r = b.axpy(-1.0, apply_A(best_x))
    res = true_r.norm() / b_norm
    return CGResult(best_x, iters, res, res <= tol, stagnated)


@dataclass
class SegmentCheck:
    max_rel_err: float
    max_abs_grad: float
    max_abs_fd: float

    @property
    def zero_gradient(self) -> bool:
        return self.max_abs_grad == 0.0 and self.max_abs_fd == 0.0


@dataclass
class FiniteDiffReport:
    per_segment: dict[str, SegmentCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.per_segment:
            return 0.0
        return max(c.max_rel_err for c in self.per_segment.values())

    def zero_gradient_segments(self) -> list[str]:
        return [n for n, c in self.per_segment.items() if c.zero_gradient]


def finite_diff_check(f: ScalarFunction, params: ParamVector, batch: Any,
                      step: float = 1e-4) -> FiniteDiffReport:
    """Compare the reverse-mode gradient against central finite differences.

    Relative error uses ``max(1, |a|, |b|)`` in the denominator so near-zero
    entries are judged on an absolute scale. O(n) evaluations; guarded at
    n <= 10_000.
    """
    n = params.n_params
    if n > 10_000:
        raise PreconditionError(f"finite_diff_check is O(n) evals; n={n} > 10000")

    g = gradient(f, params, batch)
    flat = params.flatten()

    def eval_at(vec: np.ndarray) -> float:
        pv = params.unflatten(vec)
        with no_grad():
            return float(f(pv.as_tensors(), batch).data)

    fd = np.zeros(n)
    for i in range(n):
        bump = np.zeros(n)
        bump[i] = step
        fd[i] = (eval_at(flat + bump) - eval_at(flat - bump)) / (2 * step)

    fd_pv = params.unflatten(fd)
    report = FiniteDiffReport()
    for name in params.names:
        a, b = g[name].ravel(), fd_pv[name].ravel()
        if a.size == 0:
            report.per_segment[name] = SegmentCheck(0.0, 0.0, 0.0)
            continue
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        rel = np.abs(a - b) / denom
        report.per_segment[name] = SegmentCheck(
            float(np.max(rel)),
            float(np.max(np.abs(a))),
            float(np.max(np.abs(b))))
    return report
