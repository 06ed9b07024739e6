"""Central finite-difference checks for the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import DTYPE, NumericError, Tensor, no_grad, record_branches


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool
    message: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        return f"[{status}] {self.op_name}: rel={self.max_rel_err:.2e} abs={self.max_abs_err:.2e}{extra}"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rel_tol: float = 1e-3,
    abs_tol: float = 1e-5,
    h: float = 1e-3,
    op_name: str = "op",
    max_checks: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of a closure against central differences.

    The checked quantity is the sum of ``fn(*inputs)``; the numeric side sums
    in float64, so a closure that returns its weighted outputs unreduced
    avoids float32 reduction error in the differences. Every input with
    ``requires_grad`` is perturbed in place by ``+-h``; at most ``max_checks``
    coordinates per input are probed (chosen with ``seed``) when given.

    The relative error is measured against the gradient scale,
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``, so
    near-zero entries of a large gradient do not dominate the verdict.

    With ``skip_kinks`` a probe whose ``+-h`` evaluations take a different
    branch of a piecewise op (ReLU, |x|, max pool, bilinear cell) than the
    unperturbed point is retried with smaller steps and skipped if it still
    straddles a kink, since the derivative is not defined across it. The
    report fails if more than half of the probes had to be skipped.
    """
    try:
        for t in inputs:
            t.zero_grad()
        with record_branches() as base_branches:
            out = fn(*inputs)
        out.backward(np.ones(out.shape, dtype=DTYPE))
    except NumericError as exc:
        return GradCheckReport(op_name, np.inf, np.inf, False, f"non-finite forward: {exc}")

    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    skipped = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        grad = t.grad if t.grad is not None else np.zeros(t.shape, dtype=DTYPE)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in idx:
            orig = flat[i]
            d = None
            # shrink the step when a probe straddles a kink; give up after three tries
            for step in (h, h / 4, h / 16) if skip_kinks else (h,):
                hi = DTYPE(orig + step)
                lo = DTYPE(orig - step)
                try:
                    with no_grad():
                        flat[i] = hi
                        with record_branches() as br_hi:
                            f_hi = float(fn(*inputs).data.astype(np.float64).sum())
                        flat[i] = lo
                        with record_branches() as br_lo:
                            f_lo = float(fn(*inputs).data.astype(np.float64).sum())
                except NumericError as exc:
                    return GradCheckReport(op_name, np.inf, np.inf, False, f"non-finite during probing: {exc}")
                finally:
                    flat[i] = orig
                if not skip_kinks or (br_hi == base_branches and br_lo == base_branches):
                    d = (f_hi - f_lo) / (float(hi) - float(lo))
                    break
            if d is None:
                skipped += 1
                continue
            numeric.append(d)
            analytic.append(float(grad.reshape(-1)[i]))

    note = f"{skipped} probes skipped at kinks" if skipped else ""
    if skipped and skipped > len(analytic):
        return GradCheckReport(op_name, np.inf, np.inf, False, note + ", too few smooth probes")
    if not analytic:
        return GradCheckReport(op_name, 0.0, 0.0, True, "no differentiable inputs")
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if not (np.isfinite(a).all() and np.isfinite(n).all()):
        return GradCheckReport(op_name, np.inf, np.inf, False, "non-finite gradient")
    abs_err = float(np.max(np.abs(a - n)))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
    rel_err = abs_err / scale if scale > 0 else 0.0
    passed = rel_err <= rel_tol or abs_err <= abs_tol
    return GradCheckReport(op_name, rel_err, abs_err, passed, note)
