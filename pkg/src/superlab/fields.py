"""Coefficient fields on R^d with exact derivatives.

Everything downstream assembles differential expressions out of field
evaluations: the generator L = 1/2 ∇·a∇ + b·∇ applied to a weight h, drift
corrections a∇h/h, and compensated mass creations β + Lh/h − λ. Those appear
inside per-event simulation coefficients, so they must be cheap and exact.
Fields therefore carry analytic gradients and the a-weighted Hessian trace
Σ_ij a_ij ∂_i∂_j f supplied at construction; numerical differentiation exists
only in `fd_check`, which is the oracle used by the test suite.

Fields are immutable after construction and safe to evaluate concurrently.

Descriptor grammar (these strings appear verbatim in config files):

    const:V               constant V
    explin:C:AXIS[:AMP]   AMP * exp(C * x[AXIS])
    gaussquad:C:S[:AMP]   AMP * exp(S * C * |x|^2),  S in {1, -1}, C > 0
    expnorm:C[:AMP]       AMP * exp(C * sqrt(1 + |x|^2))
    bump:W[:AMP]          AMP * exp(1 - 1/(1 - |x|^2/W^2)) for |x| < W, else 0
    rbf:K:C1,...,Cd       exp(-K * |x - c|^2)
    constquad:A:B         A + B * |x|^2
    compbeta:LAM:C        LAM - (Δh/2)/h  for h = exp(C * sqrt(1 + |x|^2))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ScalarField",
    "VectorField",
    "DiffusionMatrix",
    "make_constant",
    "make_exp_linear",
    "make_gaussian_quadratic",
    "make_exp_norm",
    "make_bump",
    "make_gaussian_rbf",
    "make_const_plus_square",
    "make_compensating_beta",
    "from_callable",
    "product",
    "identity_diffusion",
    "constant_diffusion",
    "zero_drift",
    "const_axis_drift",
    "linear_drift",
    "radial_drift",
    "eval_scalar_array",
    "eval_drift_array",
    "resolve_descriptor",
    "fd_check",
    "FDReport",
]

# Program opcodes shared with the compiled simulation engine. A program is
# (code, p0, p1, p2, axis); fields without one fall back to the Python path.
P_CONST = 0
P_EXPLIN = 1
P_GAUSSQUAD = 2
P_EXPNORM = 3
P_CONSTQUAD = 4
P_COMPBETA = 5
P_BUMP = 6

# Drift program opcodes.
D_ZERO = 0
D_CONST_AXIS = 1   # c * e_axis
D_LINEAR = 2       # g * x
D_RADIAL = 3       # c * x / sqrt(1 + |x|^2)


class ScalarField:
    """Scalar function with analytic gradient and a-weighted Hessian trace.

    `hess_trace_a(x, a)` returns Σ_ij a_ij(x) ∂_i∂_j f(x), the second-order
    part of ∇·a∇ f for locally constant a. Fields built by the factories
    below always provide derivatives; derived fields (e.g. recovered mass
    creations) may be value-only, in which case grad/hess raise.
    """

    __slots__ = ("dim", "descriptor", "program", "_value", "_grad", "_hess")

    def __init__(self, dim, value, grad=None, hess_trace=None, descriptor="",
                 program=None):
        self.dim = int(dim)
        self._value = value
        self._grad = grad
        self._hess = hess_trace
        self.descriptor = descriptor
        self.program = program

    def eval(self, x) -> float:
        return float(self._value(np.asarray(x, dtype=float)))

    __call__ = eval

    @property
    def has_derivatives(self) -> bool:
        return self._grad is not None and self._hess is not None

    def grad(self, x) -> np.ndarray:
        if self._grad is None:
            raise NotImplementedError(
                f"field {self.descriptor!r} carries no analytic gradient")
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)

    def hess_trace_a(self, x, a) -> float:
        """Value of Σ_ij a_ij ∂_i∂_j f at x, for a symmetric matrix a."""
        if self._hess is None:
            raise NotImplementedError(
                f"field {self.descriptor!r} carries no analytic Hessian trace")
        return float(self._hess(np.asarray(x, dtype=float),
                                np.asarray(a, dtype=float)))


class VectorField:
    """Drift field b: R^d -> R^d."""

    __slots__ = ("dim", "descriptor", "program", "_value")

    def __init__(self, dim, value, descriptor="", program=None):
        self.dim = int(dim)
        self._value = value
        self.descriptor = descriptor
        self.program = program

    def eval(self, x) -> np.ndarray:
        return np.asarray(self._value(np.asarray(x, dtype=float)), dtype=float)

    __call__ = eval


class DiffusionMatrix:
    """Symmetric positive definite diffusion matrix a(x) with factor σσᵀ = a."""

    __slots__ = ("dim", "descriptor", "_eval", "_factor", "is_identity")

    def __init__(self, dim, eval_fn, factor_fn, descriptor="", is_identity=False):
        self.dim = int(dim)
        self._eval = eval_fn
        self._factor = factor_fn
        self.descriptor = descriptor
        self.is_identity = bool(is_identity)

    def eval(self, x) -> np.ndarray:
        return np.asarray(self._eval(np.asarray(x, dtype=float)), dtype=float)

    __call__ = eval

    def factor(self, x) -> np.ndarray:
        """Lower-triangular σ(x) with σσᵀ = a(x)."""
        return np.asarray(self._factor(np.asarray(x, dtype=float)), dtype=float)


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------

def make_constant(dim: int, value: float) -> ScalarField:
    """Field f ≡ value, with vanishing derivatives."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = float(value)
    return ScalarField(
        dim,
        lambda x: v,
        grad=lambda x: np.zeros(dim),
        hess_trace=lambda x, a: 0.0,
        descriptor=f"const:{v!r}",
        program=(P_CONST, v, 0.0, 0.0, 0),
    )


def make_exp_linear(dim: int, c: float, axis: int, amplitude: float = 1.0) -> ScalarField:
    """f(x) = amplitude * exp(c * x[axis])."""
    if not 0 <= axis < dim:
        raise ValueError(f"axis {axis} out of range for dim {dim}")
    c = float(c)
    amp = float(amplitude)

    def value(x):
        return amp * math.exp(c * x[axis])

    def grad(x):
        g = np.zeros(dim)
        g[axis] = c * value(x)
        return g

    def hess_trace(x, a):
        return a[axis, axis] * c * c * value(x)

    desc = f"explin:{c!r}:{axis}" if amp == 1.0 else f"explin:{c!r}:{axis}:{amp!r}"
    return ScalarField(dim, value, grad, hess_trace, desc,
                       program=(P_EXPLIN, c, amp, 0.0, axis))


def make_gaussian_quadratic(dim: int, c: float, sign: int,
                            amplitude: float = 1.0) -> ScalarField:
    """f(x) = amplitude * exp(sign * c * |x|^2), sign = +1 or -1, c > 0."""
    if c <= 0:
        raise ValueError("c must be positive")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    s = float(sign) * float(c)
    amp = float(amplitude)

    def value(x):
        return amp * math.exp(s * float(x @ x))

    def grad(x):
        return 2.0 * s * x * value(x)

    def hess_trace(x, a):
        # ∂_i∂_j f = (2s δ_ij + 4s² x_i x_j) f
        return (2.0 * s * np.trace(a) + 4.0 * s * s * float(x @ a @ x)) * value(x)

    desc = (f"gaussquad:{float(c)!r}:{sign:+d}" if amp == 1.0
            else f"gaussquad:{float(c)!r}:{sign:+d}:{amp!r}")
    return ScalarField(dim, value, grad, hess_trace, desc,
                       program=(P_GAUSSQUAD, s, amp, 0.0, 0))


def _radial(dim, phi, dphi, d2phi, value_shift=0.0):
    """Field f(x) = shift + φ(ρ) with ρ = sqrt(1 + |x|^2): smooth everywhere."""

    def value(x):
        return value_shift + phi(math.sqrt(1.0 + float(x @ x)))

    def grad(x):
        rho = math.sqrt(1.0 + float(x @ x))
        return (dphi(rho) / rho) * x

    def hess_trace(x, a):
        rho = math.sqrt(1.0 + float(x @ x))
        q = float(x @ a @ x)
        return d2phi(rho) * q / rho**2 + dphi(rho) * (np.trace(a) / rho - q / rho**3)

    return value, grad, hess_trace


def make_exp_norm(dim: int, c: float, amplitude: float = 1.0) -> ScalarField:
    """f(x) = amplitude * exp(c * sqrt(1 + |x|^2)).

    Smooth realization of exponential-of-|x| growth: equals e^{c|x|} up to a
    bounded factor and asymptotically exactly.
    """
    c = float(c)
    amp = float(amplitude)
    value, grad, hess = _radial(
        dim,
        lambda r: amp * math.exp(c * r),
        lambda r: amp * c * math.exp(c * r),
        lambda r: amp * c * c * math.exp(c * r),
    )
    desc = f"expnorm:{c!r}" if amp == 1.0 else f"expnorm:{c!r}:{amp!r}"
    return ScalarField(dim, value, grad, hess, desc,
                       program=(P_EXPNORM, c, amp, 0.0, 0))


def make_bump(dim: int, width: float, amplitude: float = 1.0) -> ScalarField:
    """Compactly supported smooth bump, peak `amplitude` at 0, support |x| < width."""
    if width <= 0:
        raise ValueError("width must be positive")
    w2 = float(width) ** 2
    amp = float(amplitude)

    def value(x):
        s = float(x @ x) / w2
        if s >= 1.0:
            return 0.0
        return amp * math.exp(1.0 - 1.0 / (1.0 - s))

    def grad(x):
        s = float(x @ x) / w2
        if s >= 1.0:
            return np.zeros(dim)
        f = amp * math.exp(1.0 - 1.0 / (1.0 - s))
        return (-2.0 * f / (w2 * (1.0 - s) ** 2)) * x

    def hess_trace(x, a):
        s = float(x @ x) / w2
        if s >= 1.0:
            return 0.0
        f = amp * math.exp(1.0 - 1.0 / (1.0 - s))
        u = 1.0 - s
        q = float(x @ a @ x)
        # ∂_i∂_j f = -(2/w²)[δ_ij f u⁻² + (2 x_i x_j f/w²)(2u⁻³ - u⁻⁴)]
        return (-2.0 / w2) * (np.trace(a) * f / u**2
                              + (2.0 * q * f / w2) * (2.0 / u**3 - 1.0 / u**4))

    desc = f"bump:{float(width)!r}" if amp == 1.0 else f"bump:{float(width)!r}:{amp!r}"
    return ScalarField(dim, value, grad, hess_trace, desc,
                       program=(P_BUMP, float(width), amp, 0.0, 0))


def make_gaussian_rbf(dim: int, k: float, center: Sequence[float]) -> ScalarField:
    """f(x) = exp(-k * |x - c|^2); the smooth test-function family."""
    if k <= 0:
        raise ValueError("k must be positive")
    k = float(k)
    c = np.asarray(center, dtype=float)
    if c.shape != (dim,):
        raise ValueError("center must have length dim")

    def value(x):
        r = x - c
        return math.exp(-k * float(r @ r))

    def grad(x):
        r = x - c
        return -2.0 * k * r * value(x)

    def hess_trace(x, a):
        r = x - c
        return (-2.0 * k * np.trace(a) + 4.0 * k * k * float(r @ a @ r)) * value(x)

    desc = "rbf:" + repr(k) + ":" + ",".join(repr(float(v)) for v in c)
    return ScalarField(dim, value, grad, hess_trace, desc)


def make_const_plus_square(dim: int, const: float, coef: float) -> ScalarField:
    """f(x) = const + coef * |x|^2 (mass creations of the quadratic examples)."""
    a0 = float(const)
    b0 = float(coef)

    def value(x):
        return a0 + b0 * float(x @ x)

    def grad(x):
        return 2.0 * b0 * x

    def hess_trace(x, a):
        return 2.0 * b0 * float(np.trace(a))

    return ScalarField(dim, value, grad, hess_trace,
                       f"constquad:{a0!r}:{b0!r}",
                       program=(P_CONSTQUAD, a0, b0, 0.0, 0))


def make_compensating_beta(dim: int, lam: float, c: float) -> ScalarField:
    """Mass creation making h = exp(c·sqrt(1+|x|²)) an exact eigenfunction.

    β(x) = lam - (Δh/2)/h, so (Δ/2 + β - lam) h = 0 identically. Tends to
    lam - c²/2 as |x| -> ∞.
    """
    c = float(c)
    lam = float(lam)
    d = dim

    # (Δh/2)/h = [c((d-1)/ρ + ρ⁻³) + c²(1 - ρ⁻²)]/2 =: -g(ρ), β = lam + g(ρ)
    def g(r):
        return -0.5 * (c * ((d - 1) / r + r**-3) + c * c * (1.0 - r**-2))

    def dg(r):
        return -0.5 * (c * (-(d - 1) * r**-2 - 3.0 * r**-4) + 2.0 * c * c * r**-3)

    def d2g(r):
        return -0.5 * (c * (2.0 * (d - 1) * r**-3 + 12.0 * r**-5) - 6.0 * c * c * r**-4)

    value, grad, hess = _radial(dim, g, dg, d2g, value_shift=lam)
    return ScalarField(dim, value, grad, hess,
                       f"compbeta:{lam!r}:{c!r}",
                       program=(P_COMPBETA, lam, c, float(d), 0))


def from_callable(dim: int, fn: Callable, descriptor: str = "custom") -> ScalarField:
    """Value-only field wrapping an arbitrary callable (no derivatives)."""
    return ScalarField(dim, lambda x: float(fn(x)), descriptor=descriptor)


def product(f: ScalarField, g: ScalarField) -> ScalarField:
    """Pointwise product with derivatives by the product rule.

    The a-weighted Hessian trace of fg is f·H_a g + g·H_a f + 2 ∇fᵀ a ∇g,
    which is why fields only ever need the trace, never the full Hessian.
    """
    if f.dim != g.dim:
        raise ValueError("dimension mismatch")

    def value(x):
        return f.eval(x) * g.eval(x)

    grad = hess = None
    if f.has_derivatives and g.has_derivatives:
        def grad(x):
            return f.eval(x) * g.grad(x) + g.eval(x) * f.grad(x)

        def hess(x, a):
            return (f.eval(x) * g.hess_trace_a(x, a)
                    + g.eval(x) * f.hess_trace_a(x, a)
                    + 2.0 * float(f.grad(x) @ np.asarray(a) @ g.grad(x)))

    return ScalarField(f.dim, value, grad, hess,
                       f"({f.descriptor})*({g.descriptor})")


def identity_diffusion(dim: int) -> DiffusionMatrix:
    eye = np.eye(dim)
    return DiffusionMatrix(dim, lambda x: eye, lambda x: eye,
                           descriptor="identity", is_identity=True)


def constant_diffusion(matrix) -> DiffusionMatrix:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("diffusion matrix must be symmetric")
    sigma = np.linalg.cholesky(a)
    return DiffusionMatrix(a.shape[0], lambda x: a, lambda x: sigma,
                           descriptor="constant",
                           is_identity=bool(np.allclose(a, np.eye(a.shape[0]))))


def zero_drift(dim: int) -> VectorField:
    z = np.zeros(dim)
    return VectorField(dim, lambda x: z, "zero", program=(D_ZERO, 0.0, 0))


def const_axis_drift(dim: int, c: float, axis: int = 0) -> VectorField:
    if not 0 <= axis < dim:
        raise ValueError("axis out of range")
    c = float(c)

    def value(x):
        b = np.zeros(dim)
        b[axis] = c
        return b

    return VectorField(dim, value, f"constdrift:{c!r}:{axis}",
                       program=(D_CONST_AXIS, c, axis))


def linear_drift(dim: int, g: float) -> VectorField:
    """b(x) = g·x; g < 0 is mean reversion, g > 0 pushes outward."""
    g = float(g)
    return VectorField(dim, lambda x: g * x, f"lineardrift:{g!r}",
                       program=(D_LINEAR, g, 0))


def radial_drift(dim: int, c: float) -> VectorField:
    """b(x) = c·x/sqrt(1+|x|²): smooth, asymptotically radial of speed c."""
    c = float(c)

    def value(x):
        return c * x / math.sqrt(1.0 + float(x @ x))

    return VectorField(dim, value, f"radialdrift:{c!r}",
                       program=(D_RADIAL, c, 0))


# ---------------------------------------------------------------------------
# vectorized evaluation over point batches (Monte Carlo paths)
# ---------------------------------------------------------------------------

def eval_scalar_array(f: ScalarField, pts: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field on an (N, d) array of points."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    prog = f.program
    if prog is None:
        return np.array([f.eval(x) for x in pts])
    code, p0, p1, p2, axis = prog
    if code == P_CONST:
        return np.full(pts.shape[0], p0)
    r2 = np.einsum("ij,ij->i", pts, pts)
    if code == P_EXPLIN:
        return p1 * np.exp(p0 * pts[:, axis])
    if code == P_GAUSSQUAD:
        return p1 * np.exp(p0 * r2)
    if code == P_EXPNORM:
        return p1 * np.exp(p0 * np.sqrt(1.0 + r2))
    if code == P_CONSTQUAD:
        return p0 + p1 * r2
    if code == P_COMPBETA:
        rho = np.sqrt(1.0 + r2)
        half_lap = 0.5 * (p1 * ((p2 - 1.0) / rho + rho**-3)
                          + p1 * p1 * (1.0 - rho**-2))
        return p0 - half_lap
    if code == P_BUMP:
        s = r2 / (p0 * p0)
        out = np.zeros(pts.shape[0])
        inside = s < 1.0
        out[inside] = p1 * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
        return out
    raise ValueError(f"unknown scalar program code {code}")


def eval_drift_array(b: VectorField, pts: np.ndarray) -> np.ndarray:
    """Evaluate a drift field on an (N, d) array of points."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    prog = b.program
    if prog is None:
        return np.array([b.eval(x) for x in pts])
    code, p0, axis = prog
    if code == D_ZERO:
        return np.zeros_like(pts)
    if code == D_CONST_AXIS:
        out = np.zeros_like(pts)
        out[:, axis] = p0
        return out
    if code == D_LINEAR:
        return p0 * pts
    if code == D_RADIAL:
        rho = np.sqrt(1.0 + np.einsum("ij,ij->i", pts, pts))
        return p0 * pts / rho[:, None]
    raise ValueError(f"unknown drift program code {code}")


# ---------------------------------------------------------------------------
# descriptor registry
# ---------------------------------------------------------------------------

def _parse_const(parts, dim):
    (v,) = parts
    return make_constant(dim, float(v))


def _parse_explin(parts, dim):
    if len(parts) == 2:
        c, axis = parts
        return make_exp_linear(dim, float(c), int(axis))
    c, axis, amp = parts
    return make_exp_linear(dim, float(c), int(axis), float(amp))


def _parse_gaussquad(parts, dim):
    if len(parts) == 2:
        c, s = parts
        return make_gaussian_quadratic(dim, float(c), int(s))
    c, s, amp = parts
    return make_gaussian_quadratic(dim, float(c), int(s), float(amp))


def _parse_expnorm(parts, dim):
    if len(parts) == 1:
        return make_exp_norm(dim, float(parts[0]))
    return make_exp_norm(dim, float(parts[0]), float(parts[1]))


def _parse_bump(parts, dim):
    if len(parts) == 1:
        return make_bump(dim, float(parts[0]))
    return make_bump(dim, float(parts[0]), float(parts[1]))


def _parse_rbf(parts, dim):
    k, cs = parts
    center = [float(v) for v in cs.split(",")]
    return make_gaussian_rbf(dim, float(k), center)


def _parse_constquad(parts, dim):
    a, b = parts
    return make_const_plus_square(dim, float(a), float(b))


def _parse_compbeta(parts, dim):
    lam, c = parts
    return make_compensating_beta(dim, float(lam), float(c))


_PARSERS = {
    "const": _parse_const,
    "explin": _parse_explin,
    "gaussquad": _parse_gaussquad,
    "expnorm": _parse_expnorm,
    "bump": _parse_bump,
    "rbf": _parse_rbf,
    "constquad": _parse_constquad,
    "compbeta": _parse_compbeta,
}


def resolve_descriptor(descriptor: str, dim: int) -> ScalarField:
    """Reconstruct a field from its descriptor string."""
    head, _, rest = descriptor.partition(":")
    parser = _PARSERS.get(head)
    if parser is None:
        raise KeyError(f"unknown field descriptor {descriptor!r}")
    try:
        return parser(rest.split(":") if rest else [], dim)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"malformed field descriptor {descriptor!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FDReport:
    """Outcome of checking analytic derivatives against centered differences."""
    max_rel_grad: float
    max_rel_hess: float
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _rel(a, b):
    scale = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / scale


def fd_check(f: ScalarField, points, tol: float, step: float = 1e-4,
             a_matrix=None) -> FDReport:
    """Compare grad and hess_trace_a against centered finite differences.

    Returns the maximum relative deviation over the supplied points and a
    list of (point, kind, deviation) entries exceeding `tol`.
    """
    d = f.dim
    a = np.eye(d) if a_matrix is None else np.asarray(a_matrix, dtype=float)
    h = float(step)
    worst_g = 0.0
    worst_h = 0.0
    failures = []
    for x in points:
        x = np.asarray(x, dtype=float)
        g_an = f.grad(x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            g_fd = (f.eval(x + e) - f.eval(x - e)) / (2.0 * h)
            dev = _rel(g_an[i], g_fd)
            worst_g = max(worst_g, dev)
            if dev > tol:
                failures.append((x.copy(), f"grad[{i}]", dev))
        tr_fd = 0.0
        for i in range(d):
            for j in range(d):
                if a[i, j] == 0.0:
                    continue
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = h
                ej[j] = h
                dij = (f.eval(x + ei + ej) - f.eval(x + ei - ej)
                       - f.eval(x - ei + ej) + f.eval(x - ei - ej)) / (4.0 * h * h)
                tr_fd += a[i, j] * dij
        dev = _rel(f.hess_trace_a(x, a), tr_fd)
        worst_h = max(worst_h, dev)
        if dev > tol:
            failures.append((x.copy(), "hess_trace_a", dev))
    return FDReport(worst_g, worst_h, tol, failures)
