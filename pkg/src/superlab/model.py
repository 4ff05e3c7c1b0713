"""Superdiffusion model specs, weight transforms, and the example registry.

A model is the tuple (L, β, α; D) with L = ½∇·a∇ + b·∇: diffusion matrix a,
drift b, mass creation β (bounded above), branching intensity α > 0. A weight
transform is a pair (h, λ) with h > 0 solving (L + β − λ)h = 0 exactly; the
reweighted process e^{−λt} h·X_t then has drift-corrected motion
L + a∇h/h·∇, zero running mass creation and intensity αh, and its total mass
is a supermartingale (a martingale when the corrected motion is conservative).

The registry ships five fully wired models: plain supercritical branching
Brownian mass (sbm), an exponentially tilted variant whose corrected motion
is Brownian with constant drift (sbm_drift), a smooth outward-drift variant
(sbm_outward), and two quadratically tilted variants whose corrected motion
is an inward resp. outward Ornstein-Uhlenbeck flow (sou_inward, sou_outward).
All registry transforms are exact eigenpairs: the residual (L+β−λ)h/h
vanishes to machine precision, which makes the transformed-side algebra
(operator identity, pathwise reweighting) exact rather than approximate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fields as F

__all__ = [
    "Domain",
    "SuperdiffusionSpec",
    "HTransformSpec",
    "ScalingTriple",
    "ExampleModel",
    "h_transform",
    "inverse_beta_of_transform",
    "apply_generator",
    "transform_residual",
    "transformed_apply",
    "drift_corrected_apply",
    "lambda_c_closed_form",
    "estimate_lambda_c",
    "LambdaCEstimate",
    "registry_example",
    "registry_ids",
    "registry_info",
    "REGISTRY_IDS",
]


@dataclass(frozen=True)
class Domain:
    """Either all of R^d or an open box (killing at the boundary)."""
    kind: str = "rd"                   # "rd" | "box"
    bounds: Optional[tuple] = None     # ((lo, hi),) * d for "box"

    def contains(self, x) -> bool:
        if self.kind == "rd":
            return True
        return all(lo < xi < hi for xi, (lo, hi) in zip(np.atleast_1d(x), self.bounds))


def _sample_points(dim: int, count: int = 64, scale: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng(20240917)
    pts = scale * rng.standard_normal((count, dim))
    pts[0] = 0.0
    return pts


@dataclass(frozen=True)
class SuperdiffusionSpec:
    """Full model (L, β, α; D); immutable once constructed.

    `beta_bound` is the declared upper bound for β, checked by sampling at
    construction (fields are black boxes, nothing is proved). `motion` is an
    exact-transition tag for the L-diffusion used by the simulation engine:
    ("bm",), ("bm_drift", c, axis), ("ou", gamma) with drift −gamma·x, or
    None meaning Euler stepping of `drift`.
    """
    dim: int
    diffusion: F.DiffusionMatrix
    drift: F.VectorField
    beta: F.ScalarField
    alpha: F.ScalarField
    domain: Domain = Domain()
    label: str = ""
    beta_bound: Optional[float] = None
    motion: Optional[tuple] = ("bm",)
    transform: Optional["HTransformSpec"] = None

    def __post_init__(self):
        pts = _sample_points(self.dim)
        for x in pts:
            if not self.domain.contains(x):
                continue
            a = self.alpha.eval(x)
            if not a > 0.0:
                raise ValueError(
                    f"alpha must be positive; alpha({x}) = {a} in model {self.label!r}")
            if self.beta_bound is not None:
                b = self.beta.eval(x)
                if b > self.beta_bound + 1e-9:
                    raise ValueError(
                        f"beta exceeds declared bound {self.beta_bound} at {x}: {b}")

    @property
    def is_transformed(self) -> bool:
        return self.transform is not None


@dataclass(frozen=True)
class HTransformSpec:
    """Weight pair (h, λ) defining the space-time weight e^{−λt} h(x)."""
    h: F.ScalarField
    lambda_c: float

    def weight(self, x, t: float) -> float:
        return math.exp(-self.lambda_c * t) * self.h.eval(x)


@dataclass(frozen=True)
class ScalingTriple:
    """Normalizing scale s_t, spread radius z_t, inner-time schedule ẑ_t.

    `r_density` is either ("lebesgue", κ) or a ScalarField density. When
    `converges_pointwise` is False the triple is registered for diagnostics
    only: the model's law of large numbers is inherited through the weight
    transform rather than through a pointwise semigroup limit.
    """
    s: Callable[[float], float]
    z: Callable[[float], float]
    zhat: Callable[[float], float]
    r_density: object = ("lebesgue", 1.0)
    converges_pointwise: bool = True
    s_description: str = ""

    def r_pair(self, f: F.ScalarField, grid_halfwidth: float = 12.0,
               grid_points: int = 4001) -> float:
        """⟨f, r⟩ by dense trapezoid quadrature (d = 1 only)."""
        xs = np.linspace(-grid_halfwidth, grid_halfwidth, grid_points)
        fv = F.eval_scalar_array(f, xs[:, None])
        if isinstance(self.r_density, tuple):
            kappa = self.r_density[1]
            dens = np.full_like(xs, kappa)
        else:
            dens = F.eval_scalar_array(self.r_density, xs[:, None])
        return float(np.trapezoid(fv * dens, xs))


# ---------------------------------------------------------------------------
# generator algebra
# ---------------------------------------------------------------------------

def apply_generator(spec: SuperdiffusionSpec, f: F.ScalarField, x) -> float:
    """(L f)(x) = ½ Σ a_ij ∂_i∂_j f + b·∇f, assembled from analytic derivatives."""
    x = np.asarray(x, dtype=float)
    a = spec.diffusion.eval(x)
    return 0.5 * f.hess_trace_a(x, a) + float(spec.drift.eval(x) @ f.grad(x))


def transform_residual(spec: SuperdiffusionSpec, tr: HTransformSpec, x) -> float:
    """((L + β − λ) h)(x) / h(x); identically 0 for exact eigenpairs."""
    hx = tr.h.eval(x)
    return (apply_generator(spec, tr.h, x) + (spec.beta.eval(x) - tr.lambda_c) * hx) / hx


def transformed_apply(spec: SuperdiffusionSpec, tr: HTransformSpec,
                      u: F.ScalarField, x) -> float:
    """h⁻¹ (L + β − λ)(h·u) evaluated at x, via exact product-rule fields."""
    hu = F.product(tr.h, u)
    val = apply_generator(spec, hu, x) + (spec.beta.eval(x) - tr.lambda_c) * hu.eval(x)
    return val / tr.h.eval(x)


def drift_corrected_apply(spec: SuperdiffusionSpec, tr: HTransformSpec,
                          u: F.ScalarField, x) -> float:
    """(L + a∇h/h·∇) u at x: the corrected generator applied directly."""
    x = np.asarray(x, dtype=float)
    a = spec.diffusion.eval(x)
    corr = (a @ tr.h.grad(x)) / tr.h.eval(x)
    return apply_generator(spec, u, x) + float(corr @ u.grad(x))


def _corrected_drift(spec: SuperdiffusionSpec, tr: HTransformSpec) -> F.VectorField:
    """b + a∇h/h, with a recognized program when the ingredients allow it."""
    d = spec.dim
    h = tr.h

    def value(x):
        a = spec.diffusion.eval(x)
        return spec.drift.eval(x) + (a @ h.grad(x)) / h.eval(x)

    program = None
    if (spec.diffusion.is_identity and spec.drift.program is not None
            and spec.drift.program[0] == F.D_ZERO and h.program is not None):
        code, p0, p1, p2, axis = h.program
        if code == F.P_CONST:
            program = (F.D_ZERO, 0.0, 0)
        elif code == F.P_EXPLIN:
            program = (F.D_CONST_AXIS, p0, axis)
        elif code == F.P_GAUSSQUAD:
            program = (F.D_LINEAR, 2.0 * p0, 0)
        elif code == F.P_EXPNORM:
            program = (F.D_RADIAL, p0, 0)
    return F.VectorField(d, value, f"corrected({spec.drift.descriptor},{h.descriptor})",
                         program=program)


def _corrected_motion(spec: SuperdiffusionSpec, program) -> Optional[tuple]:
    if spec.motion != ("bm",) or program is None:
        return None
    code = program[0]
    if code == F.D_ZERO:
        return ("bm",)
    if code == F.D_CONST_AXIS:
        return ("bm_drift", program[1], program[2])
    if code == F.D_LINEAR:
        return ("ou", -program[1])
    return None


def h_transform(spec: SuperdiffusionSpec, tr: HTransformSpec) -> SuperdiffusionSpec:
    """Model followed by the reweighted process e^{−λt} h·X_t.

    Returns the spec with drift b + a∇h/h, zero running mass creation (the
    deterministic factor e^{−λt} is carried by the simulator as an exact
    path weight, never simulated), and intensity α·h. Requires h > 0; the
    first non-positive sample aborts with the offending point.
    """
    if not math.isfinite(tr.lambda_c):
        raise ValueError("lambda_c must be finite")
    for x in _sample_points(spec.dim):
        hx = tr.h.eval(x)
        if not hx > 0.0:
            raise ValueError(f"h must be positive on the domain; h({x}) = {hx}")
    drift = _corrected_drift(spec, tr)
    return SuperdiffusionSpec(
        dim=spec.dim,
        diffusion=spec.diffusion,
        drift=drift,
        beta=F.make_constant(spec.dim, 0.0),
        alpha=F.product(spec.alpha, tr.h),
        domain=spec.domain,
        label=f"{spec.label}^h",
        beta_bound=0.0,
        motion=_corrected_motion(spec, drift.program),
        transform=tr,
    )


def inverse_beta_of_transform(spec: SuperdiffusionSpec,
                              tr: HTransformSpec) -> F.ScalarField:
    """The scalar field β + Lh/h − λ as a value-only field.

    Vanishes identically exactly when (h, λ) is an eigenpair of L + β; with
    λ = 0 it is the running mass creation the plain spatial reweighting by h
    would produce, which is how the quadratic examples' printed mass
    creations K + 2c²|x|² are recovered from their constant-β companions.
    """
    def value(x):
        return (spec.beta.eval(x) - tr.lambda_c
                + apply_generator(spec, tr.h, x) / tr.h.eval(x))

    return F.ScalarField(spec.dim, value,
                         descriptor=f"invbeta({spec.label},{tr.h.descriptor})")


# ---------------------------------------------------------------------------
# growth-rate estimation
# ---------------------------------------------------------------------------

@dataclass
class LambdaCEstimate:
    """Point estimate with batch-means confidence interval."""
    value: float
    half_width: float
    batch_values: np.ndarray
    survivor_fraction: float
    all_killed: bool = False

    @property
    def ci(self) -> tuple:
        return (self.value - self.half_width, self.value + self.half_width)


def estimate_lambda_c(spec: SuperdiffusionSpec, x, radius: float, t: float,
                      paths: int, seed: int, dt: float = 0.01,
                      batches: int = 16) -> LambdaCEstimate:
    """Monte Carlo (1/t)·log E^x[exp(∫₀ᵗ β(Y_s) ds); τ_{B_R} > t].

    Y is the L-diffusion, killed on exiting the centered ball of the given
    radius. Paths are Euler steps; in d = 1 the kill check uses the exact
    Brownian-bridge crossing probability per step so the killing itself
    carries no O(√dt) bias. ∫β accumulates by the trapezoid rule. The CI is
    batch means: paths are split into `batches` fixed groups, each yielding
    one (1/t)·log-mean value; reported half-width is 1.96·SE across groups.

    All paths killed returns value −inf with the all_killed flag set.
    """
    if radius <= 0 or t <= 0 or paths <= 0:
        raise ValueError("radius, t and paths must be positive")
    d = spec.dim
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (d,)).copy()
    n_steps = max(1, int(math.ceil(t / dt)))
    dt = t / n_steps
    sq = math.sqrt(dt)
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    X = np.tile(x0, (paths, 1))
    alive = np.ones(paths, dtype=bool)
    integ = np.zeros(paths)
    beta_prev = F.eval_scalar_array(spec.beta, X)
    pure_bm = spec.motion == ("bm",)

    for _ in range(n_steps):
        Xold = X.copy()
        if not pure_bm:
            X = X + F.eval_drift_array(spec.drift, X) * dt
        X = X + sq * rng.standard_normal((paths, d))
        if d == 1:
            inside = np.abs(X[:, 0]) < radius
            stay = alive & inside
            # exact bridge exit probability for each flat barrier
            up = np.exp(np.clip(-2.0 * (radius - Xold[:, 0]) * (radius - X[:, 0]) / dt,
                                -700.0, 0.0))
            lo = np.exp(np.clip(-2.0 * (radius + Xold[:, 0]) * (radius + X[:, 0]) / dt,
                                -700.0, 0.0))
            crossed = rng.random(paths) < (up + lo)
            alive = stay & ~crossed
        else:
            alive &= np.einsum("ij,ij->i", X, X) < radius * radius
        beta_new = F.eval_scalar_array(spec.beta, X)
        integ[alive] += 0.5 * dt * (beta_prev[alive] + beta_new[alive])
        beta_prev = beta_new

    weights = np.where(alive, np.exp(integ), 0.0)
    surv = float(np.count_nonzero(alive)) / paths
    if not alive.any():
        return LambdaCEstimate(-math.inf, math.inf, np.array([]), 0.0, all_killed=True)

    groups = np.array_split(weights, batches)
    vals = []
    for g in groups:
        m = float(np.mean(g))
        vals.append(math.log(m) / t if m > 0 else -math.inf)
    vals = np.asarray(vals)
    finite = vals[np.isfinite(vals)]
    point = math.log(float(np.mean(weights))) / t
    if len(finite) >= 2:
        hw = 1.96 * float(np.std(finite, ddof=1)) / math.sqrt(len(finite))
    else:
        hw = math.inf
    return LambdaCEstimate(point, hw, vals, surv)


# ---------------------------------------------------------------------------
# example registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExampleModel:
    """A registry model: base spec, exact weight pair, scaling, kernels."""
    example_id: str
    base: SuperdiffusionSpec
    transform: HTransformSpec
    scaling: ScalingTriple
    transformed: SuperdiffusionSpec
    motion_kernel: Optional[tuple]       # analytic kernel of corrected motion
    base_const_beta: Optional[float]     # β when spatially constant
    params: dict = field(default_factory=dict)
    lambda_formula: str = ""
    alpha_growth: str = ""
    constraint: str = ""

    @property
    def lambda_c(self) -> float:
        return self.transform.lambda_c

    @property
    def dim(self) -> int:
        return self.base.dim

    def mu_pair_h(self, atoms) -> float:
        """⟨μ, h⟩ for an atomic initial measure [(x, mass), ...]."""
        return sum(m * self.transform.h.eval(np.asarray(x, dtype=float))
                   for x, m in atoms)


REGISTRY_IDS = ("sbm", "sbm_drift", "sbm_outward", "sou_inward", "sou_outward")


def _brownian_scale(d):
    return lambda t: (2.0 * math.pi * t) ** (d / 2.0)


def _linear_spread(speed, eps):
    v = speed + eps
    return lambda t: v * t


def _zhat(t):
    return t * t


def _build_sbm(d, beta, alpha, eps):
    if beta <= 0:
        raise ValueError("beta must be positive (local survival needs lambda_c > 0)")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    base = SuperdiffusionSpec(
        dim=d,
        diffusion=F.identity_diffusion(d),
        drift=F.zero_drift(d),
        beta=F.make_constant(d, beta),
        alpha=F.make_constant(d, alpha),
        label="sbm",
        beta_bound=beta,
    )
    tr = HTransformSpec(F.make_constant(d, 1.0), beta)
    scaling = ScalingTriple(
        s=_brownian_scale(d),
        z=_linear_spread(math.sqrt(2.0 * beta), eps),
        zhat=_zhat,
        r_density=("lebesgue", 1.0),
        converges_pointwise=True,
        s_description="(2*pi*t)^(d/2)",
    )
    return base, tr, scaling, ("heat",), beta


def _build_sbm_drift(d, beta, c, alpha, eps):
    if beta <= 0 or c <= 0 or alpha <= 0:
        raise ValueError("beta, c and alpha must be positive")
    base = SuperdiffusionSpec(
        dim=d,
        diffusion=F.identity_diffusion(d),
        drift=F.zero_drift(d),
        beta=F.make_constant(d, beta),
        alpha=F.make_exp_linear(d, -c, 0, amplitude=alpha),
        label="sbm_drift",
        beta_bound=beta,
    )
    tr = HTransformSpec(F.make_exp_linear(d, c, 0), beta + 0.5 * c * c)
    scaling = ScalingTriple(
        s=_brownian_scale(d),
        z=_linear_spread(math.sqrt(2.0 * beta), eps),
        zhat=_zhat,
        r_density=F.make_exp_linear(d, -c, 0),
        converges_pointwise=False,
        s_description="(2*pi*t)^(d/2) [diagnostic]",
    )
    return base, tr, scaling, ("heat_drift", c), beta


def _build_sbm_outward(d, beta, c, alpha, eps):
    if beta <= 0 or c <= 0 or alpha <= 0:
        raise ValueError("beta, c and alpha must be positive")
    lam = beta + 0.5 * c * c
    base = SuperdiffusionSpec(
        dim=d,
        diffusion=F.identity_diffusion(d),
        drift=F.zero_drift(d),
        beta=F.make_compensating_beta(d, lam, c),
        alpha=F.make_exp_norm(d, -c, amplitude=alpha),
        label="sbm_outward",
        beta_bound=lam,
    )
    tr = HTransformSpec(F.make_exp_norm(d, c), lam)
    scaling = ScalingTriple(
        s=_brownian_scale(d),
        z=_linear_spread(math.sqrt(2.0 * beta) + c, eps),
        zhat=_zhat,
        r_density=F.make_exp_norm(d, -c),
        converges_pointwise=False,
        s_description="(2*pi*t)^(d/2) [diagnostic]",
    )
    return base, tr, scaling, None, None


def _build_sou_inward(d, c, K, alpha, eps):
    if c <= 0 or alpha <= 0:
        raise ValueError("c and alpha must be positive")
    if K <= -c * d:
        raise ValueError(f"K > -c*d required for a positive growth rate (K={K}, c*d={c*d})")
    lam = K + c * d
    base = SuperdiffusionSpec(
        dim=d,
        diffusion=F.identity_diffusion(d),
        drift=F.zero_drift(d),
        beta=F.make_const_plus_square(d, K + 2.0 * c * d, -2.0 * c * c),
        alpha=F.make_constant(d, alpha),
        label="sou_inward",
        beta_bound=K + 2.0 * c * d,
    )
    tr = HTransformSpec(F.make_gaussian_quadratic(d, c, -1), lam)
    scaling = ScalingTriple(
        s=lambda t: 1.0,
        z=_linear_spread(math.sqrt(2.0 * lam), eps),
        zhat=_zhat,
        r_density=F.make_gaussian_quadratic(d, c, -1,
                                            amplitude=(2.0 * c / math.pi) ** (d / 2.0)),
        converges_pointwise=True,
        s_description="1 (pure exponential scaling)",
    )
    return base, tr, scaling, ("ou", 2.0 * c), None


def _build_sou_outward(d, c, K, alpha, eps):
    if c <= 0 or alpha <= 0:
        raise ValueError("c and alpha must be positive")
    if K <= c * d:
        raise ValueError(f"K > c*d required for a positive growth rate (K={K}, c*d={c*d})")
    lam = K - c * d
    base = SuperdiffusionSpec(
        dim=d,
        diffusion=F.identity_diffusion(d),
        drift=F.zero_drift(d),
        beta=F.make_const_plus_square(d, K - 2.0 * c * d, -2.0 * c * c),
        alpha=F.make_gaussian_quadratic(d, c, -1, amplitude=alpha),
        label="sou_outward",
        beta_bound=K - 2.0 * c * d,
    )
    tr = HTransformSpec(F.make_gaussian_quadratic(d, c, 1), lam)
    scaling = ScalingTriple(
        s=lambda t: 1.0,
        z=_linear_spread(math.sqrt(2.0 * lam), eps),
        zhat=_zhat,
        r_density=F.make_gaussian_quadratic(d, 2.0 * c, -1,
                                            amplitude=(c / math.pi) ** (d / 2.0)),
        converges_pointwise=False,
        s_description="1 [diagnostic]",
    )
    return base, tr, scaling, None, None


_REGISTRY_META = {
    "sbm": ("beta", "O(1)", "beta > 0, alpha > 0"),
    "sbm_drift": ("beta + c^2/2", "O(e^{c x1})",
                  "beta > 0, c > 0; moving window needs c < sqrt(2*beta)"),
    "sbm_outward": ("beta + c^2/2", "O(e^{c|x|})", "beta > 0, c > 0"),
    "sou_inward": ("K + c*d", "O(e^{-c x^2})", "c > 0, K > -c*d"),
    "sou_outward": ("K - c*d", "O(e^{c x^2})", "c > 0, K > c*d"),
}


def registry_example(example_id: str, **params) -> ExampleModel:
    """Construct a fully wired registry model.

    Common parameters: d (default 1), alpha (default 0.5), epsilon (spread
    slack, default 0.5). sbm* additionally take beta (default 1.0) and the
    tilted variants c; sou* take c and K.
    """
    d = int(params.pop("d", 1))
    alpha = float(params.pop("alpha", 0.5))
    eps = float(params.pop("epsilon", 0.5))
    kw = dict(params)
    if example_id == "sbm":
        beta = float(kw.pop("beta", 1.0))
        built = _build_sbm(d, beta, alpha, eps)
        used = {"d": d, "beta": beta, "alpha": alpha, "epsilon": eps}
    elif example_id == "sbm_drift":
        beta = float(kw.pop("beta", 1.0))
        c = float(kw.pop("c", 1.0))
        built = _build_sbm_drift(d, beta, c, alpha, eps)
        used = {"d": d, "beta": beta, "c": c, "alpha": alpha, "epsilon": eps}
    elif example_id == "sbm_outward":
        beta = float(kw.pop("beta", 1.0))
        c = float(kw.pop("c", 0.5))
        built = _build_sbm_outward(d, beta, c, alpha, eps)
        used = {"d": d, "beta": beta, "c": c, "alpha": alpha, "epsilon": eps}
    elif example_id == "sou_inward":
        c = float(kw.pop("c", 0.5))
        K = float(kw.pop("K", 1.0))
        built = _build_sou_inward(d, c, K, alpha, eps)
        used = {"d": d, "c": c, "K": K, "alpha": alpha, "epsilon": eps}
    elif example_id == "sou_outward":
        c = float(kw.pop("c", 0.5))
        K = float(kw.pop("K", 2.0))
        built = _build_sou_outward(d, c, K, alpha, eps)
        used = {"d": d, "c": c, "K": K, "alpha": alpha, "epsilon": eps}
    else:
        raise KeyError(f"unknown example id {example_id!r}; known: {REGISTRY_IDS}")
    if kw:
        raise ValueError(f"unknown parameters for {example_id!r}: {sorted(kw)}")

    base, tr, scaling, kernel, const_beta = built
    lam_f, a_growth, constraint = _REGISTRY_META[example_id]
    return ExampleModel(
        example_id=example_id,
        base=base,
        transform=tr,
        scaling=scaling,
        transformed=h_transform(base, tr),
        motion_kernel=kernel,
        base_const_beta=const_beta,
        params=used,
        lambda_formula=lam_f,
        alpha_growth=a_growth,
        constraint=constraint,
    )


def lambda_c_closed_form(example_id: str, **params) -> float:
    """Registry closed-form growth rate for the given example and parameters."""
    return registry_example(example_id, **params).lambda_c


def registry_ids() -> tuple:
    return REGISTRY_IDS


def registry_info() -> list:
    """Rows (id, lambda formula, alpha growth bound, constraints) for display."""
    return [(eid,) + _REGISTRY_META[eid] for eid in REGISTRY_IDS]
