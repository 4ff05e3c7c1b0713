"""Branching-particle approximation of the superdiffusion.

At approximation level n every particle carries mass 1/n and an exponential
lifetime of mean 1/n; while alive it moves as the L-diffusion, and at death
it branches at its final position into a random number of offspring whose
law has mean 1 + β(x)/n and variance 2α(x). The empirical measure pairs
against test functions as ⟨X_t, f⟩ = (1/n) Σ f(x_i).

The offspring family is the three-point law on {0, 1, K} with the smallest
K ≥ 2 admitting exact moment matching (recorded in trajectory metadata so
runs are comparable across implementations). Where 2α(x) falls below the
integer-support variance floor the simulator clamps it up to the floor and
counts the event; `make_offspring_law` itself is strict and raises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _engine as eng
from . import fields as F
from .model import HTransformSpec, SuperdiffusionSpec

__all__ = [
    "OffspringLaw",
    "make_offspring_law",
    "ParticleCloud",
    "Snapshot",
    "Trajectory",
    "step_motion",
    "simulate",
    "pair",
    "h_weighted_mass",
    "moving_pair",
    "atoms_to_positions",
]

OFFSPRING_FAMILY = "three-point {0,1,K}, minimal K, exact two-moment match"

_RAISE_N = "no admissible offspring law at this level; raise the approximation level n"


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring count law on support {0, 1, K} with exact target moments."""
    K: int
    p0: float
    p1: float
    pK: float
    target_mean: float
    target_variance: float

    def mean(self) -> float:
        return self.p1 + self.K * self.pK

    def variance(self) -> float:
        second = self.p1 + self.K * self.K * self.pK
        m = self.mean()
        return second - m * m

    def probabilities(self) -> dict:
        return {0: self.p0, 1: self.p1, self.K: self.pK}

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        u = rng.random(size)
        out = np.full(size, self.K, dtype=np.int64)
        out[u < self.p0 + self.p1] = 1
        out[u < self.p0] = 0
        return out


def make_offspring_law(m: float, v: float) -> OffspringLaw:
    """Smallest-K law on {0, 1, K} with mean m and variance v, matched exactly.

    Raises when no such law exists: m < 0, v below the integer-support
    variance floor (m(1−m) for m ≤ 1, (m−1)(2−m) for 1 < m ≤ 2), or no
    integer K ≤ 10⁶ keeps all three probabilities in [0, 1] - the latter
    signals β(x)/n or α(x) out of range for this level.
    """
    m = float(m)
    v = float(v)
    if m < 0.0:
        raise ValueError(f"offspring mean must be nonnegative, got {m}")
    if v < 0.0:
        raise ValueError(f"offspring variance must be nonnegative, got {v}")
    S = v + m * (m - 1.0)
    if S < 0.0:
        raise ValueError(
            f"variance {v} below the integer-support floor for mean {m}; " + _RAISE_N)
    if S == 0.0:
        return OffspringLaw(2, 1.0 - m, m, 0.0, m, v)
    k_lo = 1.0 + S / m
    K = 2 if k_lo <= 2.0 else max(2, int(math.ceil(k_lo - 1e-12)))
    while m - S / (K - 1.0) < 0.0:
        K += 1
        if K > 1_000_000:
            raise ValueError(_RAISE_N)
    if m > 1.0 and S / K < (m - 1.0) - 1e-12:
        raise ValueError(_RAISE_N)
    pK = S / (K * (K - 1.0))
    p1 = m - S / (K - 1.0)
    p0 = 1.0 - p1 - pK
    if p0 < 0.0:
        p0 = 0.0
    return OffspringLaw(K, p0, p1, pK, m, v)


# ---------------------------------------------------------------------------
# clouds and pairings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleCloud:
    """Empirical measure at one instant: positions with uniform mass 1/n."""
    level: int
    time: float
    positions: np.ndarray  # (N, d)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def total_mass(self) -> float:
        return self.count / self.level


def _values_on(f, pts: np.ndarray) -> np.ndarray:
    if isinstance(f, F.ScalarField):
        return F.eval_scalar_array(f, pts)
    return np.array([float(f(x)) for x in pts])


def pair(cloud: ParticleCloud, f) -> float:
    """⟨X_t, f⟩ = (1/n) Σ f(x_i)."""
    if cloud.count == 0:
        return 0.0
    return float(np.sum(_values_on(f, cloud.positions))) / cloud.level


def h_weighted_mass(cloud: ParticleCloud, tr: HTransformSpec) -> float:
    """Weighted total mass e^{−λt}·(1/n) Σ h(x_i) at the cloud's time."""
    return math.exp(-tr.lambda_c * cloud.time) * pair(cloud, tr.h)


def moving_pair(cloud: ParticleCloud, f, c: float, t: float) -> float:
    """⟨X_t, f^{(ct)}⟩ with f^{(ct)}(x) = f(x₁ + ct, x₂, …)."""
    if cloud.count == 0:
        return 0.0
    pts = cloud.positions.copy()
    pts[:, 0] += c * t
    return float(np.sum(_values_on(f, pts))) / cloud.level


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

def step_motion(x, dt: float, spec: SuperdiffusionSpec,
                rng: np.random.Generator) -> np.ndarray:
    """One motion step of duration dt for the L-diffusion of `spec`.

    Exact transition for tagged kernels (Brownian, Brownian with constant
    drift, Ornstein-Uhlenbeck); Euler-Maruyama x + b dt + σ√dt ξ otherwise.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float).copy()
    d = spec.dim
    tag = spec.motion
    if tag is not None and tag[0] == "bm":
        return x + math.sqrt(dt) * rng.standard_normal(d)
    if tag is not None and tag[0] == "bm_drift":
        _, c, axis = tag
        x = x + math.sqrt(dt) * rng.standard_normal(d)
        x[axis] += c * dt
        return x
    if tag is not None and tag[0] == "ou":
        g = tag[1]
        if abs(g) < 1e-12:
            return x + math.sqrt(dt) * rng.standard_normal(d)
        sd = math.sqrt((1.0 - math.exp(-2.0 * g * dt)) / (2.0 * g))
        return x * math.exp(-g * dt) + sd * rng.standard_normal(d)
    sigma = spec.diffusion.factor(x)
    return (x + spec.drift.eval(x) * dt
            + math.sqrt(dt) * (sigma @ rng.standard_normal(d)))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    t: float
    count: int
    total_mass: float
    w_bar: float
    support_radius: float
    functionals: np.ndarray
    cloud: Optional[ParticleCloud] = None


@dataclass
class Trajectory:
    """Snapshot summaries of one replicate, plus run metadata."""
    level: int
    obs_times: np.ndarray
    snapshots: list
    status: str = "ok"
    events: int = 0
    clamped_events: int = 0
    first_event_time: float = math.nan
    engine: str = "fast"
    seed: int = 0
    replicate: int = 0
    offspring_family: str = OFFSPRING_FAMILY

    @property
    def flags(self) -> list:
        out = []
        if self.status == "population-explosion":
            out.append("population-explosion")
        if self.status == "survivor-cutoff":
            out.append("survivor-cutoff")
        return out

    @property
    def survived(self) -> bool:
        return self.snapshots[-1].count > 0

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots])


def atoms_to_positions(atoms, n: int, dim: int) -> np.ndarray:
    """Initial particle positions for an atomic measure [(x, mass), …].

    Each atom contributes round(n·mass) particles of mass 1/n; n·mass must
    be integral to 1e-9 so the discretized measure is exact.
    """
    rows = []
    for x, mass in atoms:
        x = np.broadcast_to(np.asarray(x, dtype=float), (dim,))
        cnt = n * float(mass)
        if abs(cnt - round(cnt)) > 1e-9:
            raise ValueError(
                f"atom mass {mass} is not a multiple of 1/n at level n={n}")
        rows.append(np.tile(x, (int(round(cnt)), 1)))
    if not rows:
        raise ValueError("initial measure has no atoms")
    return np.concatenate(rows, axis=0)


_STATUS_NAMES = {
    eng.OK: "ok",
    eng.CAP_PARTICLES: "population-explosion",
    eng.CAP_EVENTS: "population-explosion",
    eng.OFFSPRING_ERROR: "offspring-error",
    eng.SURVIVOR_CUTOFF: "survivor-cutoff",
}


def _program_or_none(f):
    return None if f is None else f.program


def _fast_engine_args(spec, tr, functionals, obs_times, moving_speed):
    """Translate spec/fields into flat engine parameters, or None if not possible."""
    if spec.beta.program is None or spec.alpha.program is None:
        return None
    if tr is not None and tr.h.program is None:
        return None
    motion = spec.motion
    if motion is None:
        if spec.drift.program is None or not spec.diffusion.is_identity:
            return None
        mcode, m0, maxis = eng.M_EULER, 0.0, 0
        dcode, d0, daxis = spec.drift.program
    else:
        dcode, d0, daxis = eng.D_ZERO, 0.0, 0
        if motion[0] == "bm":
            mcode, m0, maxis = eng.M_BM, 0.0, 0
        elif motion[0] == "bm_drift":
            mcode, m0, maxis = eng.M_BM_DRIFT, float(motion[1]), int(motion[2])
        elif motion[0] == "ou":
            mcode, m0, maxis = eng.M_OU, float(motion[1]), 0
        else:
            return None
    fw, fa = [], []
    for f in functionals:
        if f.program is None or f.program[0] != F.P_BUMP:
            return None
        fw.append(f.program[1])
        fa.append(f.program[2])
    nJ = len(obs_times)
    shift = np.zeros((nJ, len(fw)))
    if moving_speed:
        for j, t in enumerate(obs_times):
            shift[j, :] = moving_speed * t
    bcode, b0, b1, b2, baxis = spec.beta.program
    acode, a0, a1, a2, aaxis = spec.alpha.program
    if tr is None:
        hcode, h0, h1, h2, haxis, lam = F.P_CONST, 1.0, 0.0, 0.0, 0, 0.0
    else:
        hcode, h0, h1, h2, haxis = tr.h.program
        lam = float(tr.lambda_c)
    if spec.domain.kind == "box":
        use_box = True
        box_lo = np.array([b[0] for b in spec.domain.bounds], dtype=float)
        box_hi = np.array([b[1] for b in spec.domain.bounds], dtype=float)
    else:
        use_box = False
        box_lo = np.full(spec.dim, -np.inf)
        box_hi = np.full(spec.dim, np.inf)
    return dict(
        motion=(mcode, m0, maxis), drift=(dcode, d0, daxis),
        beta=(bcode, b0, b1, b2, baxis), alpha=(acode, a0, a1, a2, aaxis),
        h=(hcode, h0, h1, h2, haxis), lam=lam,
        func_w=np.asarray(fw, dtype=float), func_amp=np.asarray(fa, dtype=float),
        func_shift=shift, use_box=use_box, box_lo=box_lo, box_hi=box_hi,
    )


def simulate(spec: SuperdiffusionSpec, tr: Optional[HTransformSpec], mu, n: int,
             obs_times, seed: int, *, replicate: int = 0, functionals=(),
             moving_speed: float = 0.0, dt_max: float = 0.01,
             particle_cap: int = 5_000_000, event_cap: int = 2_000_000_000,
             survival_cutoff_count: int = 0, engine: str = "auto",
             return_clouds: bool = False) -> Trajectory:
    """Simulate one replicate of the branching particle system.

    mu is an atomic initial measure [(position, mass), …]; obs_times must be
    strictly increasing and positive. `tr` supplies the weight pair used for
    the w_bar series (None tracks plain total mass). `functionals` are
    compactly supported fields paired against the cloud at every snapshot;
    `moving_speed` c evaluates them in the frame shifted by c·t along the
    first axis. Deterministic given (seed, replicate, config, engine).
    """
    if n < 1:
        raise ValueError("level n must be >= 1")
    obs_times = np.asarray(obs_times, dtype=float)
    if obs_times.ndim != 1 or len(obs_times) == 0:
        raise ValueError("obs_times must be a nonempty 1-d sequence")
    if not (np.all(np.diff(obs_times) > 0) and obs_times[0] > 0):
        raise ValueError("obs_times must be strictly increasing and positive")
    init = atoms_to_positions(mu, n, spec.dim)
    functionals = list(functionals)

    args = None
    if engine in ("auto", "fast") and not return_clouds:
        args = _fast_engine_args(spec, tr, functionals, obs_times, moving_speed)
        if args is None and engine == "fast":
            raise ValueError("fast engine requires program-backed coefficients")
    if args is not None:
        state = eng.replicate_rng_state(seed, replicate)
        if spec.dim == 1:
            mcode, m0, _ = args["motion"]
            dcode, d0, _ = args["drift"]
            bcode, b0, b1, b2, _ = args["beta"]
            acode, a0, a1, a2, _ = args["alpha"]
            hcode, h0, h1, h2, _ = args["h"]
            counts, wbar, radius, funcs, status, events, clamped, ft = \
                eng.run_replicate_1d(
                    n, init[:, 0].copy(), obs_times,
                    mcode, m0, dcode, d0, dt_max,
                    bcode, b0, b1, b2, acode, a0, a1, a2,
                    hcode, h0, h1, h2, args["lam"],
                    args["func_w"], args["func_amp"], args["func_shift"],
                    args["use_box"], float(args["box_lo"][0]), float(args["box_hi"][0]),
                    particle_cap, event_cap, survival_cutoff_count, state)
        else:
            counts, wbar, radius, funcs, status, events, clamped, ft = eng.run_replicate(
                n, init, obs_times,
                *args["motion"], *args["drift"], dt_max,
                *args["beta"], *args["alpha"], *args["h"], args["lam"],
                args["func_w"], args["func_amp"], args["func_shift"],
                args["use_box"], args["box_lo"], args["box_hi"],
                particle_cap, event_cap, survival_cutoff_count, state)
        snaps = [Snapshot(float(t), int(counts[j]), counts[j] / n, float(wbar[j]),
                          float(radius[j]), funcs[j].copy())
                 for j, t in enumerate(obs_times)]
        return Trajectory(n, obs_times, snaps, _STATUS_NAMES[int(status)],
                          int(events), int(clamped),
                          float(ft) if math.isfinite(ft) else math.nan,
                          "fast", seed, replicate)
    return _simulate_reference(spec, tr, init, n, obs_times, seed, replicate,
                               functionals, moving_speed, dt_max, particle_cap,
                               event_cap, survival_cutoff_count, return_clouds)


def _simulate_reference(spec, tr, init, n, obs_times, seed, replicate,
                        functionals, moving_speed, dt_max, particle_cap,
                        event_cap, survival_cutoff_count, return_clouds):
    """Pure-Python engine: same event mechanism, arbitrary fields and motion."""
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=int(seed) & (2**64 - 1), spawn_key=(int(replicate), 1)))
    d = spec.dim
    lam = 0.0 if tr is None else tr.lambda_c
    hfield = F.make_constant(d, 1.0) if tr is None else tr.h
    events = 0
    clamped = 0
    first_event = math.inf
    status = "ok"
    cur = [init[i].copy() for i in range(init.shape[0])]
    snaps = []
    t_prev = 0.0

    def offspring_count(x):
        nonlocal clamped
        m = 1.0 + spec.beta.eval(x) / n
        v = 2.0 * spec.alpha.eval(x)
        S = v + m * (m - 1.0)
        if S < 0.0:
            if m <= 1.0:
                S = 0.0
            elif m <= 2.0:
                S = 2.0 * (m - 1.0)
            else:
                raise ValueError(_RAISE_N)
            clamped += 1
            v = S - m * (m - 1.0)
        law = make_offspring_law(m, v)
        return int(law.sample(rng, 1)[0])

    for t_end in obs_times:
        nxt = []
        stack = [(x, t_prev) for x in reversed(cur)]
        while stack and status == "ok":
            x, tb = stack.pop()
            alive = True
            while alive:
                tau = rng.exponential(1.0 / n)
                if t_prev == 0.0 and tb == 0.0:
                    first_event = min(first_event, tau)
                td = tb + tau
                if td >= t_end:
                    x = _move_reference(spec, x, t_end - tb, dt_max, rng)
                    if spec.domain.contains(x):
                        nxt.append(x)
                        if len(nxt) > particle_cap:
                            status = "population-explosion"
                    break
                x = _move_reference(spec, x, td - tb, dt_max, rng)
                if not spec.domain.contains(x):
                    break
                events += 1
                if events > event_cap:
                    status = "population-explosion"
                    break
                try:
                    k = offspring_count(x)
                except ValueError:
                    status = "offspring-error"
                    break
                if k == 0:
                    alive = False
                elif k == 1:
                    tb = td
                else:
                    for _ in range(k - 1):
                        stack.append((x.copy(), td))
                    tb = td
                if survival_cutoff_count and len(nxt) + len(stack) + 1 >= survival_cutoff_count:
                    status = "survivor-cutoff"
                    break
        pts = np.array(nxt).reshape(len(nxt), d)
        cloud = ParticleCloud(n, float(t_end), pts)
        fvals = np.array([
            moving_pair(cloud, f, moving_speed, t_end) if moving_speed
            else pair(cloud, f) for f in functionals])
        snaps.append(Snapshot(float(t_end), len(nxt), len(nxt) / n,
                              math.exp(-lam * t_end) * pair(cloud, hfield),
                              float(np.max(np.linalg.norm(pts, axis=1))) if len(nxt) else 0.0,
                              fvals, cloud if return_clouds else None))
        cur = nxt
        t_prev = t_end
        if status != "ok" or not cur:
            break
    while len(snaps) < len(obs_times):
        j = len(snaps)
        snaps.append(Snapshot(float(obs_times[j]), 0, 0.0, 0.0, 0.0,
                              np.zeros(len(functionals))))
    return Trajectory(n, obs_times, snaps, status, events, clamped,
                      first_event if math.isfinite(first_event) else math.nan,
                      "reference", seed, replicate)


def _move_reference(spec, x, tau, dt_max, rng):
    if tau <= 0:
        return x
    if spec.motion is not None:
        return step_motion(x, tau, spec, rng)
    nsub = max(1, int(math.ceil(tau / dt_max)))
    h = tau / nsub
    for _ in range(nsub):
        x = step_motion(x, h, spec, rng)
    return x
