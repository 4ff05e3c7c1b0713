"""Compiled event-driven branching engine.

One replicate = one call to `run_replicate`: particles carry exponential
lifetime clocks of mean 1/n, move by exact Brownian / drifted-Brownian /
Ornstein-Uhlenbeck transitions (Euler substeps otherwise), and branch at
their death position with the minimal-K three-point offspring law matched
exactly to mean 1 + β(x)/n and variance 2α(x). Observation times partition
the run into intervals; within an interval each lineage is processed
depth-first (clocks are memoryless, so fresh exponential draws at interval
boundaries are exact), and the synchronized population at the interval end
yields the snapshot statistics.

Randomness is xoshiro256++ with Box-Muller normals; each replicate owns a
4-word state derived from (master seed, replicate index), so results are
bit-reproducible and independent of scheduling. All kernels are compiled
nogil and cached on disk.
"""
from __future__ import annotations

import numpy as np
from numba import njit, uint64

# scalar-field opcodes (mirrors fields.P_*)
P_CONST = 0
P_EXPLIN = 1
P_GAUSSQUAD = 2
P_EXPNORM = 3
P_CONSTQUAD = 4
P_COMPBETA = 5
P_BUMP = 6

# drift opcodes (mirrors fields.D_*)
D_ZERO = 0
D_CONST_AXIS = 1
D_LINEAR = 2
D_RADIAL = 3

# motion codes
M_BM = 0
M_BM_DRIFT = 1
M_OU = 2
M_EULER = 3

# replicate status codes
OK = 0
CAP_PARTICLES = 1
CAP_EVENTS = 2
OFFSPRING_ERROR = 3
SURVIVOR_CUTOFF = 4


def replicate_rng_state(master_seed: int, replicate: int) -> np.ndarray:
    """Independent xoshiro256++ state for (seed, replicate), counter-derived."""
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                spawn_key=(int(replicate),))
    state = ss.generate_state(4, np.uint64)
    if not state.any():
        state[0] = np.uint64(0x9E3779B97F4A7C15)
    return state


@njit(inline="always")
def _rotl(x, k):
    return (x << k) | (x >> (uint64(64) - k))


@njit(inline="always")
def _next64(s):
    result = _rotl(s[0] + s[3], uint64(23)) + s[0]
    t = s[1] << uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], uint64(45))
    return result


@njit(inline="always")
def _uniform(s):
    # strictly inside (0, 1): shift by half an ulp so log() is always finite
    return (float(_next64(s) >> uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(inline="always")
def _normal(s, spare):
    if spare[0] > 0.0:
        spare[0] = -1.0
        return spare[1]
    u1 = _uniform(s)
    u2 = _uniform(s)
    r = np.sqrt(-2.0 * np.log(u1))
    a = 6.283185307179586 * u2
    spare[0] = 1.0
    spare[1] = r * np.sin(a)
    return r * np.cos(a)


@njit(inline="always")
def _exponential(s, rate):
    return -np.log(_uniform(s)) / rate


@njit(inline="always")
def _eval_scalar(code, p0, p1, p2, axis, x):
    if code == P_CONST:
        return p0
    if code == P_EXPLIN:
        return p1 * np.exp(p0 * x[axis])
    r2 = 0.0
    for i in range(x.shape[0]):
        r2 += x[i] * x[i]
    if code == P_GAUSSQUAD:
        return p1 * np.exp(p0 * r2)
    if code == P_EXPNORM:
        return p1 * np.exp(p0 * np.sqrt(1.0 + r2))
    if code == P_CONSTQUAD:
        return p0 + p1 * r2
    if code == P_COMPBETA:
        rho = np.sqrt(1.0 + r2)
        return p0 - 0.5 * (p1 * ((p2 - 1.0) / rho + rho**-3)
                           + p1 * p1 * (1.0 - rho**-2))
    if code == P_BUMP:
        ss = r2 / (p0 * p0)
        if ss >= 1.0:
            return 0.0
        return p1 * np.exp(1.0 - 1.0 / (1.0 - ss))
    return np.nan


@njit(inline="always")
def _bump_shifted(w, amp, shift, x):
    r2 = (x[0] + shift) * (x[0] + shift)
    for i in range(1, x.shape[0]):
        r2 += x[i] * x[i]
    ss = r2 / (w * w)
    if ss >= 1.0:
        return 0.0
    return amp * np.exp(1.0 - 1.0 / (1.0 - ss))


@njit(inline="always")
def _move(x, tau, motion_code, m0, m_axis, drift_code, d0, d_axis, dt_max, s, spare):
    """Advance one particle over duration tau (exact where the tag allows)."""
    d = x.shape[0]
    if motion_code == M_BM:
        sd = np.sqrt(tau)
        if d == 1:
            x[0] += sd * _normal(s, spare)
            return
        for i in range(d):
            x[i] += sd * _normal(s, spare)
    elif motion_code == M_BM_DRIFT:
        sd = np.sqrt(tau)
        for i in range(d):
            x[i] += sd * _normal(s, spare)
        x[m_axis] += m0 * tau
    elif motion_code == M_OU:
        # drift -gamma·x; exact transition, valid for either sign of gamma
        g = m0
        if abs(g) < 1e-12:
            sd = np.sqrt(tau)
            for i in range(d):
                x[i] += sd * _normal(s, spare)
        else:
            e = np.exp(-g * tau)
            var = (1.0 - np.exp(-2.0 * g * tau)) / (2.0 * g)
            sd = np.sqrt(var)
            for i in range(d):
                x[i] = x[i] * e + sd * _normal(s, spare)
    else:
        nsub = int(np.ceil(tau / dt_max))
        if nsub < 1:
            nsub = 1
        h = tau / nsub
        sd = np.sqrt(h)
        for _ in range(nsub):
            if drift_code == D_CONST_AXIS:
                x[d_axis] += d0 * h
            elif drift_code == D_LINEAR:
                for i in range(d):
                    x[i] += d0 * x[i] * h
            elif drift_code == D_RADIAL:
                r2 = 0.0
                for i in range(d):
                    r2 += x[i] * x[i]
                f = d0 / np.sqrt(1.0 + r2)
                for i in range(d):
                    x[i] += f * x[i] * h
            for i in range(d):
                x[i] += sd * _normal(s, spare)


@njit(inline="always")
def _offspring_params(m, v):
    """Minimal-K three-point law {0,1,K} matching (m, v) exactly.

    Returns (K, p0, p1, pK, status, clamped): status 1 = infeasible. When v
    lies below the integer-support floor the variance is clamped up to it
    (the boundary law), flagged via clamped = 1.
    """
    if m < 0.0:
        return 2, 0.0, 0.0, 0.0, 1, 0
    clamped = 0
    S = v + m * (m - 1.0)
    if S < 0.0:
        # below the minimal variance of any integer law with this mean
        if m <= 1.0:
            S = 0.0
        elif m <= 2.0:
            S = 2.0 * (m - 1.0)
        else:
            return 2, 0.0, 0.0, 0.0, 1, 0
        clamped = 1
    if S == 0.0:
        # deterministic: all mass on {0, 1}
        return 2, 1.0 - m, m, 0.0, 0, clamped
    k_lo = 1.0 + S / m
    K = 2
    if k_lo > 2.0:
        K = int(np.ceil(k_lo - 1e-12))
        if K < 2:
            K = 2
    while m - S / (K - 1.0) < 0.0:
        K += 1
        if K > 1000000:
            return 2, 0.0, 0.0, 0.0, 1, clamped
    if m > 1.0 and S / K < (m - 1.0) - 1e-12:
        # p0 would be negative for every admissible K
        return 2, 0.0, 0.0, 0.0, 1, clamped
    pK = S / (K * (K - 1.0))
    p1 = m - S / (K - 1.0)
    p0 = 1.0 - p1 - pK
    if p0 < 0.0:
        p0 = 0.0
    return K, p0, p1, pK, 0, clamped


@njit(inline="always")
def _eval_scalar1(code, p0, p1, p2, x):
    """d=1 specialization of _eval_scalar on a scalar coordinate."""
    if code == P_CONST:
        return p0
    if code == P_EXPLIN:
        return p1 * np.exp(p0 * x)
    r2 = x * x
    if code == P_GAUSSQUAD:
        return p1 * np.exp(p0 * r2)
    if code == P_EXPNORM:
        return p1 * np.exp(p0 * np.sqrt(1.0 + r2))
    if code == P_CONSTQUAD:
        return p0 + p1 * r2
    if code == P_COMPBETA:
        rho = np.sqrt(1.0 + r2)
        return p0 - 0.5 * (p1 * ((p2 - 1.0) / rho + rho**-3)
                           + p1 * p1 * (1.0 - rho**-2))
    if code == P_BUMP:
        ss = r2 / (p0 * p0)
        if ss >= 1.0:
            return 0.0
        return p1 * np.exp(1.0 - 1.0 / (1.0 - ss))
    return np.nan


@njit(inline="always")
def _move1(x, tau, motion_code, m0, drift_code, d0, dt_max, s, spare):
    """d=1 move on a scalar coordinate; returns the new position."""
    if motion_code == M_BM:
        return x + np.sqrt(tau) * _normal(s, spare)
    if motion_code == M_BM_DRIFT:
        return x + m0 * tau + np.sqrt(tau) * _normal(s, spare)
    if motion_code == M_OU:
        g = m0
        if abs(g) < 1e-12:
            return x + np.sqrt(tau) * _normal(s, spare)
        e = np.exp(-g * tau)
        sd = np.sqrt((1.0 - np.exp(-2.0 * g * tau)) / (2.0 * g))
        return x * e + sd * _normal(s, spare)
    nsub = int(np.ceil(tau / dt_max))
    if nsub < 1:
        nsub = 1
    h = tau / nsub
    sd = np.sqrt(h)
    for _ in range(nsub):
        if drift_code == D_CONST_AXIS:
            x += d0 * h
        elif drift_code == D_LINEAR:
            x += d0 * x * h
        elif drift_code == D_RADIAL:
            x += d0 * x / np.sqrt(1.0 + x * x) * h
        x += sd * _normal(s, spare)
    return x


@njit(cache=True, nogil=True)
def run_replicate_1d(n_level, init_pos, obs_times,
                     motion_code, m0,
                     drift_code, d0, dt_max,
                     beta_code, b0, b1, b2,
                     alpha_code, a0, a1, a2,
                     h_code, h0, h1, h2, lam,
                     func_w, func_amp, func_shift,
                     use_box, box_lo0, box_hi0,
                     cap_particles, cap_events, cutoff_count,
                     state):
    """One-dimensional replicate with scalar positions (hot path).

    Semantics identical to `run_replicate`; positions live in flat arrays so
    the event loop keeps the coordinate in a register.
    """
    nJ = obs_times.shape[0]
    nF = func_w.shape[0]
    rate = float(n_level)

    counts = np.zeros(nJ, dtype=np.int64)
    wbar = np.zeros(nJ)
    radius = np.zeros(nJ)
    funcs = np.zeros((nJ, nF))

    spare = np.zeros(2)
    spare[0] = -1.0

    n_cur = init_pos.shape[0]
    cap0 = 4 * n_cur + 1024
    cur = np.empty(cap0)
    cur[:n_cur] = init_pos
    nxt = np.empty(cap0)
    stack_x = np.empty(cap0)
    stack_t = np.empty(cap0)

    const_coeff = beta_code == P_CONST and alpha_code == P_CONST
    cK, cp0, cp1, cpK, cstat, _ = _offspring_params(1.0 + b0 / rate, 2.0 * a0)
    keep = 1.0 - cp1
    rate_eff = rate * keep if const_coeff else rate
    tp0 = cp0 / keep if keep > 0.0 else 1.0

    status = OK
    events = 0
    clamped = 0
    first_tau = np.inf

    t_prev = 0.0
    for j in range(nJ):
        t_end = obs_times[j]
        n_nxt = 0
        for p in range(n_cur):
            if status != OK:
                break
            n_stack = 1
            stack_x[0] = cur[p]
            stack_t[0] = t_prev
            while n_stack > 0 and status == OK:
                n_stack -= 1
                x = stack_x[n_stack]
                tb = stack_t[n_stack]
                alive = True
                while alive:
                    tau = _exponential(state, rate_eff)
                    if j == 0 and tb == 0.0 and tau < first_tau:
                        first_tau = tau
                    td = tb + tau
                    if td >= t_end:
                        x = _move1(x, t_end - tb, motion_code, m0,
                                   drift_code, d0, dt_max, state, spare)
                        if use_box and (x <= box_lo0 or x >= box_hi0):
                            break
                        if n_nxt >= nxt.shape[0]:
                            grown = np.empty(2 * nxt.shape[0])
                            grown[:n_nxt] = nxt[:n_nxt]
                            nxt = grown
                        nxt[n_nxt] = x
                        n_nxt += 1
                        if n_nxt > cap_particles:
                            status = CAP_PARTICLES
                        if cutoff_count > 0 and n_nxt + n_stack >= cutoff_count:
                            status = SURVIVOR_CUTOFF
                        break
                    x = _move1(x, tau, motion_code, m0,
                               drift_code, d0, dt_max, state, spare)
                    if use_box and (x <= box_lo0 or x >= box_hi0):
                        break
                    events += 1
                    if events > cap_events:
                        status = CAP_EVENTS
                        break
                    if const_coeff:
                        if cstat != 0:
                            status = OFFSPRING_ERROR
                            break
                        K = cK
                        die = _uniform(state) < tp0
                        single = False
                    else:
                        bx = _eval_scalar1(beta_code, b0, b1, b2, x)
                        ax = _eval_scalar1(alpha_code, a0, a1, a2, x)
                        K, p0, p1, pK, ostat, ocl = _offspring_params(
                            1.0 + bx / rate, 2.0 * ax)
                        if ostat != 0:
                            status = OFFSPRING_ERROR
                            break
                        clamped += ocl
                        u = _uniform(state)
                        die = u < p0
                        single = (not die) and u < p0 + p1
                    if die:
                        alive = False
                    elif single:
                        tb = td
                    else:
                        need = n_stack + K - 1
                        if need > stack_x.shape[0]:
                            newcap = stack_x.shape[0]
                            while newcap < need:
                                newcap *= 2
                            gx = np.empty(newcap)
                            gx[:n_stack] = stack_x[:n_stack]
                            stack_x = gx
                            gt = np.empty(newcap)
                            gt[:n_stack] = stack_t[:n_stack]
                            stack_t = gt
                        for _ in range(K - 1):
                            stack_x[n_stack] = x
                            stack_t[n_stack] = td
                            n_stack += 1
                        tb = td
                        if cutoff_count > 0 and n_nxt + n_stack >= cutoff_count:
                            status = SURVIVOR_CUTOFF
                            break
            if status != OK:
                break
        if status != OK:
            if status == SURVIVOR_CUTOFF:
                counts[j] = cutoff_count
            break
        counts[j] = n_nxt
        wsum = 0.0
        rmax = 0.0
        ew = np.exp(-lam * t_end)
        for q in range(n_nxt):
            xq = nxt[q]
            wsum += _eval_scalar1(h_code, h0, h1, h2, xq)
            if abs(xq) > rmax:
                rmax = abs(xq)
            for fidx in range(nF):
                funcs[j, fidx] += _bump_shifted1(func_w[fidx], func_amp[fidx],
                                                 func_shift[j, fidx], xq)
        wbar[j] = ew * wsum / rate
        radius[j] = rmax
        for fidx in range(nF):
            funcs[j, fidx] /= rate
        tmp = cur
        cur = nxt
        nxt = tmp
        n_cur = n_nxt
        t_prev = t_end
        if n_cur == 0:
            break

    return counts, wbar, radius, funcs, status, events, clamped, first_tau


@njit(inline="always")
def _bump_shifted1(w, amp, shift, x):
    xs = x + shift
    ss = xs * xs / (w * w)
    if ss >= 1.0:
        return 0.0
    return amp * np.exp(1.0 - 1.0 / (1.0 - ss))


@njit(cache=True, nogil=True)
def run_replicate(n_level, init_pos, obs_times,
                  motion_code, m0, m_axis,
                  drift_code, d0, d_axis, dt_max,
                  beta_code, b0, b1, b2, b_axis,
                  alpha_code, a0, a1, a2, al_axis,
                  h_code, h0, h1, h2, h_axis, lam,
                  func_w, func_amp, func_shift,
                  use_box, box_lo, box_hi,
                  cap_particles, cap_events, cutoff_count,
                  state):
    """Run one replicate; returns snapshot statistics and status flags.

    init_pos: (N0, d) initial particle positions (mass 1/n each).
    func_shift: (J, F) axis-0 evaluation shifts per (snapshot, functional).
    Returns (counts, wbar, radius, funcs, status, events, clamped, first_tau).
    """
    d = init_pos.shape[1]
    nJ = obs_times.shape[0]
    nF = func_w.shape[0]
    rate = float(n_level)

    counts = np.zeros(nJ, dtype=np.int64)
    wbar = np.zeros(nJ)
    radius = np.zeros(nJ)
    funcs = np.zeros((nJ, nF))

    spare = np.zeros(2)
    spare[0] = -1.0

    cur = init_pos.copy()
    n_cur = cur.shape[0]

    cap0 = 4 * n_cur + 1024
    nxt = np.empty((cap0, d))
    stack = np.empty((cap0, d))
    stack_t = np.empty(cap0)

    # Space-independent coefficients: precompute the law once and thin out
    # single-offspring events (a particle replaced by one child in place is
    # statistically invisible, so the non-trivial events arrive at rate
    # n·(1−p1) and the offspring count is {0, K} with renormalized weights).
    const_coeff = beta_code == P_CONST and alpha_code == P_CONST
    cK, cp0, cp1, cpK, cstat, _ = _offspring_params(1.0 + b0 / rate, 2.0 * a0)
    keep = 1.0 - cp1
    rate_eff = rate * keep if const_coeff else rate
    tp0 = cp0 / keep if keep > 0.0 else 1.0

    status = OK
    events = np.int64(0)
    clamped = np.int64(0)
    first_tau = np.inf
    x = np.empty(d)

    t_prev = 0.0
    for j in range(nJ):
        t_end = obs_times[j]
        n_nxt = 0
        for p in range(n_cur):
            if status != OK:
                break
            # lineage of particle p, processed depth-first within the interval
            n_stack = 1
            for i in range(d):
                stack[0, i] = cur[p, i]
            stack_t[0] = t_prev
            while n_stack > 0 and status == OK:
                n_stack -= 1
                for i in range(d):
                    x[i] = stack[n_stack, i]
                tb = stack_t[n_stack]
                alive = True
                while alive:
                    tau = _exponential(state, rate_eff)
                    if j == 0 and tb == 0.0 and tau < first_tau:
                        first_tau = tau
                    td = tb + tau
                    if td >= t_end:
                        _move(x, t_end - tb, motion_code, m0, m_axis,
                              drift_code, d0, d_axis, dt_max, state, spare)
                        if use_box:
                            inside = True
                            for i in range(d):
                                if x[i] <= box_lo[i] or x[i] >= box_hi[i]:
                                    inside = False
                            if not inside:
                                break
                        if n_nxt >= nxt.shape[0]:
                            grown = np.empty((2 * nxt.shape[0], d))
                            grown[:n_nxt] = nxt[:n_nxt]
                            nxt = grown
                        for i in range(d):
                            nxt[n_nxt, i] = x[i]
                        n_nxt += 1
                        if n_nxt > cap_particles:
                            status = CAP_PARTICLES
                        if cutoff_count > 0 and n_nxt + n_stack >= cutoff_count:
                            status = SURVIVOR_CUTOFF
                        break
                    _move(x, tau, motion_code, m0, m_axis,
                          drift_code, d0, d_axis, dt_max, state, spare)
                    if use_box:
                        inside = True
                        for i in range(d):
                            if x[i] <= box_lo[i] or x[i] >= box_hi[i]:
                                inside = False
                        if not inside:
                            break
                    events += 1
                    if events > cap_events:
                        status = CAP_EVENTS
                        break
                    if const_coeff:
                        if cstat != 0:
                            status = OFFSPRING_ERROR
                            break
                        K = cK
                        die = _uniform(state) < tp0
                        single = False
                    else:
                        bx = _eval_scalar(beta_code, b0, b1, b2, b_axis, x)
                        ax = _eval_scalar(alpha_code, a0, a1, a2, al_axis, x)
                        K, p0, p1, pK, ostat, ocl = _offspring_params(
                            1.0 + bx / rate, 2.0 * ax)
                        if ostat != 0:
                            status = OFFSPRING_ERROR
                            break
                        clamped += ocl
                        u = _uniform(state)
                        die = u < p0
                        single = (not die) and u < p0 + p1
                    if die:
                        alive = False
                    elif single:
                        tb = td
                    else:
                        # one child continues in place, K-1 pushed for later
                        need = n_stack + K - 1
                        if need > stack.shape[0]:
                            newcap = stack.shape[0]
                            while newcap < need:
                                newcap *= 2
                            gs = np.empty((newcap, d))
                            gs[:n_stack] = stack[:n_stack]
                            stack = gs
                            gt = np.empty(newcap)
                            gt[:n_stack] = stack_t[:n_stack]
                            stack_t = gt
                        for _ in range(K - 1):
                            for i in range(d):
                                stack[n_stack, i] = x[i]
                            stack_t[n_stack] = td
                            n_stack += 1
                        tb = td
                        if cutoff_count > 0 and n_nxt + n_stack >= cutoff_count:
                            status = SURVIVOR_CUTOFF
                            break
            if status != OK:
                break
        if status != OK:
            if status == SURVIVOR_CUTOFF:
                counts[j] = cutoff_count
            break
        # snapshot from the synchronized population at t_end
        counts[j] = n_nxt
        wsum = 0.0
        rmax = 0.0
        ew = np.exp(-lam * t_end)
        for q in range(n_nxt):
            for i in range(d):
                x[i] = nxt[q, i]
            wsum += _eval_scalar(h_code, h0, h1, h2, h_axis, x)
            r2 = 0.0
            for i in range(d):
                r2 += x[i] * x[i]
            if r2 > rmax:
                rmax = r2
            for fidx in range(nF):
                funcs[j, fidx] += _bump_shifted(func_w[fidx], func_amp[fidx],
                                                func_shift[j, fidx], x)
        wbar[j] = ew * wsum / rate
        radius[j] = np.sqrt(rmax)
        for fidx in range(nF):
            funcs[j, fidx] /= rate
        # swap buffers: survivors become the next interval's population
        tmp = cur
        cur = nxt
        nxt = tmp
        n_cur = n_nxt
        t_prev = t_end
        if n_cur == 0:
            break

    return counts, wbar, radius, funcs, status, events, clamped, first_tau


@njit(cache=True, nogil=True)
def run_motion_paths(n_paths, x0, horizons,
                     motion_code, m0, m_axis,
                     drift_code, d0, d_axis, dt_max,
                     state):
    """Pure-motion paths (no branching): |Y| at each horizon, per path.

    Used by the conservativeness diagnostic. Returns (n_paths, J) radii.
    """
    d = x0.shape[0]
    nJ = horizons.shape[0]
    out = np.empty((n_paths, nJ))
    spare = np.zeros(2)
    spare[0] = -1.0
    x = np.empty(d)
    for p in range(n_paths):
        for i in range(d):
            x[i] = x0[i]
        t = 0.0
        for j in range(nJ):
            _move(x, horizons[j] - t, motion_code, m0, m_axis,
                  drift_code, d0, d_axis, dt_max, state, spare)
            t = horizons[j]
            r2 = 0.0
            for i in range(d):
                r2 += x[i] * x[i]
            out[p, j] = np.sqrt(r2)
    return out
