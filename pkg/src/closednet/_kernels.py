"""Compiled inner loops for fluid integration and event simulation.

Everything here works on flattened (queue, route) pair arrays built by
:func:`pair_layout`; the public modules wrap these with model-level APIs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["PairLayout", "pair_layout"]


class PairLayout:
    """Flat index arrays describing a model's (queue, route) pairs."""

    def __init__(self, model):
        pairs = model.pairs
        index = {p: k for k, p in enumerate(pairs)}
        self.model = model
        self.P = len(pairs)
        self.pq = np.array([j for j, _ in pairs], dtype=np.int64)
        self.pr = np.array([i for _, i in pairs], dtype=np.int64)
        self.mu = np.array([float(model.mu[j, i]) for j, i in pairs])
        self.inv_mu = 1.0 / self.mu
        self.prevp = np.array([index[(model.prev_queue(j, i), i)] for j, i in pairs], dtype=np.int64)
        self.nextp = np.array([index[(model.next_queue(j, i), i)] for j, i in pairs], dtype=np.int64)
        qptr = [0]
        qpairs = []
        for j in range(model.J):
            qpairs.extend(k for k, (jj, _) in enumerate(pairs) if jj == j)
            qptr.append(len(qpairs))
        self.qptr = np.array(qptr, dtype=np.int64)
        self.qpairs = np.array(qpairs, dtype=np.int64)
        self.J = model.J
        self.I = model.I

    def flatten(self, m) -> np.ndarray:
        return np.ascontiguousarray(m[self.pq, self.pr], dtype=float)

    def unflatten(self, flat) -> np.ndarray:
        flat = np.asarray(flat)
        out = np.zeros(flat.shape[:-1] + (self.J, self.I), dtype=flat.dtype)
        out[..., self.pq, self.pr] = flat
        return out


def pair_layout(model) -> PairLayout:
    return model._cached("pair_layout", lambda: PairLayout(model))


# -- fluid -------------------------------------------------------------------


@njit(cache=True)
def fluid_rates(m, pq, mu, inv_mu, prevp, qptr, qpairs, J, lam, max_sweeps):
    """Fill ``lam`` with processor-sharing rates; False if empty-queue sweeps do not settle."""
    P = m.shape[0]
    mj = np.zeros(J)
    for p in range(P):
        mj[pq[p]] += m[p]
    any_empty = False
    for p in range(P):
        q = pq[p]
        if mj[q] > 0.0:
            lam[p] = mu[p] * m[p] / mj[q]
        else:
            lam[p] = 0.0
            any_empty = True
    if not any_empty:
        return True
    for _ in range(max_sweeps):
        changed = False
        for j in range(J):
            if mj[j] > 0.0:
                continue
            load = 0.0
            for k in range(qptr[j], qptr[j + 1]):
                p = qpairs[k]
                load += lam[prevp[p]] * inv_mu[p]
            theta = 1.0 / load if load > 1.0 else 1.0
            for k in range(qptr[j], qptr[j + 1]):
                p = qpairs[k]
                new = theta * lam[prevp[p]]
                if abs(new - lam[p]) > 1e-14 * abs(new):
                    changed = True
                lam[p] = new
        if not changed:
            return True
    return False


@njit(cache=True)
def fluid_integrate(m0, pq, pr, mu, inv_mu, prevp, qptr, qpairs, J, I, step, horizon, nsteps,
                    record_every, max_events, dust, max_sweeps, rec_t, rec_m, rec_lam):
    """Euler steps with exact stops at emptying times.

    Returns (records written, events, status); status 0 ok, 1 rate sweep
    failure, 2 non-finite state.
    """
    P = m0.shape[0]
    m = m0.copy()
    totals = np.zeros(I)
    for p in range(P):
        totals[pr[p]] += m[p]
    lam = np.zeros(P)
    d = np.zeros(P)
    s = np.zeros(I)
    if not fluid_rates(m, pq, mu, inv_mu, prevp, qptr, qpairs, J, lam, max_sweeps):
        return 0, 0, 1
    nrec = 0
    rec_t[0] = 0.0
    rec_m[0, :] = m
    rec_lam[0, :] = lam
    nrec = 1
    events = 0
    for k in range(nsteps):
        remaining = step
        left = horizon - k * step
        if left < remaining:
            remaining = left
        sub = 0
        while remaining > 0.0:
            for p in range(P):
                d[p] = lam[prevp[p]] - lam[p]
            dt = remaining
            hit = False
            if sub < max_events:
                tau = np.inf
                for p in range(P):
                    if d[p] < 0.0 and m[p] > 0.0:
                        t = m[p] / -d[p]
                        if t < tau:
                            tau = t
                if tau < remaining:
                    dt = tau
                    hit = True
            for p in range(P):
                m[p] += dt * d[p]
            if hit:
                events += 1
                for p in range(P):
                    if d[p] < 0.0 and m[p] <= -d[p] * dt * 1e-12:
                        m[p] = 0.0
            for i in range(I):
                s[i] = 0.0
            for p in range(P):
                if m[p] < dust:
                    m[p] = 0.0
                s[pr[p]] += m[p]
            for p in range(P):
                if s[pr[p]] > 0.0:
                    m[p] *= totals[pr[p]] / s[pr[p]]
                if not np.isfinite(m[p]):
                    return nrec, events, 2
            remaining -= dt
            sub += 1
            if not fluid_rates(m, pq, mu, inv_mu, prevp, qptr, qpairs, J, lam, max_sweeps):
                return nrec, events, 1
        if (k + 1) % record_every == 0 or k == nsteps - 1:
            t_now = (k + 1) * step
            if t_now > horizon:
                t_now = horizon
            rec_t[nrec] = t_now
            rec_m[nrec, :] = m
            rec_lam[nrec, :] = lam
            nrec += 1
    return nrec, events, 0


# -- event simulation ----------------------------------------------------------


@njit(cache=True)
def _queue_rate(j, m, mj, mu, qptr, qpairs):
    if mj[j] == 0:
        return 0.0
    r = 0.0
    for k in range(qptr[j], qptr[j + 1]):
        p = qpairs[k]
        r += mu[p] * m[p]
    return r / mj[j]


@njit(cache=True)
def _fire(m, mj, rates, pq, mu, nextp, qptr, qpairs, J, R, u1, u2):
    """Pick the completing pair from two uniforms and move the customer.  Returns the pair."""
    target = u1 * R
    j = J - 1
    acc = 0.0
    for q in range(J):
        acc += rates[q]
        if target < acc and rates[q] > 0.0:
            j = q
            break
    # guard against roundoff landing on an idle queue
    while rates[j] <= 0.0:
        j -= 1
    target = u2 * rates[j] * mj[j]
    acc = 0.0
    chosen = -1
    last = -1
    for k in range(qptr[j], qptr[j + 1]):
        p = qpairs[k]
        if m[p] > 0:
            last = p
            acc += mu[p] * m[p]
            if target < acc:
                chosen = p
                break
    if chosen < 0:
        chosen = last
    dest = nextp[chosen]
    m[chosen] -= 1
    mj[j] -= 1
    m[dest] += 1
    mj[pq[dest]] += 1
    return chosen


@njit(cache=True)
def ctmc_run(m, pq, mu, nextp, qptr, qpairs, J, t0, t_end, warmup, nbatch, batch_len,
             expo, unif, completions, state_codes, state_time, radix, area):
    """Advance the chain from time ``t0`` until ``t_end`` or the random draws run out.

    Occupancy time inside ``[warmup, t_end)`` is credited to the current
    state's mixed-radix code and to the per-pair ``area`` integrals;
    completions are counted per batch and pair.
    Returns (time reached, events used, finished flag).
    """
    P = m.shape[0]
    mj = np.zeros(J, dtype=np.int64)
    for p in range(P):
        mj[pq[p]] += m[p]
    rates = np.zeros(J)
    t = t0
    used = 0
    n = expo.shape[0]
    while used < n:
        R = 0.0
        for q in range(J):
            rates[q] = _queue_rate(q, m, mj, mu, qptr, qpairs)
            R += rates[q]
        dt = expo[used] / R
        t_next = t + dt
        # occupancy credit
        lo = t if t > warmup else warmup
        hi = t_next if t_next < t_end else t_end
        if hi > lo:
            code = 0
            for p in range(P):
                code += m[p] * radix[p]
                area[p] += m[p] * (hi - lo)
            state_codes[used] = code
            state_time[used] = hi - lo
        else:
            state_codes[used] = -1
            state_time[used] = 0.0
        if t_next >= t_end:
            return t_end, used + 1, True
        p = _fire(m, mj, rates, pq, mu, nextp, qptr, qpairs, J, R, unif[used, 0], unif[used, 1])
        if t_next >= warmup:
            b = int((t_next - warmup) / batch_len)
            if b >= nbatch:
                b = nbatch - 1
            completions[b, p] += 1
        t = t_next
        used += 1
    return t, used, False


@njit(cache=True)
def ctmc_sample(m, pq, mu, nextp, qptr, qpairs, J, t0, sample_times, next_sample, expo, unif, out):
    """Advance the chain recording the state at each sample time (right-continuous).

    Returns (time reached, events used, index of next unsampled time).
    """
    P = m.shape[0]
    mj = np.zeros(J, dtype=np.int64)
    for p in range(P):
        mj[pq[p]] += m[p]
    rates = np.zeros(J)
    t = t0
    used = 0
    K = sample_times.shape[0]
    n = expo.shape[0]
    while used < n and next_sample < K:
        R = 0.0
        for q in range(J):
            rates[q] = _queue_rate(q, m, mj, mu, qptr, qpairs)
            R += rates[q]
        t_next = t + expo[used] / R
        while next_sample < K and sample_times[next_sample] < t_next:
            for p in range(P):
                out[next_sample, p] = m[p]
            next_sample += 1
        if next_sample >= K:
            return t, used + 1, next_sample
        _fire(m, mj, rates, pq, mu, nextp, qptr, qpairs, J, R, unif[used, 0], unif[used, 1])
        t = t_next
        used += 1
    return t, used, next_sample
