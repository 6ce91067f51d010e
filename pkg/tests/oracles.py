"""Independent reference implementations used as test oracles.

Written for clarity, not speed: plain Python loops and closed forms that
share no code with the package.
"""

from __future__ import annotations

import math


def greedy_reference(ta, tb, n_bins, dt, offset=0):
    """Dual-pointer histogram, one pointer rule per line."""
    L = -(n_bins // 2)
    U = L + n_bins
    H = [0] * n_bins
    i = j = 0
    ta = [int(x) for x in ta]
    tb = [int(x) for x in tb]
    while i < len(ta) and j < len(tb):
        k = ta[i] // dt - tb[j] // dt - offset
        if k < L:
            i += 1
        elif k >= U:
            j += 1
        else:
            H[k - L] += 1
            i += 1
            j += 1
    return H


def all_pairs_reference(ta, tb, n_bins, dt, offset=0):
    """Brute-force O(N_A * N_B) count of every pair's bin."""
    L = -(n_bins // 2)
    H = [0] * n_bins
    for a in ta:
        for b in tb:
            k = int(a) // dt - int(b) // dt - offset
            if L <= k < L + n_bins:
                H[k - L] += 1
    return H


def gaussian_capture(tau_w, sigma):
    """Probability mass of N(0, sigma) inside [-tau_w/2, tau_w/2]."""
    if sigma == 0:
        return 1.0
    return math.erf(tau_w / (2.0 * math.sqrt(2.0) * sigma))


def shared_edge_alignment_variance(sigma_det, sigma_pps, frac):
    """Variance of (t - p0)/(p1 - p0) scaled to ps, both edges jittered.

    First-order propagation with the covariance of the shared start edge:
    d/dp0 = -(1 - f), d/dp1 = -f.
    """
    return sigma_det**2 + ((1 - frac) ** 2 + frac**2) * sigma_pps**2


def independent_edge_alignment_variance(sigma_det, sigma_pps, frac, n):
    """Ratio X/Y propagated with X and Y treated as independent (per window)."""
    var_x = sigma_det**2 + sigma_pps**2
    var_y = 2.0 * sigma_pps**2
    return (var_x + frac**2 * var_y) / n


def h2(x):
    if x in (0.0, 1.0):
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def quadrature(*terms):
    return math.sqrt(sum(t * t for t in terms))
