"""Pure-numpy versions of the likelihood kernels.

Shapes: ``elh`` is (sites, K) exp-log-baseline, ``eeta`` is (segments, V)
exp-linear-predictor, piece and point tables are parallel 1-d index arrays
plus a (n, V) matrix of variant proportions.
"""

import numpy as np

NAME = "python"


def accumulate_pieces(elh, eeta, site, k, seg, length, pi, acc, n_acc):
    c = (length * elh[site, k])[:, None] * pi * eeta[seg]
    H = np.bincount(acc, weights=c.sum(axis=1), minlength=n_acc)
    return c, H


def point_hazards(elh, eeta, site, k, seg, pi):
    return elh[site, k][:, None] * pi * eeta[seg]


def backprop_pieces(c, acc, gH, site, k, seg, g_lh, g_eta):
    w = c * gH[acc][:, None]
    backprop_points(w, site, k, seg, g_lh, g_eta)


def backprop_points(w, site, k, seg, g_lh, g_eta):
    S, K = g_lh.shape
    g_lh += np.bincount(site * K + k, weights=w.sum(axis=1), minlength=S * K).reshape(S, K)
    G, V = g_eta.shape
    flat = (seg[:, None] * V + np.arange(V)).ravel()
    g_eta += np.bincount(flat, weights=w.ravel(), minlength=G * V).reshape(G, V)
