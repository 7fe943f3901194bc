"""Central finite-difference oracle for parameter gradients.

The oracle re-implements the network forward pass and the four objectives
independently of the package and evaluates them in extended precision, so
finite-difference round-off stays far below the smallest gradients checked.
"""

import numpy as np

from margindiff.denoiser import PARAM_ORDER, timestep_embedding

LD = np.longdouble


def _silu(z):
    return z / (1 + np.exp(-z))


def oracle_output(params, arch, x_t, t, rows):
    n = x_t.shape[0]
    temb = timestep_embedding(t, arch.time_dim, arch.T).astype(LD)
    h = np.concatenate([x_t.reshape(n, -1).astype(LD), temb, params["cond_embed"][rows]], axis=1)
    h = _silu(h @ params["W1"] + params["b1"])
    h = _silu(h @ params["W2"] + params["b2"])
    return h @ params["W3"] + params["b3"]


def oracle_loss(params, arch, x_t, t, eps, rows_p, rows_n, cfg):
    K = arch.K
    eps = eps.reshape(eps.shape[0], -1).astype(LD)

    def err(rows):
        return np.mean((oracle_output(params, arch, x_t, t, rows) - eps) ** 2, axis=1)

    d_p = err(rows_p)
    obj = cfg.objective.value
    if obj == "base":
        per = d_p
    else:
        d_n = err(rows_n)
        if obj == "codit":
            per = d_p - LD(cfg.lambda1) * d_n
        elif obj == "fmdit":
            per = np.maximum(d_p - d_n + LD(cfg.margin_fixed), 0)
        else:
            nn = cfg.nn_variant.value
            d_nn = d_p if nn == "positive" else err(np.full(len(rows_p), K if nn == "nonclass" else K + 1))
            per = np.maximum(d_p - d_n + LD(cfg.alpha) * d_nn, 0)
        per = per + LD(cfg.add_base_weight) * d_p
    return np.mean(per)


def numeric_gradient(net, x_t, t, eps, rows_p, rows_n, cfg, h=1e-6):
    """Central differences of :func:`oracle_loss`, flattened in canonical order."""
    params = {n: net.params[n].astype(LD) for n in PARAM_ORDER}
    out = []
    for name in PARAM_ORDER:
        p = params[name]
        g = np.empty(p.shape, dtype=LD)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + LD(h)
            up = oracle_loss(params, net.arch, x_t, t, eps, rows_p, rows_n, cfg)
            p[idx] = orig - LD(h)
            down = oracle_loss(params, net.arch, x_t, t, eps, rows_p, rows_n, cfg)
            p[idx] = orig
            g[idx] = (up - down) / (2 * LD(h))
        out.append(g.ravel())
    return np.concatenate(out)


def max_relative_error(analytic, numeric):
    """Largest ``|a - n| / max(|a|, |n|)``; entries where both are exactly 0 count as 0."""
    analytic = np.asarray(analytic, dtype=LD)
    numeric = np.asarray(numeric, dtype=LD)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1), 0)
    return float(np.max(rel))
