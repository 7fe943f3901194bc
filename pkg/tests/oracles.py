"""Independent reference implementations used by several test modules."""

import numpy as np


def brute_force_errors(net, x0, schedule, timesteps, noise_seed, sample_key=0, rows=None):
    """Fill the full (rows x timesteps) error table with one forward pass per cell.

    Re-derives the noise keying, forward process and error without touching
    the classifier module.
    """
    rows = list(range(net.K)) if rows is None else rows
    x = 2.0 * np.asarray(x0, dtype=np.float64) - 1.0
    table = np.empty((len(rows), len(timesteps)))
    for j, t in enumerate(timesteps):
        for i, row in enumerate(rows):
            eps = np.random.default_rng([noise_seed, t, 0, sample_key]).standard_normal(x.shape)
            ab = np.prod(1.0 - schedule.beta[:t])
            x_t = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps
            out, _ = net.forward(x_t.astype(net.dtype), t, np.array([row]))
            diff = out.astype(np.float64).ravel() - eps.ravel()
            table[i, j] = sum(float(d) * float(d) for d in diff) / diff.size
    return table


def brute_force_predict(net, x0, schedule, timesteps, noise_seed, sample_key=0):
    table = brute_force_errors(net, x0, schedule, timesteps, noise_seed, sample_key)
    means = table.mean(axis=1)
    best = 0
    for k in range(1, len(means)):
        if means[k] < means[best]:
            best = k
    return best
