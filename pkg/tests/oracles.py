"""Independent reference computations used by the test-suite.

Nothing here imports the code under test beyond plain data containers.
"""

import itertools
import math

import numpy as np


def naive_conv3d(x, w, stride=1):
    """Scalar nested-loop zero-padded cross-correlation."""
    cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    pad = k // 2
    od, oh, ow = (-(-d // stride), -(-h // stride), -(-wd // stride))
    out = np.zeros((cout, od, oh, ow))
    for o in range(cout):
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for a in range(k):
                            for b in range(k):
                                for e in range(k):
                                    z, y, xx = i * stride + a - pad, j * stride + b - pad, l * stride + e - pad
                                    if 0 <= z < d and 0 <= y < h and 0 <= xx < wd:
                                        acc += w[o, c, a, b, e] * x[c, z, y, xx]
                    out[o, i, j, l] = acc
    return out


def probe_matrix(linear_fn, in_shape):
    """Matrix of a linear map, built column by column from unit vectors."""
    n_in = int(np.prod(in_shape))
    cols = []
    for idx in range(n_in):
        e = np.zeros(n_in)
        e[idx] = 1.0
        cols.append(np.asarray(linear_fn(e.reshape(in_shape))).ravel())
    return np.stack(cols, axis=1)


def central_difference(loss_fn, array, h=1e-5, indices=None):
    """Central finite differences of ``loss_fn()`` w.r.t. entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def scalar_adam(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = float(x0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def brute_force_joint(unary, pair_logw, grid):
    """Enumerate p(Z) with itertools over a (D, H, W) grid.

    ``unary[k][i]`` are per-voxel log-factors, ``pair_logw[k][l][a][b][c]``
    the log-weight kernel; each ordered neighbour pair contributes half its
    weight.  Returns (dict config -> prob, log Z).
    """
    d, h, w = grid
    voxels = list(itertools.product(range(d), range(h), range(w)))
    k = len(unary)
    energies = {}
    for config in itertools.product(range(k), repeat=len(voxels)):
        e = sum(unary[config[i]][i] for i in range(len(voxels)))
        for i, (x, y, z) in enumerate(voxels):
            for j, (x2, y2, z2) in enumerate(voxels):
                dx, dy, dz = x2 - x, y2 - y, z2 - z
                if i != j and max(abs(dx), abs(dy), abs(dz)) <= 1:
                    e += 0.5 * pair_logw[config[i]][config[j]][dx + 1][dy + 1][dz + 1]
        energies[config] = e
    top = max(energies.values())
    log_z = top + math.log(sum(math.exp(e - top) for e in energies.values()))
    return {c: math.exp(e - log_z) for c, e in energies.items()}, log_z
