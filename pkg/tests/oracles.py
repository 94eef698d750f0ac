"""Independent reference implementations used as test oracles."""
import itertools

import numpy as np


def brute_emd(a, b):
    """Exhaustive minimum over all bijections of the mean matched distance."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    best = np.inf
    for perm in itertools.permutations(range(len(b))):
        cost = np.mean(np.linalg.norm(a - b[list(perm)], axis=1))
        best = min(best, cost)
    return best


def naive_chamfer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    ab = [min(float(np.sum((p - q) ** 2)) for q in b) for p in a]
    ba = [min(float(np.sum((p - q) ** 2)) for p in a) for q in b]
    return sum(ab) / len(ab) + sum(ba) / len(ba)


def naive_hausdorff_uni(p, c):
    p, c = np.asarray(p, float), np.asarray(c, float)
    return max(min(float(np.linalg.norm(x - y)) for y in c) for x in p)


def central_diff(f, x, step=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def naive_mmd(test, generated):
    return sum(min(naive_chamfer(s, g) for g in generated) for s in test) / len(test)


def naive_tmd(comps):
    k = len(comps)
    return sum(sum(naive_chamfer(comps[j], comps[l]) for l in range(k) if l != j) / (k - 1) for j in range(k))


def naive_uhd(partial, comps):
    return sum(naive_hausdorff_uni(partial, c) for c in comps) / len(comps)
