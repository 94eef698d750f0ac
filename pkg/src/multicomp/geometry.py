"""Point-set distances: exact EMD, Chamfer and unidirectional Hausdorff.

All routines work on ``(M, 3)`` float64 arrays and return plain floats or
arrays. Ties are always broken by the lowest index and a coincident pair
contributes a zero (sub)gradient.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import CapacityExceeded, InvalidInput

EMD_CAP = 512
BRUTE_FORCE_LIMIT = 64


def as_cloud(points, name="cloud"):
    """Validate and return a read-only ``(M, 3)`` float64 copy of ``points``."""
    arr = np.array(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInput(f"{name}: expected (M, 3) points, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidInput(f"{name}: empty point cloud")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name}: non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Matching:
    assignment: np.ndarray  # assignment[i] = index in b matched to a[i]
    cost: float

    def inverse(self):
        inv = np.empty_like(self.assignment)
        inv[self.assignment] = np.arange(len(self.assignment))
        return Matching(inv, self.cost)


def pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _matched_cost(a, b, assignment):
    d = a - b[assignment]
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", d, d))))


def emd(a, b, cap=EMD_CAP):
    """Exact EMD as the mean matched Euclidean distance under the optimal bijection.

    Returns ``(cost, Matching)``.
    """
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    if len(a) != len(b):
        raise InvalidInput(f"EMD needs equal cardinality, got {len(a)} and {len(b)}")
    if len(a) > cap:
        raise CapacityExceeded(f"{len(a)} points exceeds exact EMD cap {cap}; down-sample first")
    rows, cols = linear_sum_assignment(pairwise_distances(a, b))
    assignment = np.empty(len(a), dtype=np.int64)
    assignment[rows] = cols
    assignment.setflags(write=False)
    cost = _matched_cost(a, b, assignment)
    return cost, Matching(assignment, cost)


def emd_grad(a, b, matching, wrt="a"):
    """Gradient of the EMD cost with respect to the points of ``a`` (or ``b``)."""
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    assignment = np.asarray(matching.assignment)
    m = len(a)
    if len(b) != m or assignment.shape != (m,):
        raise InvalidInput("matching does not fit the given clouds")
    if not np.array_equal(np.sort(assignment), np.arange(m)):
        raise InvalidInput("matching is not a bijection")
    if abs(_matched_cost(a, b, assignment) - matching.cost) > 1e-9:
        raise InvalidInput("stale matching: cost disagrees with the clouds")
    diff = a - b[assignment]
    norm = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    grad_a = np.zeros_like(diff)
    nz = norm > 0
    grad_a[nz] = diff[nz] / norm[nz, None] / m
    if wrt == "a":
        return grad_a
    if wrt == "b":
        grad_b = np.zeros_like(grad_a)
        grad_b[assignment] = -grad_a
        return grad_b
    raise InvalidInput(f"wrt must be 'a' or 'b', got {wrt!r}")


def nearest(src, dst):
    """For each point of ``src`` the index of its nearest point in ``dst`` and the squared distance.

    Brute force for small inputs, a k-d tree above ``BRUTE_FORCE_LIMIT``
    points. Squared distances are recomputed from coordinates so both paths
    agree to rounding.
    """
    if len(src) * len(dst) <= BRUTE_FORCE_LIMIT * BRUTE_FORCE_LIMIT or len(dst) <= BRUTE_FORCE_LIMIT:
        return nearest_brute(src, dst)
    _, idx = cKDTree(dst).query(src, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    d = src - dst[idx]
    return idx, np.einsum("ij,ij->i", d, d)


def nearest_brute(src, dst):
    diff = src[:, None, :] - dst[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    idx = np.argmin(sq, axis=1)  # argmin returns the lowest index on ties
    return idx, sq[np.arange(len(src)), idx]


def chamfer(a, b):
    """Mean squared nearest-neighbour distance in each direction, summed."""
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    _, d_ab = nearest(a, b)
    _, d_ba = nearest(b, a)
    return float(np.mean(d_ab) + np.mean(d_ba))


def chamfer_brute(a, b):
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    _, d_ab = nearest_brute(a, b)
    _, d_ba = nearest_brute(b, a)
    return float(np.mean(d_ab) + np.mean(d_ba))


def _hausdorff_pair(p, c):
    idx, sq = nearest(p, c)
    i = int(np.argmax(sq))
    return i, int(idx[i]), float(np.sqrt(sq[i]))


def hausdorff_uni(p, c):
    """max over ``p`` of the distance to the nearest point of ``c``."""
    p = as_cloud(p, "p")
    c = as_cloud(c, "c")
    return _hausdorff_pair(p, c)[2]


def hausdorff_uni_grad(p, c):
    """Gradient of :func:`hausdorff_uni` with respect to ``c``.

    Only the nearest point of ``c`` to the farthest point of ``p`` receives
    a gradient: the unit vector from ``p_i`` to ``c_j``.
    """
    p = as_cloud(p, "p")
    c = as_cloud(c, "c")
    i, j, dist = _hausdorff_pair(p, c)
    grad = np.zeros_like(c)
    if dist > 0:
        grad[j] = (c[j] - p[i]) / dist
    return grad
