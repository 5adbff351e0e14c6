"""Independent oracles the test suite checks implementations against.

Everything here is deliberately naive: central finite differences,
exhaustive permutation search, and basic-feasible-solution enumeration.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


def fd_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray],
                step: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of f with respect to each array, in place.

    ``f`` must re-run the forward pass reading the current contents of
    ``arrays``; entries are perturbed one at a time and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic: Sequence[np.ndarray],
                numeric: Sequence[np.ndarray]) -> float:
    """Worst entrywise relative error between two gradient stacks.

    The denominator is floored at a fraction of the overall gradient scale
    so finite-difference roundoff on near-zero entries does not dominate.
    """
    a = np.concatenate([np.asarray(x).reshape(-1) for x in analytic])
    n = np.concatenate([np.asarray(x).reshape(-1) for x in numeric])
    floor = 1e-3 * max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def brute_force_assignment(profit: np.ndarray) -> float:
    """Maximum trace over all permutations of a square profit matrix."""
    k = profit.shape[0]
    perms = np.array(list(itertools.permutations(range(k))))
    return float(profit[np.arange(k), perms].sum(axis=1).max())


def lp_transport_optimum(cost: np.ndarray) -> float:
    """Exact LP minimum of <Q, cost> over the uniform transportation polytope.

    Rows of Q sum to 1/m, columns to 1/n. Enumerates every basic feasible
    solution (each zeroes mn - (m+n-1) cells); the optimum sits on one.
    """
    m, n = cost.shape
    rows = []
    rhs = []
    for i in range(m):
        r = np.zeros(m * n)
        r[i * n:(i + 1) * n] = 1.0
        rows.append(r)
        rhs.append(1.0 / m)
    for j in range(n):
        c = np.zeros(m * n)
        c[j::n] = 1.0
        rows.append(c)
        rhs.append(1.0 / n)
    A = np.array(rows)
    b = np.array(rhs)
    n_dead = m * n - (m + n - 1)
    best = np.inf
    for dead in itertools.combinations(range(m * n), n_dead):
        keep = [k for k in range(m * n) if k not in dead]
        sol, *_ = np.linalg.lstsq(A[:, keep], b, rcond=None)
        q = np.zeros(m * n)
        q[keep] = sol
        if np.max(np.abs(A @ q - b)) > 1e-9 or q.min() < -1e-12:
            continue
        best = min(best, float(np.clip(q, 0.0, None) @ cost.reshape(-1)))
    return best
