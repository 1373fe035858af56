"""Hot numeric kernels.

Every kernel is written once as plain Python over numpy arrays. When numba is
importable and ``FLOWSERVE_DISABLE_NUMBA`` is unset (or "0"), the same source is
compiled with ``@njit``; otherwise it runs in the interpreter. Results are
identical on both paths.
"""

import os
import warnings

import numpy as np


def _identity_decorator(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func
    return wrap


_disabled = os.environ.get("FLOWSERVE_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

if _disabled:
    USE_NUMBA = False
    njit = _identity_decorator
else:
    try:
        from numba import njit
        USE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        warnings.warn("numba unavailable; kernels run uncompiled")
        USE_NUMBA = False
        njit = _identity_decorator


@njit(cache=True)
def preflow_push(cap, source, sink):
    """FIFO preflow-push (Goldberg-Tarjan) with the gap heuristic.

    ``cap`` is a dense (n, n) int64 capacity matrix. Returns ``(value, flow)``
    where ``flow[u, v]`` is the net flow on arc (u, v) (antisymmetric).
    Node scan order is ascending index, so the result is deterministic.
    """
    n = cap.shape[0]
    flow = np.zeros((n, n), dtype=np.int64)
    if source == sink:
        return 0, flow
    height = np.zeros(n, dtype=np.int64)
    excess = np.zeros(n, dtype=np.int64)
    count = np.zeros(2 * n + 1, dtype=np.int64)
    current = np.zeros(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    in_queue = np.zeros(n, dtype=np.bool_)
    head = 0
    size = 0

    height[source] = n
    count[0] = n - 1
    count[n] = 1
    for v in range(n):
        c = cap[source, v]
        if c > 0 and v != source:
            flow[source, v] += c
            flow[v, source] -= c
            excess[v] += c
            excess[source] -= c
            if v != sink and not in_queue[v]:
                queue[(head + size) % n] = v
                size += 1
                in_queue[v] = True

    while size > 0:
        u = queue[head]
        head = (head + 1) % n
        size -= 1
        in_queue[u] = False
        # discharge u
        while excess[u] > 0:
            v = current[u]
            if v == n:
                # relabel
                old = height[u]
                best = 2 * n
                for w in range(n):
                    if cap[u, w] - flow[u, w] > 0 and height[w] + 1 < best:
                        best = height[w] + 1
                count[old] -= 1
                height[u] = best
                count[best] += 1
                current[u] = 0
                if count[old] == 0 and old < n:
                    # gap: nodes above the gap can no longer reach the sink
                    for w in range(n):
                        if w != source and old < height[w] < n:
                            count[height[w]] -= 1
                            height[w] = n + 1
                            count[n + 1] += 1
                continue
            residual = cap[u, v] - flow[u, v]
            if residual > 0 and height[u] == height[v] + 1:
                delta = excess[u] if excess[u] < residual else residual
                flow[u, v] += delta
                flow[v, u] -= delta
                excess[u] -= delta
                excess[v] += delta
                if v != source and v != sink and not in_queue[v]:
                    queue[(head + size) % n] = v
                    size += 1
                    in_queue[v] = True
            else:
                current[u] = v + 1
    return excess[sink], flow


@njit(cache=True)
def nearest_centroid(points, centroids):
    """Index of the closest centroid per row; ties go to the lowest index."""
    n = points.shape[0]
    k = centroids.shape[0]
    dim = points.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            d = 0.0
            for a in range(dim):
                diff = points[i, a] - centroids[c, a]
                d += diff * diff
            if d < best_d:
                best_d = d
                best = c
        out[i] = best
    return out


@njit(cache=True)
def lloyd_step(points, centroids):
    """One Lloyd iteration: returns (labels, new_centroids, sse_before_update)."""
    labels = nearest_centroid(points, centroids)
    k = centroids.shape[0]
    dim = points.shape[1]
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    sse = 0.0
    for i in range(points.shape[0]):
        c = labels[i]
        counts[c] += 1
        for a in range(dim):
            sums[c, a] += points[i, a]
            diff = points[i, a] - centroids[c, a]
            sse += diff * diff
    new = centroids.copy()
    for c in range(k):
        if counts[c] > 0:
            for a in range(dim):
                new[c, a] = sums[c, a] / counts[c]
    return labels, new, sse


@njit(cache=True)
def _simplex_max(A, b, c, ub, tol):
    """max c.x  s.t.  A x <= b, 0 <= x <= ub, for b >= 0 (origin feasible).

    Dense tableau with explicit upper-bound rows and Bland's rule.
    Returns (value, x).
    """
    m, nv = A.shape
    rows = m + nv
    cols = nv + rows
    T = np.zeros((rows + 1, cols + 1))
    for i in range(m):
        for j in range(nv):
            T[i, j] = A[i, j]
        T[i, nv + i] = 1.0
        T[i, cols] = b[i]
    for j in range(nv):
        T[m + j, j] = 1.0
        T[m + j, nv + m + j] = 1.0
        T[m + j, cols] = ub[j]
    for j in range(nv):
        T[rows, j] = -c[j]
    basis = np.empty(rows, dtype=np.int64)
    for i in range(rows):
        basis[i] = nv + i
    for _ in range(50 * (rows + cols)):
        enter = -1
        for j in range(cols):
            if T[rows, j] < -tol:
                enter = j
                break
        if enter < 0:
            break
        leave = -1
        best = np.inf
        for i in range(rows):
            a = T[i, enter]
            if a > tol:
                ratio = T[i, cols] / a
                if ratio < best - tol or (abs(ratio - best) <= tol and leave >= 0 and basis[i] < basis[leave]):
                    best = ratio
                    leave = i
        if leave < 0:
            break  # unbounded cannot happen with finite ub
        piv = T[leave, enter]
        for j in range(cols + 1):
            T[leave, j] /= piv
        for i in range(rows + 1):
            if i != leave:
                f = T[i, enter]
                if f != 0.0:
                    for j in range(cols + 1):
                        T[i, j] -= f * T[leave, j]
        basis[leave] = enter
    x = np.zeros(nv)
    for i in range(rows):
        if basis[i] < nv:
            x[basis[i]] = T[i, cols]
    return T[rows, cols], x


@njit(cache=True)
def _exact_ok(A_int, b_int, cand):
    for i in range(A_int.shape[0]):
        total = 0
        for j in range(A_int.shape[1]):
            total += A_int[i, j] * np.int64(cand[j])
        if total > b_int[i]:
            return False
    return True


@njit(cache=True)
def integer_assignment(A, b, A_int, b_int, ub, incumbent, node_limit):
    """Exact branch-and-bound for  max sum(x)  s.t.  A x <= b, 0 <= x <= ub, x integer.

    ``A``/``b`` are the (scaled, float) constraints used for LP bounds and
    ``A_int``/``b_int`` the same rows in integer form used to accept
    candidates exactly. Both must be non-negative. ``incumbent`` is a feasible
    integral starting point. Returns (best_x, proven_optimal).
    """
    m, nv = A.shape
    tol = 1e-9
    c = np.ones(nv)
    best = incumbent.astype(np.float64).copy()
    best_val = best.sum()
    stack_lb = np.zeros((node_limit + nv + 2, nv))
    stack_ub = np.zeros((node_limit + nv + 2, nv))
    stack_ub[0] = ub
    top = 1
    nodes = 0
    while top > 0:
        if nodes >= node_limit:
            return best, False
        nodes += 1
        top -= 1
        lb = stack_lb[top].copy()
        hi = stack_ub[top].copy()
        shifted = b - A @ lb
        feasible = True
        for i in range(m):
            if shifted[i] < -1e-7:
                feasible = False
                break
            if shifted[i] < 0.0:
                shifted[i] = 0.0
        if not feasible:
            continue
        val, y = _simplex_max(A, shifted, c, hi - lb, tol)
        total = val + lb.sum()
        if np.floor(total + 1e-6) <= best_val:
            continue
        x = y + lb
        frac_idx = -1
        frac_best = 0.0
        for j in range(nv):
            f = x[j] - np.floor(x[j] + 1e-7)
            if f > 1e-6:
                dist = min(f, 1.0 - f)
                if dist > frac_best:
                    frac_best = dist
                    frac_idx = j
        if frac_idx < 0:
            cand = np.floor(x + 1e-7)
            if cand.sum() > best_val and _exact_ok(A_int, b_int, cand):
                best = cand
                best_val = cand.sum()
            continue
        # rounding heuristic at every node: floor the LP point
        cand = np.floor(x + 1e-7)
        if cand.sum() > best_val and _exact_ok(A_int, b_int, cand):
            best = cand
            best_val = cand.sum()
        v = x[frac_idx]
        # down branch pushed first so the up branch is explored first
        stack_lb[top] = lb
        stack_ub[top] = hi
        stack_ub[top, frac_idx] = np.floor(v)
        top += 1
        stack_lb[top] = lb
        stack_ub[top] = hi
        stack_lb[top, frac_idx] = np.floor(v) + 1.0
        top += 1
    return best, True
