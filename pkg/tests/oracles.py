"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np


def brute_neighbors(queries, targets, radius, exclude_self=False):
    """All (i, j) with |t_j - q_i| <= radius, by checking every pair."""
    q = np.asarray(queries, float)
    t = np.asarray(targets, float)
    out = [set() for _ in range(len(q))]
    for i in range(len(q)):
        d2 = ((t - q[i]) ** 2).sum(1)
        for j in np.flatnonzero(d2 <= radius * radius):
            if exclude_self and i == j:
                continue
            out[i].add(int(j))
    return out


def _cos(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return -math.inf
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def greedy_merge_replay(tokens):
    """Replays the merge rule with plain loops: returns the group of every output token."""
    h = [list(map(float, row)) for row in np.asarray(tokens)]
    evens = list(range(0, len(h), 2))
    groups = {a: [a] for a in evens}
    taken = set()
    for b in range(1, len(h), 2):
        best, best_s = None, None
        for a in evens:  # ascending, strict > keeps the lowest index on ties
            if a in taken:
                continue
            s = _cos(h[b], h[a])
            if best is None or s > best_s:
                best, best_s = a, s
        taken.add(best)
        groups[best].append(b)
    return [sorted(groups[a]) for a in evens]


def cubic_spline_w(r, h):
    """Cubic spline kernel with support 2h, normalized in 3D by 1/(pi h^3)."""
    q = r / h
    s = 1.0 / (math.pi * h ** 3)
    if q < 1:
        return s * (1 - 1.5 * q * q + 0.75 * q ** 3)
    if q < 2:
        return s * 0.25 * (2 - q) ** 3
    return 0.0


def naive_sph_divergence(x, v, m, h):
    """div_i = -(1/rho_i) sum_j m_j (v_i - v_j) . grad W(x_i - x_j), double loop, kernel gradient by FD."""
    x, v, m = (np.asarray(a, float) for a in (x, v, m))
    n = len(x)
    rho = np.array([sum(m[j] * cubic_spline_w(np.linalg.norm(x[i] - x[j]), h) for j in range(n)) for i in range(n)])
    div = np.zeros(n)
    eps = 1e-7
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if i == j:
                continue
            d = x[i] - x[j]
            if np.linalg.norm(d) >= 2 * h:
                continue
            grad = np.array([(cubic_spline_w(np.linalg.norm(d + eps * e), h)
                              - cubic_spline_w(np.linalg.norm(d - eps * e), h)) / (2 * eps) for e in np.eye(3)])
            acc += m[j] * np.dot(v[i] - v[j], grad)
        div[i] = -acc / rho[i]
    return div


def naive_attention(q, k, v):
    """Single-head softmax(q k^T / sqrt(d)) v with explicit loops."""
    q, k, v = (np.asarray(a, float) for a in (q, k, v))
    out = np.zeros((len(q), v.shape[1]))
    for i in range(len(q)):
        logits = np.array([np.dot(q[i], k[j]) for j in range(len(k))]) / math.sqrt(q.shape[1])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = (w[:, None] * v).sum(0)
    return out


def trilinear_reference(lattice, r, radius):
    """Direct trilinear formula on a (G,G,G,Ci,Co) numpy lattice for one displacement."""
    lattice = np.asarray(lattice, float)
    g = lattice.shape[0]
    r = np.asarray(r, float)
    if np.dot(r, r) > radius * radius:
        return np.zeros(lattice.shape[3:])
    xi = (r / radius + 1) * (g - 1) / 2
    n = np.clip(np.floor(xi), 0, g - 2).astype(int)
    t = np.clip(xi - n, 0, 1)
    out = np.zeros(lattice.shape[3:])
    for c in np.ndindex(2, 2, 2):
        w = np.prod([t[a] if c[a] else 1 - t[a] for a in range(3)])
        out += w * lattice[n[0] + c[0], n[1] + c[1], n[2] + c[2]]
    return out
