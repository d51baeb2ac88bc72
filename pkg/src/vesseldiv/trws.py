"""Sequential tree-reweighted message passing (TRW-S) for binary pairwise problems.

Nodes are processed in index order. Every edge is stored once as ``(i, j)``
with ``i < j`` and a cost table ``table[e, x_i, x_j]``. The lower bound is
the exact bound of the decomposition into monotonic chains that the
sequential schedule implies: at each node the k-th incoming edge is chained
to the k-th outgoing edge, and each node's reparametrised unary term is
shared evenly among the chains passing through it.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["trws", "build_chains", "labeling_energy"]


def _adjacency(n, edges):
    """CSR incidence: for node s, ``(edge, other, s_is_first)`` sorted by other."""
    m = len(edges)
    ends = np.concatenate([edges[:, 0], edges[:, 1]])
    others = np.concatenate([edges[:, 1], edges[:, 0]])
    eidx = np.concatenate([np.arange(m), np.arange(m)])
    first = np.concatenate([np.ones(m, dtype=np.bool_), np.zeros(m, dtype=np.bool_)])
    order = np.lexsort((others, ends))
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, ends + 1, 1)
    ptr = np.cumsum(ptr)
    return ptr, eidx[order].astype(np.int64), others[order].astype(np.int64), first[order]


def build_chains(n: int, edges: np.ndarray):
    """Monotonic chains covering every edge once.

    Returns ``(chain_ptr, chain_edges, chain_start, isolated, n_chains_at)``
    where chain ``c`` is ``chain_edges[chain_ptr[c]:chain_ptr[c+1]]`` walked
    from node ``chain_start[c]`` upwards.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    incoming = [[] for _ in range(n)]
    outgoing = [[] for _ in range(n)]
    for e, (i, j) in enumerate(edges):
        outgoing[i].append((j, e))
        incoming[j].append((i, e))
    for s in range(n):
        incoming[s].sort()
        outgoing[s].sort()
    # successor of an edge entering s at slot k is s's k-th outgoing edge
    nxt = np.full(len(edges), -1, dtype=np.int64)
    is_start = np.ones(len(edges), dtype=bool)
    for s in range(n):
        for k, (_, e_in) in enumerate(incoming[s]):
            if k < len(outgoing[s]):
                e_out = outgoing[s][k][1]
                nxt[e_in] = e_out
                is_start[e_out] = False
    ptr, flat, start = [0], [], []
    for e0 in range(len(edges)):
        if not is_start[e0]:
            continue
        start.append(int(edges[e0, 0]))
        e = e0
        while e >= 0:
            flat.append(e)
            e = nxt[e]
        ptr.append(len(flat))
    n_in = np.array([len(x) for x in incoming], dtype=np.int64)
    n_out = np.array([len(x) for x in outgoing], dtype=np.int64)
    n_at = np.maximum(n_in, n_out)
    isolated = np.flatnonzero(n_at == 0).astype(np.int64)
    return (np.array(ptr, dtype=np.int64), np.array(flat, dtype=np.int64),
            np.array(start, dtype=np.int64), isolated, n_at)


@njit(cache=True)
def labeling_energy(labels, unary, edges, tables):
    e = 0.0
    for s in range(len(unary)):
        e += unary[s, labels[s]]
    for k in range(len(edges)):
        e += tables[k, labels[edges[k, 0]], labels[edges[k, 1]]]
    return e


@njit(cache=True)
def _incoming_sum(s, unary, ptr, inc_e, inc_first, msg, out):
    out[0] = unary[s, 0]
    out[1] = unary[s, 1]
    for a in range(ptr[s], ptr[s + 1]):
        e = inc_e[a]
        # msg[e, 0] flows first->second, msg[e, 1] second->first
        d = 1 if inc_first[a] else 0
        out[0] += msg[e, d, 0]
        out[1] += msg[e, d, 1]


@njit(cache=True)
def _send(s, forward, unary, tables, ptr, inc_e, inc_o, inc_first, gamma, msg, th):
    _incoming_sum(s, unary, ptr, inc_e, inc_first, msg, th)
    for a in range(ptr[s], ptr[s + 1]):
        t = inc_o[a]
        if (t > s) != forward:
            continue
        e = inc_e[a]
        first = inc_first[a]
        back = 1 if first else 0
        out = 0 if first else 1
        best0 = np.inf
        best1 = np.inf
        for xs in range(2):
            base = gamma[s] * th[xs] - msg[e, back, xs]
            for xt in range(2):
                c = tables[e, xs, xt] if first else tables[e, xt, xs]
                v = base + c
                if xt == 0:
                    if v < best0:
                        best0 = v
                elif v < best1:
                    best1 = v
        lo = min(best0, best1)
        msg[e, out, 0] = best0 - lo
        msg[e, out, 1] = best1 - lo


@njit(cache=True)
def _extract(unary, edges, tables, ptr, inc_e, inc_o, inc_first, msg, labels):
    n = len(unary)
    for s in range(n):
        c0 = unary[s, 0]
        c1 = unary[s, 1]
        for a in range(ptr[s], ptr[s + 1]):
            t = inc_o[a]
            e = inc_e[a]
            if t < s:
                # t already labelled; s is the second end of edge e
                c0 += tables[e, labels[t], 0]
                c1 += tables[e, labels[t], 1]
            else:
                c0 += msg[e, 1, 0]
                c1 += msg[e, 1, 1]
        labels[s] = 1 if c1 < c0 else 0


@njit(cache=True)
def _chain_bound(unary, edges, tables, ptr, inc_e, inc_first, msg, n_at,
                 chain_ptr, chain_edges, chain_start, isolated):
    n = len(unary)
    th = np.empty((n, 2))
    tmp = np.empty(2)
    for s in range(n):
        _incoming_sum(s, unary, ptr, inc_e, inc_first, msg, tmp)
        th[s, 0] = tmp[0]
        th[s, 1] = tmp[1]
    bound = 0.0
    for k in range(len(isolated)):
        s = isolated[k]
        bound += min(th[s, 0], th[s, 1])
    for c in range(len(chain_ptr) - 1):
        s = chain_start[c]
        v0 = th[s, 0] / n_at[s]
        v1 = th[s, 1] / n_at[s]
        for a in range(chain_ptr[c], chain_ptr[c + 1]):
            e = chain_edges[a]
            t = edges[e, 1]
            w0 = th[t, 0] / n_at[t]
            w1 = th[t, 1] / n_at[t]
            # reparametrised pairwise term
            p00 = tables[e, 0, 0] - msg[e, 0, 0] - msg[e, 1, 0]
            p01 = tables[e, 0, 1] - msg[e, 0, 1] - msg[e, 1, 0]
            p10 = tables[e, 1, 0] - msg[e, 0, 0] - msg[e, 1, 1]
            p11 = tables[e, 1, 1] - msg[e, 0, 1] - msg[e, 1, 1]
            n0 = min(v0 + p00, v1 + p10) + w0
            n1 = min(v0 + p01, v1 + p11) + w1
            v0 = n0
            v1 = n1
        bound += min(v0, v1)
    return bound


@njit(cache=True)
def _run(unary, edges, tables, ptr, inc_e, inc_o, inc_first, gamma, n_at,
         chain_ptr, chain_edges, chain_start, isolated, labels, max_iters, gap_tol, patience):
    n = len(unary)
    m = len(edges)
    msg = np.zeros((m, 2, 2))
    th = np.empty(2)
    best = labels.copy()
    best_e = labeling_energy(best, unary, edges, tables)
    cur = np.empty(n, dtype=np.int64)
    bounds = np.empty(max_iters)
    energies = np.empty(max_iters)
    it = 0
    stall = 0
    optimal = False
    last_bound = -np.inf
    while it < max_iters:
        for s in range(n):
            _send(s, True, unary, tables, ptr, inc_e, inc_o, inc_first, gamma, msg, th)
        for s in range(n - 1, -1, -1):
            _send(s, False, unary, tables, ptr, inc_e, inc_o, inc_first, gamma, msg, th)
        _extract(unary, edges, tables, ptr, inc_e, inc_o, inc_first, msg, cur)
        e = labeling_energy(cur, unary, edges, tables)
        if e < best_e:
            best_e = e
            best[:] = cur
        lb = _chain_bound(unary, edges, tables, ptr, inc_e, inc_first, msg, n_at,
                          chain_ptr, chain_edges, chain_start, isolated)
        bounds[it] = lb
        energies[it] = best_e
        it += 1
        scale = max(1.0, abs(best_e))
        if best_e - lb <= gap_tol * scale:
            optimal = True
            break
        if lb - last_bound <= gap_tol * scale:
            stall += 1
            if stall >= patience:
                break
        else:
            stall = 0
        last_bound = lb
    return best, best_e, bounds[:it], energies[:it], optimal


def trws(unary, edges, tables, init=None, max_iters: int = 1500,
         gap_tol: float = 1e-10, patience: int = 50):
    """Minimise ``sum unary[s, x_s] + sum tables[e, x_i, x_j]`` over binary labels.

    Parameters
    ----------
    unary : (n, 2) array
    edges : (m, 2) int array with ``i < j`` per row
    tables : (m, 2, 2) array indexed ``[e, x_i, x_j]``
    init : optional incumbent labelling; it is replaced only by a strictly
        better one.

    Returns
    -------
    labels, energy, bound_trace, energy_trace, optimal
        ``optimal`` is set when the bound certifies the labelling.
    """
    unary = np.ascontiguousarray(unary, dtype=float).reshape(-1, 2)
    n = len(unary)
    edges = np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2)
    tables = np.ascontiguousarray(tables, dtype=float).reshape(-1, 2, 2)
    if len(edges) and np.any(edges[:, 0] >= edges[:, 1]):
        raise ValueError("edges must satisfy i < j")
    if not np.all(np.isfinite(tables)) or not np.all(np.isfinite(unary)):
        raise ValueError("costs must be finite")
    labels = np.zeros(n, dtype=np.int64) if init is None else np.asarray(init, dtype=np.int64).copy()
    if n == 0:
        return labels, 0.0, np.zeros(0), np.zeros(0), True
    ptr, inc_e, inc_o, inc_first = _adjacency(n, edges)
    chain_ptr, chain_edges, chain_start, isolated, n_at = build_chains(n, edges)
    gamma = 1.0 / np.maximum(n_at, 1).astype(float)
    return _run(unary, edges, tables, ptr, inc_e, inc_o, inc_first, gamma, n_at.astype(float),
                chain_ptr, chain_edges, chain_start, isolated, labels, int(max_iters),
                float(gap_tol), int(patience))
