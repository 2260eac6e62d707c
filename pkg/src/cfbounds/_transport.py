"""Exact min-cost transportation solver for small dense blocks.

Solves  min <cost, plan>  s.t.  plan >= 0, plan @ 1 = supply, 1 @ plan = demand,
with plan[i, j] = 0 wherever ``allowed[i, j]`` is False.  Forbidden cells are
simply absent arcs — no Big-M, which would contaminate reduced costs at float
precision.

Method: successive shortest paths (Dijkstra with node potentials, costs
shifted nonnegative by subtracting the minimum allowed cost), then
cycle-canceling until the support is a forest, so the returned plan is always
a *vertex* of the transportation polytope.  Deterministic: ties resolve to the
smallest node index.

Everything here is numba-compiled; blocks are tiny (at most ~7x7), so the
per-call cost is a few microseconds.

Status codes: 0 = optimal vertex, 1 = infeasible (some supply cannot be
routed through the allowed cells), 2 = internal stall guard tripped (never
observed; defensive).
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["solve_transport", "feasible_flow"]

_INF = 1e300


@njit(cache=True)
def _vertexify(flow, cost):
    """Cancel support cycles (in the nonpositive-cost direction) until the
    support graph is a forest.  Operates in place."""
    m, n = flow.shape
    nodes = m + n
    deg = np.zeros(nodes, dtype=np.int64)
    alive = np.zeros(nodes, dtype=np.uint8)
    cyc_nodes = np.empty(nodes + 1, dtype=np.int64)
    seen_at = np.full(nodes, -1, dtype=np.int64)

    while True:
        # degree of each node in the support graph
        for v in range(nodes):
            deg[v] = 0
        for i in range(m):
            for j in range(n):
                if flow[i, j] > 0.0:
                    deg[i] += 1
                    deg[m + j] += 1
        # strip leaves to expose the 2-core
        for v in range(nodes):
            alive[v] = 1
        changed = True
        while changed:
            changed = False
            for i in range(m):
                if alive[i] == 1 and deg[i] <= 1:
                    alive[i] = 0
                    changed = True
                    for j in range(n):
                        if flow[i, j] > 0.0 and alive[m + j] == 1:
                            deg[m + j] -= 1
                            deg[i] -= 1
            for j in range(n):
                if alive[m + j] == 1 and deg[m + j] <= 1:
                    alive[m + j] = 0
                    changed = True
                    for i in range(m):
                        if flow[i, j] > 0.0 and alive[i] == 1:
                            deg[i] -= 1
                            deg[m + j] -= 1
        start = -1
        for v in range(nodes):
            if alive[v] == 1:
                start = v
                break
        if start == -1:
            return  # forest: vertex reached
        # walk within the 2-core until a node repeats -> cycle
        for v in range(nodes):
            seen_at[v] = -1
        cur = start
        prev = -1
        length = 0
        while seen_at[cur] == -1:
            seen_at[cur] = length
            cyc_nodes[length] = cur
            length += 1
            nxt = -1
            if cur < m:
                for j in range(n):
                    if flow[cur, j] > 0.0 and alive[m + j] == 1 and m + j != prev:
                        nxt = m + j
                        break
            else:
                jj = cur - m
                for i in range(m):
                    if flow[i, jj] > 0.0 and alive[i] == 1 and i != prev:
                        nxt = i
                        break
            prev = cur
            cur = nxt
        # cycle runs from seen_at[cur] .. length-1, back to cur
        s = seen_at[cur]
        k = length - s  # number of cycle edges == number of cycle nodes
        # orientation: edge between consecutive nodes; sign +1 when traversed
        # row -> col, -1 when col -> row
        delta = 0.0
        for e in range(k):
            a = cyc_nodes[s + e]
            b = cyc_nodes[s + (e + 1) % k]
            if a < m:
                delta += cost[a, b - m]
            else:
                delta -= cost[b, a - m]
        sgn = 1.0
        if delta > 0.0:
            sgn = -1.0
        # bottleneck over arcs whose flow decreases
        theta = _INF
        for e in range(k):
            a = cyc_nodes[s + e]
            b = cyc_nodes[s + (e + 1) % k]
            if a < m:
                f = flow[a, b - m]
                dec = sgn < 0.0
            else:
                f = flow[b, a - m]
                dec = sgn > 0.0
            if dec and f < theta:
                theta = f
        for e in range(k):
            a = cyc_nodes[s + e]
            b = cyc_nodes[s + (e + 1) % k]
            if a < m:
                flow[a, b - m] += sgn * theta
            else:
                flow[b, a - m] -= sgn * theta
        # clamp the dust: the bottleneck arc lands on exact zero because theta
        # copies its value; others may leave -0.0
        for i in range(m):
            for j in range(n):
                if flow[i, j] < 0.0:
                    flow[i, j] = 0.0


@njit(cache=True)
def solve_transport(cost, supply, demand, allowed):
    """Min-cost transportation vertex. Returns (plan, status); see module doc."""
    m, n = cost.shape
    nodes = m + n
    plan = np.zeros((m, n))

    # shift allowed costs nonnegative
    cmin = _INF
    any_allowed = False
    for i in range(m):
        for j in range(n):
            if allowed[i, j]:
                any_allowed = True
                if cost[i, j] < cmin:
                    cmin = cost[i, j]
    if not any_allowed:
        total = 0.0
        for i in range(m):
            total += supply[i]
        if total > 1e-14:
            return plan, 1
        return plan, 0
    sc = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            sc[i, j] = cost[i, j] - cmin

    rs = supply.copy()
    cs = demand.copy()
    pot = np.zeros(nodes)
    dist = np.empty(nodes)
    done = np.zeros(nodes, dtype=np.uint8)
    parent = np.empty(nodes, dtype=np.int64)

    max_aug = 10 * (m + n) * (m + n) + 100
    for _ in range(max_aug):
        rem = 0.0
        for i in range(m):
            rem += rs[i]
        if rem <= 1e-14:
            _vertexify(plan, cost)
            return plan, 0

        # Dijkstra from all rows with residual supply
        for v in range(nodes):
            dist[v] = _INF
            done[v] = 0
            parent[v] = -1
        for i in range(m):
            if rs[i] > 0.0:
                dist[i] = 0.0
        while True:
            u = -1
            best = _INF
            for v in range(nodes):
                if done[v] == 0 and dist[v] < best:
                    best = dist[v]
                    u = v
            if u == -1:
                break
            done[u] = 1
            if u < m:
                for j in range(n):
                    if allowed[u, j]:
                        rc = sc[u, j] + pot[u] - pot[m + j]
                        if rc < 0.0:
                            rc = 0.0  # float dust on tight arcs
                        nd = dist[u] + rc
                        if nd < dist[m + j]:
                            dist[m + j] = nd
                            parent[m + j] = u
            else:
                jj = u - m
                for i in range(m):
                    if plan[i, jj] > 0.0:
                        rc = -sc[i, jj] + pot[u] - pot[i]
                        if rc < 0.0:
                            rc = 0.0
                        nd = dist[u] + rc
                        if nd < dist[i]:
                            dist[i] = nd
                            parent[i] = m + jj

        # cheapest reachable demand column with residual demand
        target = -1
        best = _INF
        for j in range(n):
            if cs[j] > 0.0 and dist[m + j] < best:
                best = dist[m + j]
                target = j
        if target == -1:
            return plan, 1  # residual supply cannot reach residual demand

        dt = dist[m + target]
        for v in range(nodes):
            if dist[v] < dt:
                pot[v] += dist[v]
            else:
                pot[v] += dt

        # bottleneck along the augmenting path
        amt = cs[target]
        cur = m + target
        while True:
            pv = parent[cur]
            if cur >= m:
                cur = pv  # forward arc pv -> cur, uncapacitated
                if parent[cur] == -1:
                    if rs[cur] < amt:
                        amt = rs[cur]
                    break
            else:
                f = plan[cur, pv - m]
                if f < amt:
                    amt = f
                cur = pv
        # apply
        cur = m + target
        while True:
            pv = parent[cur]
            if cur >= m:
                plan[pv, cur - m] += amt
                cur = pv
                if parent[cur] == -1:
                    break
            else:
                plan[cur, pv - m] -= amt
                cur = pv
        rs[cur] -= amt
        cs[target] -= amt
        if rs[cur] < 0.0:
            rs[cur] = 0.0
        if cs[target] < 0.0:
            cs[target] = 0.0

    return plan, 2  # stall guard


@njit(cache=True)
def feasible_flow(supply, demand, allowed):
    """Any feasible vertex (zero-cost run). Returns (plan, status)."""
    zeros = np.zeros((supply.shape[0], demand.shape[0]))
    return solve_transport(zeros, supply, demand, allowed)
