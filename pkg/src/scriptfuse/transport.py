"""Exact Earth Mover's Distance between weighted sets of hidden vectors.

The transportation problem is solved with the transportation simplex:
a northwest-corner starting basis, then MODI (u-v potential) pivoting.
Unequal total masses are handled by a zero-cost dummy row or column, which
gives the inequality-constrained program (row and column flows bounded by
the weights, total flow equal to the smaller mass).

The loss side treats the optimal flow as constant when differentiating
(envelope theorem), so an EMD value can sit in the autograd graph as a
custom node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError

FEASIBILITY_TOL = 1e-9


@dataclass
class PointCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        m = self.points.shape[0]
        if m < 1:
            raise ValueError("a point cloud needs at least one point")
        if self.weights is None:
            self.weights = np.full(m, 1.0 / m)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (m,):
                raise DimensionError(f"{m} points but weights of shape {self.weights.shape}")
            if (self.weights <= 0).any():
                raise ValueError("point weights must be positive")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TransportPlan:
    flow: np.ndarray
    total_flow: float
    objective: float
    iterations: int = 0
    # smallest reduced cost over non-basic cells; near zero means the
    # optimal flow is not unique and the envelope gradient is ambiguous
    reduced_cost_gap: float = float("inf")
    basis: list[tuple[int, int]] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.objective / self.total_flow


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def ground_distance(P, Q) -> np.ndarray:
    """Mean squared error between every pair: ``D[x, y] = mean_k (a_xk - b_yk)^2``."""
    a, b = _points(P), _points(Q)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).mean(axis=-1)


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    M, N = len(a), len(b)
    flow = np.zeros((M, N))
    basis = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        f = min(ra[i], rb[j])
        flow[i, j] = f
        basis.append((i, j))
        ra[i] -= f
        rb[j] -= f
        if i == M - 1 and j == N - 1:
            break
        if j == N - 1 or (i < M - 1 and ra[i] <= rb[j]):
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(C: list[list[float]], M: int, N: int, basis: Sequence[tuple[int, int]]):
    row_adj: list[list[int]] = [[] for _ in range(M)]
    col_adj: list[list[int]] = [[] for _ in range(N)]
    for i, j in basis:
        row_adj[i].append(j)
        col_adj[j].append(i)
    u: list[float | None] = [None] * M
    v: list[float | None] = [None] * N
    u[0] = 0.0
    stack = [(0, 0)]
    while stack:
        kind, k = stack.pop()
        if kind == 0:
            uk, Ck = u[k], C[k]
            for j in row_adj[k]:
                if v[j] is None:
                    v[j] = Ck[j] - uk
                    stack.append((1, j))
        else:
            vk = v[k]
            for i in col_adj[k]:
                if u[i] is None:
                    u[i] = C[i][k] - vk
                    stack.append((0, i))
    return np.array(u, dtype=np.float64), np.array(v, dtype=np.float64), row_adj, col_adj


def _tree_path(i0: int, j0: int, row_adj, col_adj):
    """Cells on the basis-tree path from row ``i0`` to column ``j0``, in order from ``i0``."""
    # nodes: rows as (0, i), columns as (1, j)
    prev = {(0, i0): None}
    queue = [(0, i0)]
    target = (1, j0)
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        if node == target:
            break
        kind, k = node
        nbrs = [(1, j) for j in row_adj[k]] if kind == 0 else [(0, i) for i in col_adj[k]]
        for nb in nbrs:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    cells = []
    node = target
    while prev[node] is not None:
        p = prev[node]
        cells.append((p[1], node[1]) if p[0] == 0 else (node[1], p[1]))
        node = p
    cells.reverse()
    return cells


def _simplex(C: np.ndarray, a: np.ndarray, b: np.ndarray, max_iter: int | None = None):
    M, N = C.shape
    flow, basis = _northwest_corner(a, b)
    in_basis = np.zeros((M, N), dtype=bool)
    for cell in basis:
        in_basis[cell] = True
    scale = max(1.0, float(np.abs(C).max()))
    tol = 1e-12 * scale
    if max_iter is None:
        max_iter = 50 * (M * N + M + N) + 100
    # switch from Dantzig to Bland's rule after a run of degenerate pivots
    bland_after = 2 * (M + N) + 10
    degenerate_run = 0
    it = 0
    C_rows = C.tolist()
    while True:
        u, v, row_adj, col_adj = _potentials(C_rows, M, N, basis)
        reduced = C - u[:, None] - v[None, :]
        reduced[in_basis] = np.inf
        if degenerate_run >= bland_after:
            neg = np.flatnonzero(reduced.reshape(-1) < -tol)
            k = int(neg[0]) if neg.size else -1
        else:
            k = int(np.argmin(reduced))
            if reduced.flat[k] >= -tol:
                k = -1
        if k < 0:
            gap = float(reduced.min()) if (~in_basis).any() else float("inf")
            return flow, basis, it, gap
        if it >= max_iter:
            raise NumericError(f"transport simplex did not converge in {max_iter} pivots")
        it += 1
        i0, j0 = divmod(k, N)
        path = _tree_path(i0, j0, row_adj, col_adj)
        # walking back from column j0, signs alternate starting with minus
        minus = path[::-1][0::2]
        plus = path[::-1][1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[i0, j0] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        in_basis[leaving] = False
        basis.append((i0, j0))
        in_basis[i0, j0] = True
        degenerate_run = degenerate_run + 1 if theta == 0 else 0


def solve_transport(D, w_a, w_b) -> TransportPlan:
    """Minimum-cost flow from masses ``w_a`` to ``w_b`` under costs ``D``.

    Total flow equals ``min(sum(w_a), sum(w_b))``; each row (column) ships
    (receives) no more than its weight.
    """
    D = np.asarray(D, dtype=np.float64)
    w_a = np.asarray(w_a, dtype=np.float64).reshape(-1)
    w_b = np.asarray(w_b, dtype=np.float64).reshape(-1)
    if D.ndim != 2 or D.shape != (len(w_a), len(w_b)):
        raise DimensionError(f"cost matrix {D.shape} does not match weights ({len(w_a)}, {len(w_b)})")
    if not np.isfinite(D).all():
        raise NumericError("cost matrix has non-finite entries")
    if (w_a <= 0).any() or (w_b <= 0).any() or not (np.isfinite(w_a).all() and np.isfinite(w_b).all()):
        raise ValueError("transport weights must be finite and positive")
    m, n = D.shape
    sa, sb = float(w_a.sum()), float(w_b.sum())
    C, a, b = D, w_a, w_b
    if abs(sa - sb) > 1e-12 * max(sa, sb):
        if sa > sb:
            C = np.hstack([D, np.zeros((m, 1))])
            b = np.append(w_b, sa - sb)
        else:
            C = np.vstack([D, np.zeros((1, n))])
            a = np.append(w_a, sb - sa)
    flow, basis, it, gap = _simplex(C, a, b)
    flow = np.maximum(flow[:m, :n], 0.0)
    objective = float((flow * D).sum())
    total = float(flow.sum())
    real_basis = sorted(c for c in basis if c[0] < m and c[1] < n)
    return TransportPlan(flow, total, objective, it, gap, real_basis)


def check_plan(plan: TransportPlan, w_a, w_b, tol: float = FEASIBILITY_TOL) -> list[str]:
    """Constraint violations of ``plan`` (empty list when feasible)."""
    w_a, w_b = np.asarray(w_a), np.asarray(w_b)
    F = plan.flow
    problems = []
    if (F < -tol).any():
        problems.append(f"negative flow {F.min():.3g}")
    if (F.sum(axis=1) > w_a + tol).any():
        problems.append("row flow exceeds source weight")
    if (F.sum(axis=0) > w_b + tol).any():
        problems.append("column flow exceeds sink weight")
    target = min(w_a.sum(), w_b.sum())
    if abs(F.sum() - target) > tol:
        problems.append(f"total flow {F.sum():.12g} != {target:.12g}")
    return problems


def emd(P, Q) -> float:
    P = P if isinstance(P, PointCloud) else PointCloud(P)
    Q = Q if isinstance(Q, PointCloud) else PointCloud(Q)
    plan = solve_transport(ground_distance(P, Q), P.weights, Q.weights)
    return plan.objective / plan.total_flow


def emd_gradient(plan: TransportPlan, P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of EMD w.r.t. both point sets with the flow held fixed."""
    a, b = _points(P), _points(Q)
    F = plan.flow
    c = 2.0 / (plan.total_flow * a.shape[1])
    ga = c * (F.sum(axis=1)[:, None] * a - F @ b)
    gb = c * (F.sum(axis=0)[:, None] * b - F.T @ a)
    return ga, gb


def dump_instance(path: str | Path, D: np.ndarray, plan: TransportPlan) -> None:
    payload = {"D": np.asarray(D).tolist(), "F": plan.flow.tolist(), "objective": plan.objective}
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# losses over encoder states


def batch_emd(HA: T.Tensor, HB: T.Tensor, mask_a: np.ndarray, mask_b: np.ndarray,
              plans: list | None = None) -> T.Tensor:
    """Mean over the batch of per-example EMD between unmasked rows of ``HA`` and ``HB``.

    ``HA`` and ``HB`` are ``[B, T, d]``; each example's cloud is its unmasked
    positions with uniform weights. Gradients come from the envelope theorem.
    """
    if HA.shape[0] != HB.shape[0] or HA.shape[2] != HB.shape[2]:
        raise DimensionError(f"state shapes differ: {HA.shape} vs {HB.shape}")
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    B = HA.shape[0]
    ga = np.zeros_like(HA.data)
    gb = np.zeros_like(HB.data)
    total = 0.0
    for k in range(B):
        ia = np.flatnonzero(mask_a[k])
        ib = np.flatnonzero(mask_b[k])
        a = HA.data[k, ia]
        b = HB.data[k, ib]
        plan = solve_transport(ground_distance(a, b), np.full(len(ia), 1.0 / len(ia)),
                               np.full(len(ib), 1.0 / len(ib)))
        total += plan.objective / plan.total_flow
        if HA.requires_grad or HB.requires_grad:
            da, db = emd_gradient(plan, a, b)
            ga[k, ia] = da
            gb[k, ib] = db
        if plans is not None:
            plans.append(plan)
    value = total / B

    def bw(g):
        s = float(g) / B
        return ga * s, gb * s

    return T.custom(np.asarray(value), (HA, HB), bw, "emd")


def _check_layer(states, layer: int) -> None:
    L = len(states.hidden) - 1
    if not 1 <= layer <= L:
        raise ConfigError(f"alignment layer {layer} outside [1, {L}]")


def alignment_loss(states_a, states_b, layer: int) -> T.Tensor:
    """Cross-script alignment: mean EMD between layer-``layer`` states of the two encoders."""
    _check_layer(states_a, layer)
    _check_layer(states_b, layer)
    return batch_emd(states_a.hidden[layer], states_b.hidden[layer], states_a.mask, states_b.mask)


def regularization_loss(states_deva, states_frozen, layer: int) -> T.Tensor:
    """EMD between the live Devanagari encoder and its frozen snapshot on the same input."""
    _check_layer(states_deva, layer)
    _check_layer(states_frozen, layer)
    return batch_emd(states_deva.hidden[layer], states_frozen.hidden[layer],
                     states_deva.mask, states_frozen.mask)
