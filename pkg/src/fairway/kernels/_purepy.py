"""Pure-numpy implementations of the hot kernels.

Reference semantics for the compiled core in ``_core.pyx``.  Everything here
is vectorized where it pays off but stays readable; the compiled twin exists
because the lattice search and the closed-loop simulator call these functions
millions of times.
"""

import heapq

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    w = (np.asarray(a) + np.pi) % TWO_PI - np.pi
    return np.where(w <= -np.pi, w + TWO_PI, w)


# ---------------------------------------------------------------------------
# vessel dynamics


def dynamics_rhs(X, U, mass, minv, dlin, dquad, kt, thr):
    """Batched state derivative of the 3-DOF maneuvering model.

    X : (B, 6 + 2*nt) rows [x, y, psi, u, v, r, alpha..., n...]
    U : (B, 2*nt) rows [alpha_dot..., n_dot...]
    mass, minv : (3, 3) inertia matrix (incl. added mass) and its inverse
    dlin : (3, 3) linear damping, dquad : (3,) quadratic damping diagonal
    kt : thrust coefficient, thr : (nt, 2) thruster lever arms
    """
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None]
        U = U[None]
    nt = thr.shape[0]
    psi = X[:, 2]
    u, v, r = X[:, 3], X[:, 4], X[:, 5]
    alpha = X[:, 6 : 6 + nt]
    n = X[:, 6 + nt : 6 + 2 * nt]

    c, s = np.cos(psi), np.sin(psi)

    # generalized thrust
    f = kt * np.abs(n) * n
    ca, sa = np.cos(alpha), np.sin(alpha)
    fx = f * ca
    fy = f * sa
    taux = fx.sum(axis=1)
    tauy = fy.sum(axis=1)
    tauz = (thr[:, 0] * fy - thr[:, 1] * fx).sum(axis=1)

    # Coriolis built from M so that nu' C(nu) nu == 0 exactly
    a1 = mass[0, 0] * u + mass[0, 1] * v + mass[0, 2] * r
    a2 = mass[1, 0] * u + mass[1, 1] * v + mass[1, 2] * r
    cor_x = -a2 * r
    cor_y = a1 * r
    cor_z = a2 * u - a1 * v

    damp_x = dlin[0, 0] * u + dlin[0, 1] * v + dlin[0, 2] * r + dquad[0] * np.abs(u) * u
    damp_y = dlin[1, 0] * u + dlin[1, 1] * v + dlin[1, 2] * r + dquad[1] * np.abs(v) * v
    damp_z = dlin[2, 0] * u + dlin[2, 1] * v + dlin[2, 2] * r + dquad[2] * np.abs(r) * r

    gx = taux - cor_x - damp_x
    gy = tauy - cor_y - damp_y
    gz = tauz - cor_z - damp_z

    out = np.empty_like(X)
    out[:, 0] = c * u - s * v
    out[:, 1] = s * u + c * v
    out[:, 2] = r
    out[:, 3] = minv[0, 0] * gx + minv[0, 1] * gy + minv[0, 2] * gz
    out[:, 4] = minv[1, 0] * gx + minv[1, 1] * gy + minv[1, 2] * gz
    out[:, 5] = minv[2, 0] * gx + minv[2, 1] * gy + minv[2, 2] * gz
    out[:, 6 : 6 + nt] = U[:, :nt]
    out[:, 6 + nt : 6 + 2 * nt] = U[:, nt:]
    return out[0] if squeeze else out


def rk4_step(X, U, dt, mass, minv, dlin, dquad, kt, thr):
    """One classic Runge-Kutta step with zero-order-hold controls; no angle wrap."""
    args = (mass, minv, dlin, dquad, kt, thr)
    k1 = dynamics_rhs(X, U, *args)
    k2 = dynamics_rhs(X + 0.5 * dt * k1, U, *args)
    k3 = dynamics_rhs(X + 0.5 * dt * k2, U, *args)
    k4 = dynamics_rhs(X + dt * k3, U, *args)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(x0, U, dt, mass, minv, dlin, dquad, kt, thr):
    """Integrate a control sequence; returns (len(U)+1, nx) states.

    Heading is wrapped into (-pi, pi] after every step, matching the
    step-by-step integration done by the closed-loop simulator.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    out = np.empty((U.shape[0] + 1, x0.shape[0]))
    out[0] = x0
    x = x0
    for j in range(U.shape[0]):
        x = rk4_step(x, U[j], dt, mass, minv, dlin, dquad, kt, thr)
        x[2] = float(wrap_angle(x[2]))
        out[j + 1] = x
    return out


# ---------------------------------------------------------------------------
# polygon geometry


def poly_point_info(verts, pts):
    """Distance, closest point and containment for points vs one polygon.

    verts : (K, 2) simple polygon ring, no repeated endpoint
    pts : (n, 2) query points
    Returns (dist (n,), closest (n, 2), inside (n,) uint8).  Points inside
    (boundary inclusive) report distance 0 and themselves as closest point.
    """
    V = np.asarray(verts, dtype=np.float64)
    P = np.asarray(pts, dtype=np.float64)
    if P.ndim == 1:
        P = P[None]
    A = V
    B = np.roll(V, -1, axis=0)
    AB = B - A
    denom = np.maximum((AB * AB).sum(axis=1), 1e-300)

    AP = P[:, None, :] - A[None, :, :]
    t = np.clip((AP * AB[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    C = A[None] + t[:, :, None] * AB[None]
    d2 = ((P[:, None, :] - C) ** 2).sum(axis=2)
    k = d2.argmin(axis=1)
    rows = np.arange(P.shape[0])
    dist = np.sqrt(d2[rows, k])
    closest = C[rows, k]

    # even-odd raycast towards +x
    x, y = P[:, 0:1], P[:, 1:2]
    ay, by = A[:, 1][None], B[:, 1][None]
    ax, bx = A[:, 0][None], B[:, 0][None]
    cond = (ay > y) != (by > y)
    dy = np.where(cond, by - ay, 1.0)
    xint = ax + (y - ay) * (bx - ax) / dy
    inside = ((cond & (x < xint)).sum(axis=1) % 2).astype(bool)
    inside |= dist <= 1e-12

    dist = np.where(inside, 0.0, dist)
    closest = np.where(inside[:, None], P, closest)
    return dist, closest, inside.astype(np.uint8)


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py):
    return (
        min(ax, bx) - 1e-12 <= px <= max(ax, bx) + 1e-12
        and min(ay, by) - 1e-12 <= py <= max(ay, by) + 1e-12
    )


def segments_intersect(p1, p2, q1, q2):
    """Inclusive segment intersection test (touching counts)."""
    d1 = _orient(q1[0], q1[1], q2[0], q2[1], p1[0], p1[1])
    d2 = _orient(q1[0], q1[1], q2[0], q2[1], p2[0], p2[1])
    d3 = _orient(p1[0], p1[1], p2[0], p2[1], q1[0], q1[1])
    d4 = _orient(p1[0], p1[1], p2[0], p2[1], q2[0], q2[1])
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and _on_segment(q1[0], q1[1], q2[0], q2[1], p1[0], p1[1]):
        return True
    if d2 == 0 and _on_segment(q1[0], q1[1], q2[0], q2[1], p2[0], p2[1]):
        return True
    if d3 == 0 and _on_segment(p1[0], p1[1], p2[0], p2[1], q1[0], q1[1]):
        return True
    if d4 == 0 and _on_segment(p1[0], p1[1], p2[0], p2[1], q2[0], q2[1]):
        return True
    return False


def _point_in(verts, p):
    _, _, inside = poly_point_info(verts, np.asarray(p, dtype=np.float64)[None])
    return bool(inside[0])


def poly_intersects(va, vb):
    """True when two simple polygons overlap (boundary contact counts)."""
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    # cheap bbox reject
    if (
        va[:, 0].max() < vb[:, 0].min()
        or vb[:, 0].max() < va[:, 0].min()
        or va[:, 1].max() < vb[:, 1].min()
        or vb[:, 1].max() < va[:, 1].min()
    ):
        return False
    ka, kb = va.shape[0], vb.shape[0]
    for i in range(ka):
        p1 = va[i]
        p2 = va[(i + 1) % ka]
        for j in range(kb):
            if segments_intersect(p1, p2, vb[j], vb[(j + 1) % kb]):
                return True
    return _point_in(vb, va[0]) or _point_in(va, vb[0])


def _transform(body, pose):
    c, s = np.cos(pose[2]), np.sin(pose[2])
    R = np.array([[c, -s], [s, c]])
    return body @ R.T + pose[:2]


def sweep_collision(body, poses, verts):
    """Per-pose overlap of a rigid body polygon against one static polygon.

    body : (V, 2) body-frame polygon, poses : (n, 3) rows [x, y, psi],
    verts : (K, 2) static polygon.  Returns (n,) uint8.
    """
    body = np.asarray(body, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    verts = np.asarray(verts, dtype=np.float64)
    rb = np.sqrt((body**2).sum(axis=1)).max()
    lo = verts.min(axis=0) - rb
    hi = verts.max(axis=0) + rb
    out = np.zeros(poses.shape[0], dtype=np.uint8)
    for i, pose in enumerate(poses):
        if not (lo[0] <= pose[0] <= hi[0] and lo[1] <= pose[1] <= hi[1]):
            continue
        if poly_intersects(_transform(body, pose), verts):
            out[i] = 1
    return out


def pair_sweep_collision(body_a, poses_a, body_b, poses_b):
    """Per-sample overlap of two moving body polygons (matched sample times)."""
    body_a = np.asarray(body_a, dtype=np.float64)
    body_b = np.asarray(body_b, dtype=np.float64)
    poses_a = np.asarray(poses_a, dtype=np.float64)
    poses_b = np.asarray(poses_b, dtype=np.float64)
    ra = np.sqrt((body_a**2).sum(axis=1)).max()
    rb = np.sqrt((body_b**2).sum(axis=1)).max()
    reach = ra + rb
    d = np.hypot(poses_a[:, 0] - poses_b[:, 0], poses_a[:, 1] - poses_b[:, 1])
    out = np.zeros(poses_a.shape[0], dtype=np.uint8)
    for i in np.nonzero(d <= reach)[0]:
        if poly_intersects(_transform(body_a, poses_a[i]), _transform(body_b, poses_b[i])):
            out[i] = 1
    return out


# ---------------------------------------------------------------------------
# grids


def grid_lookup(grid, ox, oy, res, pts):
    """Nearest-cell lookup; points outside the grid read 0."""
    grid = np.asarray(grid)
    pts = np.asarray(pts, dtype=np.float64)
    ix = np.floor((pts[:, 0] - ox) / res).astype(np.int64)
    iy = np.floor((pts[:, 1] - oy) / res).astype(np.int64)
    ok = (ix >= 0) & (ix < grid.shape[1]) & (iy >= 0) & (iy < grid.shape[0])
    out = np.zeros(pts.shape[0], dtype=np.float64)
    out[ok] = grid[iy[ok], ix[ok]]
    return out


# ---------------------------------------------------------------------------
# lattice Dijkstra (heuristic table construction)


def lattice_dijkstra(n_classes, offsets, edge_dxdy, edge_to, edge_cost, half_width, start_class):
    """Uniform-cost search over a windowed lattice from the origin cell.

    States are (cell_x, cell_y, class) with |cell| <= half_width.  Edges are
    grouped by source class: edges of class c live in rows
    offsets[c]:offsets[c+1] of edge_dxdy / edge_to / edge_cost.
    Returns a (2W+1, 2W+1, n_classes) float64 table of minimal costs
    (np.inf where unreached) with the origin at table[W, W, start_class] = 0.
    """
    W = int(half_width)
    side = 2 * W + 1
    table = np.full((side, side, n_classes), np.inf, dtype=np.float64)
    start = (W * side + W) * n_classes + int(start_class)
    flat = table.reshape(-1)
    flat[start] = 0.0
    heap = [(0.0, start)]
    offsets = np.asarray(offsets, dtype=np.int64)
    edge_dxdy = np.asarray(edge_dxdy, dtype=np.int64)
    edge_to = np.asarray(edge_to, dtype=np.int64)
    edge_cost = np.asarray(edge_cost, dtype=np.float64)
    while heap:
        g, idx = heapq.heappop(heap)
        if g > flat[idx]:
            continue
        cls = idx % n_classes
        cell = idx // n_classes
        cy = cell // side - W
        cx = cell % side - W
        for e in range(offsets[cls], offsets[cls + 1]):
            nx = cx + edge_dxdy[e, 0]
            ny = cy + edge_dxdy[e, 1]
            if nx < -W or nx > W or ny < -W or ny > W:
                continue
            nidx = ((ny + W) * side + (nx + W)) * n_classes + edge_to[e]
            ng = g + edge_cost[e]
            if ng < flat[nidx]:
                flat[nidx] = ng
                heapq.heappush(heap, (ng, nidx))
    return table
