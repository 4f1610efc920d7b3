# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels; see _purepy.py for semantics."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt, fmod, floor
from libc.stdlib cimport malloc, free, realloc

cnp.import_array()

cdef double PI = 3.141592653589793
cdef double TWO_PI = 6.283185307179586

DEF MAX_NX = 64
DEF MAX_NT = 8
DEF MAX_VERTS = 128


cdef inline double _wrap(double a) nogil:
    cdef double w = fmod(a + PI, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    w -= PI
    if w <= -PI:
        w += TWO_PI
    return w


# ---------------------------------------------------------------------------
# vessel dynamics

cdef void _rhs(const double* x, const double* u, int nt,
               const double* mass, const double* minv, const double* dlin,
               const double* dquad, double kt, const double* thr,
               double* out) nogil:
    cdef double psi = x[2]
    cdef double su = x[3], sv = x[4], sr = x[5]
    cdef double c = cos(psi), s = sin(psi)
    cdef double taux = 0.0, tauy = 0.0, tauz = 0.0
    cdef double f, ca, sa, fx, fy
    cdef int j
    for j in range(nt):
        f = kt * fabs(x[6 + nt + j]) * x[6 + nt + j]
        ca = cos(x[6 + j])
        sa = sin(x[6 + j])
        fx = f * ca
        fy = f * sa
        taux += fx
        tauy += fy
        tauz += thr[2 * j] * fy - thr[2 * j + 1] * fx

    cdef double a1 = mass[0] * su + mass[1] * sv + mass[2] * sr
    cdef double a2 = mass[3] * su + mass[4] * sv + mass[5] * sr
    cdef double gx = taux - (-a2 * sr) - (dlin[0] * su + dlin[1] * sv + dlin[2] * sr + dquad[0] * fabs(su) * su)
    cdef double gy = tauy - (a1 * sr) - (dlin[3] * su + dlin[4] * sv + dlin[5] * sr + dquad[1] * fabs(sv) * sv)
    cdef double gz = tauz - (a2 * su - a1 * sv) - (dlin[6] * su + dlin[7] * sv + dlin[8] * sr + dquad[2] * fabs(sr) * sr)

    out[0] = c * su - s * sv
    out[1] = s * su + c * sv
    out[2] = sr
    out[3] = minv[0] * gx + minv[1] * gy + minv[2] * gz
    out[4] = minv[3] * gx + minv[4] * gy + minv[5] * gz
    out[5] = minv[6] * gx + minv[7] * gy + minv[8] * gz
    for j in range(nt):
        out[6 + j] = u[j]
        out[6 + nt + j] = u[nt + j]


cdef void _rk4(const double* x, const double* u, double dt, int nt, int nx,
               const double* mass, const double* minv, const double* dlin,
               const double* dquad, double kt, const double* thr,
               double* out) nogil:
    cdef double k1[MAX_NX]
    cdef double k2[MAX_NX]
    cdef double k3[MAX_NX]
    cdef double k4[MAX_NX]
    cdef double xt[MAX_NX]
    cdef int i
    _rhs(x, u, nt, mass, minv, dlin, dquad, kt, thr, k1)
    for i in range(nx):
        xt[i] = x[i] + 0.5 * dt * k1[i]
    _rhs(xt, u, nt, mass, minv, dlin, dquad, kt, thr, k2)
    for i in range(nx):
        xt[i] = x[i] + 0.5 * dt * k2[i]
    _rhs(xt, u, nt, mass, minv, dlin, dquad, kt, thr, k3)
    for i in range(nx):
        xt[i] = x[i] + dt * k3[i]
    _rhs(xt, u, nt, mass, minv, dlin, dquad, kt, thr, k4)
    for i in range(nx):
        out[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


def rollout(x0, U, double dt, mass, minv, dlin, dquad, double kt, thr):
    cdef cnp.ndarray[double, ndim=1] x0a = np.ascontiguousarray(x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Ua = np.ascontiguousarray(np.atleast_2d(U), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ma = np.ascontiguousarray(mass, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] mia = np.ascontiguousarray(minv, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] dla = np.ascontiguousarray(dlin, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] dqa = np.ascontiguousarray(dquad, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] thra = np.ascontiguousarray(thr, dtype=np.float64)
    cdef int nt = thra.shape[0]
    cdef int nx = x0a.shape[0]
    cdef Py_ssize_t nsteps = Ua.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((nsteps + 1, nx), dtype=np.float64)
    cdef double xcur[MAX_NX]
    cdef double xnext[MAX_NX]
    cdef int i
    cdef Py_ssize_t j
    for i in range(nx):
        xcur[i] = x0a[i]
        out[0, i] = x0a[i]
    with nogil:
        for j in range(nsteps):
            _rk4(xcur, &Ua[j, 0], dt, nt, nx, &ma[0, 0], &mia[0, 0], &dla[0, 0],
                 &dqa[0], kt, &thra[0, 0], xnext)
            xnext[2] = _wrap(xnext[2])
            for i in range(nx):
                xcur[i] = xnext[i]
                (&out[0, 0])[(j + 1) * nx + i] = xnext[i]
    return out


# ---------------------------------------------------------------------------
# polygon geometry

cdef void _point_info(const double* V, int K, double px, double py,
                      double* dist, double* cx, double* cy, int* inside) nogil:
    cdef double best = 1e300
    cdef double bx = px, by = py
    cdef int crossings = 0
    cdef int i, inext
    cdef double ax, ay, b2x, b2y, abx, aby, apx, apy, denom, t, qx, qy, d2, dy, xint
    for i in range(K):
        inext = i + 1
        if inext == K:
            inext = 0
        ax = V[2 * i]
        ay = V[2 * i + 1]
        b2x = V[2 * inext]
        b2y = V[2 * inext + 1]
        abx = b2x - ax
        aby = b2y - ay
        denom = abx * abx + aby * aby
        if denom < 1e-300:
            denom = 1e-300
        apx = px - ax
        apy = py - ay
        t = (apx * abx + apy * aby) / denom
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * abx
        qy = ay + t * aby
        d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy)
        if d2 < best:
            best = d2
            bx = qx
            by = qy
        if (ay > py) != (b2y > py):
            dy = b2y - ay
            xint = ax + (py - ay) * (b2x - ax) / dy
            if px < xint:
                crossings += 1
    dist[0] = sqrt(best)
    inside[0] = 1 if (crossings % 2 == 1 or dist[0] <= 1e-12) else 0
    if inside[0]:
        dist[0] = 0.0
        cx[0] = px
        cy[0] = py
    else:
        cx[0] = bx
        cy[0] = by


def poly_point_info(verts, pts):
    cdef cnp.ndarray[double, ndim=2] V = np.ascontiguousarray(verts, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] P = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    cdef int K = V.shape[0]
    cdef cnp.ndarray[double, ndim=1] dist = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] closest = np.empty((n, 2), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] inside = np.zeros(n, dtype=np.uint8)
    cdef double d, cx, cy
    cdef int ins
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            _point_info(&V[0, 0], K, P[i, 0], P[i, 1], &d, &cx, &cy, &ins)
            dist[i] = d
            closest[i, 0] = cx
            closest[i, 1] = cy
            inside[i] = <cnp.uint8_t> ins
    return dist, closest, inside


cdef inline double _orient(double ax, double ay, double bx, double by, double cx, double cy) nogil:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


cdef inline int _on_seg(double ax, double ay, double bx, double by, double px, double py) nogil:
    cdef double lox = ax if ax < bx else bx
    cdef double hix = ax if ax > bx else bx
    cdef double loy = ay if ay < by else by
    cdef double hiy = ay if ay > by else by
    return lox - 1e-12 <= px <= hix + 1e-12 and loy - 1e-12 <= py <= hiy + 1e-12


cdef int _segs_cross(double p1x, double p1y, double p2x, double p2y,
                     double q1x, double q1y, double q2x, double q2y) nogil:
    cdef double d1 = _orient(q1x, q1y, q2x, q2y, p1x, p1y)
    cdef double d2 = _orient(q1x, q1y, q2x, q2y, p2x, p2y)
    cdef double d3 = _orient(p1x, p1y, p2x, p2y, q1x, q1y)
    cdef double d4 = _orient(p1x, p1y, p2x, p2y, q2x, q2y)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return 1
    if d1 == 0 and _on_seg(q1x, q1y, q2x, q2y, p1x, p1y):
        return 1
    if d2 == 0 and _on_seg(q1x, q1y, q2x, q2y, p2x, p2y):
        return 1
    if d3 == 0 and _on_seg(p1x, p1y, p2x, p2y, q1x, q1y):
        return 1
    if d4 == 0 and _on_seg(p1x, p1y, p2x, p2y, q2x, q2y):
        return 1
    return 0


cdef int _raw_point_in(const double* V, int K, double px, double py) nogil:
    cdef double d, cx, cy
    cdef int ins
    _point_info(V, K, px, py, &d, &cx, &cy, &ins)
    return ins


cdef int _raw_intersects(const double* A, int ka, const double* B, int kb) nogil:
    cdef double alox = 1e300, ahix = -1e300, aloy = 1e300, ahiy = -1e300
    cdef double blox = 1e300, bhix = -1e300, bloy = 1e300, bhiy = -1e300
    cdef int i, j, inext, jnext
    for i in range(ka):
        if A[2 * i] < alox: alox = A[2 * i]
        if A[2 * i] > ahix: ahix = A[2 * i]
        if A[2 * i + 1] < aloy: aloy = A[2 * i + 1]
        if A[2 * i + 1] > ahiy: ahiy = A[2 * i + 1]
    for i in range(kb):
        if B[2 * i] < blox: blox = B[2 * i]
        if B[2 * i] > bhix: bhix = B[2 * i]
        if B[2 * i + 1] < bloy: bloy = B[2 * i + 1]
        if B[2 * i + 1] > bhiy: bhiy = B[2 * i + 1]
    if ahix < blox or bhix < alox or ahiy < bloy or bhiy < aloy:
        return 0
    for i in range(ka):
        inext = i + 1
        if inext == ka:
            inext = 0
        for j in range(kb):
            jnext = j + 1
            if jnext == kb:
                jnext = 0
            if _segs_cross(A[2 * i], A[2 * i + 1], A[2 * inext], A[2 * inext + 1],
                           B[2 * j], B[2 * j + 1], B[2 * jnext], B[2 * jnext + 1]):
                return 1
    if _raw_point_in(B, kb, A[0], A[1]):
        return 1
    if _raw_point_in(A, ka, B[0], B[1]):
        return 1
    return 0


def poly_intersects(va, vb):
    cdef cnp.ndarray[double, ndim=2] A = np.ascontiguousarray(va, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] B = np.ascontiguousarray(vb, dtype=np.float64)
    cdef int r
    with nogil:
        r = _raw_intersects(&A[0, 0], <int> A.shape[0], &B[0, 0], <int> B.shape[0])
    return bool(r)


def sweep_collision(body, poses, verts):
    cdef cnp.ndarray[double, ndim=2] Bd = np.ascontiguousarray(body, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Ps = np.ascontiguousarray(np.atleast_2d(poses), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] V = np.ascontiguousarray(verts, dtype=np.float64)
    cdef Py_ssize_t n = Ps.shape[0]
    cdef int nb = Bd.shape[0]
    cdef int kv = V.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef double rb = 0.0, rr
    cdef int i
    for i in range(nb):
        rr = sqrt(Bd[i, 0] * Bd[i, 0] + Bd[i, 1] * Bd[i, 1])
        if rr > rb:
            rb = rr
    cdef double lox = 1e300, hix = -1e300, loy = 1e300, hiy = -1e300
    for i in range(kv):
        if V[i, 0] < lox: lox = V[i, 0]
        if V[i, 0] > hix: hix = V[i, 0]
        if V[i, 1] < loy: loy = V[i, 1]
        if V[i, 1] > hiy: hiy = V[i, 1]
    lox -= rb
    hix += rb
    loy -= rb
    hiy += rb
    cdef double tb[2 * MAX_VERTS]
    cdef double c, s, px, py
    cdef Py_ssize_t j
    with nogil:
        for j in range(n):
            px = Ps[j, 0]
            py = Ps[j, 1]
            if px < lox or px > hix or py < loy or py > hiy:
                continue
            c = cos(Ps[j, 2])
            s = sin(Ps[j, 2])
            for i in range(nb):
                tb[2 * i] = c * Bd[i, 0] - s * Bd[i, 1] + px
                tb[2 * i + 1] = s * Bd[i, 0] + c * Bd[i, 1] + py
            if _raw_intersects(tb, nb, &V[0, 0], kv):
                out[j] = 1
    return out


def pair_sweep_collision(body_a, poses_a, body_b, poses_b):
    cdef cnp.ndarray[double, ndim=2] Ba = np.ascontiguousarray(body_a, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Bb = np.ascontiguousarray(body_b, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Pa = np.ascontiguousarray(np.atleast_2d(poses_a), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Pb = np.ascontiguousarray(np.atleast_2d(poses_b), dtype=np.float64)
    cdef Py_ssize_t n = Pa.shape[0]
    cdef int na = Ba.shape[0]
    cdef int nb = Bb.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef double ra = 0.0, rb = 0.0, rr
    cdef int i
    for i in range(na):
        rr = sqrt(Ba[i, 0] * Ba[i, 0] + Ba[i, 1] * Ba[i, 1])
        if rr > ra:
            ra = rr
    for i in range(nb):
        rr = sqrt(Bb[i, 0] * Bb[i, 0] + Bb[i, 1] * Bb[i, 1])
        if rr > rb:
            rb = rr
    cdef double reach = ra + rb
    cdef double ta[2 * MAX_VERTS]
    cdef double tb[2 * MAX_VERTS]
    cdef double c, s, dx, dy
    cdef Py_ssize_t j
    with nogil:
        for j in range(n):
            dx = Pa[j, 0] - Pb[j, 0]
            dy = Pa[j, 1] - Pb[j, 1]
            if sqrt(dx * dx + dy * dy) > reach:
                continue
            c = cos(Pa[j, 2])
            s = sin(Pa[j, 2])
            for i in range(na):
                ta[2 * i] = c * Ba[i, 0] - s * Ba[i, 1] + Pa[j, 0]
                ta[2 * i + 1] = s * Ba[i, 0] + c * Ba[i, 1] + Pa[j, 1]
            c = cos(Pb[j, 2])
            s = sin(Pb[j, 2])
            for i in range(nb):
                tb[2 * i] = c * Bb[i, 0] - s * Bb[i, 1] + Pb[j, 0]
                tb[2 * i + 1] = s * Bb[i, 0] + c * Bb[i, 1] + Pb[j, 1]
            if _raw_intersects(ta, na, tb, nb):
                out[j] = 1
    return out


# ---------------------------------------------------------------------------
# grids

def grid_lookup(grid, double ox, double oy, double res, pts):
    cdef const double[:, ::1] G = np.ascontiguousarray(grid, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    cdef Py_ssize_t H = G.shape[0]
    cdef Py_ssize_t W = G.shape[1]
    cdef cnp.ndarray[double, ndim=1] out = np.zeros(n, dtype=np.float64)
    cdef Py_ssize_t i
    cdef long ix, iy
    with nogil:
        for i in range(n):
            ix = <long> floor((P[i, 0] - ox) / res)
            iy = <long> floor((P[i, 1] - oy) / res)
            if 0 <= ix < W and 0 <= iy < H:
                out[i] = G[iy, ix]
    return out


# ---------------------------------------------------------------------------
# lattice Dijkstra

cdef struct Heap:
    double* cost
    long* idx
    Py_ssize_t size
    Py_ssize_t cap


cdef int _heap_push(Heap* h, double cost, long idx) nogil:
    cdef Py_ssize_t i, parent
    cdef double* nc
    cdef long* ni
    if h.size == h.cap:
        h.cap *= 2
        nc = <double*> realloc(h.cost, h.cap * sizeof(double))
        ni = <long*> realloc(h.idx, h.cap * sizeof(long))
        if nc == NULL or ni == NULL:
            return -1
        h.cost = nc
        h.idx = ni
    i = h.size
    h.size += 1
    h.cost[i] = cost
    h.idx[i] = idx
    while i > 0:
        parent = (i - 1) // 2
        if h.cost[parent] <= h.cost[i]:
            break
        h.cost[i], h.cost[parent] = h.cost[parent], h.cost[i]
        h.idx[i], h.idx[parent] = h.idx[parent], h.idx[i]
        i = parent
    return 0


cdef void _heap_pop(Heap* h, double* cost, long* idx) nogil:
    cdef Py_ssize_t i = 0, child
    cost[0] = h.cost[0]
    idx[0] = h.idx[0]
    h.size -= 1
    h.cost[0] = h.cost[h.size]
    h.idx[0] = h.idx[h.size]
    while True:
        child = 2 * i + 1
        if child >= h.size:
            break
        if child + 1 < h.size and h.cost[child + 1] < h.cost[child]:
            child += 1
        if h.cost[i] <= h.cost[child]:
            break
        h.cost[i], h.cost[child] = h.cost[child], h.cost[i]
        h.idx[i], h.idx[child] = h.idx[child], h.idx[i]
        i = child


def lattice_dijkstra(int n_classes, offsets, edge_dxdy, edge_to, edge_cost,
                     int half_width, int start_class):
    cdef cnp.ndarray[long, ndim=1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef cnp.ndarray[long, ndim=2] dxdy = np.ascontiguousarray(edge_dxdy, dtype=np.int64)
    cdef cnp.ndarray[long, ndim=1] eto = np.ascontiguousarray(edge_to, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] ecost = np.ascontiguousarray(edge_cost, dtype=np.float64)
    cdef int W = half_width
    cdef long side = 2 * W + 1
    cdef cnp.ndarray[double, ndim=3] table = np.full((side, side, n_classes), np.inf, dtype=np.float64)
    cdef double* flat = &table[0, 0, 0]
    cdef long start = (W * side + W) * n_classes + start_class
    flat[start] = 0.0

    cdef Heap h
    h.cap = 1 << 16
    h.size = 0
    h.cost = <double*> malloc(h.cap * sizeof(double))
    h.idx = <long*> malloc(h.cap * sizeof(long))
    if h.cost == NULL or h.idx == NULL:
        raise MemoryError()

    cdef double g, ng
    cdef long idx, cls, cell, cx, cy, nx, ny, nidx, e
    cdef int fail = 0
    with nogil:
        _heap_push(&h, 0.0, start)
        while h.size > 0:
            _heap_pop(&h, &g, &idx)
            if g > flat[idx]:
                continue
            cls = idx % n_classes
            cell = idx // n_classes
            cy = cell // side - W
            cx = cell % side - W
            for e in range(offs[cls], offs[cls + 1]):
                nx = cx + dxdy[e, 0]
                ny = cy + dxdy[e, 1]
                if nx < -W or nx > W or ny < -W or ny > W:
                    continue
                nidx = ((ny + W) * side + (nx + W)) * n_classes + eto[e]
                ng = g + ecost[e]
                if ng < flat[nidx]:
                    flat[nidx] = ng
                    if _heap_push(&h, ng, nidx) != 0:
                        fail = 1
                        break
            if fail:
                break
    free(h.cost)
    free(h.idx)
    if fail:
        raise MemoryError()
    return table
