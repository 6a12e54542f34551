"""Numba kernels shared by both Monte Carlo engines and the ray tracer.

Geometry is passed as flat arrays so that one compiled kernel serves every
shape: ``kind`` (0 slab, 1 box, 2 ball) with ``prm`` of length 6, and a
regular voxel mesh given by ``mlo``, ``mh`` (cell widths) and ``mn`` (counts).
Axes with a single cell never produce a face crossing.
"""
import math

import numpy as np
from numba import njit

SLAB, BOX, BALL = 0, 1, 2
EVENT, EXIT, CENSUS = 0, 1, 2
INF = np.inf


@njit(cache=True, nogil=True)
def exit_time_nb(kind, prm, x, y, z, vx, vy, vz):
    """First time r + t v leaves the open domain; inf when v = 0."""
    if kind == SLAB:
        if vx > 0.0:
            return (prm[1] - x) / vx
        if vx < 0.0:
            return (prm[0] - x) / vx
        return INF
    if kind == BOX:
        t = INF
        p = (x, y, z)
        v = (vx, vy, vz)
        for d in range(3):
            if v[d] > 0.0:
                s = (prm[3 + d] - p[d]) / v[d]
            elif v[d] < 0.0:
                s = (prm[d] - p[d]) / v[d]
            else:
                continue
            if s < t:
                t = s
        return t
    # ball: |p + t v - c|^2 = R^2, larger root
    a = vx * vx + vy * vy + vz * vz
    if a == 0.0:
        return INF
    dx = x - prm[0]
    dy = y - prm[1]
    dz = z - prm[2]
    b = vx * dx + vy * dy + vz * dz
    c = dx * dx + dy * dy + dz * dz - prm[3] * prm[3]
    disc = b * b - a * c
    if disc < 0.0:
        disc = 0.0
    sq = math.sqrt(disc)
    # stable form of (-b + sq) / a
    if b <= 0.0:
        return (-b + sq) / a
    return -c / (b + sq)


@njit(cache=True, nogil=True)
def inside_nb(kind, prm, x, y, z):
    if kind == SLAB:
        return prm[0] < x < prm[1]
    if kind == BOX:
        return (prm[0] < x < prm[3]) and (prm[1] < y < prm[4]) and (prm[2] < z < prm[5])
    dx = x - prm[0]
    dy = y - prm[1]
    dz = z - prm[2]
    return dx * dx + dy * dy + dz * dz < prm[3] * prm[3]


@njit(cache=True, nogil=True)
def axis_cell(lo, h, n, x, v):
    """Cell index along one axis; a point on a face goes to the cell ahead of v."""
    if n == 1:
        return 0
    s = (x - lo) / h
    i = int(math.floor(s))
    if v < 0.0 and s == i:
        i -= 1
    if i < 0:
        i = 0
    elif i > n - 1:
        i = n - 1
    return i


@njit(cache=True, nogil=True)
def locate_nb(mlo, mh, mn, x, y, z, vx, vy, vz, cell):
    cell[0] = axis_cell(mlo[0], mh[0], mn[0], x, vx)
    cell[1] = axis_cell(mlo[1], mh[1], mn[1], y, vy)
    cell[2] = axis_cell(mlo[2], mh[2], mn[2], z, vz)
    return cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])


@njit(cache=True, nogil=True)
def _face_time(lo, h, n, i, x, v):
    if n == 1 or v == 0.0:
        return INF
    if v > 0.0:
        return (lo + (i + 1) * h - x) / v
    return (lo + i * h - x) / v


@njit(cache=True, nogil=True)
def flight_nb(kind, prm, mlo, mh, mn, pos, vel, cell, rate, pot, sp, k,
              budget, target, out):
    """Walk the ray from pos until the integrated rate reaches ``target``.

    ``rate[sp, c, k]`` is piecewise constant over cells; ``pot`` is integrated
    alongside.  Stops at the event, at the domain exit or at ``budget``,
    whichever comes first.  ``cell`` is updated in place to the final cell.
    Writes (elapsed, outcome, flat cell, integrated pot) into ``out``.
    """
    x, y, z = pos[0], pos[1], pos[2]
    vx, vy, vz = vel[0], vel[1], vel[2]
    kappa = exit_time_nb(kind, prm, x, y, z, vx, vy, vz)
    t_end = kappa if kappa < budget else budget
    tf0 = _face_time(mlo[0], mh[0], mn[0], cell[0], x, vx)
    tf1 = _face_time(mlo[1], mh[1], mn[1], cell[1], y, vy)
    tf2 = _face_time(mlo[2], mh[2], mn[2], cell[2], z, vz)
    t = 0.0
    acc = 0.0
    pacc = 0.0
    while True:
        c = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
        tn = min(tf0, tf1, tf2, t_end)
        r = rate[sp, c, k]
        seg = tn - t
        if r > 0.0 and acc + r * seg >= target:
            te = t + (target - acc) / r
            if te > tn:
                te = tn
            pacc += pot[sp, c, k] * (te - t)
            out[0] = te
            out[1] = EVENT
            out[2] = c
            out[3] = pacc
            return
        acc += r * seg
        pacc += pot[sp, c, k] * seg
        t = tn
        if tn >= t_end:
            out[0] = t_end
            out[1] = EXIT if kappa <= budget else CENSUS
            out[2] = c
            out[3] = pacc
            return
        # ties go to the smallest axis index
        if tf0 <= tf1 and tf0 <= tf2:
            cell[0] += 1 if vx > 0.0 else -1
            if cell[0] < 0 or cell[0] >= mn[0]:
                cell[0] = min(max(cell[0], 0), mn[0] - 1)
                tf0 = INF
            else:
                tf0 = _face_time(mlo[0], mh[0], mn[0], cell[0], x, vx)
        elif tf1 <= tf2:
            cell[1] += 1 if vy > 0.0 else -1
            if cell[1] < 0 or cell[1] >= mn[1]:
                cell[1] = min(max(cell[1], 0), mn[1] - 1)
                tf1 = INF
            else:
                tf1 = _face_time(mlo[1], mh[1], mn[1], cell[1], y, vy)
        else:
            cell[2] += 1 if vz > 0.0 else -1
            if cell[2] < 0 or cell[2] >= mn[2]:
                cell[2] = min(max(cell[2], 0), mn[2] - 1)
                tf2 = INF
            else:
                tf2 = _face_time(mlo[2], mh[2], mn[2], cell[2], z, vz)


@njit(cache=True, nogil=True)
def segments_nb(kind, prm, mlo, mh, mn, pos, vel, t):
    """Cell sequence along r + s v for s in [0, min(t, kappa))."""
    x, y, z = pos[0], pos[1], pos[2]
    vx, vy, vz = vel[0], vel[1], vel[2]
    kappa = exit_time_nb(kind, prm, x, y, z, vx, vy, vz)
    t_end = kappa if kappa < t else t
    cell = np.empty(3, dtype=np.int64)
    locate_nb(mlo, mh, mn, x, y, z, vx, vy, vz, cell)
    cap = 16
    cells = np.empty(cap, dtype=np.int64)
    t_in = np.empty(cap)
    t_out = np.empty(cap)
    n = 0
    tf0 = _face_time(mlo[0], mh[0], mn[0], cell[0], x, vx)
    tf1 = _face_time(mlo[1], mh[1], mn[1], cell[1], y, vy)
    tf2 = _face_time(mlo[2], mh[2], mn[2], cell[2], z, vz)
    s = 0.0
    while s < t_end:
        tn = min(tf0, tf1, tf2, t_end)
        if tn > s:
            if n == cap:
                cap *= 2
                cells2 = np.empty(cap, dtype=np.int64)
                a2 = np.empty(cap)
                b2 = np.empty(cap)
                cells2[:n] = cells[:n]
                a2[:n] = t_in[:n]
                b2[:n] = t_out[:n]
                cells, t_in, t_out = cells2, a2, b2
            cells[n] = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
            t_in[n] = s
            t_out[n] = tn
            n += 1
        s = tn
        if tn >= t_end:
            break
        if tf0 <= tf1 and tf0 <= tf2:
            cell[0] += 1 if vx > 0.0 else -1
            if cell[0] < 0 or cell[0] >= mn[0]:
                break
            tf0 = _face_time(mlo[0], mh[0], mn[0], cell[0], x, vx)
        elif tf1 <= tf2:
            cell[1] += 1 if vy > 0.0 else -1
            if cell[1] < 0 or cell[1] >= mn[1]:
                break
            tf1 = _face_time(mlo[1], mh[1], mn[1], cell[1], y, vy)
        else:
            cell[2] += 1 if vz > 0.0 else -1
            if cell[2] < 0 or cell[2] >= mn[2]:
                break
            tf2 = _face_time(mlo[2], mh[2], mn[2], cell[2], z, vz)
    return cells[:n].copy(), t_in[:n].copy(), t_out[:n].copy()


# Tally functions g(i, r, k): 0 constant, 1 sine, 2 grid, 3 box indicator.
G_CONST, G_SINE, G_GRID, G_BOX = 0, 1, 2, 3


@njit(cache=True, nogil=True)
def g_eval(gk, gcoef, gvals, glo, gh, gn, gbox, i, k, x, y, z):
    if gk == G_CONST:
        return gcoef[i, k]
    if gk == G_SINE:
        val = gcoef[i, k]
        p = (x, y, z)
        for d in range(3):
            a = gbox[d]
            b = gbox[3 + d]
            if math.isfinite(a) and math.isfinite(b):
                val *= math.sin(math.pi * (p[d] - a) / (b - a))
        return val
    if gk == G_GRID:
        ix = axis_cell(glo[0], gh[0], gn[0], x, 1.0)
        iy = axis_cell(glo[1], gh[1], gn[1], y, 1.0)
        iz = axis_cell(glo[2], gh[2], gn[2], z, 1.0)
        return gvals[i, ix + gn[0] * (iy + gn[1] * iz), k]
    if (gbox[0] <= x < gbox[3]) and (gbox[1] <= y < gbox[4]) and (gbox[2] <= z < gbox[5]):
        return gcoef[i, k]
    return 0.0
