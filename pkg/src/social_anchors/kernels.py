"""Hot numeric kernels, JIT-compiled with numba when available.

The package's inner loops that are not BLAS matmuls live here: the
per-anchor behavioural feature table, the directional pooling grid,
social-force integration and the interpolated separation used by the
collision metric.  Each kernel has two implementations with identical
semantics:

* ``<name>_numpy`` -- vectorized pure-numpy version,
* ``<name>_numba`` -- explicit-loop version compiled with ``@njit``.

The module-level name ``<name>`` is bound to one of them at import time:
numba wins unless it is unavailable or the environment variable
``SOCIAL_ANCHORS_NO_NUMBA`` is set to a non-empty value other than
``0``.  ``benchmarks/bench_kernels.py`` times the two paths against each
other.

Results of the two paths agree to float64 roundoff (summation order may
differ), not necessarily bit-for-bit.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("SOCIAL_ANCHORS_NO_NUMBA", "")
_WANT_NUMBA = _FLAG in ("", "0")

if _WANT_NUMBA:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def njit(*args, **kwargs):
        """No-op decorator standing in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


_TINY = 1e-9  # below this, distances/speeds carry no usable direction


def _wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    if a == -math.pi:
        a = math.pi
    return a


# ---------------------------------------------------------------------------
# Behavioural feature table
# ---------------------------------------------------------------------------

def feature_table_numba_impl(
    neigh_pos,
    neigh_vel,
    anchors,
    offsets,
    sector_lo,
    sector_hi,
    multipliers,
    primary_speed,
    perception_radius,
    occupancy_floor,
    collision_decay,
    aim_cone,
    leader_cone,
    leader_range,
    alignment_cone,
    leader_exponent,
):
    """Per-anchor feature table, columns [dir, occ, col, l_acc, l_dec].

    All geometry is in the normalized frame (pedestrian at origin,
    heading +x).  ``sector_lo/hi`` are each anchor's angular sector
    bounds relative to its direction offset.
    """
    n_k = anchors.shape[0]
    n_j = neigh_pos.shape[0]
    out = np.zeros((n_k, 5))
    for k in range(n_k):
        out[k, 0] = abs(offsets[k])

    for j in range(n_j):
        px = neigh_pos[j, 0]
        py = neigh_pos[j, 1]
        vx = neigh_vel[j, 0]
        vy = neigh_vel[j, 1]
        dist = math.hypot(px, py)
        if dist < _TINY:
            continue
        if dist > perception_radius:
            continue
        bearing = math.atan2(py, px)
        closing = (vx * px + vy * py) < 0.0
        speed_j = math.hypot(vx, vy)
        for k in range(n_k):
            delta = _wrap_angle(bearing - offsets[k])
            if sector_lo[k] <= delta <= sector_hi[k]:
                gap = math.hypot(px - anchors[k, 0], py - anchors[k, 1])
                out[k, 1] += 1.0 / max(gap, occupancy_floor)
            if closing and speed_j >= _TINY:
                tx = anchors[k, 0] - px
                ty = anchors[k, 1] - py
                t_len = math.hypot(tx, ty)
                # a neighbour standing on the anchor endpoint is head-on
                aimed = t_len < _TINY
                if not aimed:
                    cos_a = (vx * tx + vy * ty) / (speed_j * t_len)
                    aimed = cos_a > math.cos(aim_cone)
                if aimed:
                    out[k, 2] += math.exp(-t_len / collision_decay)

    for k in range(n_k):
        best = -1
        best_dist = 1e30
        for j in range(n_j):
            px = neigh_pos[j, 0]
            py = neigh_pos[j, 1]
            dist = math.hypot(px, py)
            if dist < _TINY or dist > leader_range:
                continue
            if abs(_wrap_angle(math.atan2(py, px) - offsets[k])) >= leader_cone:
                continue
            vx = neigh_vel[j, 0]
            vy = neigh_vel[j, 1]
            if math.hypot(vx, vy) < _TINY:
                continue
            if abs(math.atan2(vy, vx)) >= alignment_cone:
                continue
            if dist < best_dist:
                best_dist = dist
                best = j
        if best >= 0:
            dv = math.hypot(neigh_vel[best, 0], neigh_vel[best, 1]) - primary_speed
            scale = best_dist ** (-leader_exponent)
            if multipliers[k] > 1.0:
                out[k, 3] = max(dv, 0.0) * scale
            elif multipliers[k] < 1.0:
                out[k, 4] = max(-dv, 0.0) * scale
    return out


def feature_table_numpy(
    neigh_pos,
    neigh_vel,
    anchors,
    offsets,
    sector_lo,
    sector_hi,
    multipliers,
    primary_speed,
    perception_radius,
    occupancy_floor,
    collision_decay,
    aim_cone,
    leader_cone,
    leader_range,
    alignment_cone,
    leader_exponent,
):
    """Vectorized twin of :func:`feature_table_numba_impl`."""
    n_k = anchors.shape[0]
    out = np.zeros((n_k, 5))
    out[:, 0] = np.abs(offsets)
    if len(neigh_pos) == 0:
        return out

    dist = np.hypot(neigh_pos[:, 0], neigh_pos[:, 1])  # (J,)
    valid = dist >= _TINY
    bearing = np.arctan2(neigh_pos[:, 1], neigh_pos[:, 0])
    speed_j = np.hypot(neigh_vel[:, 0], neigh_vel[:, 1])
    in_perception = valid & (dist <= perception_radius)

    # occupancy: neighbours in an anchor's sector, inverse gap to its endpoint
    delta = _wrap_angles(bearing[None, :] - offsets[:, None])  # (K, J)
    in_sector = (sector_lo[:, None] <= delta) & (delta <= sector_hi[:, None])
    gap = np.linalg.norm(neigh_pos[None, :, :] - anchors[:, None, :], axis=2)  # (K, J)
    occ_term = 1.0 / np.maximum(gap, occupancy_floor)
    out[:, 1] = np.sum(occ_term * (in_sector & in_perception[None, :]), axis=1)

    # collision: closing neighbours aimed at the anchor endpoint
    closing = np.einsum("jc,jc->j", neigh_vel, neigh_pos) < 0.0
    to_anchor = anchors[:, None, :] - neigh_pos[None, :, :]  # (K, J, 2)
    t_len = np.linalg.norm(to_anchor, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_a = np.einsum("jc,kjc->kj", neigh_vel, to_anchor) / (speed_j[None, :] * t_len)
    aimed = np.where(t_len < _TINY, True, cos_a > math.cos(aim_cone))
    active = aimed & (closing & in_perception & (speed_j >= _TINY))[None, :]
    out[:, 2] = np.sum(np.exp(-t_len / collision_decay) * active, axis=1)

    # leader-follower: nearest aligned neighbour in each direction cone
    aligned = (np.abs(np.arctan2(neigh_vel[:, 1], neigh_vel[:, 0])) < alignment_cone) & (
        speed_j >= _TINY
    )
    in_cone = np.abs(_wrap_angles(bearing[None, :] - offsets[:, None])) < leader_cone
    candidate = in_cone & (aligned & valid & (dist <= leader_range))[None, :]
    cand_dist = np.where(candidate, dist[None, :], np.inf)
    best = np.argmin(cand_dist, axis=1)  # first minimum = lowest id on ties
    has_leader = np.isfinite(cand_dist[np.arange(n_k), best])
    dv = speed_j[best] - primary_speed
    scale = np.where(has_leader, dist[best], 1.0) ** (-leader_exponent) * has_leader
    out[:, 3] = np.where(multipliers > 1.0, np.maximum(dv, 0.0) * scale, 0.0)
    out[:, 4] = np.where(multipliers < 1.0, np.maximum(-dv, 0.0) * scale, 0.0)
    return out


def _wrap_angles(a: np.ndarray) -> np.ndarray:
    out = (a + math.pi) % (2.0 * math.pi) - math.pi
    return np.where(out == -math.pi, math.pi, out)


# ---------------------------------------------------------------------------
# Directional pooling grid
# ---------------------------------------------------------------------------

def pool_grid_numba_impl(neigh_pos, rel_vel, n_cells, cell_size):
    """Average relative velocity per grid cell around the origin.

    Cell (ix, iy) covers [lo + ix*cell, lo + (ix+1)*cell) on each axis
    with lo = -n_cells*cell/2; neighbours outside the extent are dropped.
    """
    grid = np.zeros((n_cells, n_cells, 2))
    count = np.zeros((n_cells, n_cells))
    half = n_cells * cell_size / 2.0
    for j in range(neigh_pos.shape[0]):
        ix = int(math.floor((neigh_pos[j, 0] + half) / cell_size))
        iy = int(math.floor((neigh_pos[j, 1] + half) / cell_size))
        if 0 <= ix < n_cells and 0 <= iy < n_cells:
            grid[ix, iy, 0] += rel_vel[j, 0]
            grid[ix, iy, 1] += rel_vel[j, 1]
            count[ix, iy] += 1.0
    for ix in range(n_cells):
        for iy in range(n_cells):
            if count[ix, iy] > 0.0:
                grid[ix, iy, 0] /= count[ix, iy]
                grid[ix, iy, 1] /= count[ix, iy]
    return grid


def pool_grid_numpy(neigh_pos, rel_vel, n_cells, cell_size):
    """Vectorized twin of :func:`pool_grid_numba_impl`."""
    grid = np.zeros((n_cells, n_cells, 2))
    if len(neigh_pos) == 0:
        return grid
    half = n_cells * cell_size / 2.0
    idx = np.floor((neigh_pos + half) / cell_size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < n_cells), axis=1)
    idx, vel = idx[ok], rel_vel[ok]
    count = np.zeros((n_cells, n_cells))
    np.add.at(grid, (idx[:, 0], idx[:, 1]), vel)
    np.add.at(count, (idx[:, 0], idx[:, 1]), 1.0)
    nz = count > 0
    grid[nz] /= count[nz][:, None]
    return grid


# ---------------------------------------------------------------------------
# Social-force integration
# ---------------------------------------------------------------------------

def integrate_social_force_numba_impl(
    pos0, vel0, goals, desired_speed, n_frames, dt, tau, strength, rng_decay, goal_tol,
    speed_cap, substeps,
):
    """Euler-integrate goal attraction + pairwise exponential repulsion.

    Positions are recorded once per ``dt``; each frame advances through
    ``substeps`` internal Euler steps so close-range repulsion acts
    before agents overlap.  Returns (n_frames, N, 2); frame 0 is the
    spawn state.  Units: metres and seconds.
    """
    n = pos0.shape[0]
    h = dt / substeps
    frames = np.zeros((n_frames, n, 2))
    pos = pos0.copy()
    vel = vel0.copy()
    frames[0] = pos
    for t in range(1, n_frames):
        for _s in range(substeps):
            acc = np.zeros((n, 2))
            for i in range(n):
                gx = goals[i, 0] - pos[i, 0]
                gy = goals[i, 1] - pos[i, 1]
                g_dist = math.hypot(gx, gy)
                if g_dist > goal_tol:
                    dvx = desired_speed[i] * gx / g_dist - vel[i, 0]
                    dvy = desired_speed[i] * gy / g_dist - vel[i, 1]
                else:
                    dvx = -vel[i, 0]
                    dvy = -vel[i, 1]
                acc[i, 0] = dvx / tau
                acc[i, 1] = dvy / tau
                for j in range(n):
                    if j == i:
                        continue
                    rx = pos[i, 0] - pos[j, 0]
                    ry = pos[i, 1] - pos[j, 1]
                    d = math.hypot(rx, ry)
                    if d < _TINY:
                        continue
                    f = strength * math.exp(-d / rng_decay) / d
                    acc[i, 0] += f * rx
                    acc[i, 1] += f * ry
            for i in range(n):
                vel[i, 0] += acc[i, 0] * h
                vel[i, 1] += acc[i, 1] * h
                speed = math.hypot(vel[i, 0], vel[i, 1])
                if speed > speed_cap:
                    vel[i, 0] *= speed_cap / speed
                    vel[i, 1] *= speed_cap / speed
                pos[i, 0] += vel[i, 0] * h
                pos[i, 1] += vel[i, 1] * h
        frames[t] = pos
    return frames


def integrate_social_force_numpy(
    pos0, vel0, goals, desired_speed, n_frames, dt, tau, strength, rng_decay, goal_tol,
    speed_cap, substeps,
):
    """Vectorized twin of :func:`integrate_social_force_numba_impl`."""
    n = pos0.shape[0]
    h = dt / substeps
    frames = np.zeros((n_frames, n, 2))
    pos = pos0.copy()
    vel = vel0.copy()
    frames[0] = pos
    for t in range(1, n_frames):
        for _s in range(substeps):
            to_goal = goals - pos
            g_dist = np.linalg.norm(to_goal, axis=1)
            desired_vel = np.where(
                (g_dist > goal_tol)[:, None],
                desired_speed[:, None] * to_goal / np.maximum(g_dist, _TINY)[:, None],
                0.0,
            )
            acc = (desired_vel - vel) / tau
            rel = pos[:, None, :] - pos[None, :, :]  # (N, N, 2), i minus j
            d = np.linalg.norm(rel, axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.where((d >= _TINY), strength * np.exp(-d / rng_decay) / d, 0.0)
            np.fill_diagonal(f, 0.0)
            acc = acc + np.einsum("ij,ijc->ic", f, rel)
            vel = vel + acc * h
            speed = np.linalg.norm(vel, axis=1)
            over = speed > speed_cap
            vel[over] *= (speed_cap / speed[over])[:, None]
            pos = pos + vel * h
        frames[t] = pos
    return frames


# ---------------------------------------------------------------------------
# Interpolated separation (collision metric)
# ---------------------------------------------------------------------------

def min_interp_distance_numba_impl(track_a, track_b, substeps):
    """Min distance between two equal-length tracks under linear interpolation.

    Each segment is sampled at fractions i/substeps, i = 0..substeps.
    """
    n = track_a.shape[0]
    best = math.hypot(track_a[0, 0] - track_b[0, 0], track_a[0, 1] - track_b[0, 1])
    for s in range(n - 1):
        d0x = track_a[s, 0] - track_b[s, 0]
        d0y = track_a[s, 1] - track_b[s, 1]
        d1x = track_a[s + 1, 0] - track_b[s + 1, 0]
        d1y = track_a[s + 1, 1] - track_b[s + 1, 1]
        for i in range(substeps + 1):
            f = i / substeps
            d = math.hypot(d0x + f * (d1x - d0x), d0y + f * (d1y - d0y))
            if d < best:
                best = d
    return best


def min_interp_distance_numpy(track_a, track_b, substeps):
    """Vectorized twin of :func:`min_interp_distance_numba_impl`."""
    diff = track_a - track_b  # (S, 2)
    if len(diff) == 1:
        return float(np.linalg.norm(diff[0]))
    f = np.linspace(0.0, 1.0, substeps + 1)  # (F,)
    interp = diff[:-1, None, :] + f[None, :, None] * (diff[1:, None, :] - diff[:-1, None, :])
    return float(np.min(np.linalg.norm(interp, axis=2)))


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    _wrap_angle = njit(cache=True, inline="always")(_wrap_angle)
    feature_table_numba = njit(cache=True)(feature_table_numba_impl)
    pool_grid_numba = njit(cache=True)(pool_grid_numba_impl)
    integrate_social_force_numba = njit(cache=True)(integrate_social_force_numba_impl)
    min_interp_distance_numba = njit(cache=True)(min_interp_distance_numba_impl)

    feature_table = feature_table_numba
    pool_grid = pool_grid_numba
    integrate_social_force = integrate_social_force_numba
    min_interp_distance = min_interp_distance_numba
else:
    feature_table_numba = feature_table_numba_impl
    pool_grid_numba = pool_grid_numba_impl
    integrate_social_force_numba = integrate_social_force_numba_impl
    min_interp_distance_numba = min_interp_distance_numba_impl

    feature_table = feature_table_numpy
    pool_grid = pool_grid_numpy
    integrate_social_force = integrate_social_force_numpy
    min_interp_distance = min_interp_distance_numpy
