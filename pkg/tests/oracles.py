"""Independent brute-force reference implementations used by the tests.

Everything in this file is deliberately written as plain loops over scalars
(or transparent one-liners) so it shares no code path with the package
implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np


def homogeneous(rotation, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def ray_box_hit_scalar(origin, direction, center, half, yaw):
    """Slab test of one ray against one yaw-rotated box. Returns entry/exit
    parameters (t_in, t_out) or None."""
    c, s = math.cos(-yaw), math.sin(-yaw)
    ox, oy, oz = (np.asarray(origin, dtype=float) - np.asarray(center, dtype=float))
    ox, oy = c * ox - s * oy, s * ox + c * oy
    dx, dy, dz = direction
    dx, dy = c * dx - s * dy, s * dx + c * dy
    t_in, t_out = -math.inf, math.inf
    for o, d, h in ((ox, dx, half[0]), (oy, dy, half[1]), (oz, dz, half[2])):
        if abs(d) < 1e-300:
            if o < -h or o > h:
                return None
            continue
        t1, t2 = (-h - o) / d, (h - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_in = max(t_in, t1)
        t_out = min(t_out, t2)
        if t_in > t_out:
            return None
    return t_in, t_out


def nearest_hit_scalar(scene, origin, direction, t, max_range):
    """Closest intersection of a ray with the scene at time t (boxes +
    ground), or None. Pure per-box loop."""
    best = math.inf
    for box in scene.boxes:
        center = np.asarray(box.center) + np.asarray(box.velocity) * t
        hit = ray_box_hit_scalar(origin, direction, center, box.half_extents, box.yaw)
        if hit is not None:
            t_in, t_out = hit
            if t_out >= 1e-9 and t_in <= max_range:
                r = t_in if t_in > 1e-9 else t_out
                if 1e-9 < r < best:
                    best = r
    dz = direction[2]
    if dz < -1e-300:
        rg = (scene.ground_z - origin[2]) / dz
        if 1e-9 < rg < best:
            best = rg
    if best <= max_range:
        return best
    return None


def segment_voxel_overlap(p0, p1, vmin, vmax, eps=1e-12) -> bool:
    """True when the segment p0->p1 spends positive length inside the closed
    voxel [vmin, vmax]. Scalar slab test clipped to the segment."""
    t_lo, t_hi = 0.0, 1.0
    for k in range(3):
        d = p1[k] - p0[k]
        if abs(d) < 1e-300:
            if p0[k] < vmin[k] or p0[k] > vmax[k]:
                return False
            continue
        t1 = (vmin[k] - p0[k]) / d
        t2 = (vmax[k] - p0[k]) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_lo = max(t_lo, t1)
        t_hi = min(t_hi, t2)
        if t_lo >= t_hi:
            return False
    return (t_hi - t_lo) > eps


def pr_curve_bruteforce(scores, labels):
    """All (precision, recall) operating points from an O(n^2) sweep over
    every distinct threshold, in descending-threshold order."""
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    n_pos = sum(labels)
    points = []
    for thr in sorted(set(scores), reverse=True):
        tp = fp = 0
        for s, y in zip(scores, labels):
            if s >= thr:
                if y == 1:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / n_pos if n_pos > 0 else 0.0
        points.append((thr, precision, recall))
    return points


def recall_at_precision_bruteforce(scores, labels, target):
    best_recall, best_thr = 0.0, math.inf
    for thr, precision, recall in pr_curve_bruteforce(scores, labels):
        if precision >= target and (
            recall > best_recall or (recall == best_recall and thr < best_thr and best_recall > 0.0)
        ):
            best_recall, best_thr = recall, thr
    return best_recall, best_thr


def average_precision_bruteforce(scores, labels):
    ap = 0.0
    prev_recall = 0.0
    for _, precision, recall in pr_curve_bruteforce(scores, labels):
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def soft_iou_loop(probs, labels):
    inter = 0.0
    sp = 0.0
    sy = 0.0
    for p, y in zip(probs, labels):
        inter += float(p) * float(y)
        sp += float(p)
        sy += float(y)
    denom = sp + sy - inter
    if denom == 0.0:
        return 1.0 if (sp == 0.0 and sy == 0.0) else 0.0
    return inter / denom


def point_segment_dist_xy(q, a, b) -> float:
    """Exact x-y distance from point q to segment a->b, plain scalars."""
    qx, qy = float(q[0]), float(q[1])
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den == 0.0:
        return math.hypot(qx - ax, qy - ay)
    t = ((qx - ax) * dx + (qy - ay) * dy) / den
    t = min(1.0, max(0.0, t))
    return math.hypot(qx - (ax + t * dx), qy - (ay + t * dy))


def polyline_dist_xy(q, vertices) -> float:
    """Exact x-y distance from q to a polyline given as an (N,3) array."""
    best = math.inf
    if len(vertices) == 1:
        return point_segment_dist_xy(q, vertices[0], vertices[0])
    for i in range(len(vertices) - 1):
        best = min(best, point_segment_dist_xy(q, vertices[i], vertices[i + 1]))
    return best


def splat_zbuffer(pixel_u, pixel_v, depths, width, height):
    """Point-splat z-buffer: per-pixel minimum depth over all points, built
    with a plain loop. Pixels with no point stay at +inf."""
    buf = [[math.inf] * width for _ in range(height)]
    for u, v, z in zip(pixel_u, pixel_v, depths):
        if 0 <= u < width and 0 <= v < height and z < buf[v][u]:
            buf[v][u] = z
    return buf


def central_difference(f, x0, h=1e-5):
    """Scalar central difference of f at x0."""
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def ks_statistic_uniform(samples) -> float:
    """Kolmogorov-Smirnov distance between samples and U(0,1)."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = len(xs)
    cdf_hi = np.arange(1, n + 1) / n
    cdf_lo = np.arange(0, n) / n
    return float(max(np.abs(cdf_hi - xs).max(), np.abs(xs - cdf_lo).max()))
