"""Compiled inner loops (numba) for exact point-to-mesh distance queries."""
import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, t):
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    abx, aby, abz = t[1, 0] - ax, t[1, 1] - ay, t[1, 2] - az
    acx, acy, acz = t[2, 0] - ax, t[2, 1] - ay, t[2, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - t[1, 0], py - t[1, 1], pz - t[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return t[1, 0], t[1, 1], t[1, 2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - t[2, 0], py - t[2, 1], pz - t[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return t[2, 0], t[2, 1], t[2, 2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (t[1, 0] + w * (t[2, 0] - t[1, 0]),
                t[1, 1] + w * (t[2, 1] - t[1, 1]),
                t[1, 2] + w * (t[2, 2] - t[1, 2]))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@numba.njit(cache=True)
def closest_grouped(points, tri, order, starts, lo, hi, seed_group):
    """Exact closest point per query using per-group AABB lower bounds.

    ``order[starts[g]:starts[g+1]]`` lists the triangles of group ``g``;
    ``seed_group[i]`` is visited first to get a tight initial bound.
    """
    n = points.shape[0]
    n_groups = starts.shape[0] - 1
    out_q = np.empty((n, 3))
    out_d = np.empty(n)
    out_f = np.empty(n, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bq0 = bq1 = bq2 = 0.0
        bf = -1
        first = seed_group[i]
        for step in range(n_groups + 1):
            if step == 0:
                g = first
            else:
                g = step - 1
                if g == first:
                    continue
                dx = max(lo[g, 0] - px, 0.0, px - hi[g, 0])
                dy = max(lo[g, 1] - py, 0.0, py - hi[g, 1])
                dz = max(lo[g, 2] - pz, 0.0, pz - hi[g, 2])
                if dx * dx + dy * dy + dz * dz >= best:
                    continue
            for s in range(starts[g], starts[g + 1]):
                f = order[s]
                qx, qy, qz = _closest_on_triangle(px, py, pz, tri[f])
                d2 = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
                if d2 < best:
                    best = d2
                    bq0, bq1, bq2 = qx, qy, qz
                    bf = f
        out_q[i, 0], out_q[i, 1], out_q[i, 2] = bq0, bq1, bq2
        out_d[i] = np.sqrt(best)
        out_f[i] = bf
    return out_q, out_d, out_f


# ---------------------------------------------------------------------------
# axis-angle forward kinematics with a hand-written reverse pass

@numba.njit(cache=True, inline="always")
def _rodrigues_coeffs(t2):
    # A = sin t / t, B = (1 - cos t) / t^2 and their derivatives w.r.t. t^2
    if t2 < 1e-4:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 6.0 + t2 / 60.0 - t2 * t2 / 1680.0
        db = -1.0 / 24.0 + t2 / 360.0 - t2 * t2 / 13440.0
    else:
        t = np.sqrt(t2)
        s, c = np.sin(t), np.cos(t)
        a = s / t
        b = (1.0 - c) / t2
        da = (t * c - s) / (2.0 * t2 * t)
        db = (t * s - 2.0 * (1.0 - c)) / (2.0 * t2 * t2)
    return a, b, da, db


@numba.njit(cache=True)
def _rodrigues(v, out):
    x, y, z = v[0], v[1], v[2]
    a, b, _, _ = _rodrigues_coeffs(x * x + y * y + z * z)
    out[0, 0] = 1.0 - b * (y * y + z * z)
    out[1, 1] = 1.0 - b * (x * x + z * z)
    out[2, 2] = 1.0 - b * (x * x + y * y)
    out[0, 1] = -a * z + b * x * y
    out[1, 0] = a * z + b * x * y
    out[0, 2] = a * y + b * x * z
    out[2, 0] = -a * y + b * x * z
    out[1, 2] = -a * x + b * y * z
    out[2, 1] = a * x + b * y * z


@numba.njit(cache=True, inline="always")
def _hat(i, j, x, y, z):
    if i == j:
        return 0.0
    if i == 0:
        return -z if j == 1 else y
    if i == 1:
        return z if j == 0 else -x
    return -y if j == 0 else x


@numba.njit(cache=True)
def _rodrigues_vjp(v, m, out):
    """Pull back dL/dR (3x3 ``m``) to dL/dv for R = exp(hat(v))."""
    x, y, z = v[0], v[1], v[2]
    t2 = x * x + y * y + z * z
    a, b, da, db = _rodrigues_coeffs(t2)
    vm0 = m[2, 1] - m[1, 2]
    vm1 = m[0, 2] - m[2, 0]
    vm2 = m[1, 0] - m[0, 1]
    mk = x * vm0 + y * vm1 + z * vm2
    # <M, K^2> with K^2 = v v^T - t^2 I
    vmv = 0.0
    for i in range(3):
        for j in range(3):
            vmv += v[i] * m[i, j] * v[j]
    mk2 = vmv - t2 * (m[0, 0] + m[1, 1] + m[2, 2])
    # N = M K^T + K^T M = -(M K + K M); only its skew part is needed
    n21 = n12 = n02 = n20 = n10 = n01 = 0.0
    for q in range(3):
        n21 -= m[2, q] * _hat(q, 1, x, y, z) + _hat(2, q, x, y, z) * m[q, 1]
        n12 -= m[1, q] * _hat(q, 2, x, y, z) + _hat(1, q, x, y, z) * m[q, 2]
        n02 -= m[0, q] * _hat(q, 2, x, y, z) + _hat(0, q, x, y, z) * m[q, 2]
        n20 -= m[2, q] * _hat(q, 0, x, y, z) + _hat(2, q, x, y, z) * m[q, 0]
        n10 -= m[1, q] * _hat(q, 0, x, y, z) + _hat(1, q, x, y, z) * m[q, 0]
        n01 -= m[0, q] * _hat(q, 1, x, y, z) + _hat(0, q, x, y, z) * m[q, 1]
    common = 2.0 * (da * mk + db * mk2)
    out[0] = common * x + a * vm0 + b * (n21 - n12)
    out[1] = common * y + a * vm1 + b * (n02 - n20)
    out[2] = common * z + a * vm2 + b * (n10 - n01)


@numba.njit(cache=True)
def fk_forward(theta, orient, transl, parents, offsets):
    """Batched FK. theta (B,J-1,3), offsets (B,J,3) in parent frames.

    Returns joint positions (B,J,3), global frames (B,J,3,3), local rotations (B,J,3,3).
    """
    nb = theta.shape[0]
    nj = parents.shape[0]
    pos = np.zeros((nb, nj, 3))
    glob = np.zeros((nb, nj, 3, 3))
    loc = np.zeros((nb, nj, 3, 3))
    for bi in range(nb):
        _rodrigues(orient[bi], loc[bi, 0])
        glob[bi, 0] = loc[bi, 0]
        pos[bi, 0] = transl[bi]
        for j in range(1, nj):
            p = parents[j]
            _rodrigues(theta[bi, j - 1], loc[bi, j])
            gp = glob[bi, p]
            for r in range(3):
                acc = pos[bi, p, r]
                for c in range(3):
                    acc += gp[r, c] * offsets[bi, j, c]
                    s = 0.0
                    for q in range(3):
                        s += gp[r, q] * loc[bi, j, q, c]
                    glob[bi, j, r, c] = s
                pos[bi, j, r] = acc
    return pos, glob, loc


@numba.njit(cache=True)
def fk_backward(theta, orient, glob, loc, parents, offsets, g_pos, g_glob):
    nb = theta.shape[0]
    nj = parents.shape[0]
    d_theta = np.zeros(theta.shape)
    d_orient = np.zeros((nb, 3))
    d_transl = np.zeros((nb, 3))
    gp_acc = np.empty((nj, 3))
    gg_acc = np.empty((nj, 3, 3))
    g_loc = np.empty((3, 3))
    for bi in range(nb):
        gp_acc[:] = g_pos[bi]
        gg_acc[:] = g_glob[bi]
        for j in range(nj - 1, 0, -1):
            p = parents[j]
            gpar = glob[bi, p]
            rj = loc[bi, j]
            for r in range(3):
                gp_acc[p, r] += gp_acc[j, r]
                for c in range(3):
                    s = gp_acc[j, r] * offsets[bi, j, c]
                    for q in range(3):
                        s += gg_acc[j, r, q] * rj[c, q]
                    gg_acc[p, r, c] += s
            for r in range(3):
                for c in range(3):
                    s = 0.0
                    for q in range(3):
                        s += gpar[q, r] * gg_acc[j, q, c]
                    g_loc[r, c] = s
            _rodrigues_vjp(theta[bi, j - 1], g_loc, d_theta[bi, j - 1])
        _rodrigues_vjp(orient[bi], gg_acc[0], d_orient[bi])
        d_transl[bi] = gp_acc[0]
    return d_theta, d_orient, d_transl


@numba.njit(cache=True)
def chamfer_forward(tips, points, mask):
    """Per-hand squared Chamfer with means both ways, and its gradient in the tips.

    tips (B,N,H,T,3); points (B,H,K,3) with validity mask (B,H,K), shared by all N
    frames. Returns values (B,N,H) and d value / d tips (B,N,H,T,3). Nearest
    neighbours take the first minimum, as a linear scan does.
    """
    nb, nf, nh, nt = tips.shape[0], tips.shape[1], tips.shape[2], tips.shape[3]
    nk = points.shape[2]
    val = np.zeros((nb, nf, nh))
    grad = np.zeros(tips.shape)
    d2 = np.empty((nt, nk))
    for b in range(nb):
        for h in range(nh):
            count = 0
            for k in range(nk):
                if mask[b, h, k]:
                    count += 1
            if count == 0:
                continue
            for n in range(nf):
                for t in range(nt):
                    for k in range(nk):
                        dx = tips[b, n, h, t, 0] - points[b, h, k, 0]
                        dy = tips[b, n, h, t, 1] - points[b, h, k, 1]
                        dz = tips[b, n, h, t, 2] - points[b, h, k, 2]
                        d2[t, k] = dx * dx + dy * dy + dz * dz
                fwd = 0.0
                for t in range(nt):
                    best = -1
                    for k in range(nk):
                        if mask[b, h, k] and (best < 0 or d2[t, k] < d2[t, best]):
                            best = k
                    fwd += d2[t, best]
                    for c in range(3):
                        grad[b, n, h, t, c] += 2.0 * (tips[b, n, h, t, c] - points[b, h, best, c]) / nt
                bwd = 0.0
                for k in range(nk):
                    if not mask[b, h, k]:
                        continue
                    best = 0
                    for t in range(1, nt):
                        if d2[t, k] < d2[best, k]:
                            best = t
                    bwd += d2[best, k]
                    for c in range(3):
                        grad[b, n, h, best, c] += 2.0 * (tips[b, n, h, best, c] - points[b, h, k, c]) / count
                val[b, n, h] = fwd / nt + bwd / count
    return val, grad
