"""Pure-numpy reference implementations of the hot kernels.

Semantics here are the contract; the Cython backend in ``_core.pyx`` must
agree bit-for-bit on integer outputs and to float rounding on the rest.
Grid layout: values are (C, H, W) float64, row v indexes y, column u
indexes x, cell (v, u) has metric center
``x = (u + 0.5 - W/2) * cell``, ``y = (v + 0.5 - H/2) * cell``.
"""

import numpy as np

BACKEND_NAME = "numpy"


def bilinear_sample(values, u, v, fill=0.0):
    """Zero-padded bilinear sample of an (C, H, W) grid at cell coords (u, v).

    u/v may be scalars or arrays; returns (C,) or (C,) + u.shape.
    Samples falling outside the grid blend with ``fill``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c, h, w = values.shape
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0

    out = np.zeros((c,) + u.shape, dtype=np.float64)
    for dv in (0, 1):
        for du in (0, 1):
            uu = u0 + du
            vv = v0 + dv
            wgt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            uu_c = np.clip(uu, 0, w - 1)
            vv_c = np.clip(vv, 0, h - 1)
            vals = values[:, vv_c, uu_c]
            vals = np.where(inside, vals, fill)
            out += wgt * vals
    return out


def warp_bilinear(values, m, cell, fill=0.0):
    """Inverse-warp an (C, H, W) grid: out cell at metric p samples input at m·p."""
    c, h, w = values.shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    x = (uu + 0.5 - w / 2.0) * cell
    y = (vv + 0.5 - h / 2.0) * cell
    qx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    qy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    su = qx / cell + w / 2.0 - 0.5
    sv = qy / cell + h / 2.0 - 0.5
    return bilinear_sample(values, su, sv, fill)


def obb_overlap(ax_, ay_, ayaw, al, aw, bx, by, byaw, bl, bw):
    """Separating-axis test for two oriented rectangles; touching counts as overlap.

    Projects the center offset and both half-extent radii onto the 4 face
    normals; a gap strictly larger than the radius sum on any axis separates.
    """
    ahl, ahw = al / 2.0, aw / 2.0
    bhl, bhw = bl / 2.0, bw / 2.0
    ca, sa = np.cos(ayaw), np.sin(ayaw)
    cb, sb = np.cos(byaw), np.sin(byaw)
    dx, dy = bx - ax_, by - ay_
    for nx, ny in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = abs(dx * nx + dy * ny)
        ra = ahl * abs(ca * nx + sa * ny) + ahw * abs(-sa * nx + ca * ny)
        rb = bhl * abs(cb * nx + sb * ny) + bhw * abs(-sb * nx + cb * ny)
        if dist > ra + rb:
            return False
    return True


def ttc_first_hit(ego_poses, ego_l, ego_w, agent_poses, agent_dims):
    """First look-ahead index k at which the ego rectangle hits any agent.

    ego_poses: (K, 3) [x, y, yaw]; agent_poses: (N, K, 3); agent_dims: (N, 2).
    Returns the smallest k with an overlap, or -1 if none.
    """
    n_steps = ego_poses.shape[0]
    n_agents = agent_poses.shape[0]
    for k in range(n_steps):
        ex, ey, eyaw = ego_poses[k]
        for a in range(n_agents):
            px, py, pyaw = agent_poses[a, k]
            if obb_overlap(ex, ey, eyaw, ego_l, ego_w,
                           px, py, pyaw, agent_dims[a, 0], agent_dims[a, 1]):
                return k
    return -1
