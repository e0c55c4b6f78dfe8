# Compiled kernels: bilinear grid warp, SAT rectangle overlap, TTC sweep.
# Must match ../_kernels/reference.py semantics exactly.

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, floor, sin

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline double _sample_one(const double[:, :, ::1] values, int c,
                               double u, double v, int h, int w,
                               double fill) noexcept nogil:
    cdef long u0 = <long>floor(u)
    cdef long v0 = <long>floor(v)
    cdef double fu = u - u0
    cdef double fv = v - v0
    cdef double acc = 0.0
    cdef double wgt, val
    cdef long uu, vv
    cdef int du, dv
    for dv in range(2):
        for du in range(2):
            uu = u0 + du
            vv = v0 + dv
            wgt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
            if 0 <= uu < w and 0 <= vv < h:
                val = values[c, vv, uu]
            else:
                val = fill
            acc += wgt * val
    return acc


def bilinear_sample(const double[:, :, ::1] values, u, v, double fill=0.0):
    cdef int c = values.shape[0]
    cdef int h = values.shape[1]
    cdef int w = values.shape[2]
    u_arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v_arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    shape = u_arr.shape
    cdef double[::1] uf = np.ascontiguousarray(u_arr.ravel())
    cdef double[::1] vf = np.ascontiguousarray(v_arr.ravel())
    cdef Py_ssize_t n = uf.shape[0]
    out_arr = np.empty((c, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i
    cdef int ch
    with nogil:
        for i in range(n):
            for ch in range(c):
                out[ch, i] = _sample_one(values, ch, uf[i], vf[i], h, w, fill)
    out_arr = out_arr.reshape((c,) + shape)
    if np.isscalar(u) or (hasattr(u, "shape") and getattr(u, "shape", None) == ()):
        return out_arr.reshape(c)
    return out_arr


def warp_bilinear(const double[:, :, ::1] values, const double[:, ::1] m,
                  double cell, double fill=0.0):
    cdef int c = values.shape[0]
    cdef int h = values.shape[1]
    cdef int w = values.shape[2]
    out_arr = np.empty((c, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double m00 = m[0, 0], m01 = m[0, 1], m02 = m[0, 2]
    cdef double m10 = m[1, 0], m11 = m[1, 1], m12 = m[1, 2]
    cdef double half_w = w / 2.0, half_h = h / 2.0
    cdef double x, y, qx, qy, su, sv
    cdef int iu, iv, ch
    with nogil:
        for iv in range(h):
            y = (iv + 0.5 - half_h) * cell
            for iu in range(w):
                x = (iu + 0.5 - half_w) * cell
                qx = m00 * x + m01 * y + m02
                qy = m10 * x + m11 * y + m12
                su = qx / cell + half_w - 0.5
                sv = qy / cell + half_h - 0.5
                for ch in range(c):
                    out[ch, iv, iu] = _sample_one(values, ch, su, sv, h, w, fill)
    return out_arr


cdef inline bint _obb_overlap(double ax, double ay, double ayaw,
                              double ahl, double ahw,
                              double bx, double by, double byaw,
                              double bhl, double bhw) noexcept nogil:
    # SAT over the 4 face normals; touching counts as overlap.
    cdef double ca = cos(ayaw), sa = sin(ayaw)
    cdef double cb = cos(byaw), sb = sin(byaw)
    cdef double dx = bx - ax, dy = by - ay
    cdef double axes[4][2]
    axes[0][0] = ca; axes[0][1] = sa
    axes[1][0] = -sa; axes[1][1] = ca
    axes[2][0] = cb; axes[2][1] = sb
    axes[3][0] = -sb; axes[3][1] = cb
    cdef int i
    cdef double nx, ny, dist, ra, rb
    for i in range(4):
        nx = axes[i][0]; ny = axes[i][1]
        dist = dx * nx + dy * ny
        if dist < 0.0:
            dist = -dist
        ra = ahl * abs_d(ca * nx + sa * ny) + ahw * abs_d(-sa * nx + ca * ny)
        rb = bhl * abs_d(cb * nx + sb * ny) + bhw * abs_d(-sb * nx + cb * ny)
        if dist > ra + rb:
            return False
    return True


cdef inline double abs_d(double x) noexcept nogil:
    return -x if x < 0.0 else x


def obb_overlap(double ax, double ay, double ayaw, double al, double aw,
                double bx, double by, double byaw, double bl, double bw):
    return bool(_obb_overlap(ax, ay, ayaw, al / 2.0, aw / 2.0,
                             bx, by, byaw, bl / 2.0, bw / 2.0))


def ttc_first_hit(const double[:, ::1] ego_poses, double ego_l, double ego_w,
                  const double[:, :, ::1] agent_poses,
                  const double[:, ::1] agent_dims):
    cdef Py_ssize_t n_steps = ego_poses.shape[0]
    cdef Py_ssize_t n_agents = agent_poses.shape[0]
    cdef Py_ssize_t k, a
    cdef double ehl = ego_l / 2.0, ehw = ego_w / 2.0
    with nogil:
        for k in range(n_steps):
            for a in range(n_agents):
                if _obb_overlap(ego_poses[k, 0], ego_poses[k, 1], ego_poses[k, 2],
                                ehl, ehw,
                                agent_poses[a, k, 0], agent_poses[a, k, 1],
                                agent_poses[a, k, 2],
                                agent_dims[a, 0] / 2.0, agent_dims[a, 1] / 2.0):
                    with gil:
                        return k
    return -1
