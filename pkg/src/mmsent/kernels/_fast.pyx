# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as reference.py, plain C loops."""

import numpy as np

from libc.math cimport exp as c_exp, tanh as c_tanh

BACKEND = "compiled"


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + c_exp(-x))
    e = c_exp(x)
    return e / (1.0 + e)


def lstm_forward(double[:, ::1] x, double[:, ::1] w, double[::1] b,
                 double[::1] h0, double[::1] c0):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t I = x.shape[1]
    cdef Py_ssize_t H = h0.shape[0]
    cdef Py_ssize_t t, r, j
    cdef double s, iv, fv, ov, gv, cv

    hs_arr = np.empty((T, H))
    cs_arr = np.empty((T, H))
    gates_arr = np.empty((T, 4 * H))
    z_arr = np.empty(4 * H)
    h_arr = np.array(h0, copy=True)
    c_arr = np.array(c0, copy=True)

    cdef double[:, ::1] hs = hs_arr
    cdef double[:, ::1] cs = cs_arr
    cdef double[:, ::1] gates = gates_arr
    cdef double[::1] z = z_arr
    cdef double[::1] h = h_arr
    cdef double[::1] c = c_arr

    with nogil:
        for t in range(T):
            for r in range(4 * H):
                s = b[r]
                for j in range(I):
                    s += w[r, j] * x[t, j]
                for j in range(H):
                    s += w[r, I + j] * h[j]
                z[r] = s
            for j in range(H):
                iv = _sig(z[j])
                fv = _sig(z[H + j])
                ov = _sig(z[2 * H + j])
                gv = c_tanh(z[3 * H + j])
                cv = fv * c[j] + iv * gv
                c[j] = cv
                h[j] = ov * c_tanh(cv)
                hs[t, j] = h[j]
                cs[t, j] = cv
                gates[t, j] = iv
                gates[t, H + j] = fv
                gates[t, 2 * H + j] = ov
                gates[t, 3 * H + j] = gv
    return hs_arr, cs_arr, gates_arr


def lstm_backward(double[:, ::1] x, double[:, ::1] w,
                  double[::1] h0, double[::1] c0,
                  double[:, ::1] hs, double[:, ::1] cs,
                  double[:, ::1] gates, double[:, ::1] d_hs):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t I = x.shape[1]
    cdef Py_ssize_t H = h0.shape[0]
    cdef Py_ssize_t t, r, j
    cdef double iv, fv, ov, gv, tc, do, dct, zr, cp

    dx_arr = np.zeros((T, I))
    dw_arr = np.zeros((4 * H, I + H))
    db_arr = np.zeros(4 * H)
    dh_arr = np.zeros(H)
    dc_arr = np.zeros(H)
    dz_arr = np.empty(4 * H)

    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[::1] dh = dh_arr
    cdef double[::1] dc = dc_arr
    cdef double[::1] dz = dz_arr
    cdef double[::1] hp, cpv

    for t in range(T - 1, -1, -1):
        hp = hs[t - 1] if t > 0 else h0
        cpv = cs[t - 1] if t > 0 else c0
        with nogil:
            for j in range(H):
                dh[j] = dh[j] + d_hs[t, j]
            for j in range(H):
                iv = gates[t, j]
                fv = gates[t, H + j]
                ov = gates[t, 2 * H + j]
                gv = gates[t, 3 * H + j]
                cp = cpv[j]
                tc = c_tanh(cs[t, j])
                do = dh[j] * tc
                dct = dh[j] * ov * (1.0 - tc * tc) + dc[j]
                dz[j] = dct * gv * iv * (1.0 - iv)
                dz[H + j] = dct * cp * fv * (1.0 - fv)
                dz[2 * H + j] = do * ov * (1.0 - ov)
                dz[3 * H + j] = dct * iv * (1.0 - gv * gv)
                dc[j] = dct * fv
                dh[j] = 0.0
            for r in range(4 * H):
                zr = dz[r]
                db[r] += zr
                for j in range(I):
                    dw[r, j] += zr * x[t, j]
                    dx[t, j] += zr * w[r, j]
                for j in range(H):
                    dw[r, I + j] += zr * hp[j]
                    dh[j] += zr * w[r, I + j]
    return dx_arr, dw_arr, db_arr, dh_arr, dc_arr


def conv1d_forward(double[:, ::1] x, double[:, :, ::1] w, double[::1] b,
                   Py_ssize_t stride, Py_ssize_t pad_left, Py_ssize_t pad_right):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t Co = w.shape[2]
    cdef Py_ssize_t To = (T + pad_left + pad_right - K) // stride + 1
    cdef Py_ssize_t tout, k, ci, co, tin, base
    cdef double xv

    y_arr = np.empty((To, Co))
    cdef double[:, ::1] y = y_arr

    with nogil:
        for tout in range(To):
            base = tout * stride - pad_left
            for co in range(Co):
                y[tout, co] = b[co]
            for k in range(K):
                tin = base + k
                if tin < 0 or tin >= T:
                    continue
                for ci in range(Ci):
                    xv = x[tin, ci]
                    for co in range(Co):
                        y[tout, co] += xv * w[k, ci, co]
    return y_arr


def conv1d_backward(double[:, ::1] x, double[:, :, ::1] w,
                    Py_ssize_t stride, Py_ssize_t pad_left, Py_ssize_t pad_right,
                    double[:, ::1] d_y):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t Co = w.shape[2]
    cdef Py_ssize_t To = d_y.shape[0]
    cdef Py_ssize_t tout, k, ci, co, tin, base
    cdef double xv, s, g

    dx_arr = np.zeros((T, Ci))
    dw_arr = np.zeros((K, Ci, Co))
    db_arr = np.zeros(Co)
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr

    with nogil:
        for tout in range(To):
            base = tout * stride - pad_left
            for co in range(Co):
                db[co] += d_y[tout, co]
            for k in range(K):
                tin = base + k
                if tin < 0 or tin >= T:
                    continue
                for ci in range(Ci):
                    xv = x[tin, ci]
                    s = 0.0
                    for co in range(Co):
                        g = d_y[tout, co]
                        dw[k, ci, co] += xv * g
                        s += g * w[k, ci, co]
                    dx[tin, ci] += s
    return dx_arr, dw_arr, db_arr
