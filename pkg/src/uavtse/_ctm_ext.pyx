# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ensemble CTM kernel. Mirrors ``_ctm_py.ctm_step_counts``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _fmin(double a, double b) nogil:
    return a if a < b else b


cdef inline double _fmax(double a, double b) nogil:
    return a if a > b else b


def ctm_step_counts(n, v, rho_cr, rho_j, double dx, double dt, double inflow,
                    Py_ssize_t offramp_cell, double split, bint open_downstream,
                    bint clamp, double ramp_cap=float("inf")):
    cdef bint squeeze = False
    arr = np.asarray(n, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
        squeeze = True
    arr = np.ascontiguousarray(arr)

    cdef double[:, ::1] cn = arr
    cdef double[::1] cv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] ccr = np.ascontiguousarray(rho_cr, dtype=np.float64)
    cdef double[::1] cj = np.ascontiguousarray(rho_j, dtype=np.float64)
    cdef Py_ssize_t k = cn.shape[0]
    cdef Py_ssize_t m = cn.shape[1]

    out = np.empty((k, m), dtype=np.float64)
    bnd = np.zeros((3, m), dtype=np.float64)
    cdef double[:, ::1] cout = out
    cdef double[:, ::1] cb = bnd

    send_arr = np.empty(k, dtype=np.float64)
    recv_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] send = send_arr
    cdef double[::1] recv = recv_arr
    cdef double[::1] sfac = np.empty(k, dtype=np.float64)
    cdef double[::1] rfac = np.empty(k, dtype=np.float64)
    cdef double[::1] cap = np.empty(k, dtype=np.float64)

    cdef Py_ssize_t i, j
    cdef double w, y, total, prev_out, hi, val
    cdef bint has_ramp = 0 <= offramp_cell < k - 1 and split > 0.0

    with nogil:
        for i in range(k):
            w = cv[i] * ccr[i] / (cj[i] - ccr[i])
            sfac[i] = cv[i] * dt / dx
            rfac[i] = w * dt / dx
            cap[i] = cv[i] * ccr[i] * dt

        for j in range(m):
            for i in range(k):
                send[i] = sfac[i] * cn[i, j]
                recv[i] = rfac[i] * (cj[i] * dx - cn[i, j])
                if clamp:
                    send[i] = _fmin(send[i], cap[i])
                    recv[i] = _fmin(recv[i], cap[i])
                recv[i] = _fmax(recv[i], 0.0)
                send[i] = _fmax(send[i], 0.0)

            # y: vehicles entering cell i; prev_out carried to the next cell
            y = _fmin(inflow, recv[0])
            cb[0, j] = y
            for i in range(k):
                if i == k - 1:
                    if open_downstream:
                        prev_out = send[i]
                    else:
                        prev_out = 0.0
                    cb[2, j] = prev_out
                    total = prev_out
                elif has_ramp and i == offramp_cell:
                    if split < 1.0:
                        total = _fmin(send[i], recv[i + 1] / (1.0 - split))
                    else:
                        total = send[i]
                    total = _fmin(total, ramp_cap / split)
                    prev_out = (1.0 - split) * total
                    cb[1, j] = total - prev_out
                else:
                    total = _fmin(send[i], recv[i + 1])
                    prev_out = total
                val = cn[i, j] + y - total
                hi = cj[i] * dx
                if val < 0.0:
                    val = 0.0
                elif val > hi:
                    val = hi
                cout[i, j] = val
                y = prev_out

    if squeeze:
        return out[:, 0], bnd[:, 0]
    return out, bnd
