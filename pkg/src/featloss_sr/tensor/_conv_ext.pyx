# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop convolution kernels.

Every output element is accumulated in the same order as the numpy fallback
in ``_conv_py`` so both backends give bit-identical results.  Inputs arrive
already zero padded and C-contiguous.
"""
cimport cython

ctypedef fused real:
    float
    double


def conv_forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] w, real[::1] b,
                 real[:, :, :, ::1] out, int stride):
    cdef Py_ssize_t n = xp.shape[0], cin = xp.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t i, co, ci, ky, kx, oy, ox
    cdef real wv
    with nogil:
        for i in range(n):
            for co in range(cout):
                for oy in range(oh):
                    for ox in range(ow):
                        out[i, co, oy, ox] = 0
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            wv = w[co, ci, ky, kx]
                            for oy in range(oh):
                                for ox in range(ow):
                                    out[i, co, oy, ox] = out[i, co, oy, ox] + \
                                        xp[i, ci, oy * stride + ky, ox * stride + kx] * wv
                for oy in range(oh):
                    for ox in range(ow):
                        out[i, co, oy, ox] = out[i, co, oy, ox] + b[co]


def conv_backward_input(real[:, :, :, ::1] g, real[:, :, :, ::1] w,
                        real[:, :, :, ::1] gxp, int stride):
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t i, co, ci, ky, kx, oy, ox
    cdef real wv
    with nogil:
        for i in range(n):
            for co in range(cout):
                for ky in range(k):
                    for kx in range(k):
                        for ci in range(cin):
                            wv = w[co, ci, ky, kx]
                            for oy in range(oh):
                                for ox in range(ow):
                                    gxp[i, ci, oy * stride + ky, ox * stride + kx] = \
                                        gxp[i, ci, oy * stride + ky, ox * stride + kx] + \
                                        g[i, co, oy, ox] * wv


def conv_backward_kernel(real[:, :, :, ::1] g, real[:, :, :, ::1] xp,
                         real[:, :, :, ::1] gw, int stride):
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t cin = gw.shape[1], k = gw.shape[2]
    cdef Py_ssize_t i, co, ci, ky, kx, oy, ox
    cdef real acc
    with nogil:
        for co in range(cout):
            for ci in range(cin):
                for ky in range(k):
                    for kx in range(k):
                        acc = 0
                        for i in range(n):
                            for oy in range(oh):
                                for ox in range(ow):
                                    acc = acc + g[i, co, oy, ox] * \
                                        xp[i, ci, oy * stride + ky, ox * stride + kx]
                        gw[co, ci, ky, kx] = acc
