"""Pure numpy fallback for the direct-loop convolution kernels.

The loops here fix the accumulation order of every output element to exactly
the order used by the compiled kernels, so the two are interchangeable down to
the last bit.  Only the loop over output positions is vectorised.
"""
import numpy as np


def _window(a, ky, kx, oh, ow, stride):
    return a[:, :, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride]


def conv_forward(xp, w, b, out, stride):
    cin = xp.shape[1]
    k = w.shape[2]
    oh, ow = out.shape[2], out.shape[3]
    out[...] = 0
    tmp = np.empty_like(out)
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                patch = _window(xp, ky, kx, oh, ow, stride)[:, ci:ci + 1]
                np.multiply(patch, w[:, ci, ky, kx][None, :, None, None], out=tmp)
                np.add(out, tmp, out=out)
    np.add(out, b[None, :, None, None], out=out)


def conv_backward_input(g, w, gxp, stride):
    cout = g.shape[1]
    k = w.shape[2]
    oh, ow = g.shape[2], g.shape[3]
    tmp = np.empty((g.shape[0], w.shape[1], oh, ow), dtype=g.dtype)
    for co in range(cout):
        for ky in range(k):
            for kx in range(k):
                np.multiply(g[:, co:co + 1], w[co, :, ky, kx][None, :, None, None], out=tmp)
                view = _window(gxp, ky, kx, oh, ow, stride)
                np.add(view, tmp, out=view)


def conv_backward_kernel(g, xp, gw, stride):
    n, _, oh, ow = g.shape
    k = gw.shape[2]
    gw[...] = 0
    tmp = np.empty_like(gw)
    for i in range(n):
        for oy in range(oh):
            y0 = oy * stride
            for ox in range(ow):
                x0 = ox * stride
                patch = xp[i, :, y0:y0 + k, x0:x0 + k]
                np.multiply(g[i, :, oy, ox][:, None, None, None], patch[None], out=tmp)
                np.add(gw, tmp, out=gw)
