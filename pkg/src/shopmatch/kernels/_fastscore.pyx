# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused elementwise stages of the matching-head scorer.

The per-pair work around the one large matrix product is fused into
streaming single-pass loops over preallocated buffers, replacing the chain
of temporary-allocating array expressions the numpy fallback needs. The
matrix product and the final row reduction stay on numpy (BLAS and pairwise
summation); the driver lives in ``shopmatch.kernels``.

Every loop is elementwise over a fixed layout, so scores are bit-identical
for every article chunk size.
"""

cimport numpy as cnp
from libc.float cimport FLT_EPSILON
from libc.math cimport expf

cnp.import_array()

cdef float FLT_TINY = <float>1.1754943508222875e-38
cdef float ONE_BELOW_ONE = <float>(1.0 - FLT_EPSILON / 2.0)


cdef inline float _sigmoid(float z) nogil:
    cdef float e, p
    if z >= 0.0:
        p = 1.0 / (1.0 + expf(-z))
    else:
        e = expf(z)
        p = e / (1.0 + e)
    if p < FLT_TINY:
        p = FLT_TINY
    if p > ONE_BELOW_ONE:
        p = ONE_BELOW_ONE
    return p


def fill_pairs_relu(float[:, ::1] q_pre, float[:, ::1] a_pre,
                    int q0, int qb, int a0, int r, float[:, ::1] buf):
    """buf[i*r + j] = relu(q_pre[q0+i] + a_pre[a0+j]) for the pair block."""
    cdef int hidden = q_pre.shape[1]
    cdef int i, j, h
    cdef float v
    cdef const float *qrow
    cdef const float *arow
    cdef float *dst
    with nogil:
        for i in range(qb):
            qrow = &q_pre[q0 + i, 0]
            for j in range(r):
                arow = &a_pre[a0 + j, 0]
                dst = &buf[i * r + j, 0]
                for h in range(hidden):
                    v = qrow[h] + arow[h]
                    dst[h] = v if v > 0.0 else 0.0


def sigmoid_scatter(float[::1] z, float b3, int q0, int qb, int a0, int r,
                    float[:, ::1] out):
    """out[q0+i, a0+j] = sigmoid(z[i*r + j] + b3)."""
    cdef int i, j
    with nogil:
        for i in range(qb):
            for j in range(r):
                out[q0 + i, a0 + j] = _sigmoid(z[i * r + j] + b3)
