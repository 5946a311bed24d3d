"""Scoring kernels for full-catalogue retrieval.

Ranking a query against the catalogue through the non-linear matching head is
the hot loop of evaluation: every (query, article) pair runs batchnorm +
three dense layers. Two engines implement it:

* ``compiled`` - a Cython extension (``_fastscore``) that fuses the per-pair
  elementwise work around one in-place BLAS product, built at install time;
* ``numpy``   - a pure-numpy fallback with identical semantics.

The engine is selected at import: the extension when it built, otherwise the
fallback. ``SHOPMATCH_ENGINE=numpy|compiled`` forces a choice. Both engines
share the same inference-time algebra, applied once per prepared scorer:

* the batchnorm affine (running statistics) is folded into the first dense
  layer;
* the first layer splits over the concatenation, so its article half is
  precomputed once per catalogue and its query half once per query set;
* remaining per-pair work (add + relu + dense + relu + dense + sigmoid) runs
  chunk by chunk over articles.

Per-pair results are independent of the chunk size: all matrix products run
through :func:`padded_matmul`, which keeps BLAS off its single-row code path
(the one case where blocking changes low-order bits).

Linear (dot-product) scoring is a single BLAS call either way and is not
engine-dispatched.
"""

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError

try:
    from . import _fastscore

    _HAVE_COMPILED = True
except ImportError:
    _fastscore = None
    _HAVE_COMPILED = False

# below this many rows, pad matmuls up to it (gemv kernels round differently
# than gemm kernels; >= 2 rows is enough in practice, 16 leaves margin)
_MIN_GEMM_ROWS = 16

# pair rows per internal slab
_SLAB_ROWS = 32768
_QUERY_BLOCK = 64


def available_engines():
    return ("compiled", "numpy") if _HAVE_COMPILED else ("numpy",)


def active_engine():
    """Engine used when none is requested explicitly."""
    forced = os.environ.get("SHOPMATCH_ENGINE", "").strip().lower()
    if forced:
        if forced not in ("compiled", "numpy"):
            raise ConfigError(f"SHOPMATCH_ENGINE must be 'compiled' or 'numpy', got {forced!r}")
        if forced == "compiled" and not _HAVE_COMPILED:
            raise ConfigError("SHOPMATCH_ENGINE=compiled but the extension is not built")
        return forced
    return "compiled" if _HAVE_COMPILED else "numpy"


def padded_matmul(a, b):
    """``a @ b`` with the row count padded to at least _MIN_GEMM_ROWS.

    Guarantees every row of the result is bit-identical to what the same row
    yields inside any larger block, so chunked scoring equals unchunked
    scoring bitwise.
    """
    rows = a.shape[0]
    if rows == 0:
        return np.zeros((0, b.shape[1]), dtype=np.result_type(a, b))
    if rows >= _MIN_GEMM_ROWS:
        return a @ b
    pad = np.zeros((_MIN_GEMM_ROWS, a.shape[1]), dtype=a.dtype)
    pad[:rows] = a
    return (pad @ b)[:rows]


@dataclass(frozen=True)
class HeadArrays:
    """Raw matching-head parameters: batchnorm over the 2d concat input, two
    hidden dense+relu layers, and the final logistic unit."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float
    w1: np.ndarray  # (hidden, 2d)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    w3: np.ndarray  # (hidden,)
    b3: float


class PreparedScorer:
    """Head folded for inference plus per-side first-layer precomputes."""

    def __init__(self, head, qf, af, engine=None):
        qf = np.ascontiguousarray(qf, dtype=np.float32)
        af = np.ascontiguousarray(af, dtype=np.float32)
        if qf.ndim != 2 or af.ndim != 2 or qf.shape[1] != af.shape[1]:
            raise ShapeError(f"query/article features disagree: {qf.shape} vs {af.shape}")
        d = qf.shape[1]
        if head.w1.shape[1] != 2 * d:
            raise ShapeError(
                f"head expects concat width {head.w1.shape[1]}, features give {2 * d}"
            )
        self.engine = engine or active_engine()
        if self.engine == "compiled" and not _HAVE_COMPILED:
            raise ConfigError("compiled engine requested but the extension is not built")

        # fold the batchnorm affine into the first dense layer (float64, once)
        scale = head.gamma.astype(np.float64) / np.sqrt(
            head.running_var.astype(np.float64) + head.epsilon
        )
        shift = head.beta.astype(np.float64) - head.running_mean.astype(np.float64) * scale
        w1f = head.w1.astype(np.float64) * scale[None, :]
        b1f = head.b1.astype(np.float64) + head.w1.astype(np.float64) @ shift

        w1q_t = np.ascontiguousarray(w1f[:, :d].T, dtype=np.float32)
        w1a_t = np.ascontiguousarray(w1f[:, d:].T, dtype=np.float32)
        self.w2_t = np.ascontiguousarray(head.w2.T, dtype=np.float32)
        self.b2 = np.ascontiguousarray(head.b2, dtype=np.float32)
        self.w3 = np.ascontiguousarray(head.w3, dtype=np.float32)
        self.b3 = np.float32(head.b3)

        # first-layer halves: query side carries the folded bias
        self.q_pre = padded_matmul(qf, w1q_t) + b1f.astype(np.float32)
        self.a_pre = padded_matmul(af, w1a_t)
        self.n_queries = qf.shape[0]
        self.n_articles = af.shape[0]

    def scores(self, query_rows=None, article_rows=None, chunk=50):
        """Match probabilities, shape (len(query_rows), len(article_rows)).

        Row selections default to everything. Scoring walks articles
        ``chunk`` at a time; the chunk size never changes the result.
        """
        q = self.q_pre if query_rows is None else self.q_pre[np.asarray(query_rows)]
        a = self.a_pre if article_rows is None else self.a_pre[np.asarray(article_rows)]
        if chunk < 1:
            raise ShapeError(f"chunk must be >= 1, got {chunk}")
        fn = _compiled_cross_scores if self.engine == "compiled" else _numpy_cross_scores
        return fn(np.ascontiguousarray(q), np.ascontiguousarray(a),
                  self.w2_t, self.b2, self.w3, self.b3, int(chunk))


def _compiled_cross_scores(q_pre, a_pre, w2_t, b2, w3, b3, chunk):
    """Driver for the fused kernel: the C extension builds the pair block and
    scatters the final probabilities in place; BLAS and the row reduction run
    on preallocated buffers, so no block allocates the big pairwise temporary
    the fallback needs."""
    n, hidden = q_pre.shape
    m = a_pre.shape[0]
    out = np.empty((n, m), dtype=np.float32)
    if n == 0 or m == 0:
        return out
    chunk = min(chunk, m)
    qblock = min(max(_SLAB_ROWS // chunk, 1), _QUERY_BLOCK)
    buf_rows = max(qblock * chunk, _MIN_GEMM_ROWS)
    buf1 = np.zeros((buf_rows, hidden), dtype=np.float32)
    buf2 = np.empty((buf_rows, hidden), dtype=np.float32)
    zbuf = np.empty(buf_rows, dtype=np.float32)
    for q0 in range(0, n, qblock):
        qb = min(qblock, n - q0)
        for a0 in range(0, m, chunk):
            r = min(chunk, m - a0)
            rows = qb * r
            _fastscore.fill_pairs_relu(q_pre, a_pre, q0, qb, a0, r, buf1)
            grows = rows
            if grows < _MIN_GEMM_ROWS:
                grows = _MIN_GEMM_ROWS
                buf1[rows:grows] = 0.0
            np.matmul(buf1[:grows], w2_t, out=buf2[:grows])
            h2 = buf2[:rows]
            np.add(h2, b2, out=h2)
            np.maximum(h2, 0.0, out=h2)
            np.multiply(h2, w3, out=h2)
            np.sum(h2, axis=1, dtype=np.float32, out=zbuf[:rows])
            _fastscore.sigmoid_scatter(zbuf, b3, q0, qb, a0, r, out)
    return out


def _numpy_cross_scores(q_pre, a_pre, w2_t, b2, w3, b3, chunk):
    from .. import nn

    n, hidden = q_pre.shape
    m = a_pre.shape[0]
    out = np.empty((n, m), dtype=np.float32)
    for a0 in range(0, m, chunk):
        a1 = min(m, a0 + chunk)
        block = a_pre[a0:a1]
        width = a1 - a0
        q_step = max(1, _SLAB_ROWS // max(width, 1))
        for q0 in range(0, n, q_step):
            q1 = min(n, q0 + q_step)
            h1 = nn.relu(q_pre[q0:q1, None, :] + block[None, :, :])
            h1 = h1.reshape((q1 - q0) * width, hidden)
            h2 = nn.relu(padded_matmul(h1, w2_t) + b2)
            z = (h2 * w3).sum(axis=1, dtype=np.float32) + b3
            out[q0:q1, a0:a1] = nn.sigmoid(z).reshape(q1 - q0, width)
    return out


def linear_cross_scores(qf, af, chunk=512):
    """Raw dot products qf . af^T, chunked over articles.

    Computed article-major so every chunk runs the same row-blocked BLAS path
    (bitwise chunk-invariant, like the non-linear engines).
    """
    qf = np.ascontiguousarray(qf, dtype=np.float32)
    af = np.ascontiguousarray(af, dtype=np.float32)
    if qf.shape[1] != af.shape[1]:
        raise ShapeError(f"feature widths disagree: {qf.shape} vs {af.shape}")
    out = np.empty((qf.shape[0], af.shape[0]), dtype=np.float32)
    qt = np.ascontiguousarray(qf.T)
    for a0 in range(0, af.shape[0], chunk):
        a1 = min(af.shape[0], a0 + chunk)
        out[:, a0:a1] = padded_matmul(af[a0:a1], qt).T
    return out
