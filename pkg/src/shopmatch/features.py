"""Static feature handling: PCA reduction to the model feature width and the
binary on-disk stores for article and query vectors.

Store layout (little-endian). Article store, magic ``FSTR``::

    "FSTR" | version u32=1 | M u32 | d u32 | A u32
    A x ( name_len u16 | name utf-8 | cardinality u16 )
    M x ( id u64 | d x float32 | A x u16 )

Query store: identical with magic ``QSTR`` and A = 0 (no attribute blocks).
Attribute values are 1-based; 0 marks a missing label.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError, ShapeError

FORMAT_VERSION = 1
_ARTICLE_MAGIC = b"FSTR"
_QUERY_MAGIC = b"QSTR"


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray          # (d_in,)
    components: np.ndarray    # (d_out, d_in), orthonormal rows
    explained_variance: np.ndarray  # (d_out,), non-increasing


def pca_fit(x, d_out):
    """Principal directions of the rows of ``x`` by descending variance.

    Components use a deterministic sign convention: the largest-magnitude
    entry of each component is positive. Variances use the n-1 denominator so
    they match the sample variance of the transformed rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"pca_fit expects a 2-D matrix, got shape {x.shape}")
    n, d_in = x.shape
    if d_out < 1 or d_out > min(n, d_in):
        raise ParameterError(
            f"d_out must be in [1, min(rows, cols)] = [1, {min(n, d_in)}], got {d_out}"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1) if n > 1 else np.zeros((d_in, d_in))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_out]
    components = evecs[:, order].T.copy()
    variance = np.clip(evals[order], 0.0, None)
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, explained_variance=variance)


def pca_transform(model, x):
    """Project ``x`` (one vector or a matrix of rows) onto the components."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.shape[1] != model.mean.shape[0]:
        raise ShapeError(
            f"pca_transform expects {model.mean.shape[0]} columns, got {rows.shape[1]}"
        )
    out = ((rows - model.mean) @ model.components.T).astype(np.float32)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Stores


@dataclass
class AttributeSet:
    name: str
    cardinality: int
    values: np.ndarray  # (M,) uint16, 1..cardinality, 0 = missing


@dataclass
class ArticleStore:
    ids: np.ndarray       # (M,) uint64, unique
    features: np.ndarray  # (M, d) float32
    attributes: dict = field(default_factory=dict)  # name -> AttributeSet

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or len(self.ids) != self.features.shape[0]:
            raise ShapeError("ids and feature rows must line up")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("duplicate article ids")
        for attr in self.attributes.values():
            attr.values = np.ascontiguousarray(attr.values, dtype=np.uint16)
            if attr.values.shape != self.ids.shape:
                raise ShapeError(f"attribute {attr.name!r} has wrong length")
            if attr.values.max(initial=0) > attr.cardinality:
                raise DataError(f"attribute {attr.name!r} value exceeds cardinality")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.features.shape[1]

    def index_of(self, ids):
        """Row indices of the given ids; unknown ids raise DataError."""
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.clip(pos, 0, len(self.ids) - 1)
        rows = order[pos]
        bad = self.ids[rows] != np.asarray(ids, dtype=np.uint64)
        if np.any(bad):
            missing = np.asarray(ids)[bad]
            raise DataError(f"unknown article id(s): {missing[:5].tolist()}")
        return rows


@dataclass
class QueryStore:
    ids: np.ndarray       # (N,) uint64, unique
    features: np.ndarray  # (N, d) float32

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or len(self.ids) != self.features.shape[0]:
            raise ShapeError("ids and feature rows must line up")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("duplicate query ids")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.features.shape[1]


def store_save(store, path):
    """Write a store; ``store_load(store_save(s)) == s`` bitwise."""
    is_article = isinstance(store, ArticleStore)
    attrs = list(store.attributes.values()) if is_article else []
    m, d = store.features.shape
    with open(path, "wb") as fh:
        fh.write(_ARTICLE_MAGIC if is_article else _QUERY_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, m, d))
        fh.write(struct.pack("<I", len(attrs)))
        for attr in attrs:
            name = attr.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<H", attr.cardinality))
        record = np.zeros(
            m,
            dtype=np.dtype(
                [("id", "<u8"), ("f", "<f4", (d,))]
                + ([("a", "<u2", (len(attrs),))] if attrs else [])
            ),
        )
        record["id"] = store.ids
        record["f"] = store.features
        if attrs:
            record["a"] = np.stack([a.values for a in attrs], axis=1)
        fh.write(record.tobytes())


def _need(fh, n, what):
    off = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated store: expected {what}", offset=off)
    return buf


def store_load(path):
    """Read a store written by store_save; the magic selects the type."""
    with open(path, "rb") as fh:
        magic = _need(fh, 4, "magic")
        if magic not in (_ARTICLE_MAGIC, _QUERY_MAGIC):
            raise FormatError(f"bad magic {magic!r}", offset=0)
        version, m, d = struct.unpack("<III", _need(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        (n_attrs,) = struct.unpack("<I", _need(fh, 4, "attribute count"))
        if magic == _QUERY_MAGIC and n_attrs != 0:
            raise FormatError("query store cannot carry attributes", offset=16)
        names, cards = [], []
        for _ in range(n_attrs):
            (name_len,) = struct.unpack("<H", _need(fh, 2, "attribute name length"))
            names.append(_need(fh, name_len, "attribute name").decode("utf-8"))
            (card,) = struct.unpack("<H", _need(fh, 2, "attribute cardinality"))
            cards.append(card)
        rec_dtype = np.dtype(
            [("id", "<u8"), ("f", "<f4", (d,))]
            + ([("a", "<u2", (n_attrs,))] if n_attrs else [])
        )
        raw = _need(fh, rec_dtype.itemsize * m, f"{m} records")
        off = fh.tell()
        if fh.read(1):
            raise FormatError("trailing bytes after records", offset=off)
    record = np.frombuffer(raw, dtype=rec_dtype)
    ids = record["id"].copy()
    feats = record["f"].reshape(m, d).copy()
    if magic == _QUERY_MAGIC:
        return QueryStore(ids=ids, features=feats)
    attributes = {
        name: AttributeSet(name=name, cardinality=card, values=record["a"][:, i].copy())
        for i, (name, card) in enumerate(zip(names, cards))
    }
    return ArticleStore(ids=ids, features=feats, attributes=attributes)
