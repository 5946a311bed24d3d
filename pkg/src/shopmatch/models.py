"""Scoring architectures.

Seven registered variants cover every combination evaluated by the package:
a trainable query encoder or frozen (static) query features on the left, a
frozen article-feature set (or a second trainable leg) on the right, and a
linear or non-linear matcher on top.

========================  =====================  ========  =========  ========
name                      loss                   query     matching   articles
========================  =====================  ========  =========  ========
static-linear             none                   static    linear     generic
static-nonlinear          cross-entropy          static    nonlinear  generic
nonlinear                 cross-entropy          learned   nonlinear  generic
linear                    cross-entropy          learned   linear     primary
ranking                   triplet                learned   linear     primary
siamese                   triplet+attributes     learned   linear     learned
studio2shop               cross-entropy          learned   nonlinear  primary
========================  =====================  ========  =========  ========

Checkpoint format (little-endian), magic ``M2SH``::

    "M2SH" | version u32=1
    5 x variant field   ( len u16 | utf-8 )      name, loss, query, matching, articles
    encoder config      ( input u32 | n_hidden u32 | n_hidden x u32 | out u32
                          | dropout f32 | head_hidden u32 )
    attribute block     ( count u32 | count x (len u16 | utf-8 | cardinality u16) )
    array block         ( count u32 | count x (len u16 | utf-8 name
                          | rank u32 | rank x u32 | float32 data) )

Save/load round-trips are bitwise stable.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ShapeError
from .kernels import HeadArrays
from .rng import stream

CHECKPOINT_MAGIC = b"M2SH"
CHECKPOINT_VERSION = 1

HEAD_HIDDEN_DEFAULT = 256

# name -> (loss, query_features, matching, article_features)
_TABLE = {
    "static-linear": ("none", "static", "linear", "generic"),
    "static-nonlinear": ("cross-entropy", "static", "nonlinear", "generic"),
    "nonlinear": ("cross-entropy", "learned", "nonlinear", "generic"),
    "linear": ("cross-entropy", "learned", "linear", "primary"),
    "ranking": ("triplet", "learned", "linear", "primary"),
    "siamese": ("triplet+attributes", "learned", "linear", "learned"),
    "studio2shop": ("cross-entropy", "learned", "nonlinear", "primary"),
}


@dataclass(frozen=True)
class VariantSpec:
    name: str
    loss: str
    query_features: str
    matching: str
    article_features: str

    def __post_init__(self):
        row = _TABLE.get(self.name)
        if row is None:
            raise ConfigError(f"unknown variant {self.name!r}; choose from {sorted(_TABLE)}")
        if row != (self.loss, self.query_features, self.matching, self.article_features):
            raise ConfigError(
                f"inconsistent variant spec for {self.name!r}: "
                f"{(self.loss, self.query_features, self.matching, self.article_features)} "
                f"does not match the registry row {row}"
            )

    @property
    def trainable(self):
        return self.loss != "none"


def variant(name) -> VariantSpec:
    row = _TABLE.get(name)
    if row is None:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(_TABLE)}")
    return VariantSpec(name, *row)


VARIANTS = tuple(_TABLE)


@dataclass(frozen=True)
class EncoderConfig:
    """Widths of the query-feature submodel and the matching head."""

    input_dim: int
    hidden_widths: tuple
    output_dim: int
    dropout_rate: float = 0.5
    head_hidden: int = HEAD_HIDDEN_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if not self.hidden_widths:
            raise ConfigError("encoder needs at least one hidden layer")
        if self.input_dim < 1 or self.output_dim < 1 or self.head_hidden < 1:
            raise ConfigError("encoder dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")


def _encoder_stack(cfg, rng, dtype=np.float32):
    layers = []
    prev = cfg.input_dim
    for width in cfg.hidden_widths:
        layers.append(nn.Dense.init(prev, width, rng, dtype=dtype))
        layers.append(nn.ReLU())
        layers.append(nn.Dropout(cfg.dropout_rate))
        prev = width
    layers.append(nn.Dense.init(prev, cfg.output_dim, rng, dtype=dtype))
    return nn.Stack(layers)


def _head_stack(d, hidden, rng, dtype=np.float32):
    return nn.Stack(
        [
            nn.BatchNorm.init(2 * d, dtype=dtype),
            nn.Dense.init(2 * d, hidden, rng, dtype=dtype),
            nn.ReLU(),
            nn.Dense.init(hidden, hidden, rng, dtype=dtype),
            nn.ReLU(),
            nn.Dense.init(hidden, 1, rng, dtype=dtype),
            nn.Sigmoid(),
        ]
    )


@dataclass
class ModelParams:
    """Every trainable array of one variant, plus enough structure to rebuild
    the stacks from a checkpoint."""

    spec: VariantSpec
    config: EncoderConfig
    encoder: nn.Stack = None
    right_leg: nn.Stack = None
    head: nn.Stack = None
    linear_bias: np.ndarray = None
    linear_bias_grad: np.ndarray = None
    attr_heads_left: dict = None   # attribute name -> Stack (single dense)
    attr_heads_right: dict = None
    attribute_cards: dict = field(default_factory=dict)

    def parameters(self):
        out = []
        if self.encoder is not None:
            out += self.encoder.parameters("encoder.")
        if self.right_leg is not None:
            out += self.right_leg.parameters("right.")
        if self.head is not None:
            out += self.head.parameters("head.")
        if self.linear_bias is not None:
            out.append(("linear_bias", self.linear_bias, self.linear_bias_grad))
        for tag, heads in (("attr_left", self.attr_heads_left),
                           ("attr_right", self.attr_heads_right)):
            if heads:
                for name, stack in heads.items():
                    out += stack.parameters(f"{tag}.{name}.")
        return out

    def state(self):
        out = []
        if self.encoder is not None:
            out += self.encoder.state("encoder.")
        if self.right_leg is not None:
            out += self.right_leg.state("right.")
        if self.head is not None:
            out += self.head.state("head.")
        if self.linear_bias is not None:
            out.append(("linear_bias", self.linear_bias))
        for tag, heads in (("attr_left", self.attr_heads_left),
                           ("attr_right", self.attr_heads_right)):
            if heads:
                for name, stack in heads.items():
                    out += stack.state(f"{tag}.{name}.")
        return out

    def num_params(self):
        return sum(value.size for _, value, _ in self.parameters())

    def astype(self, dtype):
        heads_l = {k: v.astype(dtype) for k, v in self.attr_heads_left.items()} \
            if self.attr_heads_left else None
        heads_r = {k: v.astype(dtype) for k, v in self.attr_heads_right.items()} \
            if self.attr_heads_right else None
        return ModelParams(
            spec=self.spec,
            config=self.config,
            encoder=self.encoder.astype(dtype) if self.encoder is not None else None,
            right_leg=self.right_leg.astype(dtype) if self.right_leg is not None else None,
            head=self.head.astype(dtype) if self.head is not None else None,
            linear_bias=self.linear_bias.astype(dtype) if self.linear_bias is not None else None,
            linear_bias_grad=np.zeros(1, dtype=dtype) if self.linear_bias is not None else None,
            attr_heads_left=heads_l,
            attr_heads_right=heads_r,
            attribute_cards=dict(self.attribute_cards),
        )


def build_model(spec, config, seed, attribute_cards=None, dtype=np.float32):
    """Fresh parameters for a variant. All initialization draws come from
    named streams under ``seed``, so identical calls build identical models."""
    params = ModelParams(spec=spec, config=config,
                         attribute_cards=dict(attribute_cards or {}))
    if spec.query_features == "learned":
        params.encoder = _encoder_stack(config, stream(seed, "init/encoder"), dtype)
    if spec.matching == "nonlinear":
        params.head = _head_stack(
            config.output_dim, config.head_hidden, stream(seed, "init/head"), dtype
        )
    if spec.matching == "linear" and spec.loss == "cross-entropy":
        params.linear_bias = np.zeros(1, dtype=dtype)
        params.linear_bias_grad = np.zeros(1, dtype=dtype)
    if spec.name == "siamese":
        params.right_leg = _encoder_stack(config, stream(seed, "init/right"), dtype)
        if not params.attribute_cards:
            raise ConfigError("siamese variant needs attribute cardinalities")
        d = config.output_dim
        params.attr_heads_left, params.attr_heads_right = {}, {}
        for name, card in params.attribute_cards.items():
            left = stream(seed, f"init/attr_left/{name}")
            right = stream(seed, f"init/attr_right/{name}")
            params.attr_heads_left[name] = nn.Stack([nn.Dense.init(d, card, left, dtype)])
            params.attr_heads_right[name] = nn.Stack([nn.Dense.init(d, card, right, dtype)])
    return params


# ---------------------------------------------------------------------------
# forward passes


def encode_query(params, q, mode=nn.INFER, rng=None):
    """f(q | theta): one query vector to one article-space feature vector."""
    if params.encoder is None:
        raise ConfigError(f"variant {params.spec.name!r} has no query encoder")
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != params.config.input_dim:
        raise ShapeError(f"query must have length {params.config.input_dim}, got {q.shape}")
    return params.encoder.forward(q[None, :], mode=mode, rng=rng)[0]


def encode_queries(params, q_matrix, mode=nn.INFER, rng=None):
    """Batched encoder forward, one query per row."""
    if params.encoder is None:
        raise ConfigError(f"variant {params.spec.name!r} has no query encoder")
    q_matrix = np.asarray(q_matrix, dtype=np.float32)
    if q_matrix.ndim != 2 or q_matrix.shape[1] != params.config.input_dim:
        raise ShapeError(
            f"queries must be (n, {params.config.input_dim}), got {q_matrix.shape}"
        )
    return params.encoder.forward(q_matrix, mode=mode, rng=rng)


def match_nonlinear(params, qf, af, mode=nn.INFER, rng=None):
    """p(match) through the non-linear head for one (query, article) pair."""
    p = match_nonlinear_batch(params, np.asarray(qf)[None, :], np.asarray(af)[None, :],
                              mode=mode, rng=rng)
    return float(p[0])


def match_nonlinear_batch(params, qf_rows, af_rows, mode=nn.INFER, rng=None):
    if params.head is None:
        raise ConfigError(f"variant {params.spec.name!r} has no matching head")
    qf_rows = np.asarray(qf_rows, dtype=np.float32)
    af_rows = np.asarray(af_rows, dtype=np.float32)
    d = params.config.output_dim
    if qf_rows.shape[1] != d or af_rows.shape[1] != d or qf_rows.shape[0] != af_rows.shape[0]:
        raise ShapeError(f"expected aligned (n, {d}) pairs, got {qf_rows.shape}/{af_rows.shape}")
    x = np.concatenate([qf_rows, af_rows], axis=1)
    return params.head.forward(x, mode=mode, rng=rng)[:, 0]


def match_linear(qf, af, bias=0.0):
    """sigma(qf . af + bias). Rankings under this score equal rankings under
    the raw dot product (the sigmoid is strictly monotone)."""
    qf = np.asarray(qf, dtype=np.float32)
    af = np.asarray(af, dtype=np.float32)
    if qf.shape != af.shape:
        raise ShapeError(f"vector lengths disagree: {qf.shape} vs {af.shape}")
    z = np.atleast_1d((qf * af).sum(axis=-1) + np.float32(bias))
    p = nn.sigmoid(z)
    return float(p[0]) if qf.ndim == 1 else p


def score_static(qf_static, af):
    """Raw dot product of static query features and article features."""
    qf_static = np.asarray(qf_static, dtype=np.float32)
    af = np.asarray(af, dtype=np.float32)
    if qf_static.shape != af.shape:
        raise ShapeError(f"vector lengths disagree: {qf_static.shape} vs {af.shape}")
    return float(np.dot(qf_static, af))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def siamese_forward(params, q, a_img, mode=nn.INFER, rng=None):
    """Two independent legs plus per-attribute logits from each feature.

    Returns (qf, af, attr_logits_left, attr_logits_right); the logits dicts
    map attribute name -> logit vector.
    """
    if params.right_leg is None:
        raise ConfigError(f"variant {params.spec.name!r} has no article leg")
    qf = encode_query(params, q, mode=mode, rng=rng)
    a_img = np.asarray(a_img, dtype=np.float32)
    if a_img.ndim != 1 or a_img.shape[0] != params.config.input_dim:
        raise ShapeError(f"article image vector must have length {params.config.input_dim}")
    af = params.right_leg.forward(a_img[None, :], mode=mode, rng=rng)[0]
    left = {
        name: head.forward(qf[None, :], mode=mode, rng=rng)[0]
        for name, head in params.attr_heads_left.items()
    }
    right = {
        name: head.forward(af[None, :], mode=mode, rng=rng)[0]
        for name, head in params.attr_heads_right.items()
    }
    return qf, af, left, right


def export_head_arrays(params) -> HeadArrays:
    """Pull the matching-head arrays out of the stack for the scoring kernels."""
    if params.head is None:
        raise ConfigError(f"variant {params.spec.name!r} has no matching head")
    bn, d1, _, d2, _, d3, _ = params.head.layers
    return HeadArrays(
        gamma=bn.gamma, beta=bn.beta,
        running_mean=bn.running_mean, running_var=bn.running_var,
        epsilon=bn.epsilon,
        w1=d1.w, b1=d1.b, w2=d2.w, b2=d2.b,
        w3=d3.w[0], b3=float(d3.b[0]),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _write_str(fh, text):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        spec = params.spec
        for text in (spec.name, spec.loss, spec.query_features,
                     spec.matching, spec.article_features):
            _write_str(fh, text)
        cfg = params.config
        fh.write(struct.pack("<II", cfg.input_dim, len(cfg.hidden_widths)))
        fh.write(struct.pack(f"<{len(cfg.hidden_widths)}I", *cfg.hidden_widths))
        fh.write(struct.pack("<IfI", cfg.output_dim, cfg.dropout_rate, cfg.head_hidden))
        fh.write(struct.pack("<I", len(params.attribute_cards)))
        for name, card in params.attribute_cards.items():
            _write_str(fh, name)
            fh.write(struct.pack("<H", card))
        arrays = params.state()
        fh.write(struct.pack("<I", len(arrays)))
        for name, value in arrays:
            _write_str(fh, name)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_str(fh):
    off = fh.tell()
    raw = fh.read(2)
    if len(raw) != 2:
        raise FormatError("truncated checkpoint: string length", offset=off)
    (n,) = struct.unpack("<H", raw)
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint: string body", offset=off + 2)
    return data.decode("utf-8")


def _read_exact(fh, n, what):
    off = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint: {what}", offset=off)
    return buf


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        fields = [_read_str(fh) for _ in range(5)]
        spec = VariantSpec(*fields)
        input_dim, n_hidden = struct.unpack("<II", _read_exact(fh, 8, "config"))
        hidden = struct.unpack(f"<{n_hidden}I", _read_exact(fh, 4 * n_hidden, "hidden widths"))
        output_dim, dropout, head_hidden = struct.unpack(
            "<IfI", _read_exact(fh, 12, "config tail")
        )
        config = EncoderConfig(input_dim, hidden, output_dim,
                               dropout_rate=float(dropout),
                               head_hidden=head_hidden)
        (n_attrs,) = struct.unpack("<I", _read_exact(fh, 4, "attribute count"))
        cards = {}
        for _ in range(n_attrs):
            name = _read_str(fh)
            (card,) = struct.unpack("<H", _read_exact(fh, 2, "cardinality"))
            cards[name] = card
        params = build_model(spec, config, seed=0, attribute_cards=cards or None)
        state = dict(params.state())
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        seen = set()
        for _ in range(n_arrays):
            name = _read_str(fh)
            if name not in state:
                raise FormatError(f"unexpected array {name!r} in checkpoint", offset=fh.tell())
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "array rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "array shape"))
            target = state[name]
            if tuple(target.shape) != shape:
                raise FormatError(
                    f"array {name!r} has shape {shape}, model expects {tuple(target.shape)}",
                    offset=fh.tell(),
                )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"array {name!r} data")
            target[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
            seen.add(name)
        off = fh.tell()
        if fh.read(1):
            raise FormatError("trailing bytes after arrays", offset=off)
    missing = set(state) - seen
    if missing:
        raise FormatError(f"checkpoint is missing arrays: {sorted(missing)[:5]}")
    return params
