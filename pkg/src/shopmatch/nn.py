"""Dense-layer math with reverse-mode differentiation.

Five layer kinds cover every architecture in the package: fully connected,
ReLU, sigmoid, batch normalization and (inverted) dropout. Layers operate on
2-D row-major arrays, one sample per row, and carry their own parameter and
gradient buffers. ``backward`` writes parameter gradients in place (it
overwrites, it does not accumulate) and returns the gradient w.r.t. the layer
input.

Training math runs in float32; ``Stack.astype(np.float64)`` produces a deep
copy for the 64-bit finite-difference gradient check.
"""

import numpy as np

from .errors import ContractViolation, ParameterError, ShapeError, TrainingDiverged

TRAIN = "train"
INFER = "infer"


def _check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ParameterError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")


def sigmoid(x):
    """Numerically safe logistic function, clamped to the open interval (0, 1).

    Clamping keeps downstream ``log(p)`` / ``log(1-p)`` finite even when the
    logit saturates in float32.
    """
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    hi = 1.0 - info.epsneg  # largest representable value < 1
    return np.clip(out, info.tiny, hi)


def relu(x):
    return np.maximum(x, 0)


class Dense:
    """y = x W^T + b with W of shape (out_dim, in_dim)."""

    kind = "dense"

    def __init__(self, w, b):
        w = np.asarray(w)
        b = np.asarray(b)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"dense expects W (out,in) and b (out,), got {w.shape} / {b.shape}")
        if not np.all(np.isfinite(w)):
            raise ParameterError("dense weights must be finite")
        self.w = w
        self.b = b
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(b)
        self._x = None

    @classmethod
    def init(cls, in_dim, out_dim, rng, dtype=np.float32):
        # uniform with std sqrt(2/fan_in), the usual choice under ReLU
        limit = np.sqrt(6.0 / in_dim)
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
        b = np.zeros(out_dim, dtype=dtype)
        return cls(w, b)

    @property
    def in_dim(self):
        return self.w.shape[1]

    @property
    def out_dim(self):
        return self.w.shape[0]

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"dense input has {x.shape[1] if x.ndim == 2 else x.ndim} columns, "
                f"layer expects {self.w.shape[1]}"
            )
        if mode == TRAIN:
            self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        x = self._x
        self.gw[...] = dout.T @ x
        self.gb[...] = dout.sum(axis=0)
        return dout @ self.w

    def trainable(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def state(self):
        return [("w", self.w), ("b", self.b)]

    def astype(self, dtype):
        return Dense(self.w.astype(dtype), self.b.astype(dtype))


class ReLU:
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if mode == TRAIN:
            self._mask = x > 0
        return relu(x)

    def backward(self, dout):
        return dout * self._mask

    def trainable(self):
        return []

    def state(self):
        return []

    def astype(self, dtype):
        return ReLU()


class Sigmoid:
    kind = "sigmoid"

    def __init__(self):
        self._y = None

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        y = sigmoid(x)
        if mode == TRAIN:
            self._y = y
        return y

    def backward(self, dout):
        y = self._y
        return dout * y * (1.0 - y)

    def trainable(self):
        return []

    def state(self):
        return []

    def astype(self, dtype):
        return Sigmoid()


class BatchNorm:
    """Per-column standardization.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running estimates with ``running = momentum*running + (1-momentum)*batch``;
    infer mode uses the running estimates and is a pure function of its input.
    """

    kind = "batchnorm"

    def __init__(self, gamma, beta, running_mean, running_var, momentum=0.9, epsilon=1e-5):
        if epsilon <= 0:
            raise ParameterError("batchnorm epsilon must be > 0")
        self.gamma = np.asarray(gamma)
        self.beta = np.asarray(beta)
        self.running_mean = np.asarray(running_mean)
        self.running_var = np.asarray(running_var)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    @classmethod
    def init(cls, dim, dtype=np.float32, momentum=0.9, epsilon=1e-5):
        return cls(
            np.ones(dim, dtype=dtype),
            np.zeros(dim, dtype=dtype),
            np.zeros(dim, dtype=dtype),
            np.ones(dim, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def dim(self):
        return self.gamma.shape[0]

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects {self.dim} columns, got {x.shape}")
        if mode == INFER:
            inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
            return self.gamma * (x - self.running_mean) * inv + self.beta
        if x.shape[0] < 2:
            raise ContractViolation("batchnorm in train mode needs a batch of at least 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu) * inv
        m = self.momentum
        self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
        self.running_var[...] = m * self.running_var + (1.0 - m) * var
        self._cache = (xhat, inv)
        return self.gamma * xhat + self.beta

    def backward(self, dout):
        xhat, inv = self._cache
        n = dout.shape[0]
        dxhat = dout * self.gamma
        self.ggamma[...] = (dout * xhat).sum(axis=0)
        self.gbeta[...] = dout.sum(axis=0)
        return (inv / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def trainable(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]

    def state(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def astype(self, dtype):
        return BatchNorm(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            momentum=self.momentum,
            epsilon=self.epsilon,
        )


class Dropout:
    """Inverted dropout: train mode scales kept units by 1/(1-rate) so that
    infer mode is the identity."""

    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask = None

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if mode == INFER or self.rate == 0.0:
            if mode == TRAIN:
                self._mask = None
            return x
        if rng is None:
            raise ContractViolation("dropout in train mode needs an rng stream")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._mask = mask
        return x * mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask

    def trainable(self):
        return []

    def state(self):
        return []

    def astype(self, dtype):
        return Dropout(self.rate)


class Stack:
    """An ordered pipeline of layers sharing one forward/backward interface."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, mode=INFER, rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self, prefix=""):
        """Yield (name, value, grad) triples for every trainable array."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, value, grad in layer.trainable():
                out.append((f"{prefix}{i}.{name}", value, grad))
        return out

    def state(self, prefix=""):
        """All persistent arrays including batchnorm running statistics."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, value in layer.state():
                out.append((f"{prefix}{i}.{name}", value))
        return out

    def num_params(self):
        return sum(value.size for _, value, _ in self.parameters())

    def has_active_dropout(self):
        return any(layer.kind == "dropout" and layer.rate > 0 for layer in self.layers)

    def astype(self, dtype):
        return Stack([layer.astype(dtype) for layer in self.layers])


def max_relative_gradient_error(params, closure, h):
    """Generic central-difference check.

    ``params`` is a sequence of (name, value, grad) float64 triples;
    ``closure(compute_grads)`` evaluates the loss, filling the grad arrays
    when asked. Returns max over all parameter entries of
    |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
    """
    loss0 = closure(True)
    if not np.isfinite(loss0):
        raise TrainingDiverged(f"gradient check aborted: non-finite loss {loss0}")
    analytic = [(name, grad.copy()) for name, _, grad in params]
    worst = 0.0
    for (name, value, _), (_, ga) in zip(params, analytic):
        flat = value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = closure(False)
            flat[i] = orig - h
            lm = closure(False)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise TrainingDiverged(
                    f"gradient check aborted: non-finite loss near {name}[{i}]"
                )
            gn = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - gn) / max(abs(gflat[i]), abs(gn), 1e-8)
            if err > worst:
                worst = err
    return worst


def gradient_check(stack, x, target, loss, h=1e-3, mode=TRAIN):
    """Compare the stack's analytic gradients against central differences.

    The check runs on a float64 copy of the stack so it never disturbs the
    model under test. ``loss(pred, target) -> (value, dpred)`` supplies the
    objective. Dropout is inherently stochastic, so a stack with an active
    dropout layer cannot be checked in train mode.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ParameterError(f"step h must lie in [1e-4, 1e-2], got {h}")
    _check_mode(mode)
    if mode == TRAIN and stack.has_active_dropout():
        raise ContractViolation("gradient check requires dropout disabled")
    work = stack.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    def closure(compute_grads):
        pred = work.forward(x64, mode=mode)
        value, dpred = loss(pred, target)
        if compute_grads:
            work.backward(dpred)
        return value

    return max_relative_gradient_error(work.parameters(), closure, h)
