"""Single-layer LSTM classifier with a dense softmax head, in numpy.

Every parameter lives in one flat float64 vector so that the federated
server can average models coordinate-wise.  The layout of that vector is
fixed and is part of the checkpoint format::

    W_x  (4H, F)   input weights, row-major
    W_h  (4H, H)   recurrent weights, row-major
    b    (4H,)     gate biases
    W_d  (3, H)    dense weights, row-major
    b_d  (3,)      dense bias

Gate blocks inside the ``4H`` axis are ordered input, forget, candidate,
output (tag ``"ifgo"``).
"""
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import LengthMismatch, ShapeMismatch

N_CLASSES = 3
GATE_ORDER = "ifgo"
CHECKPOINT_MAGIC = b"FTLSTM\x00\x01"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIII4s")


def n_params(hidden_units, n_features):
    H, F = hidden_units, n_features
    return 4 * H * F + 4 * H * H + 4 * H + N_CLASSES * H + N_CLASSES


def _layout(H, F):
    shapes = [
        ("W_x", (4 * H, F)),
        ("W_h", (4 * H, H)),
        ("b", (4 * H,)),
        ("W_d", (N_CLASSES, H)),
        ("b_d", (N_CLASSES,)),
    ]
    out, offset = [], 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        out.append((name, offset, offset + size, shape))
        offset += size
    return out


class ModelParams:
    """LSTM + dense weights backed by a single flat vector.

    The named attributes (``W_x``, ``W_h``, ``b``, ``W_d``, ``b_d``) are
    views into :attr:`flat`; writing through a view changes the vector.
    """

    def __init__(self, flat, hidden_units, n_features):
        flat = np.asarray(flat, dtype=np.float64)
        expected = n_params(hidden_units, n_features)
        if flat.ndim != 1 or flat.shape[0] != expected:
            raise LengthMismatch(
                f"expected a flat vector of length {expected} for "
                f"H={hidden_units}, F={n_features}; got shape {flat.shape}"
            )
        self.flat = flat
        self.hidden_units = int(hidden_units)
        self.n_features = int(n_features)
        for name, lo, hi, shape in _layout(self.hidden_units, self.n_features):
            setattr(self, name, flat[lo:hi].reshape(shape))

    @classmethod
    def zeros(cls, hidden_units, n_features):
        return cls(np.zeros(n_params(hidden_units, n_features)), hidden_units, n_features)

    def copy(self):
        return ModelParams(self.flat.copy(), self.hidden_units, self.n_features)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.hidden_units == other.hidden_units
            and self.n_features == other.n_features
            and np.array_equal(self.flat, other.flat)
        )

    def __repr__(self):
        return f"ModelParams(H={self.hidden_units}, F={self.n_features}, n={self.flat.size})"


def flatten(params):
    return params.flat.copy()


def unflatten(vector, hidden_units, n_features):
    return ModelParams(np.array(vector, dtype=np.float64), hidden_units, n_features)


def init_params(hidden_units, n_features, seed):
    """Uniform fan-in init in [-1/sqrt(H), 1/sqrt(H)], forget-gate bias 1."""
    if hidden_units <= 0 or n_features <= 0:
        raise ValueError("hidden_units and n_features must be positive")
    rng = np.random.default_rng(seed)
    H = hidden_units
    bound = 1.0 / np.sqrt(H)
    params = ModelParams(
        rng.uniform(-bound, bound, n_params(H, n_features)), H, n_features
    )
    params.b[:] = 0.0
    params.b[H:2 * H] = 1.0
    return params


def sigmoid(x):
    # tanh form never overflows and costs a single ufunc pass
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    X: np.ndarray
    # time-major: h[0] and c[0] are the zero initial state
    h: np.ndarray  # (W+1, B, H)
    c: np.ndarray  # (W+1, B, H)
    gates: np.ndarray  # (W, B, 4H) activated gates, "ifgo" order
    probs: np.ndarray


def _gate_scale(H):
    # sigmoid(z) = (1 + tanh(z/2)) / 2, so all four gates share one tanh call
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    return scale


def _activate(z, H):
    # z is already multiplied by _gate_scale
    a = np.tanh(z, out=z)
    a[:, :2 * H] *= 0.5
    a[:, :2 * H] += 0.5
    a[:, 3 * H:] *= 0.5
    a[:, 3 * H:] += 0.5
    return a


def _as_batch(params, windows):
    X = np.asarray(windows, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != params.n_features or X.shape[1] < 1:
        raise ShapeMismatch(
            f"expected windows of shape (W, {params.n_features}) or "
            f"(B, W, {params.n_features}); got {np.shape(windows)}"
        )
    return X, single


def forward(params, windows):
    """Run the LSTM over one window ``(W, F)`` or a batch ``(B, W, F)``.

    Returns ``(probs, cache)``; ``probs`` has shape ``(3,)`` or ``(B, 3)``.
    The recurrent state starts at zero for every window.
    """
    X, single = _as_batch(params, windows)
    B, W, _ = X.shape
    H = params.hidden_units
    scale = _gate_scale(H)
    Xt = np.ascontiguousarray(np.swapaxes(X, 0, 1))
    gates = Xt @ (params.W_x.T * scale) + params.b * scale  # (W, B, 4H)
    h = np.zeros((W + 1, B, H))
    c = np.zeros((W + 1, B, H))
    W_hT = params.W_h.T * scale
    for t in range(W):
        if t:
            gates[t] += h[t] @ W_hT
        a = _activate(gates[t], H)
        np.multiply(a[:, :H], a[:, 2 * H:3 * H], out=c[t + 1])
        if t:
            c[t + 1] += a[:, H:2 * H] * c[t]
        np.multiply(a[:, 3 * H:], np.tanh(c[t + 1]), out=h[t + 1])
    probs = softmax(h[W] @ params.W_d.T + params.b_d)
    cache = ForwardCache(X, h, c, gates, probs)
    return (probs[0] if single else probs), cache


def predict_proba(params, windows, batch_size=4096):
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim == 2:
        return forward(params, X)[0]
    if len(X) == 0:
        return np.zeros((0, N_CLASSES))
    return np.concatenate(
        [forward(params, X[s:s + batch_size])[0] for s in range(0, len(X), batch_size)]
    )


def loss(probs, labels):
    """Cross-entropy; the mean over samples when given a batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        return float(-np.log(probs[int(labels)]))
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(picked)))


def backward(params, labels, cache):
    """Exact gradient of the batch-mean cross-entropy, as a flat vector."""
    labels = np.atleast_1d(np.asarray(labels))
    X, h, c, gates = cache.X, cache.h, cache.c, cache.gates
    B, W, F = X.shape
    H = params.hidden_units

    dlogits = cache.probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    dW_d = dlogits.T @ h[W]
    db_d = dlogits.sum(axis=0)

    # local derivative of each activated gate w.r.t. its pre-activation
    deriv = gates * (1.0 - gates)
    deriv[:, :, 2 * H:3 * H] = 1.0 - gates[:, :, 2 * H:3 * H] ** 2
    tanh_c = np.tanh(c[1:])

    dz = np.empty((W, B, 4 * H))
    dh = dlogits @ params.W_d
    dc = np.zeros((B, H))
    for t in range(W - 1, -1, -1):
        a, tc, d = gates[t], tanh_c[t], dz[t]
        dc += dh * a[:, 3 * H:] * (1.0 - tc * tc)
        np.multiply(dc, a[:, 2 * H:3 * H], out=d[:, :H])
        np.multiply(dc, c[t], out=d[:, H:2 * H])
        np.multiply(dc, a[:, :H], out=d[:, 2 * H:3 * H])
        np.multiply(dh, tc, out=d[:, 3 * H:])
        d *= deriv[t]
        if t:
            dc *= a[:, H:2 * H]
            dh = d @ params.W_h

    dz2 = dz.reshape(W * B, 4 * H)
    Xt = np.ascontiguousarray(np.swapaxes(X, 0, 1)).reshape(W * B, F)
    dW_x = (Xt.T @ dz2).T
    dW_h = (h[:W].reshape(W * B, H).T @ dz2).T
    db = dz2.sum(axis=0)
    return np.concatenate([dW_x.ravel(), dW_h.ravel(), db, dW_d.ravel(), db_d])


def loss_and_grad(params, windows, labels):
    probs, cache = forward(params, windows)
    return loss(probs, labels), backward(params, labels, cache)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ShapeMismatch("params, grads and optimizer state must have equal length")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    denom = np.sqrt(v / (1.0 - state.beta2 ** t))
    denom += state.eps
    m_hat *= lr
    m_hat /= denom
    flat = params.flat - m_hat
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
    return ModelParams(flat, params.hidden_units, params.n_features), new_state


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(np.dot(grads, grads)))
    if max_norm is not None and norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def save_checkpoint(params, path):
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.hidden_units,
        params.n_features, GATE_ORDER.encode("ascii"),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, H, F, gates = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a fedturn checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if gates.decode("ascii") != GATE_ORDER:
        raise ValueError(f"{path}: unexpected gate ordering {gates!r}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return ModelParams(flat, H, F)
