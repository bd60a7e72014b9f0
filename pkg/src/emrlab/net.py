"""Dense multi-head network with manual backpropagation.

All trainable parameters live in one flat float64 buffer. Layer weights and
biases are views into that buffer, so exporting the parameter vector is a copy
and importing is an in-place overwrite.

Parameter order: for each trunk layer (shallow to deep) the weight matrix of
shape ``(out, in)`` in row-major order followed by its bias, then for each head
(by task id) its weight matrix and bias in the same layout.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DivergenceError


@dataclass(frozen=True)
class LayerMap:
    """Maps every parameter index to a named layer and a kind (weight or bias)."""

    names: tuple
    index: np.ndarray
    kind: np.ndarray = None

    def __post_init__(self):
        index = np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "index", index)
        if self.kind is not None:
            object.__setattr__(self, "kind", np.asarray(self.kind))
        if index.size and (index.min() < 0 or index.max() >= len(self.names)):
            raise ValueError("layer index out of range of layer names")

    def __len__(self):
        return self.index.shape[0]

    def mask(self, prefix):
        """Boolean mask of parameters whose layer name starts with ``prefix``."""
        hits = np.array([n.startswith(prefix) for n in self.names], dtype=bool)
        return hits[self.index] if len(self.names) else np.zeros(0, dtype=bool)


@dataclass
class ForwardTrace:
    """Post-activation matrices captured during a forward pass.

    ``activations`` holds one ``(batch, width)`` matrix per trunk layer,
    ``logits`` the head output.
    """

    inputs: np.ndarray
    activations: list = field(default_factory=list)
    logits: np.ndarray = None

    @property
    def layers(self):
        return [*self.activations, self.logits]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class MultiHeadNet:
    """Shared ReLU trunk followed by one linear classifier per task.

    Parameters
    ----------
    n_inputs : int
        Input feature width.
    hidden : sequence of int
        Widths of the trunk layers. Each trunk layer is ``relu(W h + b)``.
        An empty sequence connects the heads directly to the inputs.
    head_sizes : sequence of int
        Number of classes for each head; head ``t`` serves task ``t``.
    seed : int
        Seed for the uniform Glorot initialization. Biases start at zero.
    """

    def __init__(self, n_inputs, hidden=(100, 100), head_sizes=(2,), seed=0):
        if n_inputs <= 0 or any(h <= 0 for h in hidden) or any(c <= 0 for c in head_sizes):
            raise ValueError("layer widths must be positive")
        if not head_sizes:
            raise ValueError("at least one head is required")
        self.n_inputs = int(n_inputs)
        self.hidden = tuple(int(h) for h in hidden)
        self.head_sizes = tuple(int(c) for c in head_sizes)
        self.seed = seed

        widths = (self.n_inputs, *self.hidden)
        shapes = [(f"trunk.{i}", widths[i + 1], widths[i]) for i in range(len(self.hidden))]
        shapes += [(f"head.{t}", c, widths[-1]) for t, c in enumerate(self.head_sizes)]
        self._shapes = shapes

        size = sum(out * (inp + 1) for _, out, inp in shapes)
        self._flat = np.zeros(size, dtype=np.float64)
        self._weights, self._biases, self._slices = [], [], []
        layer_index = np.empty(size, dtype=np.int64)
        kind = np.empty(size, dtype="<U6")
        offset = 0
        for li, (_, out, inp) in enumerate(shapes):
            start = offset
            w = self._flat[offset:offset + out * inp].reshape(out, inp)
            kind[offset:offset + out * inp] = "weight"
            offset += out * inp
            b = self._flat[offset:offset + out]
            kind[offset:offset + out] = "bias"
            offset += out
            layer_index[start:offset] = li
            self._weights.append(w)
            self._biases.append(b)
            self._slices.append(slice(start, offset))
        self.layer_map = LayerMap(tuple(s[0] for s in shapes), layer_index, kind)

        rng = np.random.default_rng(seed)
        for li in range(len(shapes)):
            self._init_layer(li, rng)

    # -- parameters ------------------------------------------------------

    @property
    def n_params(self):
        return self._flat.shape[0]

    @property
    def depth(self):
        """Number of trunk layers."""
        return len(self.hidden)

    @property
    def n_heads(self):
        return len(self.head_sizes)

    def parameters(self):
        """Copy of the flat parameter vector."""
        return self._flat.copy()

    def set_parameters(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._flat.shape:
            raise ValueError(f"expected {self._flat.shape[0]} parameters, got {values.shape}")
        self._flat[:] = values
        return self

    def layer(self, name):
        """Return ``(weight, bias)`` views for a named layer."""
        li = self.layer_map.names.index(name)
        return self._weights[li], self._biases[li]

    def layer_slice(self, name):
        return self._slices[self.layer_map.names.index(name)]

    def copy(self):
        twin = MultiHeadNet(self.n_inputs, self.hidden, self.head_sizes, seed=self.seed)
        return twin.set_parameters(self._flat)

    def same_architecture(self, other):
        return (self.n_inputs, self.hidden, self.head_sizes) == (
            other.n_inputs, other.hidden, other.head_sizes)

    def _init_layer(self, li, rng):
        w, b = self._weights[li], self._biases[li]
        out, inp = w.shape
        limit = np.sqrt(6.0 / (inp + out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
        b[...] = 0.0

    def reinitialize(self, name, seed):
        """Re-draw one layer's weights (biases reset to zero)."""
        self._init_layer(self.layer_map.names.index(name), np.random.default_rng(seed))
        return self

    # -- forward / backward ---------------------------------------------

    def _check_head(self, head):
        if not isinstance(head, (int, np.integer)) or not 0 <= head < self.n_heads:
            raise KeyError(f"unknown head id {head!r}; net has {self.n_heads} heads")
        return len(self.hidden) + int(head)

    def forward(self, batch, head, capture=False):
        """Compute logits of ``head`` for ``batch``.

        Returns ``(logits, trace)`` where ``trace`` is a :class:`ForwardTrace`
        when ``capture`` is set and ``None`` otherwise.
        """
        hi = self._check_head(head)
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ValueError(f"batch must have shape (n, {self.n_inputs}), got {x.shape}")
        h = x
        acts = []
        for li in range(len(self.hidden)):
            h = np.maximum(h @ self._weights[li].T + self._biases[li], 0.0)
            acts.append(h)
        logits = h @ self._weights[hi].T + self._biases[hi]
        trace = ForwardTrace(x, acts, logits) if capture else None
        return logits, trace

    def backward(self, trace, head, dlogits):
        """Gradient of a scalar objective given its derivative w.r.t. the logits."""
        hi = self._check_head(head)
        grad = np.zeros_like(self._flat)
        inputs = [trace.inputs, *trace.activations]
        delta = np.asarray(dlogits, dtype=np.float64)

        sl = self._slices[hi]
        w = self._weights[hi]
        gw = delta.T @ inputs[-1]
        grad[sl] = np.concatenate([gw.ravel(), delta.sum(axis=0)])
        dh = delta @ w
        for li in reversed(range(len(self.hidden))):
            dz = dh * (trace.activations[li] > 0.0)
            gw = dz.T @ inputs[li]
            grad[self._slices[li]] = np.concatenate([gw.ravel(), dz.sum(axis=0)])
            if li:
                dh = dz @ self._weights[li]
        return grad

    def loss_and_grad(self, batch, labels, head):
        """Mean softmax cross-entropy over the batch and its parameter gradient."""
        logits, trace = self.forward(batch, head, capture=True)
        y = np.asarray(labels)
        n_classes = logits.shape[1]
        if y.shape != (logits.shape[0],) or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be an integer vector, one per sample")
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"label out of range for head with {n_classes} classes")
        logp = _log_softmax(logits)
        n = logits.shape[0]
        loss = -logp[np.arange(n), y].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        return float(max(loss, 0.0)), self.backward(trace, head, dlogits)

    def output_sensitivity(self, batch, head):
        """Gradient of the batch mean of ``0.5 * ||logits||^2``."""
        logits, trace = self.forward(batch, head, capture=True)
        return self.backward(trace, head, logits / logits.shape[0])

    def predict(self, batch, head):
        return np.argmax(self.forward(batch, head)[0], axis=1)

    def accuracy(self, batch, labels, head):
        labels = np.asarray(labels)
        if labels.size == 0:
            return 0.0
        # integer count keeps the reduction order-independent
        return int(np.sum(self.predict(batch, head) == labels)) / labels.size

    def apply_sgd(self, grad, lr):
        """In-place ``theta <- theta - lr * grad``."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self._flat.shape:
            raise ValueError(f"gradient length {grad.shape} does not match {self._flat.shape}")
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite gradient", {"stable": False})
        if lr:
            self._flat -= lr * grad
        return self


def pack_params(values):
    """Serialize a parameter vector: little-endian uint64 length, then float64 values."""
    values = np.ascontiguousarray(values, dtype="<f8")
    return struct.pack("<Q", values.shape[0]) + values.tobytes()


def unpack_params(blob):
    if len(blob) < 8:
        raise ValueError("truncated parameter blob")
    (n,) = struct.unpack_from("<Q", blob, 0)
    if len(blob) != 8 + 8 * n:
        raise ValueError(f"parameter blob holds {(len(blob) - 8) / 8} values, header says {n}")
    return np.frombuffer(blob, dtype="<f8", offset=8, count=n).astype(np.float64)
