"""Dense f64 tensors with reverse-mode differentiation.

Every continuous quantity in the package (logits, latents, pixels, losses)
lives in a :class:`Tensor`. Operations record a closure that maps the output
gradient to parent gradients; :meth:`Tensor.backward` walks the graph in
reverse topological order.

Also here: the seeded counter-based RNG, a lexicographically ordered
parameter store, AdamW, and a central-difference gradient checker.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e30

_GRAD_ENABLED = True
_REPLAY: "_StopGradTape | None" = None


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An immutable f64 array that optionally tracks how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction -----------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a), _unbroadcast(g, b)

        return Tensor._make(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _lift(other)
        a, b = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a), _unbroadcast(-g, b)

        return Tensor._make(self.data - other.data, (self, other), back)

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._make(x * y, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._make(x / y, (self, other), back)

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, exponent: float):
        x = self.data
        return Tensor._make(x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        x, y = self.data, other.data

        def back(g):
            gx = g @ np.swapaxes(y, -1, -2) if y.ndim > 1 else np.multiply.outer(g, y)
            if x.ndim > 1:
                gy = np.swapaxes(x, -1, -2) @ g
            else:
                gy = np.multiply.outer(x, g)
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._make(x @ y, (self, other), back)

    def __getitem__(self, idx):
        x_shape = self.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

        def back(g):
            full = np.zeros(x_shape, dtype=DTYPE)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # -- reductions and shape ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    # -- elementwise nonlinearities -----------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def gelu(self):
        # tanh approximation
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * (x * x * x))
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return Tensor._make(y, (self,), back)

    def clip(self, lo: float, hi: float):
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    # -- backward pass --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- free functions ----------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    pick_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), back)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]

    def back(g):
        flat = g.reshape(-1, table.shape[-1])
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), flat)
        return (full,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("token out of vocabulary")
    return Tensor._make(table.data[idx], (table,), back)


def _softmax_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = _lift(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite input")
    return _softmax_op(logits, temperature)


def _softmax_op(logits: Tensor, temperature: float = 1.0) -> Tensor:
    y = _softmax_array(logits.data / temperature)

    def back(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / temperature,)

    return Tensor._make(y, (logits,), back)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (logits,), back)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with entries where ``mask`` is False forced to exactly 0."""
    x = np.where(mask, scores.data, MASK_VALUE)
    y = _softmax_array(x)

    def back(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return Tensor._make(y, (scores,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def back(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), back)


def cross_entropy_seq(logits: Tensor, targets) -> Tensor:
    """Mean over positions of ``-log softmax(logits[t])[targets[t]]``.

    ``logits`` may carry leading batch axes; the mean runs over all of them.
    """
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError("shape mismatch between logits and targets")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError("token out of vocabulary")
    logp = log_softmax(logits)
    picked = take_along_last(logp, targets)
    return -picked.mean()


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[..., idx]`` elementwise (gather on the last axis)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    vals = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    return Tensor._make(vals, (x,), back)


# -- stop-gradient with replay ------------------------------------------------

class _StopGradTape:
    """Records every stop-gradient value on a base evaluation, replays them on later ones.

    Finite differences of a loss containing ``sg[.]`` only agree with reverse
    mode if the stopped quantities are held at their base-point values.
    """

    def __init__(self):
        self.values: list = []
        self.recording = True
        self.cursor = 0

    def take(self, value):
        if self.recording:
            self.values.append(value)
            return value
        out = self.values[self.cursor]
        self.cursor += 1
        return out


def stop_gradient(x: Tensor) -> Tensor:
    data = x.data if _REPLAY is None else _REPLAY.take(x.data)
    return Tensor(data)


def frozen(value: np.ndarray) -> np.ndarray:
    """Pass a non-differentiable, data-derived array (argmin indices etc.) through the replay tape."""
    return value if _REPLAY is None else _REPLAY.take(value)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; backward is the identity onto ``soft``.

    Under gradient-check replay this becomes ``sg[hard - soft] + soft`` with the
    offset frozen at the base point, which has the same derivative.
    """
    if _REPLAY is not None:
        offset = _REPLAY.take(np.asarray(hard, dtype=DTYPE) - soft.data)
        return Tensor(offset) + soft
    return Tensor._make(np.asarray(hard, dtype=DTYPE).copy(), (soft,), lambda g: (g,))


# -- parameters ------------------------------------------------------------------

class ParamStore:
    """Named parameters iterated in lexicographic path order."""

    def __init__(self, tensors: dict[str, np.ndarray | Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for path, value in (tensors or {}).items():
            self[path] = value

    def __setitem__(self, path: str, value) -> None:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        self._t[path] = Tensor(arr, requires_grad=True)

    def __getitem__(self, path: str) -> Tensor:
        return self._t[path]

    def __contains__(self, path: str) -> bool:
        return path in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def keys(self) -> list[str]:
        return sorted(self._t)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._t[k]) for k in sorted(self._t)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self.items()})

    def frozen(self, prefixes: Sequence[str] = ("",), share: bool = False) -> "ParamStore":
        """View in which paths under ``prefixes`` are non-differentiable constants.

        With ``share=True`` the remaining paths are the original tensors, so
        gradients land in this store.
        """
        out = ParamStore()
        for k, t in self.items():
            if any(k.startswith(p) for p in prefixes):
                out._t[k] = Tensor(t.data)
            else:
                out._t[k] = t if share else Tensor(t.data, requires_grad=True)
        return out

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.items()}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))

    def update(self, other: "ParamStore") -> None:
        for k, t in other.items():
            self[k] = t.data


# -- random numbers --------------------------------------------------------------

class SeededRng:
    """Philox-4x64 stream addressed by ``(seed, stream)``.

    The 128-bit Philox key is ``(seed, stream)``, so distinct streams never
    overlap and a given (seed, stream, draw index) is platform independent.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def spawn(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, mix64(self.stream, stream))

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


def mix64(*parts: int) -> int:
    """SplitMix64-style combination of integers into one 64-bit value."""
    mask = 0xFFFFFFFFFFFFFFFF
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (int(p) & mask)) & mask
        h = (h + 0x9E3779B97F4A7C15) & mask
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        h = z ^ (z >> 31)
    return h


def categorical_sample(probs, rng: SeededRng) -> int:
    """Inverse-CDF draw from one categorical distribution."""
    p = _as_array(probs)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("unnormalized distribution")
    return int(inverse_cdf(p, rng.uniform(1))[0])


def categorical_sample_rows(probs: np.ndarray, rng: SeededRng, num: int | None = None) -> np.ndarray:
    """Independent inverse-CDF draws, one per row of ``probs`` (``num`` draws per row if given).

    Returns an int array of shape ``probs.shape[:-1]`` or ``(num,) + probs.shape[:-1]``.
    """
    lead = probs.shape[:-1]
    size = lead if num is None else (num,) + lead
    u = rng.uniform(size)
    return inverse_cdf(probs, u)


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf = np.broadcast_to(cdf, u.shape + probs.shape[-1:])
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # guard against u landing above a cdf that rounds to 1 - 1e-16
    return np.minimum(idx, probs.shape[-1] - 1)


# -- optimization ---------------------------------------------------------------

class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], only: Sequence[str] | None = None) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for path in params.keys():
            if only is not None and not any(path.startswith(p) for p in only):
                continue
            g = grads[path]
            m = self.m.get(path, np.zeros_like(g))
            v = self.v.get(path, np.zeros_like(g))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[path], self.v[path] = m, v
            p = params[path].data
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            params[path] = p - self.lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.m):
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = 0.0
    for k in sorted(grads):
        total += float(np.sum(grads[k] * grads[k]))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise FloatingPointError("gradient blow-up")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- gradient checking ------------------------------------------------------------

def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-4,
               paths: Sequence[str] | None = None, max_entries: int | None = None,
               rng: SeededRng | None = None) -> float:
    """Max symmetric relative error between reverse-mode and central-difference gradients.

    Stop-gradient values inside ``f`` are frozen at their base-point values for
    the perturbed evaluations. ``max_entries`` subsamples coordinates per
    parameter (chosen with ``rng``) to bound the cost on larger tensors.
    """
    global _REPLAY
    tape = _StopGradTape()
    params.zero_grad()
    _REPLAY = tape
    try:
        loss = f(params)
        loss.backward()
    finally:
        _REPLAY = None
    analytic = params.grads()
    for g in analytic.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("gradient blow-up")
    tape.recording = False

    def evaluate() -> float:
        global _REPLAY
        tape.cursor = 0
        _REPLAY = tape
        try:
            with no_grad():
                return float(f(params).data)
        finally:
            _REPLAY = None

    worst = 0.0
    rng = rng or SeededRng(0, 0)
    for path in (paths if paths is not None else params.keys()):
        base = params[path].data.copy()
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.generator.choice(base.size, size=max_entries, replace=False))
        for i in flat_idx:
            pert = base.copy()
            pert.flat[i] = base.flat[i] + h
            params._t[path].data = pert
            fp = evaluate()
            pert = base.copy()
            pert.flat[i] = base.flat[i] - h
            params._t[path].data = pert
            fm = evaluate()
            params._t[path].data = base
            g_fd = (fp - fm) / (2 * h)
            g_ad = float(analytic[path].flat[i])
            err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
            worst = max(worst, err)
    return worst
