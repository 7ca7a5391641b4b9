"""Minimal dense-tensor reverse-mode automatic differentiation.

A ``Tensor`` wraps a float64 numpy array.  While a ``Tape`` is open, every
operation whose inputs touch a gradient-requiring tensor is recorded as
(output id, input ids, local gradient rule); one reverse sweep then yields
gradients for every reachable node.  Tensors are immutable values once
produced; the tape is session-local, so independent training sessions can
run in parallel without shared state.

All forward results are checked finite: NaN/Inf anywhere is treated as an
error state, not a value.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "GradientMap",
    "AutodiffError", "DimensionError", "NumericError", "ContractError",
    "forward", "matmul", "add", "subtract", "multiply", "scale", "add_const",
    "neg", "relu", "tanh", "sigmoid", "softplus", "softmax", "log", "exp",
    "tsum", "tmean", "l2norm", "concatenate", "embedding_lookup",
    "batchnorm_train", "batchnorm_eval", "dropout", "reciprocal", "clamp",
    "check_gradient", "finite_difference_grad",
    "AdamWState", "adamw_step", "AdamW",
]


class AutodiffError(Exception):
    pass


class DimensionError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class ContractError(AutodiffError):
    pass


_uid_counter = itertools.count(1)


class _TapeStack(threading.local):
    """Per-thread active-tape stack: sessions on different threads never
    observe each other's tapes."""

    def __init__(self):
        self.stack: list["Tape"] = []


_tapes = _TapeStack()


class Tensor:
    """Immutable float64 array with an identity usable as a tape node."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, uid={self.uid})"

    # light operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add_const(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if np.isscalar(other) else subtract(self, other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else multiply(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Leaf tensor tracked by optimizers.  ``data`` is replaced on update."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class _Record:
    __slots__ = ("out_uid", "in_uids", "backward")

    def __init__(self, out_uid, in_uids, backward):
        self.out_uid = out_uid
        self.in_uids = in_uids
        self.backward = backward


class GradientMap:
    """node-id -> gradient array, keyed by tensor identity."""

    def __init__(self, grads: dict):
        self._grads = grads

    def get(self, t: Tensor):
        return self._grads.get(t.uid)

    def __contains__(self, t: Tensor):
        return t.uid in self._grads

    def __len__(self):
        return len(self._grads)


class Tape:
    """Ordered operation record; inputs always precede their consumers."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self):
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.stack.pop()
        assert popped is self
        return False

    def record(self, out_uid: int, in_uids, backward) -> None:
        self._records.append(_Record(out_uid, tuple(in_uids), backward))

    def __len__(self):
        return len(self._records)

    def gradients(self, loss: Tensor | None = None, seeds: dict | None = None) -> GradientMap:
        """Reverse sweep.  ``loss`` must be scalar; ``seeds`` maps tensors to
        externally supplied upstream gradients (used when a graph is spliced
        across process boundaries)."""
        grads: dict[int, np.ndarray] = {}
        if loss is not None:
            if loss.data.size != 1:
                raise ContractError("backward requires a scalar loss")
            grads[loss.uid] = np.ones_like(loss.data)
        if seeds:
            for t, g in seeds.items():
                g = np.asarray(g, dtype=np.float64)
                if g.shape != t.data.shape:
                    raise DimensionError("seed gradient shape mismatch")
                grads[t.uid] = grads[t.uid] + g if t.uid in grads else g
        if not grads:
            raise ContractError("nothing to differentiate")
        owned: set[int] = set()
        for rec in reversed(self._records):
            g = grads.get(rec.out_uid)
            if g is None:
                continue
            for uid, gin in zip(rec.in_uids, rec.backward(g)):
                if gin is None:
                    continue
                if uid not in grads:
                    grads[uid] = gin
                elif uid in owned:
                    grads[uid] += gin
                else:
                    # first stored contribution may alias an upstream array;
                    # copy-on-accumulate keeps everything safe
                    grads[uid] = grads[uid] + gin
                    owned.add(uid)
        return GradientMap(grads)


def _active_tape() -> Tape | None:
    return _tapes.stack[-1] if _tapes.stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single-pass detector: any NaN/Inf in the array forces a non-finite sum
    # (inf - inf folds to NaN), so one reduction replaces a full isfinite scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(arr.sum())
    if not np.isfinite(total):
        raise NumericError(f"non-finite values produced by {op}")


def _emit(op: str, out_data: np.ndarray, inputs, backward) -> Tensor:
    """Create the output tensor and record the op if the tape is tracking."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out.uid, [t.uid for t in inputs], backward)
    return out


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", ad @ bd, (a, b), backward)


def _broadcast_ok(sa, sb) -> bool:
    if sa == sb:
        return True
    # allowed: row vector against matrix rows, column against matrix, scalar
    if len(sb) == 0 or sb == (1,):
        return True
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sa) == 2 and len(sb) == 2 and sb == (sa[0], 1):
        return True
    if len(sa) == 2 and len(sb) == 2 and sa == (sb[0], 1):
        return True
    return False


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"add shapes {a.shape} + {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _emit("add", a.data + b.data, (a, b), backward)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if not (_broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape)):
        raise DimensionError(f"multiply shapes {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _emit("multiply", ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit("scale", x.data * c, (x,), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g,)

    return _emit("add_const", x.data + c, (x,), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0.0), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", y, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free via tanh, one fused vector pass
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    y = _softplus(x.data)
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s,)

    return _emit("softplus", y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _emit("softmax", y, (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _emit("log", y, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    def backward(g):
        return (g * y,)

    return _emit("exp", y, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _emit("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _emit("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def l2norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    sq = np.sum(x.data * x.data, axis=axis, keepdims=True)
    n_keep = np.sqrt(sq)
    xd = x.data

    def backward(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(n_keep > 0, xd / n_keep, 0.0)
        return (np.broadcast_to(gg, xd.shape) * d,)

    if keepdims:
        out = n_keep
    elif axis is None:
        out = n_keep.reshape(())
    else:
        out = np.squeeze(n_keep, axis=axis)
    return _emit("l2norm", out, (x,), backward)


def concatenate(tensors, axis: int = 1) -> Tensor:
    if not tensors:
        raise DimensionError("concatenate of nothing")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _emit("concatenate", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("embedding indices must be a flat vector")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise DimensionError("embedding index out of vocabulary")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding-lookup", table.data[idx], (table,), backward)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch statistics normalization.  Returns (y, batch_mean, batch_var);
    the caller owns the running-stat update."""
    if x.ndim != 2:
        raise DimensionError("batch-norm-1d expects a 2-D batch")
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    y = gamma.data * xhat + beta.data
    gd = gamma.data

    def backward(g):
        dbeta = g.sum(axis=0)
        dgamma = (g * xhat).sum(axis=0)
        dx = (gd * invstd / n) * (n * g - dbeta - xhat * dgamma)
        return dx, dgamma, dbeta

    out = _emit("batch-norm-1d", y, (x, gamma, beta), backward)
    return out, mu, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                   mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * invstd
    gd = gamma.data

    def backward(g):
        return g * gd * invstd, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batch-norm-1d", gd * xhat + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-p); disable at eval by
    not calling this."""
    if not 0.0 <= p < 1.0:
        raise ContractError("dropout probability must be in [0, 1)")
    if p == 0.0:
        return scale(x, 1.0)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _emit("dropout", x.data * keep, (x,), backward)


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = 1.0 / x.data
    xd = x.data

    def backward(g):
        return (-g / (xd * xd),)

    return _emit("reciprocal", y, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Value clipping with straight-through gradient inside [lo, hi]."""
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * mask,)

    return _emit("clamp", np.clip(x.data, lo, hi), (x,), backward)


_FORWARD_KINDS = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax-over-axis": softmax,
    "log": log,
    "exponent": exp,
    "sum": tsum,
    "mean": tmean,
    "L2-norm": l2norm,
    "concatenate": lambda *ts, **kw: concatenate(list(ts), **kw),
    "embedding-lookup": embedding_lookup,
    "batch-norm-1d": lambda x, g, b, **kw: batchnorm_train(x, g, b, **kw)[0],
    "dropout": dropout,
}


def forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Generic dispatcher over the supported op set."""
    try:
        fn = _FORWARD_KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grad(fn, point: np.ndarray, step: float = 1e-6):
    """Central differences of a scalar function of an array argument.

    Returns (grad, smooth_mask): coordinates where the one-sided differences
    disagree badly (kinks, e.g. relu at 0) are masked out.
    """
    point = np.asarray(point, dtype=np.float64)
    f0 = float(fn(Tensor(point)).data)
    grad = np.zeros(point.size)
    smooth = np.ones(point.size, dtype=bool)
    flat = point.ravel()
    for i in range(flat.size):
        orig = flat[i]
        pert = point.copy()
        pert.ravel()[i] = orig + step
        fp = float(fn(Tensor(pert)).data)
        pert.ravel()[i] = orig - step
        fm = float(fn(Tensor(pert)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function non-finite at perturbed point")
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        grad[i] = (fp - fm) / (2.0 * step)
        if abs(fwd - bwd) > 1e-2 * (abs(fwd) + abs(bwd) + 1.0):
            smooth[i] = False
    return grad.reshape(point.shape), smooth.reshape(point.shape)


def check_gradient(fn, point: Tensor, step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Kink coordinates (one-sided difference disagreement) are excluded from
    the maximum.  ``fn`` must be scalar-valued and re-runnable.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    leaf = Parameter(np.array(point.data, copy=True))
    with Tape() as tape:
        out = fn(leaf)
    if out.data.size != 1:
        raise ContractError("check_gradient requires a scalar-valued function")
    analytic = tape.gradients(out).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(leaf.data)
    numeric, smooth = finite_difference_grad(fn, point.data, step)
    a = analytic.ravel()[smooth.ravel()]
    n = numeric.ravel()[smooth.ravel()]
    if a.size == 0:
        return 0.0
    rel = np.abs(a - n) / np.maximum(1.0, np.abs(a))
    return float(rel.max())


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamWState:
    """Per-parameter moments and step counter."""

    __slots__ = ("m", "v", "t", "lr", "beta1", "beta2", "eps", "weight_decay")

    def __init__(self, shape, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """One decoupled-weight-decay Adam update; returns the new parameter."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError("adamw shapes disagree")
    _check_finite(grad, "adamw_step gradient")
    state.t += 1
    state.m = state.beta1 * state.m
    state.m += (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v
    state.v += (1.0 - state.beta2) * grad * grad
    denom = np.sqrt(state.v / (1.0 - state.beta2 ** state.t))
    denom += state.eps
    step = state.m / (1.0 - state.beta1 ** state.t)
    step /= denom
    step *= state.lr
    step += (state.lr * state.weight_decay) * param
    return param - step


class AdamW:
    """Tracks AdamW state for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.states = {p.uid: AdamWState(p.data.shape, lr, beta1, beta2, eps,
                                         weight_decay)
                       for p in self.params}

    def step(self, grads: GradientMap) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            p.data = adamw_step(p.data, g, self.states[p.uid])
