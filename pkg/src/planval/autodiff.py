"""Small reverse-mode autodiff over float64 numpy arrays.

A ``Tape`` records primitive operations as they run. Each recorded node keeps
its forward function (so the tape can be replayed) and one vector-Jacobian
product per parent. ``backward`` walks the tape once in reverse and returns
gradients keyed by leaf name, which for parameters is the ParamStore key.

Only what the learners need is here: broadcasting arithmetic, matmul (batched
via numpy broadcasting, which is how ensembles run), a few smooth
nonlinearities, clipping, reductions, concatenation, slicing and a row gather.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, StateError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """A value on a tape."""

    __slots__ = ("value", "tape", "parents", "vjps", "fwd", "requires_grad", "name", "grad")
    __array_priority__ = 100

    def __init__(self, value, tape, parents=(), vjps=(), fwd=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.fwd = fwd
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of operations.

    ``Tape(record=False)`` computes values only; it is used on inference
    paths that share code with training paths.
    """

    def __init__(self, record=True):
        self.record = record
        self.nodes = []
        self._params = {}
        self.visits = 0

    # leaves -------------------------------------------------------------------
    def const(self, value):
        return Var(np.asarray(value, dtype=np.float64), self)

    def leaf(self, value, name, requires_grad=True):
        v = Var(np.asarray(value, dtype=np.float64), self, requires_grad=requires_grad and self.record,
                name=name)
        if self.record:
            self.nodes.append(v)
        return v

    def param(self, store, name, trainable=True):
        """Leaf bound to a ParamStore entry; repeated calls share one leaf."""
        key = (id(store), name)
        v = self._params.get(key)
        if v is None:
            v = self.leaf(store[name], name, requires_grad=trainable)
            self._params[key] = v
        return v

    # recording ------------------------------------------------------------------
    def op(self, fwd, parents, vjps, out=None):
        if out is None:
            out = fwd(*[p.value for p in parents])
        need = self.record and any(p.requires_grad for p in parents)
        if not need:
            return Var(out, self)
        v = Var(out, self, tuple(parents), tuple(vjps), fwd, True)
        self.nodes.append(v)
        return v

    def replay(self):
        """Recompute every recorded value from its parents; returns the last value."""
        last = None
        for n in self.nodes:
            if n.fwd is not None:
                n.value = n.fwd(*[p.value for p in n.parents])
            last = n.value
        return last

    def backward(self, out, output_grad=None):
        """Reverse pass from ``out``; returns {leaf name: gradient}."""
        if not self.record:
            raise StateError("tape was created with record=False")
        if not isinstance(out, Var) or out.tape is not self:
            raise StateError("output does not belong to this tape")
        if not self.nodes:
            raise StateError("backward called before a forward pass was recorded")
        for n in self.nodes:
            n.grad = None
        g0 = np.ones_like(out.value) if output_grad is None else np.asarray(output_grad, dtype=np.float64)
        if g0.shape != out.value.shape:
            raise ShapeError(f"output_grad shape {g0.shape} != output shape {out.value.shape}")
        grads = {}
        if not out.requires_grad:
            return _Gradients(self, grads)
        out.grad = g0
        self.visits = 0
        for n in reversed(self.nodes):
            if n.grad is None:
                continue
            self.visits += 1
            if n.fwd is None:          # leaf
                if n.name is not None:
                    grads[n.name] = grads[n.name] + n.grad if n.name in grads else n.grad
                continue
            for p, vjp in zip(n.parents, n.vjps):
                if not p.requires_grad or vjp is None:
                    continue
                gp = vjp(n.grad)
                p.grad = gp if p.grad is None else p.grad + gp
        return _Gradients(self, grads)


class _Gradients(dict):
    """Gradient dict; ``aligned(store)`` fills zeros for untouched entries."""

    def __init__(self, tape, d):
        super().__init__(d)

    def aligned(self, store):
        return OrderedDict((k, self.get(k, np.zeros_like(store[k]))) for k in store.names())


def backward(tape, out, output_grad=None):
    """Module-level alias of ``Tape.backward``."""
    return tape.backward(out, output_grad)


# -- primitives -----------------------------------------------------------------------


def _as_var(x, tape):
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


def add(a, b):
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    sa, sb = a.shape, b.shape
    return t.op(np.add, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    sa, sb = a.shape, b.shape
    return t.op(np.subtract, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b):
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    av, bv = a.value, b.value
    return t.op(np.multiply, (a, b),
                (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    av, bv = a.value, b.value
    return t.op(np.divide, (a, b),
                (lambda g: _unbroadcast(g / bv, av.shape),
                 lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a):
    return a.tape.op(np.negative, (a,), (np.negative,))


def matmul(a, b):
    """numpy matmul with broadcasting over leading (ensemble) axes."""
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape}")
    return t.op(np.matmul, (a, b),
                (lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
                 lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def _unary(x, f, df):
    """Elementwise op; ``df(x_value, y_value)`` gives the local derivative."""
    xv = x.value
    y = f(xv)
    return x.tape.op(f, (x,), (lambda g: g * df(xv, y),), out=y)


def tanh(x):
    return _unary(x, np.tanh, lambda v, y: 1.0 - y * y)


def exp(x):
    return _unary(x, np.exp, lambda v, y: y)


def log(x):
    return _unary(x, np.log, lambda v, y: 1.0 / v)


def square(x):
    return _unary(x, np.square, lambda v, y: 2.0 * v)


def sigmoid(x):
    return _unary(x, _sigmoid, lambda v, y: y * (1.0 - y))


def softplus(x):
    return _unary(x, _softplus, lambda v, y: _sigmoid(v))


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, y: (v > 0).astype(np.float64))


def swish(x):
    def d(v, y):
        s = _sigmoid(v)
        return s * (1.0 + v * (1.0 - s))
    return _unary(x, lambda v: v * _sigmoid(v), d)


def identity(x):
    return x


def clip(x, lo, hi):
    """Hard clip; gradient passes only strictly inside the bounds."""
    return _unary(x, lambda v: np.clip(v, lo, hi), lambda v, y: ((v > lo) & (v < hi)).astype(np.float64))


def _sigmoid(v):
    return expit(v)


def _softplus(v):
    return np.logaddexp(0.0, v)


def reduce_sum(x, axis=None, keepdims=False):
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()
    return x.tape.op(lambda v: np.sum(v, axis=axis, keepdims=keepdims), (x,), (vjp,))


def reduce_mean(x, axis=None, keepdims=False):
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return reduce_sum(x, axis, keepdims) * (1.0 / float(n))


def concat(xs, axis=-1):
    t = _tape_of(*xs)
    xs = [_as_var(x, t) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def make(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]
        return vjp
    return t.op(lambda *vs: np.concatenate(vs, axis=axis), tuple(xs), tuple(make(i) for i in range(len(xs))))


def getitem(x, idx):
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out
    return x.tape.op(lambda v: v[idx], (x,), (vjp,))


def reshape(x, shape):
    old = x.shape
    return x.tape.op(lambda v: v.reshape(shape), (x,), (lambda g: g.reshape(old),))


def pick_member(x, member):
    """x has shape (E, B, D); returns row b of member ``member[b]`` -> (B, D)."""
    member = np.asarray(member, dtype=int)
    rows = np.arange(x.shape[1])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[member, rows] = g
        return out
    return x.tape.op(lambda v: v[member, rows], (x,), (vjp,))


def assemble_rows(parts, index_sets, n):
    """Inverse of row gathers: row ``index_sets[i][j]`` of the output is ``parts[i][j]``."""
    t = _tape_of(*parts)
    parts = [_as_var(p, t) for p in parts]
    width = parts[0].shape[1:]
    index_sets = [np.asarray(ix, dtype=int) for ix in index_sets]

    def fwd(*vals):
        out = np.zeros((n,) + width)
        for ix, v in zip(index_sets, vals):
            out[ix] = v
        return out
    return t.op(fwd, tuple(parts), tuple((lambda g, ix=ix: g[ix]) for ix in index_sets))


ACTIVATIONS = {"tanh": tanh, "relu": relu, "swish": swish, "softplus": softplus,
               "sigmoid": sigmoid, "identity": identity}


# -- parameters ------------------------------------------------------------------------


class ParamStore:
    """Named float64 arrays with fixed shapes, plus an update counter."""

    def __init__(self):
        self._arrays = OrderedDict()
        self.step = 0

    def add(self, name, value):
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(value, dtype=np.float64, copy=True)

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __len__(self):
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def assign(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._arrays[name].shape}")
        self._arrays[name][...] = value

    def copy(self):
        out = ParamStore()
        for k, v in self._arrays.items():
            out.add(k, v)
        out.step = self.step
        return out

    def subset(self, prefix):
        out = ParamStore()
        for k, v in self._arrays.items():
            if k.startswith(prefix):
                out.add(k, v)
        return out

    def size(self):
        return int(np.sum([v.size for v in self._arrays.values()]))

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self._arrays.values())


@dataclass(frozen=True)
class MLPSpec:
    """Layer sizes (input first), hidden activation, output activation.

    ``ensemble`` > 0 gives every layer a leading member axis.
    """

    prefix: str
    sizes: tuple
    activation: str = "relu"
    out_activation: str = "identity"
    ensemble: int = 0

    def layer_names(self, i):
        return f"{self.prefix}.w{i}", f"{self.prefix}.b{i}"


def init_mlp(store, spec, rng, scale="fan_in"):
    """Create weights for ``spec`` in ``store`` (truncated-free Gaussian init)."""
    for i, (n_in, n_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        wn, bn = spec.layer_names(i)
        lead = (spec.ensemble,) if spec.ensemble else ()
        if scale == "zeros":
            w = np.zeros(lead + (n_in, n_out))
        else:
            std = 1.0 / math.sqrt(n_in)
            w = rng.standard_normal(lead + (n_in, n_out)) * std
        store.add(wn, w)
        store.add(bn, np.zeros(lead + (1, n_out)) if spec.ensemble else np.zeros(n_out))


def mlp_forward(params, spec, x, tape, trainable=True):
    """Forward pass of the MLP described by ``spec`` on input ``x``."""
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    if xv.shape[-1] != spec.sizes[0]:
        raise ShapeError(f"{spec.prefix}: input width {xv.shape[-1]} != {spec.sizes[0]}")
    if not np.all(np.isfinite(xv)):
        raise NumericError(f"{spec.prefix}: non-finite input")
    h = x if isinstance(x, Var) else tape.const(xv)
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        wn, bn = spec.layer_names(i)
        h = matmul(h, tape.param(params, wn, trainable)) + tape.param(params, bn, trainable)
        h = act(h) if i < n_layers - 1 else ACTIVATIONS[spec.out_activation](h)
    return h


# -- squashed Gaussian head -------------------------------------------------------------


@dataclass
class GaussianSample:
    mean: Var
    log_std: Var
    noise: np.ndarray
    value: Var
    log_prob: Var        # one entry per sample (summed over action dims)


_SQUASH_EDGE = 1.0 - 1e-12


def gaussian_head(params, spec, state_input, noise, tape):
    """Reparameterised tanh-squashed Gaussian.

    The network in ``spec`` outputs [mean, log_std] (each act_dim wide);
    log_std is clamped to [-20, 2]. The log-density includes the tanh
    correction log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
    """
    noise = np.asarray(noise, dtype=np.float64)
    out = mlp_forward(params, spec, state_input, tape)
    d = spec.sizes[-1] // 2
    if noise.shape[-1] != d:
        raise ShapeError(f"noise width {noise.shape[-1]} != action width {d}")
    mean = out[..., :d]
    log_std = clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)
    return squashed_sample(mean, log_std, noise)


def squashed_sample(mean, log_std, noise):
    u = mean + exp(log_std) * noise
    value = clip(tanh(u), -_SQUASH_EDGE, _SQUASH_EDGE)
    gauss = -0.5 * noise * noise - HALF_LOG_2PI - log_std
    corr = 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))
    log_prob = reduce_sum(gauss - corr, axis=-1)
    return GaussianSample(mean, log_std, noise, value, log_prob)


# -- optimiser ------------------------------------------------------------------------------


class Adam:
    """Adam with bias correction. Rejects non-finite gradients by name."""

    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if np.shape(g) != params[name].shape:
                raise ShapeError(f"{name}: gradient shape {np.shape(g)} != {params[name].shape}")
            bad = ~np.isfinite(g)
            if np.any(bad):
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise NumericError(f"non-finite gradient in {name}{list(idx)}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name][...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.step += 1
        return params

    def state(self, prefix):
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, prefix, arrays):
        self.t = int(arrays[f"{prefix}.t"][0])
        for key, val in arrays.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3:]] = np.array(val)
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3:]] = np.array(val)


def adam_step(params, grads, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, optimizer=None):
    """Functional form: one Adam step (state kept in ``optimizer`` if given)."""
    opt = optimizer or Adam(lr, betas, eps)
    return opt.step(params, grads)


# -- gradient checking ------------------------------------------------------------------


def finite_diff_check(loss_fn, params, epsilon=1e-4, names=None, max_coords=None, rng=None,
                      stencil=4):
    """Largest relative error between analytic and numeric gradients.

    ``loss_fn(params)`` returns (loss, grads) with grads keyed by parameter
    name. Numeric derivatives use central differences (the fourth-order
    five-point stencil by default, ``stencil=2`` for the plain two-point one).
    Relative error per coordinate is |num - ana| / max(1e-8, |ana|).
    ``max_coords`` checks a random subset of coordinates per entry.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    _, grads = loss_fn(params)
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name in names or params.names():
        arr = params[name]
        ana = grads.get(name, np.zeros_like(arr))
        flat = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat = rng.choice(arr.size, max_coords, replace=False)
        for i in flat:
            idx = np.unravel_index(i, arr.shape)
            x0 = arr[idx]

            def f(dx):
                arr[idx] = x0 + dx
                return float(loss_fn(params)[0])
            if stencil == 2:
                num = (f(epsilon) - f(-epsilon)) / (2.0 * epsilon)
            else:
                num = (-f(2 * epsilon) + 8 * f(epsilon) - 8 * f(-epsilon) + f(-2 * epsilon)) / (12.0 * epsilon)
            arr[idx] = x0
            a = float(ana[idx])
            worst = max(worst, abs(num - a) / max(1e-8, abs(a)))
    return worst
