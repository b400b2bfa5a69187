"""Minimal reverse-mode autodiff over dense numpy arrays.

Sized for this package rather than general use: a fixed primitive set
(matmul, elementwise arithmetic, exp/log/sigmoid/softplus/relu, reductions,
softmax, concat/reshape/transpose/take, and the selective state scan), a
named parameter store with per-entry freeze flags, an AdamW update rule,
and a central-difference gradient auditor.

All node values are float64; parameters serialize to little-endian float32.
Every op validates its output for NaN/Inf so a broken graph fails at the
op that produced it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "OptimConfig",
    "GraphError",
    "NonFiniteError",
    "StaleGradientsError",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "softplus",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "log_softmax",
    "concat",
    "reshape",
    "transpose",
    "take",
    "state_scan",
    "backward",
    "backward_gradients",
    "adamw_update",
    "finite_difference_check",
]


class GraphError(ValueError):
    """Structural problem with a computation graph."""


class NonFiniteError(GraphError):
    """An op produced NaN or Inf."""


class StaleGradientsError(RuntimeError):
    """Optimizer step requested without fresh gradients."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "parents", "bwd", "grad", "requires_grad", "op", "param_name")

    def __init__(self, data, parents=(), bwd=None, requires_grad=None, op="leaf",
                 param_name=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, op)
        self.parents = tuple(parents)
        self.bwd = bwd
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.op = op
        self.param_name = param_name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"


def constant(data) -> Tensor:
    """A leaf that never receives gradient."""
    return Tensor(data, requires_grad=False, op="const")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, bwd, op):
    t = Tensor(data, parents=parents, op=op)
    if t.requires_grad:
        t.bwd = bwd
    return t


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
                 "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
                 "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)),
                 "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# matmul with numpy broadcasting semantics


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        a_vec, b_vec = ad.ndim == 1, bd.ndim == 1
        a2 = ad[None, :] if a_vec else ad
        b2 = bd[:, None] if b_vec else bd
        g2 = g
        if a_vec and b_vec:
            g2 = g.reshape(1, 1)
        elif a_vec:
            g2 = np.expand_dims(g, -2)
        elif b_vec:
            g2 = np.expand_dims(g, -1)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
        return ga, gb

    return _node(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z)
    return np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(out, (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _node(out, (a,), bwd, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, constant(1.0 / n))


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bwd, "log_softmax")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    out = a.data.transpose(axes)
    inv = np.argsort(axes)
    return _node(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, indices, axis=0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, indices, g)
        else:
            ga_m = np.moveaxis(ga, axis, 0)
            np.add.at(ga_m, indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _node(out, (a,), bwd, "take")


# ---------------------------------------------------------------------------
# selective state scan
#
# Linear recurrence with per-step zero-order-hold discretization:
#   abar_t = exp(delta_t * a)
#   bbar_t = ((exp(delta_t * a) - 1) / a) * b_t      (limit delta_t*b_t at a -> 0)
#   h_t    = abar_t . h_{t-1} + x_t (outer) bbar_t
#   y_t[c] = sum_n h_t[c, n] * c_t[n]
# The backward pass runs the adjoint recurrence in reverse, so both
# directions stay O(T) without materializing cross-step dependencies.

_SCAN_SMALL = 1e-6


def _zoh_factors(u: np.ndarray, a: np.ndarray, delta: np.ndarray):
    """abar = exp(u) and phi = (exp(u) - 1)/a with the small-|u| series."""
    abar = np.exp(u)
    small = np.abs(u) < _SCAN_SMALL
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_exact = np.expm1(u) / a
    phi_series = delta * (1.0 + 0.5 * u)
    phi = np.where(small, phi_series, phi_exact)
    return abar, phi, small


def state_scan(x: Tensor, delta: Tensor, b_in: Tensor, c_out: Tensor,
               a_diag: Tensor) -> Tensor:
    """Run the selective state recurrence over a batch of token sequences.

    Shapes: x (P, T, C), delta (P, T) positive, b_in and c_out (P, T, N),
    a_diag (N,). Returns y (P, T, C). Each channel carries its own length-N
    state; delta, b_in, c_out are shared across channels within a token.
    """
    x, delta, b_in, c_out, a_diag = map(_wrap, (x, delta, b_in, c_out, a_diag))
    xd, dd, bd, cd, ad = x.data, delta.data, b_in.data, c_out.data, a_diag.data
    if np.any(dd <= 0.0):
        raise GraphError("state_scan requires delta > 0")
    p, t_len, ch = xd.shape
    n = ad.shape[0]

    u = dd[:, :, None] * ad[None, None, :]                      # (P, T, N)
    abar, phi, small = _zoh_factors(u, ad[None, None, :], dd[:, :, None])
    bbar = phi * bd                                             # (P, T, N)

    needs_grad = any(v.requires_grad for v in (x, delta, b_in, c_out, a_diag))
    h = np.zeros((p, ch, n))
    y = np.empty((p, t_len, ch))
    hs = np.empty((p, t_len, ch, n)) if needs_grad else None
    for t in range(t_len):
        h = h * abar[:, t, None, :] + xd[:, t, :, None] * bbar[:, t, None, :]
        y[:, t, :] = np.einsum("pcn,pn->pc", h, cd[:, t, :])
        if hs is not None:
            hs[:, t] = h

    def bwd(g):
        dx = np.zeros_like(xd)
        ddelta = np.zeros_like(dd)
        db = np.zeros_like(bd)
        dc = np.zeros_like(cd)
        da = np.zeros_like(ad)
        lam = np.zeros((p, ch, n))
        # dphi/ddelta = exp(u); dphi/da = (u*exp(u) - expm1(u)) / a^2,
        # with series limits 1 + u and delta^2/2 at |u| -> 0
        for t in range(t_len - 1, -1, -1):
            h_t = hs[:, t]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((p, ch, n))
            dc[:, t, :] += np.einsum("pc,pcn->pn", g[:, t, :], h_t)
            lam += g[:, t, :, None] * cd[:, t, None, :]
            dabar = np.einsum("pcn,pcn->pn", lam, h_prev)
            dbbar = np.einsum("pcn,pc->pn", lam, xd[:, t, :])
            dx[:, t, :] += np.einsum("pcn,pn->pc", lam, bbar[:, t, :])
            db[:, t, :] += dbbar * phi[:, t, :]
            dphi = dbbar * bd[:, t, :]
            u_t = u[:, t, :]
            abar_t = abar[:, t, :]
            small_t = small[:, t, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                dphi_da_exact = (u_t * abar_t - np.expm1(u_t)) / (ad[None, :] ** 2)
            dphi_da = np.where(small_t, 0.5 * dd[:, t, None] ** 2, dphi_da_exact)
            dphi_dd = np.where(small_t, 1.0 + u_t, abar_t)
            ddelta[:, t] += ((dabar * ad[None, :] * abar_t).sum(axis=1)
                             + (dphi * dphi_dd).sum(axis=1))
            da += ((dabar * dd[:, t, None] * abar_t).sum(axis=0)
                   + (dphi * dphi_da).sum(axis=0))
            lam = lam * abar[:, t, None, :]
        return dx, ddelta, db, dc, da

    return _node(y, (x, delta, b_in, c_out, a_diag), bwd, "state_scan")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate dL/dnode into .grad for every grad-requiring node."""
    if not root.requires_grad:
        return
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# parameter store


@dataclass
class OptimConfig:
    """AdamW settings with decoupled weight decay."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_grad_norm: float | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")


@dataclass
class _Entry:
    value: np.ndarray
    frozen: bool
    grad: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0
    skip: bool = False

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


CHECKPOINT_MAGIC = b"SPDM"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named float64 parameters with freeze flags and optimizer state.

    Frozen entries are never mutated by update operations and their leaf
    nodes do not require gradient (gradient still flows through ops that
    read them). Checkpoints serialize values as little-endian float32.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self.grads_ready = False

    # -- registration ------------------------------------------------------

    def add(self, name: str, value, frozen: bool = False) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = np.array(value, dtype=np.float64)
        self._entries[name] = _Entry(value=v, frozen=frozen, grad=np.zeros_like(v))

    def names(self):
        return list(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def is_skipped(self, name: str) -> bool:
        """True when the last backward pass saw this entry only as frozen."""
        return self._entries[name].skip

    def set_value(self, name: str, value) -> None:
        e = self._entries[name]
        v = np.array(value, dtype=np.float64)
        if v.shape != e.value.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        e.value = v

    # -- freeze semantics ----------------------------------------------------

    def set_frozen(self, prefix: str, frozen: bool) -> None:
        """Toggle the freeze flag for every entry whose name starts with prefix."""
        hit = False
        for name, e in self._entries.items():
            if name.startswith(prefix):
                e.frozen = frozen
                hit = True
        if not hit:
            raise KeyError(f"no parameters under prefix {prefix!r}")

    def freeze_flags(self) -> dict[str, bool]:
        return {name: e.frozen for name, e in self._entries.items()}

    def restore_freeze_flags(self, flags: dict[str, bool]) -> None:
        for name, frozen in flags.items():
            self._entries[name].frozen = frozen

    # -- graph interface -----------------------------------------------------

    def node(self, name: str) -> Tensor:
        e = self._entries[name]
        return Tensor(e.value, requires_grad=not e.frozen, op="param", param_name=name)

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0
            e.skip = False

    def reset_optimizer_state(self) -> None:
        for e in self._entries.values():
            e.m[...] = 0.0
            e.v[...] = 0.0
            e.step = 0
        self.grads_ready = False

    # -- checkpoint format ---------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(self._entries)))
            for name in sorted(self._entries):
                e = self._entries[name]
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BB", int(e.frozen), e.value.ndim))
                for extent in e.value.shape:
                    fh.write(struct.pack("<I", extent))
                fh.write(e.value.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise GraphError("bad magic in checkpoint file")
        off = 4
        (version,) = struct.unpack_from("<H", blob, off)
        off += 2
        if version != CHECKPOINT_VERSION:
            raise GraphError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                frozen, rank = struct.unpack_from("<BB", blob, off)
                off += 2
                shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
                off += 4 * rank
                size = int(np.prod(shape)) if rank else 1
                vals = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
                off += 4 * size
                if vals.size != size:
                    raise GraphError("truncated checkpoint payload")
                store.add(name, vals.reshape(shape).astype(np.float64),
                          frozen=bool(frozen))
        except (struct.error, ValueError) as exc:
            raise GraphError("truncated checkpoint payload") from exc
        return store


# ---------------------------------------------------------------------------
# gradient filling and AdamW


def backward_gradients(loss: Tensor, store: ParamStore) -> ParamStore:
    """Fill per-entry gradient slots with dloss/dentry.

    Frozen entries get a zero slot and a skip mark. The loss must be a
    scalar node; a non-finite graph has already been rejected at op time.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    backward(loss)
    store.zero_grads()
    for node in _topo_order(loss):
        if node.param_name is None:
            continue
        entry = store._entries[node.param_name]
        if node.grad is not None:
            entry.grad += node.grad
    # topo order only visits grad-requiring nodes; walk parents for frozen leaves
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.param_name is not None and not node.requires_grad:
            store._entries[node.param_name].skip = True
        stack.extend(node.parents)
    store.grads_ready = True
    return store


def adamw_update(store: ParamStore, cfg: OptimConfig) -> ParamStore:
    """One decoupled-weight-decay Adam step over the non-frozen entries."""
    cfg.validate()
    if not store.grads_ready:
        raise StaleGradientsError("stale gradients: run backward_gradients first")
    if cfg.max_grad_norm is not None:
        sq = 0.0
        for e in store._entries.values():
            if not e.frozen:
                sq += float((e.grad * e.grad).sum())
        norm = np.sqrt(sq)
        if norm > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / norm
            for e in store._entries.values():
                if not e.frozen:
                    e.grad *= scale
    for e in store._entries.values():
        if e.frozen:
            continue
        e.step += 1
        # np.asarray keeps rank-0 entries as 0-d arrays, never numpy scalars
        e.m = np.asarray(cfg.beta1 * e.m + (1.0 - cfg.beta1) * e.grad)
        e.v = np.asarray(cfg.beta2 * e.v + (1.0 - cfg.beta2) * e.grad * e.grad)
        m_hat = e.m / (1.0 - cfg.beta1 ** e.step)
        v_hat = e.v / (1.0 - cfg.beta2 ** e.step)
        e.value = np.asarray(e.value - cfg.learning_rate * (
            m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * e.value))
    store.grads_ready = False
    return store


def finite_difference_check(fn, store: ParamStore, h: float = 1e-3,
                            coords_per_entry: int = 4, seed: int = 0,
                            include: str | None = None,
                            coords_per_namespace: int | None = None) -> float:
    """Audit analytic gradients against central differences.

    fn maps the store to a scalar Tensor and must be deterministic (two
    baseline evaluations are compared bitwise); the probe step per
    coordinate is h * (1 + |theta|). Returns the max over sampled
    coordinates of |analytic - numeric| / max(1, |numeric|). Frozen
    entries are skipped; `include` restricts to a name prefix.

    Sampling is per entry by default. With coords_per_namespace set,
    that many coordinates are drawn from each namespace (the name up to
    the first '/') as a whole instead.
    """
    ref_a = fn(store)
    ref_b = fn(store)
    if not np.array_equal(ref_a.data, ref_b.data):
        raise GraphError("fn is non-deterministic across probe evaluations")
    backward_gradients(ref_a, store)
    analytic = {name: store.grad(name).copy() for name in store.names()}

    eligible = [n for n in store.names()
                if not store.is_frozen(n)
                and (include is None or n.startswith(include))]

    rng = np.random.default_rng(seed)
    probes: list[tuple[str, int]] = []
    if coords_per_namespace is None:
        for name in eligible:
            n = store.value(name).size
            for idx in rng.choice(n, size=min(coords_per_entry, n), replace=False):
                probes.append((name, int(idx)))
    else:
        groups: dict[str, list[str]] = {}
        for name in eligible:
            groups.setdefault(name.split("/", 1)[0], []).append(name)
        for ns in sorted(groups):
            names = groups[ns]
            sizes = np.array([store.value(n).size for n in names])
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            total = int(offsets[-1])
            flat_idx = rng.choice(total, size=min(coords_per_namespace, total),
                                  replace=False)
            for fi in flat_idx:
                e = int(np.searchsorted(offsets, fi, side="right") - 1)
                probes.append((names[e], int(fi - offsets[e])))

    worst = 0.0
    for name, idx in probes:
        flat = store.value(name).reshape(-1)
        theta = flat[idx]
        step = h * (1.0 + abs(theta))
        flat[idx] = theta + step
        f_plus = fn(store).item()
        flat[idx] = theta - step
        f_minus = fn(store).item()
        flat[idx] = theta
        numeric = (f_plus - f_minus) / (2.0 * step)
        ana = analytic[name].reshape(-1)[idx]
        err = abs(ana - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
