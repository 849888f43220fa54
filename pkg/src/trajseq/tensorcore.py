"""Dense float64 tensors with reverse-mode differentiation.

Hosts every primitive the model modules use: linear maps, embeddings,
layer norm, softmax, SiLU/Tanh, 2-D convolution and pooling, MSE and
cross-entropy losses, causal multi-head self-attention, plus a
finite-difference gradient checker and a named-tensor checkpoint format.

All math is float64 and single-threaded-deterministic: identical inputs
and parameters give bit-identical outputs within one build. numpy
provides the dense kernels; the graph, every backward rule, and the
checker live here.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, StateError

Array = np.ndarray

__all__ = [
    "Tensor", "Parameter", "Module", "Linear", "LayerNorm", "Conv2d",
    "no_grad", "add", "mul", "scale", "matmul", "reshape", "transpose",
    "getitem", "concat", "broadcast_to", "tensor_sum", "tensor_mean",
    "linear", "embedding_lookup", "layer_norm", "softmax", "silu", "tanh",
    "conv2d", "max_pool2d", "global_max_pool", "mse", "cross_entropy",
    "causal_self_attention", "gradient_check", "gradient_check_params",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (eval / rollout)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


class Tensor:
    """A float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        want = requires_grad or any(p.requires_grad for p in _parents)
        self.requires_grad = want and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Graph traversal is iterative: desk models still produce graphs a few
    # hundred nodes deep and Python's recursion limit is not a contract.
    def backward(self, grad: Array | None = None) -> None:
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that requires no grad")
        if grad is None:
            if self.size != 1:
                raise ContractError(
                    f"backward() without a seed grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                # first contribution adopts the array (which may alias the
                # upstream grad); later ones rebind, never mutate in place
                if parent.grad is None:
                    parent.grad = pgrad
                else:
                    parent.grad = parent.grad + pgrad

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g * s,)

    return Tensor(a.data * s, _parents=(a,), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(da, a.shape), _unbroadcast(db, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward=backward)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(g):
        da = np.zeros_like(a.data)
        da[idx] += g
        return (da,)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# neural-net primitives


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) over the last axis of x. w is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
        y2 = y2 + b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        dx = (g2 @ w.data.T).reshape(x.shape)
        dw = x2.T @ g2
        db = g2.sum(axis=0) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor(y2.reshape(out_shape), _parents=parents, _backward=backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out_data = table.data[ids]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return Tensor(out_data, _parents=(table,), _backward=backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} incompatible with input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        sum_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=sum_axes)
        dbias = g.sum(axis=sum_axes)
        return (dx, dgain, dbias)

    return Tensor(out_data, _parents=(x, gain, bias), _backward=backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return Tensor(p, _parents=(x,), _backward=backward)


def _sigmoid(x: Array) -> Array:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out_data = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return Tensor(t, _parents=(x,), _backward=backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, (out, in, kh, kw) weight."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {w.shape}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if p:
        xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        xp[:, :, p:p + h, p:p + wd] = x.data
    else:
        xp = x.data
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * s, sw * s, sh, sw), writeable=False)
    # im2col copy so both passes run as one BLAS matmul
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    y2 = cols @ wmat.T
    if b is not None:
        y2 = y2 + b.data
    out_data = y2.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0) if b is not None else None
        dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + oh * s:s, j:j + ow * s:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor(out_data, _parents=parents, _backward=backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4-D input, got {x.shape}")
    k = int(kernel)
    s = k if stride is None else int(stride)
    n, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: kernel {k} larger than input {x.shape}")
    sn, sc, sh, sw = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * s, sw * s, sh, sw), writeable=False)
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow))
        ri = ohi * s + idx // k
        cj = owi * s + idx % k
        np.add.at(dx, (ni, ci, ri, cj), g)
        return (dx,)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the two trailing spatial axes: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool: need 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        ni, ci = np.indices((n, c))
        dflat[ni, ci, idx] += g
        return (dflat.reshape(x.shape),)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def mse(pred: Tensor, target) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {tgt.shape}")
    diff = pred.data - tgt
    out = np.array(np.mean(diff * diff))

    def backward(g):
        return (g * (2.0 / diff.size) * diff,)

    return Tensor(out, _parents=(pred,), _backward=backward)


def cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood of target class indices."""
    ids = np.atleast_1d(np.asarray(target_ids, dtype=np.int64))
    lg = logits.data if logits.ndim == 2 else logits.data[None, :]
    if ids.shape[0] != lg.shape[0]:
        raise ShapeError(f"cross_entropy: {lg.shape[0]} rows vs {ids.shape[0]} targets")
    if np.any(ids < 0) or np.any(ids >= lg.shape[1]):
        raise ContractError(f"cross_entropy: target id out of range [0, {lg.shape[1]})")
    shifted = lg - lg.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(lg.shape[0])
    out = np.array(-logp[rows, ids].mean())

    def backward(g):
        dlg = np.exp(logp)
        dlg[rows, ids] -= 1.0
        dlg *= g / lg.shape[0]
        return (dlg.reshape(logits.shape),)

    return Tensor(out, _parents=(logits,), _backward=backward)


# ---------------------------------------------------------------------------
# causal self-attention


def _causal_mask(scores: Tensor) -> Tensor:
    """Set attention scores at j > i to -inf so softmax zeroes them exactly."""
    s = scores.shape[-1]
    keep = np.tril(np.ones((s, s), dtype=bool))
    out_data = np.where(keep, scores.data, -np.inf)

    def backward(g):
        return (np.where(keep, g, 0.0),)

    return Tensor(out_data, _parents=(scores,), _backward=backward)


def causal_self_attention(x: Tensor, w_qkv: Tensor, b_qkv: Tensor,
                          w_proj: Tensor, b_proj: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention with a strict causal mask.

    Accepts (seq, d) or (batch, seq, d). Position i attends only to
    positions j <= i; each unmasked row of attention weights sums to 1.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"attention: need (seq, d) or (batch, seq, d), got {x.shape}")
    bsz, seq, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"attention: d_model {d} not divisible by {heads} heads")
    if w_qkv.shape != (d, 3 * d):
        raise ShapeError(f"attention: qkv weight {w_qkv.shape}, expected {(d, 3 * d)}")
    hd = d // heads
    qkv = linear(x, w_qkv, b_qkv)                                   # (B, S, 3d)
    q = reshape(qkv[:, :, 0:d], (bsz, seq, heads, hd))
    k = reshape(qkv[:, :, d:2 * d], (bsz, seq, heads, hd))
    v = reshape(qkv[:, :, 2 * d:3 * d], (bsz, seq, heads, hd))
    q = transpose(q, (0, 2, 1, 3))                                  # (B, H, S, hd)
    k = transpose(k, (0, 2, 3, 1))                                  # (B, H, hd, S)
    v = transpose(v, (0, 2, 1, 3))
    scores = scale(matmul(q, k), 1.0 / np.sqrt(hd))                 # (B, H, S, S)
    weights = softmax(_causal_mask(scores), axis=-1)
    mixed = matmul(weights, v)                                      # (B, H, S, hd)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (bsz, seq, d))
    out = linear(merged, w_proj, b_proj)
    return reshape(out, (seq, d)) if squeeze else out


# ---------------------------------------------------------------------------
# parameters and modules


class Parameter:
    """A named trainable tensor. decay_eligible marks weight-decay targets."""

    __slots__ = ("tensor", "name", "decay_eligible")

    def __init__(self, tensor: Tensor, name: str, decay_eligible: bool):
        self.tensor = tensor
        self.name = name
        self.decay_eligible = bool(decay_eligible)

    @property
    def data(self) -> Array:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape}, decay={self.decay_eligible})"


class Module:
    """Minimal parameter container with path-unique naming.

    Build bottom-up: register parameters and submodules during __init__,
    then hand the finished module to its parent. add_module finalizes the
    dotted-path names, so late registration on an attached module (or
    attaching one module twice) is an error rather than a silent rename.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._modules: dict[str, Module] = {}
        self._attached = False

    def register(self, name: str, array: Array, decay: bool | None = None) -> Tensor:
        if name in self._params or name in self._modules:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if self._attached:
            raise ConfigError(f"cannot register {name!r} after the module was "
                              "attached to a parent")
        arr = np.asarray(array, dtype=np.float64)
        t = Tensor(arr, requires_grad=True)
        # matrices decay by default, vectors (biases, norm gains) do not
        self._params[name] = Parameter(t, name, arr.ndim >= 2 if decay is None else decay)
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        if name in self._params or name in self._modules:
            raise ConfigError(f"duplicate module name {name!r}")
        if module._attached:
            raise ConfigError(f"module {name!r} is already attached to a parent")
        self._modules[name] = module
        # parameter names finalize at composition time: prefixing here keeps
        # every Parameter.name equal to its dotted path from the root model
        module._apply_prefix(name + ".")
        module._attached = True
        return module

    def _apply_prefix(self, prefix: str) -> None:
        for p in self._params.values():
            p.name = prefix + p.name
        for mod in self._modules.values():
            mod._apply_prefix(prefix)

    def named_parameters(self) -> dict[str, Parameter]:
        """Parameters keyed by their dotted-path names (unique model-wide)."""
        out: dict[str, Parameter] = {}
        for p in self._params.values():
            out[p.name] = p
        for mod in self._modules.values():
            out.update(mod.named_parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def param_count(self) -> int:
        return sum(p.tensor.size for p in self.parameters())

    def state_arrays(self) -> dict[str, Array]:
        return {name: p.tensor.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, arrays: dict[str, Array]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise StateError(f"checkpoint missing parameters: {sorted(missing)[:5]} ...")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.tensor.shape:
                raise ShapeError(
                    f"checkpoint {name}: stored {arr.shape} vs model {p.tensor.shape}")
            p.tensor.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 init_std: float = 0.02, bias: bool = True):
        super().__init__()
        self.w = self.register("w", rng.normal(0.0, init_std, (in_dim, out_dim)))
        self.b = self.register("b", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.register("g", np.ones(dim))
        self.b = self.register("b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.w = self.register("w", rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                               (out_ch, in_ch, kernel, kernel)))
        self.b = self.register("b", np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    f must map a tensor to a scalar tensor. The relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ContractError("gradient_check: step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ContractError(f"gradient_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(base)).item()
            flat[i] = orig - h
            lo = f(Tensor(base)).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                          h: float = 1e-5, rng: np.random.Generator | None = None,
                          coords_per_param: int = 4, coords: str = "largest") -> float:
    """Finite-difference check of d(loss)/d(params) on sampled coordinates.

    Whole-model losses have too many coordinates to probe exhaustively, so
    coords_per_param entries of each parameter tensor are checked. The
    default picks each tensor's largest-magnitude gradient coordinates:
    central differences of the scalar loss cannot resolve coordinates whose
    gradient sits near float64 round-off (|g| ~ eps|f|/h), so comparing
    those measures rounding, not the backward pass. "random" samples
    uniformly instead.
    """
    if coords not in ("largest", "random"):
        raise ContractError(f"unknown coordinate mode {coords!r}")
    params = list(params)
    for p in params:
        p.tensor.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ContractError("gradient_check_params: loss must be scalar")
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.tensor.data.reshape(-1)
            grad = (p.tensor.grad if p.tensor.grad is not None
                    else np.zeros_like(p.tensor.data)).reshape(-1)
            n = flat.size
            k = min(coords_per_param, n)
            if coords == "largest":
                picks = np.argsort(-np.abs(grad), kind="stable")[:k]
            else:
                picks = rng.choice(n, size=k, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_fn().item()
                flat[i] = orig - h
                lo = loss_fn().item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * h)
                analytic = grad[i]
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"TRAJSEQ-CKPT-v1\n"


def save_checkpoint(path: str, arrays: dict[str, Array], meta: dict | None = None) -> None:
    """Named-tensor container: magic, JSON meta, then shape-headed float64 blobs."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, Array], dict]:
    if not os.path.exists(path):
        raise StateError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise StateError(f"not a trajseq checkpoint (bad magic): {path}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode())
        (count,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise StateError(f"truncated checkpoint payload for {name!r}: {path}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, meta
