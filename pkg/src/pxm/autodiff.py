"""Minimal reverse-mode autodiff on float64 numpy arrays.

Tensors record their parents and a backward closure; calling
``backward(loss, params)`` topologically sorts the graph and accumulates
gradients into every reachable tensor. The op set is exactly what the
encoders and losses need: elementwise arithmetic, matmul, conv1d,
relu/clamp/exp/log/sqrt/sigmoid/softplus, axis reductions, embedding
lookup and layer normalization. Everything is double precision.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "ShapeError",
    "NumericError",
    "forward_graph",
    "backward",
    "grad_check",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
    "conv1d",
    "dense",
    "layer_norm",
    "global_avg_pool",
    "embedding",
    "Dense",
    "Conv1d",
    "Relu",
    "LayerNorm",
    "GlobalAvgPool",
    "ResidualBlock1d",
]

# When set, every op validates that its output is finite. Off by default:
# training checks the loss instead, which is enough in practice.
CHECK_FINITE = bool(int(os.environ.get("PXM_CHECK_FINITE", "0")))


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes; names the op."""


class NumericError(RuntimeError):
    """Raised when a non-finite value shows up where one must not."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, out: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in output")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward_fn
        return out

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data
        _check_finite("add", out_data)

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out_data = self.data - other.data
        _check_finite("sub", out_data)

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor._make(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data
        _check_finite("mul", out_data)
        a, b = self, other

        def bwd(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._make(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data
        _check_finite("div", out_data)
        a, b = self, other

        def bwd(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(out_data, (a, b), bwd)

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __neg__(self):
        def bwd(g):
            return (-g,)

        return Tensor._make(-self.data, (self,), bwd)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul: expected 2-D operands, got {self.shape} @ {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {self.shape} @ {other.shape}")
        out_data = self.data @ other.data
        _check_finite("matmul", out_data)
        a, b = self, other

        def bwd(g):
            return (g @ b.data.T, a.data.T @ g)

        return Tensor._make(out_data, (a, b), bwd)

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-D, got {self.shape}")

        def bwd(g):
            return (g.T,)

        return Tensor._make(self.data.T, (self,), bwd)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        _check_finite("exp", out_data)

        def bwd(g):
            return (g * out_data,)

        return Tensor._make(out_data, (self,), bwd)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)
        _check_finite("log", out_data)
        x = self

        def bwd(g):
            return (g / x.data,)

        return Tensor._make(out_data, (x,), bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        _check_finite("sqrt", out_data)

        def bwd(g):
            return (g * 0.5 / out_data,)

        return Tensor._make(out_data, (self,), bwd)

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def bwd(g):
            return (g * mask,)

        return Tensor._make(self.data * mask, (self,), bwd)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        out_data = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)

        def bwd(g):
            return (g * mask,)

        return Tensor._make(out_data, (self,), bwd)

    def sigmoid(self) -> "Tensor":
        # Evaluate on each sign branch separately so exp never overflows.
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, (self,), bwd)

    def softplus(self) -> "Tensor":
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return (g * sig,)

        return Tensor._make(out_data, (self,), bwd)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- composite ops ----------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape (batch, d_in)."""
    return x @ w + b


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Batched 1-D convolution (cross-correlation).

    x: (B, C_in, T); w: (C_out, C_in, K); b: (C_out,) or None.
    Output length T' = floor((T + 2*padding - K) / stride) + 1.
    """
    x = Tensor._lift(x)
    w = Tensor._lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected (B,C,T) and (O,C,K), got {x.shape}, {w.shape}")
    batch, c_in, t = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d: channel mismatch, input {c_in} vs kernel {c_in_w}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if k > t + 2 * padding:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {t + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    t_out = (t + 2 * padding - k) // stride + 1
    # Contiguous im2col: (B, T_out, C_in * K), then one GEMM per direction.
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win[:, :, :t_out, :].transpose(0, 2, 1, 3))
    cols = cols.reshape(batch * t_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out_data = (cols @ w2.T).reshape(batch, t_out, c_out).transpose(0, 2, 1)
    if b is not None:
        b = Tensor._lift(b)
        out_data = out_data + b.data[None, :, None]
    _check_finite("conv1d", out_data)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * t_out, c_out)
        gw = (g2.T @ cols).reshape(c_out, c_in, k)
        gcols = (g2 @ w2).reshape(batch, t_out, c_in, k).transpose(0, 2, 3, 1)
        gxp = np.zeros_like(xp)
        # Scatter grad back through each kernel tap.
        for kk in range(k):
            gxp[:, :, kk : kk + stride * t_out : stride] += gcols[:, :, kk, :]
        gx = gxp[:, :, padding : padding + t] if padding else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2)))

    return Tensor._make(out_data, parents, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis (axis 1) with per-channel affine.

    Accepts (B, C) or (B, C, T); gain/bias have shape (C,).
    """
    x = Tensor._lift(x)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"layer_norm: expected 2-D or 3-D input, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine shape {gain.shape}/{bias.shape} does not match C={c}"
        )
    gshape = (1, c) if x.data.ndim == 2 else (1, c, 1)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gk = gain.data.reshape(gshape)
    out_data = xhat * gk + bias.data.reshape(gshape)
    _check_finite("layer_norm", out_data)

    def bwd(g):
        red = tuple(i for i in range(g.ndim) if i != 1)
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gy = g * gk
        gx = inv * (gy - gy.mean(axis=1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=1, keepdims=True))
        return (gx, ggain, gbias)

    return Tensor._make(out_data, (x, gain, bias), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, C) by averaging over time."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected (B,C,T), got {x.shape}")
    t = x.shape[2]
    out_data = x.data.mean(axis=2)

    def bwd(g):
        return (np.repeat(g[:, :, None], t, axis=2) / t,)

    return Tensor._make(out_data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; ids is an int array (B, L)."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._make(out_data, (table,), bwd)


# -- parameter store ----------------------------------------------------------


class ParamStore:
    """Named trainable tensors plus per-parameter AdamW state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._step[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def state_of(self, name: str) -> tuple[np.ndarray, np.ndarray, int]:
        return self._m[name], self._v[name], self._step[name]

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter data in place; names must match exactly."""
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            cur = self.params[name]
            if cur.data.shape != arr.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {cur.data.shape}")
            cur.data = _asarray(arr).copy()


# -- graph execution ----------------------------------------------------------


def forward_graph(ops, x: Tensor, params: ParamStore) -> Tensor:
    """Apply a sequence of layer ops to ``x``; retains the graph for backward."""
    out = x
    for op in ops:
        out = op(out, params)
    return out


def _topo(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamStore | None = None) -> None:
    """Accumulate dloss/dt into ``t.grad`` for every reachable tensor.

    After the sweep, parameters in ``params`` that the loss never touched
    get an explicit zero gradient buffer.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo(loss)):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                # Copy: g may alias a buffer another parent receives.
                parent.grad = np.array(g)
            else:
                parent.grad += g
    if params is not None:
        for t in params.params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def grad_check(loss_fn, params: ParamStore, eps: float = 1e-5,
               names: list[str] | None = None) -> float:
    """Max relative error between backward() and central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and return a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    params.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: non-finite loss")
    backward(loss, params)
    analytic = {n: params[n].grad.copy() for n in (names or params.names())}

    worst = 0.0
    for name in (names or params.names()):
        p = params[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"grad_check: non-finite loss while probing {name}")
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst


# -- optimizer ----------------------------------------------------------------


def adamw_step(params: ParamStore, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One AdamW step with decoupled weight decay over every parameter.

    Decay is applied directly to the weights (never through the moments),
    then the bias-corrected Adam update. Parameters without a gradient
    are treated as having a zero gradient.
    """
    if lr <= 0:
        raise ValueError("adamw_step: lr must be positive")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("adamw_step: betas must lie in [0, 1)")
    for name, p in params.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = params._m[name], params._v[name]
        params._step[name] += 1
        t = params._step[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# -- checkpoint I/O -----------------------------------------------------------

_MAGIC = b"PXM1"


def save_checkpoint(params: ParamStore, path) -> None:
    """Write all parameters as PXM1: magic, count, then per-tensor records.

    Record layout: u32 name length, name bytes (utf-8), u32 rank,
    rank x u64 extents, row-major little-endian float64 payload.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(params.params)))
        for name, t in params.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a PXM1 file back into a name -> float64 array mapping."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a PXM1 checkpoint")
        (count,) = struct.unpack("<Q", fh.read(8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out


# -- layer objects ------------------------------------------------------------
# Thin named wrappers so encoders are just op lists fed to forward_graph.


class Dense:
    def __init__(self, name: str, d_in: int, d_out: int):
        self.name, self.d_in, self.d_out = name, d_in, d_out

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        scale = np.sqrt(2.0 / self.d_in)
        params.add(f"{self.name}.w", rng.normal(0.0, scale, (self.d_in, self.d_out)))
        params.add(f"{self.name}.b", np.zeros(self.d_out))

    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"{self.name}: expected (B,{self.d_in}), got {x.shape}")
        return dense(x, params[f"{self.name}.w"], params[f"{self.name}.b"])


class Conv1d:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        scale = np.sqrt(2.0 / (self.c_in * self.kernel))
        params.add(f"{self.name}.w",
                   rng.normal(0.0, scale, (self.c_out, self.c_in, self.kernel)))
        params.add(f"{self.name}.b", np.zeros(self.c_out))

    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        if x.data.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (B,{self.c_in},T), got {x.shape}")
        return conv1d(x, params[f"{self.name}.w"], params[f"{self.name}.b"],
                      stride=self.stride, padding=self.padding)


class Relu:
    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        return x.relu()

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        pass


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.name, self.dim = name, dim

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        params.add(f"{self.name}.g", np.ones(self.dim))
        params.add(f"{self.name}.b", np.zeros(self.dim))

    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        return layer_norm(x, params[f"{self.name}.g"], params[f"{self.name}.b"])


class GlobalAvgPool:
    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        return global_avg_pool(x)

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        pass


class ResidualBlock1d:
    """conv -> layer norm -> relu -> conv, plus a (projected) skip path.

    The skip is the identity when shapes match and a strided 1x1 conv
    otherwise.
    """

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1):
        pad = kernel // 2
        self.name = name
        self.conv1 = Conv1d(f"{name}.conv1", c_in, c_out, kernel, stride, pad)
        self.norm = LayerNorm(f"{name}.ln", c_out)
        self.conv2 = Conv1d(f"{name}.conv2", c_out, c_out, kernel, 1, pad)
        self.proj = None
        if c_in != c_out or stride != 1:
            self.proj = Conv1d(f"{name}.proj", c_in, c_out, 1, stride, 0)

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        self.conv1.init_into(params, rng)
        self.norm.init_into(params, rng)
        self.conv2.init_into(params, rng)
        if self.proj is not None:
            self.proj.init_into(params, rng)

    def __call__(self, x: Tensor, params: ParamStore) -> Tensor:
        h = self.conv1(x, params)
        h = self.norm(h, params)
        h = h.relu()
        h = self.conv2(h, params)
        skip = x if self.proj is None else self.proj(x, params)
        return h + skip
