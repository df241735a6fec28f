"""Neural network layers built on the autodiff tensor.

Initialization conventions: affine and attention weights draw from
Uniform(+-1/sqrt(fan_in)) with zero biases, embedding-style tables from
Normal(0, 0.02), and GRU recurrent matrices are orthogonal per gate block.
Batch normalization carries no learned affine pair (normalize only); layer
normalization keeps its gain and bias.
"""

from __future__ import annotations

import math

import numpy as np

from synthproxy.nn.tensor import Tensor, _accum


def uniform_fanin(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def normal_embedding(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    return (0.02 * rng.standard_normal(size=shape)).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype=np.float32) -> np.ndarray:
    a = rng.standard_normal(size=(n, n))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # fix the sign ambiguity so sampling is uniform
    return q.astype(dtype)


class Module:
    """Base class: parameter/buffer traversal, train/eval mode, dtype moves."""

    buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self._training = True

    # attribute order is insertion order, which is fixed per class definition,
    # so parameter naming is deterministic
    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + name, val))
        for name, child in self._children():
            out.extend(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, getattr(self, n)) for n in self.buffer_names]
        for name, child in self._children():
            out.extend(child.named_buffers(prefix + name + "."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self._training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, buf in self.named_buffers():
            owner, attr = self._resolve(name)
            setattr(owner, attr, buf.astype(dtype))
        return self

    def _resolve(self, dotted: str):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        return obj, parts[-1]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: buf.copy() for name, buf in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        param_names = {n for n, _ in self.named_parameters()}
        buffer_names = {n for n, _ in self.named_buffers()}
        expected = param_names | buffer_names
        if set(state) != expected:
            missing = expected - set(state)
            extra = set(state) - expected
            raise ValueError(f"state dict mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = state[name].astype(p.data.dtype, copy=True)
            p.grad = None
        for name, _ in self.named_buffers():
            owner, attr = self._resolve(name)
            current = getattr(owner, attr)
            setattr(owner, attr, state[name].astype(current.dtype, copy=True))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(uniform_fanin(rng, in_dim, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm(Module):
    """Normalize over the batch (and spatial axes for 4-D input); no affine."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        stat_shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if self._training:
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(
                self.running_var.dtype
            )
            return (x - mu) / ((var + self.eps) ** 0.5)
        mu_c = Tensor(self.running_mean.reshape(stat_shape).astype(x.dtype))
        var_c = Tensor(self.running_var.reshape(stat_shape).astype(x.dtype))
        return (x - mu_c) / ((var_c + self.eps) ** 0.5)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / ((var + self.eps) ** 0.5) * self.gain + self.bias


class Highway(Module):
    """y = T(x) * H(x) + (1 - T(x)) * x with a sigmoid transform gate.

    The gate bias starts at -1 so fresh stacks lean toward carrying the input.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(dim, dim, rng)
        self.gate = Linear(dim, dim, rng)
        self.gate.bias.data = np.full(dim, -1.0, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        t = self.gate(x).sigmoid()
        h = self.proj(x).relu()
        return t * h + (1.0 - t) * x


class Embedding(Module):
    def __init__(self, num_entries: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(normal_embedding(rng, (num_entries, dim)), requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return self.weight.index_select(0, np.asarray(indices, dtype=np.int64))


class GRUCell(Module):
    """Gated recurrent unit with separate input/hidden biases; the reset gate
    scales the hidden contribution of the candidate state."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.w_x = Tensor(uniform_fanin(rng, in_dim, (in_dim, 3 * hidden)), requires_grad=True)
        self.w_h = Tensor(
            np.concatenate([orthogonal(rng, hidden) for _ in range(3)], axis=1), requires_grad=True
        )
        self.b_x = Tensor(np.zeros(3 * hidden, dtype=np.float32), requires_grad=True)
        self.b_h = Tensor(np.zeros(3 * hidden, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        n = self.hidden
        gx = x @ self.w_x + self.b_x
        gh = h @ self.w_h + self.b_h
        xr, xz, xn = (gx.narrow(1, k * n, n) for k in range(3))
        hr, hz, hn = (gh.narrow(1, k * n, n) for k in range(3))
        r = (xr + hr).sigmoid()
        z = (xz + hz).sigmoid()
        cand = (xn + r * hn).tanh()
        return (1.0 - z) * cand + z * h


class BiGRU(Module):
    """One bidirectional layer; returns both directions' final hidden states."""

    def __init__(self, in_dim: int, hidden_per_direction: int, rng: np.random.Generator):
        super().__init__()
        self.fwd = GRUCell(in_dim, hidden_per_direction, rng)
        self.bwd = GRUCell(in_dim, hidden_per_direction, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h_f = Tensor(np.zeros((b, self.fwd.hidden), dtype=x.dtype))
        h_b = Tensor(np.zeros((b, self.bwd.hidden), dtype=x.dtype))
        steps = [x.narrow(1, i, 1).reshape(b, x.shape[2]) for i in range(t)]
        for step in steps:
            h_f = self.fwd(step, h_f)
        for step in reversed(steps):
            h_b = self.bwd(step, h_b)
        return Tensor.cat([h_f, h_b], axis=1)


class SinusoidalPE(Module):
    """Classic interleaved sin/cos table added to a (batch, time, dim) stream."""

    buffer_names = ("table",)

    def __init__(self, dim: int, max_len: int = 512):
        super().__init__()
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, i / dim)
        table = np.zeros((max_len, dim), dtype=np.float64)
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : table[:, 1::2].shape[1]])
        self.table = table.astype(np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[1]
        return x + Tensor(self.table[:t].astype(x.dtype))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % n_heads:
            raise ValueError("dim must divide evenly across heads")
        self.n_heads = n_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3,b,h,t,dh)
        q = qkv.narrow(0, 0, 1).reshape(b, h, t, dh)
        k = qkv.narrow(0, 1, 1).reshape(b, h, t, dh)
        v = qkv.narrow(0, 2, 1).reshape(b, h, t, dh)
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = att.softmax(axis=-1)
        mixed = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(mixed)


class TransformerBlock(Module):
    """Post-norm encoder block: attention + residual + LN, then FF + residual + LN."""

    def __init__(self, dim: int, d_ff: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        self.attention = MultiHeadSelfAttention(dim, n_heads, rng)
        self.norm_attention = LayerNorm(dim)
        self.ff_in = Linear(dim, d_ff, rng)
        self.ff_out = Linear(d_ff, dim, rng)
        self.norm_ff = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm_attention(x + self.attention(x))
        return self.norm_ff(x + self.ff_out(self.ff_in(x).relu()))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """3x3-ish 2-D convolution as a single graph node (im2col forward,
    sliced scatter-add backward)."""
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,kh,kw)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * kh * kw)
    w_mat = weight.data.reshape(O, C * kh * kw)
    out_data = (cols @ w_mat.T + bias.data).transpose(0, 2, 1).reshape(B, O, Ho, Wo)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, w_mat=w_mat):
        g2 = g.reshape(B, O, Ho * Wo).transpose(0, 2, 1)  # (B, HoWo, O)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = g2.reshape(-1, O).T @ cols.reshape(-1, C * kh * kw)
            _accum(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (g2 @ w_mat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _accum(x, dxp[:, :, pad : pad + H, pad : pad + W])

    return Tensor._op(out_data, (x, weight, bias), bwd)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 2,
        pad: int = 1,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(
            uniform_fanin(rng, fan_in, (out_channels, in_channels, kernel, kernel)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)
