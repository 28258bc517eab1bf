"""Recurrent cells, convolution blocks and the two feature trunks.

Row-vector convention throughout: a gate pre-activation is
``x_t @ w.T + h_prev @ u.T + b`` with ``w`` of shape ``hidden × input`` and
``u`` of shape ``hidden × hidden``.

Two recurrent code paths exist. :func:`lstm_step` / :func:`gru_step` compose
autodiff primitives and are the reference transcription of the cell
equations. :func:`lstm_sequence` / :func:`gru_sequence` run a whole sequence
as a single graph node with hand-written backpropagation through time; the
stacks use these, since unrolling 936 steps through the generic tape is
quadratic in memory.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from hsattn import autodiff as ad
from hsattn.autodiff import Tensor
from hsattn.autodiff.tensor import make_result
from hsattn.errors import ConfigError, DimensionError

LSTM_GATES = ("i", "f", "o", "c")
GRU_GATES = ("r", "z", "h")


class Module:
    """Minimal parameter container: tensors and submodules found on attributes."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_tensors(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{key}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Tensor):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- cell parameter containers ---------------------------------------------------

class _CellParams(Module):
    gates: tuple[str, ...] = ()

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float64):
        self.input_size, self.hidden_size = input_size, hidden_size
        for g in self.gates:
            setattr(self, f"w_{g}", uniform_init(rng, (hidden_size, input_size), input_size, dtype))
        for g in self.gates:
            setattr(self, f"u_{g}", uniform_init(rng, (hidden_size, hidden_size), hidden_size, dtype))
        for g in self.gates:
            setattr(self, f"b_{g}", zeros_param(hidden_size, dtype))

    def w(self, g) -> Tensor:
        return getattr(self, f"w_{g}")

    def u(self, g) -> Tensor:
        return getattr(self, f"u_{g}")

    def b(self, g) -> Tensor:
        return getattr(self, f"b_{g}")

    def ordered(self) -> list[Tensor]:
        return [self.w(g) for g in self.gates] + [self.u(g) for g in self.gates] + [self.b(g) for g in self.gates]

    def _check(self, x_t: Tensor, h_prev: Tensor):
        if x_t.shape[-1] != self.input_size:
            raise DimensionError(f"input has {x_t.shape[-1]} features, cell expects {self.input_size}")
        if h_prev.shape[-1] != self.hidden_size:
            raise DimensionError(f"hidden state has {h_prev.shape[-1]} units, cell expects {self.hidden_size}")


class LstmCellParams(_CellParams):
    gates = LSTM_GATES


class GruCellParams(_CellParams):
    gates = GRU_GATES


def _gate(p: _CellParams, g: str, x_t: Tensor, h: Tensor) -> Tensor:
    return x_t @ p.w(g).T + h @ p.u(g).T + p.b(g)


def lstm_step(p: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM update; returns ``(h_t, c_t)``."""
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    p._check(x_t, h_prev)
    if c_prev.shape != h_prev.shape:
        raise DimensionError(f"cell state shape {c_prev.shape} != hidden shape {h_prev.shape}")
    i = ad.sigmoid(_gate(p, "i", x_t, h_prev))
    f = ad.sigmoid(_gate(p, "f", x_t, h_prev))
    o = ad.sigmoid(_gate(p, "o", x_t, h_prev))
    c = f * c_prev + i * ad.tanh(_gate(p, "c", x_t, h_prev))
    return o * ad.tanh(c), c


def gru_step(p: GruCellParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    p._check(x_t, h_prev)
    r = ad.sigmoid(_gate(p, "r", x_t, h_prev))
    z = ad.sigmoid(_gate(p, "z", x_t, h_prev))
    cand = ad.tanh(x_t @ p.w("h").T + (r * h_prev) @ p.u("h").T + p.b("h"))
    return (1.0 - z) * h_prev + z * cand


# -- fused sequence ops ------------------------------------------------------------

def _sig(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check_sequence(x: Tensor, p: _CellParams) -> np.ndarray:
    if x.ndim != 3:
        raise DimensionError(f"sequence input must be B×T×F, got {x.shape}")
    if x.shape[-1] != p.input_size:
        raise DimensionError(f"input has {x.shape[-1]} features, cell expects {p.input_size}")
    return x.data


def lstm_sequence(x: Tensor, p: LstmCellParams) -> Tensor:
    """Hidden states of an LSTM unrolled over ``x`` (B×T×F) from zero state."""
    xd = _check_sequence(x, p)
    n, t_len, _ = xd.shape
    hid = p.hidden_size
    W = np.concatenate([p.w(g).data for g in LSTM_GATES])  # 4H × F
    U = np.concatenate([p.u(g).data for g in LSTM_GATES])  # 4H × H
    b = np.concatenate([p.b(g).data for g in LSTM_GATES])
    dtype = np.result_type(xd, W)
    pre_x = xd @ W.T + b
    gates = np.empty((n, t_len, 4 * hid), dtype=dtype)
    cells = np.zeros((n, t_len + 1, hid), dtype=dtype)  # cells[:, 0] is c_0
    hs = np.zeros((n, t_len + 1, hid), dtype=dtype)
    for t in range(t_len):
        a = pre_x[:, t] + hs[:, t] @ U.T
        ifo = _sig(a[:, :3 * hid])
        g = np.tanh(a[:, 3 * hid:])
        i, f, o = ifo[:, :hid], ifo[:, hid:2 * hid], ifo[:, 2 * hid:]
        cells[:, t + 1] = f * cells[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cells[:, t + 1])
        gates[:, t, :3 * hid] = ifo
        gates[:, t, 3 * hid:] = g

    def backward(gH):
        d_pre = np.empty_like(gates)
        dh_next = np.zeros((n, hid), dtype=dtype)
        dc_next = np.zeros((n, hid), dtype=dtype)
        for t in reversed(range(t_len)):
            gt = gates[:, t]
            i, f, o, g = gt[:, :hid], gt[:, hid:2 * hid], gt[:, 2 * hid:3 * hid], gt[:, 3 * hid:]
            tc = np.tanh(cells[:, t + 1])
            dh = gH[:, t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            da = d_pre[:, t]
            da[:, :hid] = dc * g * i * (1 - i)
            da[:, hid:2 * hid] = dc * cells[:, t] * f * (1 - f)
            da[:, 2 * hid:3 * hid] = dh * tc * o * (1 - o)
            da[:, 3 * hid:] = dc * i * (1 - g * g)
            dc_next = dc * f
            dh_next = da @ U
        flat = d_pre.reshape(-1, 4 * hid)
        dW = flat.T @ xd.reshape(-1, xd.shape[-1])
        dU = flat.T @ hs[:, :-1].reshape(-1, hid)
        db = flat.sum(axis=0)
        dx = d_pre @ W
        return [dx] + np.split(dW, 4) + np.split(dU, 4) + np.split(db, 4)

    return make_result(hs[:, 1:], [x] + p.ordered(), backward)


def gru_sequence(x: Tensor, p: GruCellParams) -> Tensor:
    """Hidden states of a GRU unrolled over ``x`` (B×T×F) from zero state."""
    xd = _check_sequence(x, p)
    n, t_len, _ = xd.shape
    hid = p.hidden_size
    W = np.concatenate([p.w(g).data for g in GRU_GATES])  # 3H × F
    b = np.concatenate([p.b(g).data for g in GRU_GATES])
    u_rz = np.concatenate([p.u("r").data, p.u("z").data])  # 2H × H
    u_h = p.u("h").data
    dtype = np.result_type(xd, W)
    pre_x = xd @ W.T + b
    rz = np.empty((n, t_len, 2 * hid), dtype=dtype)
    cand = np.empty((n, t_len, hid), dtype=dtype)
    hs = np.zeros((n, t_len + 1, hid), dtype=dtype)
    for t in range(t_len):
        h = hs[:, t]
        gates = _sig(pre_x[:, t, :2 * hid] + h @ u_rz.T)
        r, z = gates[:, :hid], gates[:, hid:]
        nt = np.tanh(pre_x[:, t, 2 * hid:] + (r * h) @ u_h.T)
        hs[:, t + 1] = (1 - z) * h + z * nt
        rz[:, t], cand[:, t] = gates, nt

    def backward(gH):
        d_pre = np.empty((n, t_len, 3 * hid), dtype=dtype)
        d_rh = np.empty((n, t_len, hid), dtype=dtype)
        dh_next = np.zeros((n, hid), dtype=dtype)
        for t in reversed(range(t_len)):
            h = hs[:, t]
            r, z, nt = rz[:, t, :hid], rz[:, t, hid:], cand[:, t]
            dh = gH[:, t] + dh_next
            dn = dh * z * (1 - nt * nt)
            drh = dn @ u_h
            da = d_pre[:, t]
            da[:, :hid] = drh * h * r * (1 - r)
            da[:, hid:2 * hid] = dh * (nt - h) * z * (1 - z)
            da[:, 2 * hid:] = dn
            d_rh[:, t] = drh
            dh_next = dh * (1 - z) + drh * r + da[:, :2 * hid] @ u_rz
        flat = d_pre.reshape(-1, 3 * hid)
        h_prev = hs[:, :-1].reshape(-1, hid)
        dW = flat.T @ xd.reshape(-1, xd.shape[-1])
        d_urz = flat[:, :2 * hid].T @ h_prev
        d_uh = flat[:, 2 * hid:].T @ (rz[:, :, :hid].reshape(-1, hid) * h_prev)
        db = flat.sum(axis=0)
        dx = d_pre @ W
        return [dx] + np.split(dW, 3) + [d_urz[:hid], d_urz[hid:], d_uh] + np.split(db, 3)

    return make_result(hs[:, 1:], [x] + p.ordered(), backward)


def unrolled_sequence(x: Tensor, p: _CellParams) -> Tensor:
    """Reference unroll through the generic tape using the step functions."""
    n, t_len, _ = x.shape
    h = Tensor(np.zeros((n, p.hidden_size), dtype=x.dtype))
    c = h
    outs = []
    for t in range(t_len):
        if isinstance(p, LstmCellParams):
            h, c = lstm_step(p, x[:, t], h, c)
        else:
            h = gru_step(p, x[:, t], h)
        outs.append(h)
    return ad.stack(outs, axis=1)


# -- recurrent stack ----------------------------------------------------------------

class RecurrentLayer(Module):
    """Cell unrolled over time, then layer normalization and SELU."""

    def __init__(self, kind: str, input_size: int, hidden_size: int, rng, dtype=np.float64):
        if kind not in ("lstm", "gru"):
            raise ConfigError(f"unknown cell kind {kind!r}")
        self.kind = kind
        cls = LstmCellParams if kind == "lstm" else GruCellParams
        self.cell = cls(input_size, hidden_size, rng, dtype)
        self.ln_gamma = ones_param(hidden_size, dtype)
        self.ln_beta = zeros_param(hidden_size, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        seq = lstm_sequence if self.kind == "lstm" else gru_sequence
        return ad.selu(ad.layer_norm(seq(x, self.cell), self.ln_gamma, self.ln_beta))


class RecurrentStack(Module):
    def __init__(self, kind: str, input_size: int, hidden_sizes=(256, 1024, 256), rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [input_size, *hidden_sizes]
        self.layers = [RecurrentLayer(kind, a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def output_size(self) -> int:
        return self.layers[-1].cell.hidden_size

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is B×T×F (or T×F); returns the last layer's full hidden sequence."""
        x = ad.as_tensor(x)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1] < 1:
            raise DimensionError("sequence must have at least one frame")
        for layer in self.layers:
            x = layer(x)
        return x.reshape(x.shape[1:]) if single else x


def recurrent_stack(x, cell_kind: str = "lstm", hidden_sizes=(256, 1024, 256), seed: int = 0, dtype=np.float64) -> Tensor:
    x = ad.as_tensor(x)
    stack = RecurrentStack(cell_kind, x.shape[-1], hidden_sizes, np.random.default_rng(seed), dtype)
    return stack(x)


# -- convolutional trunk ------------------------------------------------------------

class ConvBlock(Module):
    """3×3 convolution (padding 1) → batch norm → ReLU → 2×2 max-pool."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float64):
        fan_in = in_channels * 9
        self.kernels = uniform_init(rng, (out_channels, in_channels, 3, 3), fan_in, dtype)
        self.bias = zeros_param(out_channels, dtype)
        self.bn_gamma = ones_param(out_channels, dtype)
        self.bn_beta = zeros_param(out_channels, dtype)
        self.running_mean = Tensor(np.zeros(out_channels, dtype=dtype))
        self.running_var = Tensor(np.ones(out_channels, dtype=dtype))

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = ad.conv2d(x, self.kernels, self.bias, padding=(1, 1))
        h = ad.batch_norm(h, self.bn_gamma, self.bn_beta, self.running_mean.data, self.running_var.data, train)
        return ad.max_pool2d(ad.relu(h))


class CnnTrunk(Module):
    def __init__(self, channels=(64, 128, 256, 256), in_channels: int = 1, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        chans = [in_channels, *channels]
        self.blocks = [ConvBlock(a, b, rng, dtype) for a, b in zip(chans[:-1], chans[1:])]

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        for _ in self.blocks:
            if h < 2 or w < 2:
                raise DimensionError(f"input too small to pool {len(self.blocks)} times")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise DimensionError(f"input too small to pool {len(self.blocks)} times")
        return h, w

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        """``x`` is N×1×H×W (or 1×H×W); returns N×C'×H'×W'."""
        x = ad.as_tensor(x)
        self.output_hw(x.shape[-2], x.shape[-1])
        for block in self.blocks:
            x = block(x, train)
        return x


def cnn_trunk(x, channels=(64, 128, 256, 256), seed: int = 0, dtype=np.float64, train: bool = False) -> Tensor:
    x = ad.as_tensor(x)
    return CnnTrunk(channels, x.shape[-3], np.random.default_rng(seed), dtype)(x, train)
