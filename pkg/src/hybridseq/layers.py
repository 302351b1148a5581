"""Neural building blocks shared by the three architectures.

Layers take batched inputs ``[B, T, d]``. Most also accept an unbatched
``[T, d]`` (or a single vector for the recurrent/attention steps) and return
the matching unbatched result.

Initialization: recurrent weights uniform(-0.1, 0.1), affine and attention
weights normal scaled by 1/sqrt(fan_in), biases zero, LSTM forget-gate bias 1.
"""

from __future__ import annotations

import math
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameter container; parameters are discovered from attributes in order."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict and set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != value.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def to(self, dtype) -> "Module":
        """Cast every parameter in place (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    """Add a leading batch axis when ``x`` has ``rank - 1`` dims."""
    if x.ndim == rank - 1:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[1:])


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(rng.standard_normal((n_in, n_out)) / math.sqrt(n_in))
        self.bias = parameter(np.zeros(n_out)) if bias else None
        self.n_in = n_in

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear expects width {self.n_in}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator):
        self.weight = parameter(rng.standard_normal((vocab, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


class LSTMCell(Module):
    """Standard LSTM cell, gate order (input, forget, candidate, output)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.weight_ih = parameter(rng.uniform(-0.1, 0.1, (input_size, 4 * hidden_size)))
        self.weight_hh = parameter(rng.uniform(-0.1, 0.1, (hidden_size, 4 * hidden_size)))
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = parameter(bias)
        self.input_size = input_size
        self.hidden_size = hidden_size

    def zero_state(self, batch: int | None = None) -> LstmState:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        dtype = self.weight_hh.dtype
        return LstmState(Tensor(np.zeros(shape), dtype=dtype), Tensor(np.zeros(shape), dtype=dtype))

    def project_input(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"lstm expects input width {self.input_size}, got shape {x.shape}")
        return x @ self.weight_ih + self.bias

    def step_projected(self, xw: Tensor, state: LstmState) -> LstmState:
        n = self.hidden_size
        gates = xw + state.h @ self.weight_hh
        i = T.sigmoid(gates[..., :n])
        f = T.sigmoid(gates[..., n:2 * n])
        g = T.tanh(gates[..., 2 * n:3 * n])
        o = T.sigmoid(gates[..., 3 * n:])
        c = f * state.c + i * g
        return LstmState(o * T.tanh(c), c)

    def __call__(self, x: Tensor, state: LstmState) -> LstmState:
        return self.step_projected(self.project_input(x), state)

    def run(self, x: Tensor, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
        """Unroll over ``x`` of shape ``[B, T, in]``; returns ``[B, T, hidden]``."""
        if x.shape[1] < 1:
            raise ContractError("lstm needs at least one time step")
        state = state or self.zero_state(x.shape[0])
        xw = self.project_input(x)
        outputs = []
        for t in range(x.shape[1]):
            state = self.step_projected(xw[:, t], state)
            outputs.append(state.h)
        return T.stack(outputs, axis=1), state


def lstm_step(cell: LSTMCell, state: LstmState, x: Tensor) -> LstmState:
    return cell(x, state)


def _reverse_index(lengths: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(steps)[None, :]
    lengths = np.asarray(lengths)[:, None]
    idx = np.where(t < lengths, lengths - 1 - t, t)
    return np.arange(len(lengths))[:, None], idx


class BiLSTM(Module):
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.forward_cell = LSTMCell(input_size, hidden_size, rng)
        self.backward_cell = LSTMCell(input_size, hidden_size, rng)

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        x, single = _batched(x, 3)
        batch, steps = x.shape[0], x.shape[1]
        if steps < 1:
            raise ContractError("bilstm needs a non-empty sequence")
        lengths = np.full(batch, steps) if lengths is None else np.asarray(lengths)
        fwd, _ = self.forward_cell.run(x)
        rows, idx = _reverse_index(lengths, steps)
        bwd_rev, _ = self.backward_cell.run(x[rows, idx])
        out = T.concat([fwd, bwd_rev[rows, idx]], axis=-1)
        return _unbatch(out) if single else out


def bilstm_encode(layer: BiLSTM, x: Tensor) -> Tensor:
    return layer(x)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` parallel projections.

    ``mask`` is boolean and True where attention is blocked; it may be
    ``[Tq, Tk]``, ``[B, Tq, Tk]`` or ``[B, 1, Tk]``.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, scale: str = "sqrt-dk"):
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        if scale not in ("sqrt-dk", "dk"):
            raise ConfigError(f"unknown attention scale {scale!r}")
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.output = Linear(d, d, rng)
        self.heads = heads
        self.head_dim = d // heads
        self.scale = 1.0 / (math.sqrt(self.head_dim) if scale == "sqrt-dk" else self.head_dim)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, np.ndarray]:
        q, single = _batched(q, 3)
        k, _ = _batched(k, 3)
        v, _ = _batched(v, 3)
        b, tq, d = q.shape
        qh, kh, vh = self._split(self.query(q)), self._split(self.key(k)), self._split(self.value(v))
        scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * self.scale
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            mask = mask[None, None] if mask.ndim == 2 else mask[:, None]
            scores = T.masked_fill(scores, mask, -np.inf)
        weights = T.softmax(scores, axis=-1)
        context = T.reshape(T.transpose(T.matmul(weights, vh), (0, 2, 1, 3)), (b, tq, d))
        out = self.output(context)
        if single:
            return _unbatch(out), weights.data[0]
        return out, weights.data


def causal_mask(steps: int) -> np.ndarray:
    return np.triu(np.ones((steps, steps), dtype=bool), k=1)


class AdditiveAttention(Module):
    """score_t = w . tanh(W_h h_t + W_s s); context = sum_t softmax(score)_t h_t."""

    def __init__(self, enc_dim: int, state_dim: int, att_dim: int, rng: np.random.Generator):
        self.enc_proj = Linear(enc_dim, att_dim, rng)
        self.state_proj = Linear(state_dim, att_dim, rng, bias=False)
        self.score = Linear(att_dim, 1, rng, bias=False)

    def project_keys(self, h: Tensor) -> Tensor:
        return self.enc_proj(h)

    def __call__(self, h: Tensor, s: Tensor, mask=None, keys: Tensor | None = None):
        """Attend from decoder states ``s`` to encoder frames ``h``.

        Shapes: ``h [B, T, e]`` with ``s [B, U, c]`` (or ``s [B, c]``), or the
        unbatched ``h [T, e]`` with ``s [c]``. ``mask`` marks padded frames as
        True, shape ``[B, T]``. Returns ``(context, weights)``.
        """
        if h.shape[-2] < 1:
            raise ContractError("additive attention needs at least one encoder frame")
        single = h.ndim == 2
        if single:
            h = T.reshape(h, (1,) + h.shape)
            s = T.reshape(s, (1, 1) + s.shape)
        squeeze_u = s.ndim == 2
        if squeeze_u:
            s = T.reshape(s, (s.shape[0], 1, s.shape[1]))
        b, steps, _ = h.shape
        u = s.shape[1]
        keys = self.project_keys(h) if keys is None else keys
        att = keys.shape[-1]
        pre = (T.broadcast_to(T.reshape(keys, (b, 1, steps, att)), (b, u, steps, att))
               + T.broadcast_to(T.reshape(self.state_proj(s), (b, u, 1, att)), (b, u, steps, att)))
        scores = T.reshape(self.score(T.tanh(pre)), (b, u, steps))
        if mask is not None:
            scores = T.masked_fill(scores, np.asarray(mask, dtype=bool)[:, None, :], -np.inf)
        weights = T.softmax(scores, axis=-1)
        context = T.matmul(weights, h)
        if single:
            return T.reshape(context, (h.shape[-1],)), weights.data[0, 0]
        if squeeze_u:
            return T.reshape(context, (b, h.shape[-1])), weights.data[:, 0]
        return context, weights.data


class FFN(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, second_relu: bool = False):
        self.inner = Linear(d, d_ff, rng)
        self.outer = Linear(d_ff, d, rng)
        self.second_relu = second_relu

    def __call__(self, x: Tensor) -> Tensor:
        y = self.outer(T.relu(self.inner(x)))
        return T.relu(y) if self.second_relu else y


def positional_encoding(steps: int, d: int, dtype=None) -> Tensor:
    """Sinusoidal table: even columns sin, odd columns cos."""
    if steps < 1 or d < 1:
        raise ConfigError("positional encoding needs positive length and width")
    if d % 2:
        raise ConfigError(f"positional encoding width must be even, got {d}")
    pos = np.arange(steps)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)[None, :]
    table = np.zeros((steps, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return Tensor(table, dtype=dtype)


def subsampled_length(length) -> np.ndarray:
    return -(-(-(-np.asarray(length) // 2)) // 2)


class SubsampleFrontend(Module):
    """Two stride-2 affine+ReLU stages; each stage concatenates frame pairs."""

    def __init__(self, feat_dim: int, d: int, rng: np.random.Generator):
        self.stage1 = Linear(2 * feat_dim, d, rng)
        self.stage2 = Linear(2 * d, d, rng)

    @staticmethod
    def _pair(x: Tensor) -> Tensor:
        b, steps, width = x.shape
        if steps % 2:
            pad = Tensor(np.zeros((b, 1, width)), dtype=x.dtype)
            x = T.concat([x, pad], axis=1)
            steps += 1
        return T.reshape(x, (b, steps // 2, 2 * width))

    @staticmethod
    def _zero_padding(y: Tensor, lengths: np.ndarray) -> Tensor:
        # relu(bias) on padded pairs would otherwise leak into the last valid frame
        keep = np.arange(y.shape[1])[None, :] < lengths[:, None]
        if keep.all():
            return y
        mask = np.broadcast_to(keep[:, :, None], y.shape).astype(y.dtype)
        return y * Tensor(mask, dtype=y.dtype)

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        """``lengths`` (valid frames per row) zeroes positions past each utterance end."""
        x, single = _batched(x, 3)
        if x.shape[1] < 4:
            raise ContractError(f"front-end needs at least 4 frames, got {x.shape[1]}")
        y = T.relu(self.stage1(self._pair(x)))
        if lengths is not None:
            lengths = -(-np.asarray(lengths) // 2)
            y = self._zero_padding(y, lengths)
        y = T.relu(self.stage2(self._pair(y)))
        if lengths is not None:
            y = self._zero_padding(y, -(-lengths // 2))
        return _unbatch(y) if single else y


class EncoderBlock(Module):
    """Pre-norm self-attention + FFN block."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0, scale: str = "sqrt-dk", second_relu: bool = False):
        self.norm_att = LayerNorm(d)
        self.self_att = MultiHeadAttention(d, heads, rng, scale)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FFN(d, d_ff, rng, second_relu)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        rate = self.dropout if self.training else 0.0
        y = self.norm_att(x)
        x = x + T.dropout(self.self_att(y, y, y, mask)[0], rate, rng)
        return x + T.dropout(self.ffn(self.norm_ffn(x)), rate, rng)


class DecoderBlock(Module):
    """Pre-norm causal self-attention + cross-attention + FFN block."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0, scale: str = "sqrt-dk", second_relu: bool = False):
        self.norm_self = LayerNorm(d)
        self.self_att = MultiHeadAttention(d, heads, rng, scale)
        self.norm_cross = LayerNorm(d)
        self.cross_att = MultiHeadAttention(d, heads, rng, scale)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FFN(d, d_ff, rng, second_relu)
        self.dropout = dropout

    def __call__(self, y: Tensor, enc: Tensor, self_mask=None, enc_mask=None, rng=None) -> Tensor:
        rate = self.dropout if self.training else 0.0
        z = self.norm_self(y)
        y = y + T.dropout(self.self_att(z, z, z, self_mask)[0], rate, rng)
        y = y + T.dropout(self.cross_att(self.norm_cross(y), enc, enc, enc_mask)[0], rate, rng)
        return y + T.dropout(self.ffn(self.norm_ffn(y)), rate, rng)
