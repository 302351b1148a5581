"""Architectures A1 (BLSTM encoder + LSTM decoder), A2 (Transformer) and A3
(Transformer encoder + LSTM decoder).

The LSTM decoder used by A1 and A3 updates its state from the previous token
alone; attention over the encoder output is computed from the updated state
and enters the output distribution through a separate projection:

    s_i = LSTM(s_{i-1}, embed(y_{i-1}))
    c_i = attention(h, s_i)
    P(y_i | X, y_<i) = softmax(proj_state(s_i) + proj_context(c_i))

Dropping the context term gives a pure language model over tokens, which is
what lets text-only data train the decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .bpe import EOS, PAD, SOS
from .errors import ConfigError, UnsupportedArchitectureError
from .layers import (AdditiveAttention, BiLSTM, DecoderBlock, Embedding, EncoderBlock,
                     LayerNorm, Linear, LSTMCell, LstmState, Module, SubsampleFrontend,
                     causal_mask, positional_encoding, subsampled_length)
from .tensor import Tensor

ARCHS = ("A1", "A2", "A3")
GROUPS = ("encoder", "decoder-core", "embedding", "projection")

_FULL_LAYERS = {"A1": (6, 1), "A2": (12, 6), "A3": (12, 1)}


@dataclass
class ArchConfig:
    arch: str = "A3"
    enc_layers: int = 12
    dec_layers: int = 1
    heads: int = 4
    d_model: int = 256
    d_ff: int = 2048
    blstm_cells: int = 320
    dec_cells: int = 256
    att_dim: int = 256
    vocab_size: int = 500
    feat_dim: int = 80
    dropout: float = 0.0
    attention_scale: str = "sqrt-dk"
    ffn_second_relu: bool = False

    @classmethod
    def full(cls, arch: str, **overrides) -> "ArchConfig":
        """Full-size layer counts and widths."""
        if arch not in ARCHS:
            raise ConfigError(f"unknown architecture {arch!r}")
        enc, dec = _FULL_LAYERS[arch]
        return replace(cls(arch=arch, enc_layers=enc, dec_layers=dec), **overrides)

    @classmethod
    def small(cls, arch: str, **overrides) -> "ArchConfig":
        """Desk-scale variant used by the toy experiments."""
        if arch not in ARCHS:
            raise ConfigError(f"unknown architecture {arch!r}")
        base = cls(arch=arch, enc_layers=2, dec_layers=2 if arch == "A2" else 1, heads=4,
                   d_model=64, d_ff=256, blstm_cells=32, dec_cells=64, att_dim=64,
                   vocab_size=40, feat_dim=16)
        return replace(base, **overrides)

    def validate(self) -> "ArchConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("layer counts must be positive")
        if self.arch != "A2" and self.dec_layers != 1:
            raise ConfigError(f"{self.arch} uses a single LSTM decoder layer")
        if self.arch != "A1" and self.d_model % self.heads:
            raise ConfigError(f"width {self.d_model} not divisible by {self.heads} heads")
        if self.arch != "A1" and self.d_model % 2:
            raise ConfigError("model width must be even for positional encoding")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must hold the reserved units plus one")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.attention_scale not in ("dk", "sqrt-dk"):
            raise ConfigError(f"attention_scale must be 'dk' or 'sqrt-dk'")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class EncoderOutput:
    h: Tensor
    lengths: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def frames(self) -> int:
        return self.h.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """True on padded frames, shape ``[B, T']``."""
        return np.arange(self.frames)[None, :] >= self.lengths[:, None]


@dataclass
class DecoderState:
    arch: str
    lstm: list[LstmState] | None = None
    context: Tensor | None = None
    prefix: np.ndarray | None = None

    def nbytes(self) -> int:
        total = 0
        for st in self.lstm or ():
            total += st.h.data.nbytes + st.c.data.nbytes
        if self.context is not None:
            total += self.context.data.nbytes
        if self.prefix is not None:
            total += self.prefix.nbytes
        return total


def param_group(name: str) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("decoder.embedding."):
        return "embedding"
    if name.startswith(("decoder.proj_state.", "decoder.proj_context.", "decoder.output.")):
        return "projection"
    return "decoder-core"


def _as_features(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def pad_features(xs: Sequence[np.ndarray], dtype) -> tuple[Tensor, np.ndarray]:
    lengths = np.array([len(x) for x in xs])
    feats = np.zeros((len(xs), lengths.max(), xs[0].shape[1]), dtype=dtype)
    for i, x in enumerate(xs):
        feats[i, :len(x)] = x
    return Tensor(feats, dtype=dtype), lengths


def pad_tokens(seqs: Sequence[Sequence[int]], fill: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def frame(tokens: Sequence[int]) -> tuple[list[int], list[int]]:
    """Decoder inputs ``[sos] + y`` and targets ``y + [eos]``."""
    return [SOS] + list(tokens), list(tokens) + [EOS]


class TransformerEncoder(Module):
    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.frontend = SubsampleFrontend(cfg.feat_dim, cfg.d_model, rng)
        self.blocks = [EncoderBlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.dropout,
                                    cfg.attention_scale, cfg.ffn_second_relu)
                       for _ in range(cfg.enc_layers)]
        self.output_dim = cfg.d_model

    def __call__(self, x: Tensor, lengths: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        h = self.frontend(x, lengths)
        h = h + positional_encoding(h.shape[1], h.shape[2], dtype=h.dtype)
        out_lengths = subsampled_length(lengths)
        mask = (np.arange(h.shape[1])[None, :] >= out_lengths[:, None])[:, None, :]
        for block in self.blocks:
            h = block(h, mask, rng)
        return h, out_lengths


class BlstmEncoder(Module):
    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.frontend = SubsampleFrontend(cfg.feat_dim, cfg.d_model, rng)
        widths = [cfg.d_model] + [2 * cfg.blstm_cells] * (cfg.enc_layers - 1)
        self.layers = [BiLSTM(w, cfg.blstm_cells, rng) for w in widths]
        self.output_dim = 2 * cfg.blstm_cells

    def __call__(self, x: Tensor, lengths: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        h = self.frontend(x, lengths)
        out_lengths = subsampled_length(lengths)
        for layer in self.layers:
            h = layer(h, out_lengths)
        return h, out_lengths


class LstmDecoder(Module):
    def __init__(self, cfg: ArchConfig, enc_dim: int, rng: np.random.Generator):
        self.embedding = Embedding(cfg.vocab_size, cfg.dec_cells, rng)
        self.cells = [LSTMCell(cfg.dec_cells, cfg.dec_cells, rng) for _ in range(cfg.dec_layers)]
        self.attention = AdditiveAttention(enc_dim, cfg.dec_cells, cfg.att_dim, rng)
        self.proj_state = Linear(cfg.dec_cells, cfg.vocab_size, rng)
        self.proj_context = Linear(enc_dim, cfg.vocab_size, rng, bias=False)


class TransformerDecoder(Module):
    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.embedding = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.blocks = [DecoderBlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.dropout,
                                    cfg.attention_scale, cfg.ffn_second_relu)
                       for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.output = Linear(cfg.d_model, cfg.vocab_size, rng)


class Seq2Seq(Module):
    """Common encode / decode interface of the three architectures."""

    def __init__(self, config: ArchConfig, seed: int):
        self.config = config
        self.seed = seed
        self.meta: dict = {}
        self.dropout_rng = np.random.default_rng([seed, 7])

    # -- parameters -------------------------------------------------------
    def groups(self) -> dict[str, str]:
        return {name: param_group(name) for name, _ in self.named_parameters()}

    def group_parameters(self, group: str) -> dict[str, Tensor]:
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        return {n: p for n, p in self.named_parameters() if param_group(n) == group}

    @property
    def dtype(self):
        return self.decoder.embedding.weight.dtype

    # -- encoder ----------------------------------------------------------
    def encode_batch(self, xs: Sequence) -> EncoderOutput:
        feats, lengths = pad_features([_as_features(x) for x in xs], self.dtype)
        rng = self.dropout_rng if self.training else None
        h, out_lengths = self.encoder(feats, lengths, rng)
        return EncoderOutput(h, out_lengths)

    def encode(self, x) -> EncoderOutput:
        return self.encode_batch([x])

    # -- teacher-forced forward ------------------------------------------
    def forward_asr(self, x, y: Sequence[int]) -> Tensor:
        """Logits ``[|y| - 1, V]`` for a framed token sequence ``[sos, ..., eos]``."""
        logits = self.forward_asr_batch([x], [list(y[:-1])])
        return T.reshape(logits, logits.shape[1:])

    def forward_asr_batch(self, xs: Sequence, inputs: Sequence[Sequence[int]],
                          enc: EncoderOutput | None = None) -> Tensor:
        raise NotImplementedError

    def initial_state(self, batch: int = 1) -> DecoderState:
        raise NotImplementedError

    def decoder_step(self, state: DecoderState, prev_token, enc: EncoderOutput):
        raise NotImplementedError

    def lm_step(self, state: DecoderState, prev_token):
        raise UnsupportedArchitectureError(f"{self.config.arch} has no independent LM decoder")

    def lm_logits_batch(self, inputs: Sequence[Sequence[int]]) -> Tensor:
        raise UnsupportedArchitectureError(f"{self.config.arch} has no independent LM decoder")


def _token_array(prev_token, batch: int) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(prev_token, dtype=np.int64))
    if ids.shape != (batch,):
        raise ConfigError(f"expected {batch} previous tokens, got {ids.shape}")
    return ids


class LstmDecoderModel(Seq2Seq):
    """A1 and A3: the decoder LSTM never sees the encoder output."""

    def __init__(self, config: ArchConfig, seed: int):
        super().__init__(config, seed)
        rng = np.random.default_rng(seed)
        self.encoder = (BlstmEncoder(config, rng) if config.arch == "A1"
                        else TransformerEncoder(config, rng))
        self.decoder = LstmDecoder(config, self.encoder.output_dim, rng)

    def _check_tokens(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")

    def _lstm(self, x: Tensor, states: list[LstmState]) -> tuple[Tensor, list[LstmState]]:
        new = []
        for cell, st in zip(self.decoder.cells, states):
            st = cell(x, st)
            new.append(st)
            x = st.h
        return x, new

    def _unroll(self, inputs: np.ndarray) -> Tensor:
        """Decoder LSTM outputs ``[B, U, c]`` for token inputs ``[B, U]``."""
        self._check_tokens(inputs)
        x = self.decoder.embedding(inputs)
        for cell in self.decoder.cells:
            x, _ = cell.run(x)
        return x

    def _att_keys(self, enc: EncoderOutput) -> Tensor:
        keys = enc.cache.get("att_keys")
        if keys is None:
            keys = enc.cache["att_keys"] = self.decoder.attention.project_keys(enc.h)
        return keys

    def forward_asr_batch(self, xs, inputs, enc=None) -> Tensor:
        enc = enc or self.encode_batch(xs)
        s = self._unroll(pad_tokens(inputs))
        context, _ = self.decoder.attention(enc.h, s, enc.mask, keys=self._att_keys(enc))
        return self.decoder.proj_state(s) + self.decoder.proj_context(context)

    def lm_logits_batch(self, inputs) -> Tensor:
        return self.decoder.proj_state(self._unroll(pad_tokens(inputs)))

    def initial_state(self, batch: int = 1) -> DecoderState:
        cells = self.decoder.cells
        context = Tensor(np.zeros((batch, self.encoder.output_dim)), dtype=self.dtype)
        return DecoderState(self.config.arch, [c.zero_state(batch) for c in cells], context)

    def decoder_step(self, state, prev_token, enc):
        ids = _token_array(prev_token, len(state.lstm[0].h))
        self._check_tokens(ids)
        s, lstm = self._lstm(self.decoder.embedding(ids), state.lstm)
        context, _ = self.decoder.attention(enc.h, s, enc.mask, keys=self._att_keys(enc))
        logits = self.decoder.proj_state(s) + self.decoder.proj_context(context)
        return T.log_softmax(logits), DecoderState(state.arch, lstm, context)

    def lm_step(self, state, prev_token):
        ids = _token_array(prev_token, len(state.lstm[0].h))
        self._check_tokens(ids)
        s, lstm = self._lstm(self.decoder.embedding(ids), state.lstm)
        return T.log_softmax(self.decoder.proj_state(s)), DecoderState(state.arch, lstm, state.context)


class TransformerModel(Seq2Seq):
    """A2: every decoding step reruns the decoder stack over the whole prefix."""

    def __init__(self, config: ArchConfig, seed: int):
        super().__init__(config, seed)
        rng = np.random.default_rng(seed)
        self.encoder = TransformerEncoder(config, rng)
        self.decoder = TransformerDecoder(config, rng)

    def _decode(self, tokens: np.ndarray, enc: EncoderOutput) -> Tensor:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")
        d = self.config.d_model
        y = self.decoder.embedding(tokens)
        y = y + positional_encoding(tokens.shape[1], d, dtype=y.dtype)
        rng = self.dropout_rng if self.training else None
        self_mask = causal_mask(tokens.shape[1])
        enc_mask = enc.mask[:, None, :]
        for block in self.decoder.blocks:
            y = block(y, enc.h, self_mask, enc_mask, rng)
        return self.decoder.output(self.decoder.norm(y))

    def forward_asr_batch(self, xs, inputs, enc=None) -> Tensor:
        enc = enc or self.encode_batch(xs)
        return self._decode(pad_tokens(inputs), enc)

    def initial_state(self, batch: int = 1) -> DecoderState:
        return DecoderState("A2", prefix=np.zeros((batch, 0), dtype=np.int64))

    def decoder_step(self, state, prev_token, enc):
        ids = _token_array(prev_token, len(state.prefix))
        prefix = np.concatenate([state.prefix, ids[:, None]], axis=1)
        logits = self._decode(prefix, enc)
        last = logits[:, prefix.shape[1] - 1]
        return T.log_softmax(last), DecoderState("A2", prefix=prefix)


def build(config: ArchConfig, seed: int = 0) -> Seq2Seq:
    """Construct a freshly initialized model; equal seeds give identical parameters."""
    config.validate()
    cls = TransformerModel if config.arch == "A2" else LstmDecoderModel
    return cls(config, seed)


def save(model: Seq2Seq, path, tokenizer_hash: str | None = None) -> None:
    meta = {
        "kind": "seq2seq",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "groups": model.groups(),
        "tokenizer": tokenizer_hash or model.meta.get("tokenizer"),
    }
    meta.update({k: v for k, v in model.meta.items() if k not in meta})
    checkpoint.write(path, meta, model.state_dict())


def load(path) -> Seq2Seq:
    meta, arrays = checkpoint.read(path)
    if meta.get("kind") != "seq2seq":
        raise ConfigError(f"{path} is not a seq2seq checkpoint")
    model = build(ArchConfig.from_dict(meta["config"]), meta["seed"])
    model.load_state_dict(arrays)
    model.meta = {k: v for k, v in meta.items() if k not in ("kind", "config", "seed", "groups")}
    return model
