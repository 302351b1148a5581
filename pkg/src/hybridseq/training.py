"""Losses, optimizer, cross-lingual transplant and text-boosted fine-tuning."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bpe import PAD
from .errors import (ConfigError, ContractError, TrainingDivergedError, TransferError,
                     UnsupportedArchitectureError)
from .models import Seq2Seq, build, frame, pad_tokens, param_group
from .tensor import Tensor

logger = logging.getLogger(__name__)

# (features [T, f], token ids without sos/eos)
Utterance = tuple[np.ndarray, list[int]]


@dataclass
class PairedBatch:
    feats: list[np.ndarray]
    tokens: list[list[int]]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TextBatch:
    tokens: list[list[int]]

    def __len__(self) -> int:
        return len(self.tokens)


def paired_batch(utts: Sequence[Utterance]) -> PairedBatch:
    return PairedBatch([u[0] for u in utts], [list(u[1]) for u in utts])


# -- losses -------------------------------------------------------------------
def asr_loss(model: Seq2Seq, batch: PairedBatch, smoothing: float = 0.1) -> Tensor:
    """Token-averaged (label-smoothed) cross-entropy of the teacher-forced decoder."""
    if len(batch) == 0:
        raise ContractError("asr_loss needs a non-empty batch")
    inputs, targets = zip(*(frame(t) for t in batch.tokens))
    logits = model.forward_asr_batch(batch.feats, inputs)
    return T.cross_entropy(logits, pad_tokens(targets), ignore_id=PAD, smoothing=smoothing)


def lm_loss(model: Seq2Seq, batch: TextBatch) -> Tensor:
    """Next-token cross-entropy through the decoder's language-model path.

    Only the embedding, the decoder LSTM and the state projection take part;
    encoder, attention and context projection receive no gradient.
    """
    if model.config.arch == "A2":
        raise UnsupportedArchitectureError("A2 has no independent LM decoder")
    if len(batch) == 0:
        raise ContractError("lm_loss needs a non-empty batch")
    inputs, targets = zip(*(frame(t) for t in batch.tokens))
    logits = model.lm_logits_batch(inputs)
    return T.cross_entropy(logits, pad_tokens(targets), ignore_id=PAD)


def interpolate(l_asr, l_lm, lam: float):
    """(1 - lam) * L_ASR + lam * L_LM; a term with zero weight is dropped."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"interpolation factor must be in [0, 1], got {lam}")
    if lam == 0.0:
        return l_asr
    if lam == 1.0:
        return l_lm
    return (1.0 - lam) * l_asr + lam * l_lm


# -- optimizer ----------------------------------------------------------------
@dataclass
class OptimizerConfig:
    lr: float = 2e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip: float = 5.0
    batch_size: int = 32
    label_smoothing: float = 0.1


class Adam:
    """Adam with an inverse-square-root warmup schedule.

    The rate rises linearly to ``lr`` over ``warmup`` steps and then decays
    as ``lr * sqrt(warmup / step)``. Parameters without a gradient are skipped.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, warmup: int = 0,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9,
                 clip: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.warmup = warmup
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: OptimizerConfig, lr: float | None = None) -> "Adam":
        return cls(params, cfg.lr if lr is None else lr, cfg.warmup,
                   (cfg.beta1, cfg.beta2), cfg.eps, cfg.clip)

    def rate(self, step: int) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self) -> float:
        self.step_count += 1
        lr = self.rate(self.step_count)
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        scale = 1.0
        if self.clip:
            norm = math.sqrt(sum(float(np.sum(self.params[i].grad ** 2)) for i in live))
            if norm > self.clip:
                scale = self.clip / norm
        b1, b2 = self.betas
        t = self.step_count
        for i in live:
            p = self.params[i]
            g = p.grad * scale
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / (1 - b1 ** t)
            v_hat = self._v[i] / (1 - b2 ** t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return lr


# -- single updates -----------------------------------------------------------
@dataclass
class StepLog:
    step: int
    total: float
    asr: float
    lm: float
    lr: float

    def line(self) -> str:
        return f"{self.step}\t{self.total:.6f}\t{self.asr:.6f}\t{self.lm:.6f}\t{self.lr:.6g}"


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} at step {step}")


def mixed_step(model: Seq2Seq, optimizer: Adam, paired: PairedBatch | None,
               text: TextBatch | None, lam: float, smoothing: float = 0.1) -> StepLog:
    """One update on (1 - lam) * L_ASR + lam * L_LM with a single backward."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"interpolation factor must be in [0, 1], got {lam}")
    has_paired = paired is not None and len(paired) > 0
    has_text = text is not None and len(text) > 0
    if lam < 1.0 and not has_paired:
        raise ContractError("a paired batch is required unless lam == 1")
    if lam > 0.0 and not has_text:
        raise ContractError("a text batch is required unless lam == 0")
    model.zero_grad()
    model.train()
    l_asr = l_lm = None
    if lam < 1.0:
        l_asr = asr_loss(model, paired, smoothing)
    if lam > 0.0:
        l_lm = lm_loss(model, text)
    total = interpolate(l_asr, l_lm, lam)
    _check_finite(total.item(), optimizer.step_count + 1)
    total.backward()
    lr = optimizer.step()
    model.eval()
    return StepLog(optimizer.step_count, total.item(),
                   l_asr.item() if l_asr is not None else float("nan"),
                   l_lm.item() if l_lm is not None else float("nan"), lr)


def evaluate_asr_loss(model: Seq2Seq, corpus: Sequence[Utterance], batch_size: int = 64,
                      smoothing: float = 0.0) -> float:
    """Token-averaged cross-entropy over ``corpus`` without building a graph."""
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = paired_batch(corpus[start:start + batch_size])
            n = sum(len(t) + 1 for t in batch.tokens)
            total += asr_loss(model, batch, smoothing).item() * n
            count += n
    return total / max(count, 1)


def _batches(n: int, size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every pass."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, size):
            yield order[start:start + size]


@dataclass
class TrainResult:
    model: Seq2Seq
    log: list[StepLog] = field(default_factory=list)
    dev_losses: list[float] = field(default_factory=list)


def train(model: Seq2Seq, corpus: Sequence[Utterance], epochs: int | None = None,
          cfg: OptimizerConfig | None = None, steps: int | None = None,
          dev: Sequence[Utterance] | None = None, seed: int = 0,
          callback: Callable[[StepLog], None] | None = None,
          stop_loss: float | None = None) -> TrainResult:
    """Supervised training on paired data.

    Runs ``epochs`` passes (or exactly ``steps`` updates when given). Dev loss
    is recorded after every epoch. ``stop_loss`` ends training once the
    average training loss of the last epoch drops below it.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    cfg = cfg or OptimizerConfig()
    if epochs is None and steps is None:
        raise ConfigError("give epochs or steps")
    per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = steps if steps is not None else epochs * per_epoch
    optimizer = Adam.from_config(model.parameters(), cfg)
    rng = np.random.default_rng(seed)
    stream = _batches(len(corpus), cfg.batch_size, rng)
    result = TrainResult(model)
    epoch_losses: list[float] = []
    for step in range(1, total_steps + 1):
        idx = next(stream)
        log = mixed_step(model, optimizer, paired_batch([corpus[i] for i in idx]), None,
                         0.0, cfg.label_smoothing)
        result.log.append(log)
        epoch_losses.append(log.total)
        if callback:
            callback(log)
        if step % per_epoch == 0 or step == total_steps:
            if dev:
                result.dev_losses.append(evaluate_asr_loss(model, dev))
                logger.info("step %d dev loss %.4f", step, result.dev_losses[-1])
            if stop_loss is not None and np.mean(epoch_losses) < stop_loss:
                break
            epoch_losses = []
    return result


# -- transfer -----------------------------------------------------------------
_BOTTOM = re.compile(r"bottom-(\d+)$")


@dataclass
class TransferSpec:
    source: Seq2Seq
    selector: str = "encoder"
    target_vocab: int | None = None


def selected_names(model: Seq2Seq, selector: str) -> list[str]:
    """Parameter names copied by ``selector``; never embedding or projection."""
    names = [n for n, _ in model.named_parameters()]
    if selector == "encoder":
        return [n for n in names if param_group(n) == "encoder"]
    if selector == "encoder+decoder":
        return [n for n in names if param_group(n) in ("encoder", "decoder-core")]
    match = _BOTTOM.match(selector)
    if not match:
        raise ConfigError(f"unknown transfer selector {selector!r}")
    depth = int(match.group(1))
    if not 1 <= depth <= model.config.enc_layers:
        raise ConfigError(f"bottom-{depth} outside 1..{model.config.enc_layers} encoder layers")
    stack = "blocks" if model.config.arch != "A1" else "layers"
    prefixes = ("encoder.frontend.",) + tuple(f"encoder.{stack}.{k}." for k in range(depth))
    return [n for n in names if n.startswith(prefixes)]


def transfer(spec: TransferSpec, target: Seq2Seq) -> Seq2Seq:
    """Copy the selected source parameters into a copy of ``target``."""
    source = spec.source
    if source.config.arch != target.config.arch:
        raise TransferError(f"cannot transfer {source.config.arch} into {target.config.arch}")
    if spec.target_vocab is not None and spec.target_vocab != target.config.vocab_size:
        raise TransferError(f"target model has vocabulary {target.config.vocab_size}, "
                            f"expected {spec.target_vocab}")
    result = build(target.config, target.seed)
    result.load_state_dict(target.state_dict())
    result.meta = dict(target.meta)
    src = dict(source.named_parameters())
    dst = dict(result.named_parameters())
    copied = selected_names(result, spec.selector)
    for name in copied:
        if name not in src:
            raise TransferError(f"source has no parameter {name}")
        if src[name].shape != dst[name].shape:
            raise TransferError(f"{name}: source {src[name].shape} vs target {dst[name].shape}")
        dst[name].data = src[name].data.astype(dst[name].dtype, copy=True)
    result.meta["transfer"] = {"selector": spec.selector, "source_seed": source.seed,
                               "copied": copied}
    return result


# -- text-boosted fine-tuning ---------------------------------------------------
@dataclass
class FinetuneConfig:
    lam: float = 0.7
    b_labeled: int = 30
    b_text: int = 90
    step1: int = 300
    step2: int = 200
    lr1: float = 1e-3
    lr2: float = 5e-4
    warmup: int = 50
    label_smoothing: float = 0.1
    seed: int = 0

    def validate(self) -> "FinetuneConfig":
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.b_labeled < 1 or self.b_text < 1:
            raise ConfigError("batch sizes must be positive")
        if self.step1 < 0 or self.step2 < 0:
            raise ConfigError("step counts must be non-negative")
        return self


def finetune_with_text(model: Seq2Seq, labeled: Sequence[Utterance],
                       text: Sequence[Sequence[int]], cfg: FinetuneConfig | None = None,
                       callback: Callable[[StepLog], None] | None = None
                       ) -> tuple[Seq2Seq, list[StepLog]]:
    """Step 1: mixed paired/text updates under the interpolated loss.
    Step 2: paired-only updates with a fresh optimizer at ``lr2``.
    """
    cfg = (cfg or FinetuneConfig()).validate()
    if model.config.arch == "A2" and cfg.step1 > 0 and cfg.lam > 0:
        raise UnsupportedArchitectureError("text boosting needs an LSTM decoder (A1/A3)")
    if not labeled:
        raise ContractError("labeled corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    paired_stream = _batches(len(labeled), cfg.b_labeled, rng)
    log: list[StepLog] = []

    def record(entry: StepLog) -> None:
        entry.step = len(log) + 1
        log.append(entry)
        if callback:
            callback(entry)

    if cfg.step1:
        if not text and cfg.lam > 0:
            raise ContractError("text corpus is empty")
        text_stream = _batches(len(text), cfg.b_text, rng) if text else None
        opt = Adam(model.parameters(), cfg.lr1, cfg.warmup)
        for _ in range(cfg.step1):
            paired = paired_batch([labeled[i] for i in next(paired_stream)])
            tb = TextBatch([list(text[i]) for i in next(text_stream)]) if text_stream else None
            record(mixed_step(model, opt, paired, tb, cfg.lam, cfg.label_smoothing))
    if cfg.step2:
        opt = Adam(model.parameters(), cfg.lr2, cfg.warmup)
        for _ in range(cfg.step2):
            paired = paired_batch([labeled[i] for i in next(paired_stream)])
            record(mixed_step(model, opt, paired, None, 0.0, cfg.label_smoothing))
    return model, log
