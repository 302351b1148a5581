"""Greedy and beam-search decoding, shallow LM fusion and the decode-cost benchmark."""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .bpe import EOS, PAD, SOS
from .errors import ConfigError, ContractError
from .layers import Embedding, Linear, LSTMCell, LstmState, Module
from .metrics import edit_distance
from .models import DecoderState, EncoderOutput, Seq2Seq, frame, pad_tokens
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    state: DecoderState = field(repr=False)
    lm_state: LstmState | None = field(default=None, repr=False)
    finished: bool = False

    @property
    def normalized_score(self) -> float:
        return self.score / max(len(self.tokens), 1)

    @property
    def output(self) -> list[int]:
        """Emitted tokens without the terminating eos."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


# -- external language model -----------------------------------------------------
@dataclass
class RnnLmConfig:
    vocab_size: int = 500
    cells: int = 1024
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    warmup: int = 50
    seed: int = 0


class RnnLm(Module):
    """Embedding, one LSTM layer and a projection to the vocabulary."""

    def __init__(self, cfg: RnnLmConfig):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        self.embedding = Embedding(cfg.vocab_size, cfg.cells, rng)
        self.cell = LSTMCell(cfg.cells, cfg.cells, rng)
        self.proj = Linear(cfg.cells, cfg.vocab_size, rng)
        self.tokenizer: str | None = None

    def initial_state(self, batch: int = 1) -> LstmState:
        return self.cell.zero_state(batch)

    def step(self, state: LstmState, prev_token) -> tuple[Tensor, LstmState]:
        ids = np.atleast_1d(np.asarray(prev_token, dtype=np.int64))
        state = self.cell(self.embedding(ids), state)
        return T.log_softmax(self.proj(state.h)), state

    def logits_batch(self, inputs: Sequence[Sequence[int]]) -> Tensor:
        h, _ = self.cell.run(self.embedding(pad_tokens(inputs)))
        return self.proj(h)

    def loss(self, sentences: Sequence[Sequence[int]]) -> Tensor:
        inputs, targets = zip(*(frame(s) for s in sentences))
        return T.cross_entropy(self.logits_batch(inputs), pad_tokens(targets), ignore_id=PAD)

    def perplexity(self, sentences: Sequence[Sequence[int]], batch_size: int = 256) -> float:
        total = count = 0.0
        with T.no_grad():
            for start in range(0, len(sentences), batch_size):
                chunk = sentences[start:start + batch_size]
                n = sum(len(s) + 1 for s in chunk)
                total += self.loss(chunk).item() * n
                count += n
        return math.exp(total / count)

    def save(self, path) -> None:
        meta = {"kind": "rnnlm", "config": vars(self.config), "tokenizer": self.tokenizer}
        checkpoint.write(path, meta, self.state_dict())

    @classmethod
    def load(cls, path) -> "RnnLm":
        meta, arrays = checkpoint.read(path)
        if meta.get("kind") != "rnnlm":
            raise ConfigError(f"{path} is not an RNN-LM checkpoint")
        lm = cls(RnnLmConfig(**meta["config"]))
        lm.load_state_dict(arrays)
        lm.tokenizer = meta.get("tokenizer")
        return lm


def check_tokenizer(model: Seq2Seq, lm: RnnLm) -> None:
    asr_hash = model.meta.get("tokenizer")
    if asr_hash and lm.tokenizer and asr_hash != lm.tokenizer:
        raise ConfigError("language model and ASR model use different tokenizers")
    if lm.config.vocab_size != model.config.vocab_size:
        raise ConfigError(f"LM vocabulary {lm.config.vocab_size} != "
                          f"ASR vocabulary {model.config.vocab_size}")


def train_rnnlm(corpus: Sequence[Sequence[int]], cfg: RnnLmConfig,
                tokenizer_hash: str | None = None, asr_model: Seq2Seq | None = None
                ) -> tuple[RnnLm, list[float]]:
    """Next-token training; returns the model and the per-epoch training perplexity."""
    from .training import Adam, _batches

    if not corpus:
        raise ContractError("LM training corpus is empty")
    if asr_model is not None and asr_model.meta.get("tokenizer") not in (None, tokenizer_hash):
        raise ConfigError("LM corpus tokenizer differs from the ASR model's tokenizer")
    lm = RnnLm(cfg)
    lm.tokenizer = tokenizer_hash
    opt = Adam(lm.parameters(), cfg.lr, cfg.warmup)
    rng = np.random.default_rng([cfg.seed, 1])
    stream = _batches(len(corpus), cfg.batch_size, rng)
    per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            lm.zero_grad()
            loss = lm.loss([corpus[i] for i in next(stream)])
            loss.backward()
            opt.step()
        history.append(lm.perplexity(corpus))
        logger.info("lm epoch %d perplexity %.3f", epoch + 1, history[-1])
    return lm, history


# -- decoding -----------------------------------------------------------------
@dataclass
class Fusion:
    lm: RnnLm
    beta: float = 0.3


def greedy_search(model: Seq2Seq, x, max_len: int, enc: EncoderOutput | None = None) -> Hypothesis:
    """Arg-max token at each step until eos or ``max_len`` tokens."""
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    with T.no_grad():
        enc = enc or model.encode(x)
        hyp = Hypothesis([], 0.0, model.initial_state(1))
        for _ in range(max_len):
            prev = hyp.tokens[-1] if hyp.tokens else SOS
            logp, hyp.state = model.decoder_step(hyp.state, prev, enc)
            scores = logp.data[0].astype(np.float64)
            tok = int(np.argmax(scores))
            hyp.tokens.append(tok)
            hyp.score += float(scores[tok])
            if tok == EOS:
                hyp.finished = True
                break
    return hyp


def greedy_decode(model: Seq2Seq, x, max_len: int, enc: EncoderOutput | None = None) -> list[int]:
    return greedy_search(model, x, max_len, enc).output


def beam_search(model: Seq2Seq, x, beam_size: int, max_len: int,
                fusion: Fusion | None = None, enc: EncoderOutput | None = None) -> Hypothesis:
    """Beam search over decoder log-probabilities.

    With fusion, each step scores ``log P_asr + beta * log P_lm``. Candidates
    are ranked by accumulated score (ties: parent order, then token id);
    finished hypotheses are ranked by score divided by token count.
    """
    if beam_size < 1 or max_len < 1:
        raise ContractError("beam_size and max_len must be at least 1")
    if fusion is not None:
        check_tokenizer(model, fusion.lm)
    with T.no_grad():
        enc = enc or model.encode(x)
        if enc.frames < 1:
            raise ContractError("empty encoder output")
        lm_state = fusion.lm.initial_state(1) if fusion else None
        active = [Hypothesis([], 0.0, model.initial_state(1), lm_state)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            candidates = []
            expanded = []
            for parent, hyp in enumerate(active):
                prev = hyp.tokens[-1] if hyp.tokens else SOS
                logp, state = model.decoder_step(hyp.state, prev, enc)
                scores = logp.data[0].astype(np.float64)
                lm_next = None
                if fusion is not None:
                    lm_logp, lm_next = fusion.lm.step(hyp.lm_state, prev)
                    scores = scores + fusion.beta * lm_logp.data[0].astype(np.float64)
                expanded.append((state, lm_next))
                top = np.argsort(-scores, kind="stable")[:beam_size]
                candidates.extend((hyp.score + float(scores[t]), parent, int(t)) for t in top)
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            parents, active = active, []
            for score, parent, tok in candidates[:beam_size]:
                state, lm_next = expanded[parent]
                hyp = Hypothesis(parents[parent].tokens + [tok], score, state, lm_next, tok == EOS)
                (finished if hyp.finished else active).append(hyp)
            if not active:
                break
        finished.extend(active)
    return max(finished, key=lambda h: h.normalized_score)


def sequence_score(model: Seq2Seq, x, tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``tokens`` (which may end in eos)."""
    with T.no_grad():
        logits = model.forward_asr_batch([x], [[SOS] + list(tokens[:-1])] if tokens else [[SOS]])
        logp = T.log_softmax(logits).data[0].astype(np.float64)
    return float(sum(logp[i, t] for i, t in enumerate(tokens)))


def fused_score(model: Seq2Seq, x, tokens: Sequence[int], fusion: Fusion | None = None) -> float:
    """Step-by-step beam score of a fixed token sequence, with optional fusion."""
    with T.no_grad():
        enc = model.encode(x)
        state = model.initial_state(1)
        lm_state = fusion.lm.initial_state(1) if fusion else None
        total, prev = 0.0, SOS
        for tok in tokens:
            logp, state = model.decoder_step(state, prev, enc)
            total += float(logp.data[0, tok])
            if fusion is not None:
                lm_logp, lm_state = fusion.lm.step(lm_state, prev)
                total += fusion.beta * float(lm_logp.data[0, tok])
            prev = tok
    return total


def decode_corpus(model: Seq2Seq, utterances, beam_size: int = 4, max_len: int = 100,
                  fusion: Fusion | None = None, greedy: bool = False
                  ) -> list[tuple[str, list[int], float]]:
    """Decode ``(utt_id, features)`` pairs; returns ``(utt_id, tokens, score)``."""
    out = []
    for utt_id, x in utterances:
        if greedy:
            hyp = greedy_search(model, x, max_len)
        else:
            hyp = beam_search(model, x, beam_size, max_len, fusion)
        tokens, score = hyp.output, hyp.normalized_score
        out.append((utt_id, tokens, score))
    return out


def token_error_rate(model: Seq2Seq, corpus, max_len: int = 100) -> float:
    """Greedy-decoding token edit distance over reference token count, in percent."""
    errors = total = 0
    for x, ref in corpus:
        errors += edit_distance(list(ref), greedy_decode(model, x, max_len))
        total += len(ref)
    return 100.0 * errors / max(total, 1)


# -- decode-cost benchmark --------------------------------------------------------
def step_cost_profile(model: Seq2Seq, x, max_len: int, rng: np.random.Generator) -> np.ndarray:
    """Seconds spent in ``decoder_step`` at each prefix length 1..max_len.

    The decoder is rolled forward over random tokens first; the timed calls
    then run in shuffled order so clock drift does not correlate with length.
    """
    with T.no_grad():
        enc = model.encode(x)
        tokens = np.concatenate([[SOS], rng.integers(4, model.config.vocab_size, max_len - 1)])
        states = [model.initial_state(1)]
        for tok in tokens[:-1]:
            states.append(model.decoder_step(states[-1], int(tok), enc)[1])
        times = np.zeros(max_len)
        for i in rng.permutation(max_len):
            start = time.perf_counter()
            model.decoder_step(states[i], int(tokens[i]), enc)
            times[i] = time.perf_counter() - start
    return times


@dataclass
class BenchRow:
    arch: str
    sec_per_utt: float
    slope: float
    slope_pvalue: float
    mean_step: float
    beam: int

    def line(self) -> str:
        return f"{self.arch}\t{self.sec_per_utt:.6f}\t{self.slope:.6g}\t{self.beam}"

    @property
    def relative_growth(self) -> float:
        """Fitted change in step cost per prefix position, relative to the mean step cost."""
        return self.slope / self.mean_step


def step_cost_regression(profiles: np.ndarray) -> tuple[float, float, float]:
    """Slope, p-value and mean of the per-position median step cost."""
    medians = np.median(profiles, axis=0)
    fit = stats.linregress(np.arange(1, len(medians) + 1), medians)
    return float(fit.slope), float(fit.pvalue), float(medians.mean())


def benchmark_decode(models: dict[str, Seq2Seq], eval_set: Sequence, beam_size: int = 4,
                     max_len: int = 100, runs: int = 3, seed: int = 0,
                     decode_max_len: int | None = None) -> list[BenchRow]:
    """Median wall-clock seconds per utterance and per-step cost growth per model."""
    rows = []
    with threadpool_limits(limits=1):
        for name, model in models.items():
            rng = np.random.default_rng(seed)
            profiles = np.stack([step_cost_profile(model, x, max_len, rng) for x in eval_set])
            slope, pvalue, mean_step = step_cost_regression(profiles)
            timings = []
            for _ in range(runs):
                start = time.perf_counter()
                for x in eval_set:
                    beam_search(model, x, beam_size, decode_max_len or max_len)
                timings.append((time.perf_counter() - start) / len(eval_set))
            rows.append(BenchRow(name, statistics.median(timings), slope, pvalue, mean_step,
                                 beam_size))
    return rows


def format_report(rows: Sequence[BenchRow]) -> str:
    lines = ["arch\tsec-per-utt\tper-step-slope\tbeam"] + [r.line() for r in rows]
    return "\n".join(lines) + "\n"
