"""End-to-end experiment recipes on the synthetic tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import inference, metrics
from .bpe import BpeModel, train_bpe
from .data import SyntheticTaskSpec, Utterance, gen_synthetic, gen_text
from .models import ArchConfig, Seq2Seq, build
from .training import (FinetuneConfig, OptimizerConfig, TransferSpec, finetune_with_text,
                       train, transfer)

logger = logging.getLogger(__name__)


def tokenize(utts: Sequence[Utterance], tokenizer: BpeModel) -> list[tuple[np.ndarray, list[int]]]:
    return [(u.feats, tokenizer.encode(u.text)) for u in utts]


def corpus_wer(model: Seq2Seq, utts: Sequence[Utterance], tokenizer: BpeModel,
               beam: int = 4, max_len: int = 60,
               fusion: inference.Fusion | None = None) -> float:
    decoded = inference.decode_corpus(model, [(u.id, u.feats) for u in utts], beam, max_len,
                                      fusion, greedy=beam == 1)
    hyps = {utt_id: tokenizer.decode(tokens) for utt_id, tokens, _ in decoded}
    return metrics.wer(hyps, {u.id: u.text for u in utts})


@dataclass
class TransferTask:
    """Source language with plenty of paired data; target with little data plus text."""

    source_alphabet: str = "abcdefghijklmnop"
    target_alphabet: str = "ABCDEFGHIJKLMNOP"
    source_utts: int = 2000
    target_utts: int = 100
    test_utts: int = 200
    text_sentences: int = 5000
    noise: float = 0.4
    order: int = 2
    concentration: float = 0.1
    feat_dim: int = 16
    frames_per_token: int = 4
    min_len: int = 8
    max_len: int = 16
    vocab_size: int = 21
    arch: str = "A3"
    source_steps: int = 3000
    target_steps: int = 900
    step1: int = 600
    step2: int = 900
    lam: float = 0.2
    b_labeled: int = 30
    b_text: int = 90
    lr: float = 2e-3
    finetune_lr: float = 1e-3
    selector: str = "encoder+decoder"
    beam: int = 4
    decode_max_len: int = 60
    lm_cells: int = 128
    lm_epochs: int = 4
    beta: float = 0.3
    with_fusion: bool = True

    def spec(self, alphabet: str, count: int, seed: int, prefix: str) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(alphabet=alphabet, count=count, min_len=self.min_len,
                                 max_len=self.max_len, frames_per_token=self.frames_per_token,
                                 feat_dim=self.feat_dim, noise=self.noise, order=self.order,
                                 concentration=self.concentration, seed=seed,
                                 prototype_seed=1000 + seed, id_prefix=prefix)


def _first_train(spec: SyntheticTaskSpec, n_train: int, n_test: int = 0):
    """Generate until ``n_train`` training and ``n_test`` test utterances exist."""
    count = max(spec.count, int(1.3 * (n_train / 0.8)), int(1.3 * n_test / 0.1))
    while True:
        # ids are stable across counts, so a larger corpus extends the smaller one
        corpora = gen_synthetic(replace(spec, count=count))
        if len(corpora["train"]) >= n_train and len(corpora["test"]) >= n_test:
            return corpora["train"][:n_train], corpora["dev"], corpora["test"][:n_test]
        count = int(count * 1.25) + 1


@dataclass
class TransferResult:
    wer: dict[str, float] = field(default_factory=dict)
    dev_token_error: dict[str, float] = field(default_factory=dict)


def run_transfer_experiment(task: TransferTask, seed: int) -> TransferResult:
    """Scratch vs. transferred vs. transferred + text boosting on one seed."""
    src_spec = task.spec(task.source_alphabet, task.source_utts, seed, "src")
    tgt_spec = task.spec(task.target_alphabet, task.target_utts, seed + 100, "tgt")
    # both languages share the acoustic inventory
    tgt_spec = replace(tgt_spec, prototype_seed=src_spec.prototype_seed)

    src_train, src_dev, _ = _first_train(src_spec, task.source_utts)
    tgt_train, tgt_dev, tgt_test = _first_train(tgt_spec, task.target_utts, task.test_utts)
    text = gen_text(tgt_spec, task.text_sentences)

    src_tok = train_bpe([u.text for u in src_train], task.vocab_size)
    tgt_tok = train_bpe([u.text for u in tgt_train] + text, task.vocab_size)
    src_corpus = tokenize(src_train, src_tok)
    tgt_corpus = tokenize(tgt_train, tgt_tok)
    tgt_dev_corpus = tokenize(tgt_dev[:100], tgt_tok)
    text_ids = [tgt_tok.encode(t) for t in text]

    def config(tok: BpeModel) -> ArchConfig:
        return ArchConfig.small(task.arch, vocab_size=tok.vocab_size, feat_dim=task.feat_dim)

    opt = OptimizerConfig(lr=task.lr, warmup=100, batch_size=32)
    result = TransferResult()

    source = build(config(src_tok), seed)
    train(source, src_corpus, steps=task.source_steps, cfg=opt, seed=seed)

    scratch = build(config(tgt_tok), seed + 1)
    train(scratch, tgt_corpus, steps=task.target_steps, cfg=replace(opt, batch_size=task.b_labeled),
          seed=seed)
    models = {"scratch": scratch}

    base = build(config(tgt_tok), seed + 1)
    spec = TransferSpec(source, task.selector, tgt_tok.vocab_size)
    plain = transfer(spec, base)
    # the plain run is exactly Step 2 of the boosted run, without Step 1
    ft = FinetuneConfig(lam=task.lam, b_labeled=task.b_labeled, b_text=task.b_text, step1=0,
                        step2=task.step2, lr1=task.finetune_lr, lr2=task.finetune_lr, seed=seed)
    finetune_with_text(plain, tgt_corpus, text_ids, ft)
    models["transferred"] = plain

    boosted = transfer(spec, base)
    finetune_with_text(boosted, tgt_corpus, text_ids,
                       replace(ft, step1=task.step1))
    models["boosted"] = boosted

    for name, model in models.items():
        result.wer[name] = corpus_wer(model, tgt_test, tgt_tok, task.beam, task.decode_max_len)
        result.dev_token_error[name] = inference.token_error_rate(model, tgt_dev_corpus,
                                                                  task.decode_max_len)
    if task.with_fusion:
        lm_corpus = [ids for _, ids in tgt_corpus] + text_ids
        lm, _ = inference.train_rnnlm(
            lm_corpus, inference.RnnLmConfig(vocab_size=tgt_tok.vocab_size, cells=task.lm_cells,
                                             epochs=task.lm_epochs, seed=seed))
        fusion = inference.Fusion(lm, task.beta)
        for name in ("transferred", "boosted"):
            result.wer[name + "+lm"] = corpus_wer(models[name], tgt_test, tgt_tok, task.beam,
                                                  task.decode_max_len, fusion)
    logger.info("seed %d: %s", seed, result.wer)
    return result
