"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (flat ``key = value``) and
``--seed``; explicit flags override config values. ``HSQ_SEED`` supplies
the seed when neither gives one. Exit status: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, inference, metrics, models, training
from .bpe import BpeModel, train_bpe
from .config import load_config, to_bool
from .errors import ConfigError, ContractError, FormatError, TrainingDivergedError, TransferError
from .models import ArchConfig

logger = logging.getLogger("hybridseq")

SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ------------------------------------------------------------------
def _read_lines(path) -> list[str]:
    """Text lines; for ``id<TAB>text`` transcript files only the text is kept."""
    out = []
    for line in data.read_text(path):
        out.append(line.split("\t")[1] if "\t" in line else line)
    return out


def _tokenized(utts, tok: BpeModel):
    return [(u.feats, tok.encode(u.text)) for u in utts]


def _arch_config(args, vocab_size: int, feat_dim: int) -> ArchConfig:
    factory = ArchConfig.small if args.preset == "small" else ArchConfig.full
    overrides = {"vocab_size": vocab_size, "feat_dim": feat_dim}
    for key in ("enc_layers", "dec_layers", "heads", "d_model", "d_ff", "blstm_cells",
                "dec_cells", "att_dim", "dropout", "attention_scale"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.ffn_second_relu:
        overrides["ffn_second_relu"] = True
    return factory(args.arch, **overrides)


def _opt_config(args) -> training.OptimizerConfig:
    return training.OptimizerConfig(lr=args.lr, warmup=args.warmup, batch_size=args.batch_size,
                                    label_smoothing=args.label_smoothing)


def _write_log(path, entries) -> None:
    if path:
        Path(path).write_text("".join(e.line() + "\n" for e in entries), encoding="utf-8")


def _load_bpe_for(model: models.Seq2Seq, path) -> BpeModel:
    tok = BpeModel.load(path)
    expected = model.meta.get("tokenizer")
    if expected and expected != tok.fingerprint():
        raise ConfigError(f"{path} is not the tokenizer this model was trained with")
    if tok.vocab_size != model.config.vocab_size:
        raise ConfigError(f"tokenizer has {tok.vocab_size} units, model expects "
                          f"{model.config.vocab_size}")
    return tok


# -- subcommands ----------------------------------------------------------------
def cmd_gen(args) -> None:
    spec = data.SyntheticTaskSpec(alphabet=args.alphabet, count=args.count, min_len=args.min_len,
                                  max_len=args.max_len, frames_per_token=args.frames_per_token,
                                  feat_dim=args.feat_dim, noise=args.noise, order=args.order,
                                  concentration=args.concentration, seed=args.seed,
                                  prototype_seed=args.prototype_seed, id_prefix=args.id_prefix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpora = data.gen_synthetic(spec)
    for split in SPLITS:
        data.write_corpus(out / split, corpora[split])
    if args.text_count:
        data.write_text(out / "text.txt", data.gen_text(spec, args.text_count))
    print("\t".join(f"{s}={len(corpora[s])}" for s in SPLITS))


def cmd_bpe_train(args) -> None:
    lines = [line for path in args.input for line in _read_lines(path)]
    model = train_bpe(lines, args.vocab_size)
    model.save(args.out)
    print(f"units={model.vocab_size}\treached_target={model.reached_target}")


def cmd_train(args) -> None:
    tok = BpeModel.load(args.bpe)
    corpus = data.read_corpus(args.data)
    if not corpus:
        raise ContractError(f"{args.data}: empty corpus")
    cfg = _arch_config(args, tok.vocab_size, corpus[0].feats.shape[1])
    model = models.build(cfg, args.seed)
    dev = _tokenized(data.read_corpus(args.dev), tok) if args.dev else None
    result = training.train(model, _tokenized(corpus, tok), epochs=args.epochs, steps=args.steps,
                            cfg=_opt_config(args), dev=dev, seed=args.seed)
    models.save(model, args.out, tok.fingerprint())
    _write_log(args.log, result.log)
    print(f"steps={len(result.log)}\tloss={result.log[-1].total:.4f}")


def cmd_transfer(args) -> None:
    source = models.load(args.source)
    tok = BpeModel.load(args.bpe)
    cfg = ArchConfig.from_dict({**source.config.to_dict(), "vocab_size": tok.vocab_size})
    target = models.build(cfg, args.seed)
    target.meta["tokenizer"] = tok.fingerprint()
    out = training.transfer(training.TransferSpec(source, args.selector, tok.vocab_size), target)
    models.save(out, args.out, tok.fingerprint())
    print(f"copied={len(out.meta['transfer']['copied'])}")


def cmd_finetune_text(args) -> None:
    model = models.load(args.model)
    tok = _load_bpe_for(model, args.bpe)
    labeled = _tokenized(data.read_corpus(args.data), tok)
    text = [tok.encode(t) for path in (args.text or []) for t in _read_lines(path)]
    cfg = training.FinetuneConfig(lam=args.lam, b_labeled=args.b_labeled, b_text=args.b_text,
                                  step1=args.step1 if text else 0, step2=args.step2,
                                  lr1=args.lr1, lr2=args.lr2, warmup=args.warmup,
                                  label_smoothing=args.label_smoothing, seed=args.seed)
    model, log = training.finetune_with_text(model, labeled, text, cfg)
    models.save(model, args.out)
    _write_log(args.log, log)
    print(f"steps={len(log)}")


def cmd_lm_train(args) -> None:
    tok = BpeModel.load(args.bpe)
    corpus = [ids for path in args.text for ids in (tok.encode(t) for t in _read_lines(path))]
    cfg = inference.RnnLmConfig(vocab_size=tok.vocab_size, cells=args.cells, epochs=args.epochs,
                                batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    lm, history = inference.train_rnnlm(corpus, cfg, tok.fingerprint())
    lm.save(args.out)
    for epoch, ppl in enumerate(history, 1):
        print(f"epoch {epoch}\tperplexity {ppl:.4f}")


def cmd_decode(args) -> None:
    model = models.load(args.model)
    tok = _load_bpe_for(model, args.bpe)
    fusion = None
    if args.lm:
        lm = inference.RnnLm.load(args.lm)
        if lm.tokenizer and lm.tokenizer != tok.fingerprint():
            raise ConfigError("language model was trained with a different tokenizer")
        fusion = inference.Fusion(lm, args.beta)
    feats = data.read_features(Path(args.data).with_suffix(".feats"))
    if args.limit:
        feats = feats[:args.limit]
    decoded = inference.decode_corpus(model, feats, args.beam, args.max_len, fusion,
                                      greedy=args.greedy)
    text = "".join(f"{utt_id}\t{' '.join(tok.decode(tokens).split())}\t{score:.6f}\n"
                   for utt_id, tokens, score in decoded)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_bench(args) -> None:
    feats = [x for _, x in data.read_features(Path(args.data).with_suffix(".feats"))][:args.count]
    if not feats:
        raise ContractError("benchmark needs at least one utterance")
    if args.models:
        loaded = {}
        for path in args.models:
            m = models.load(path)
            loaded[m.config.arch] = m
    else:
        loaded = {arch: models.build(_arch_config(
            argparse.Namespace(**{**vars(args), "arch": arch}), args.vocab_size, feats[0].shape[1]),
            args.seed) for arch in args.archs.split(",")}
    rows = inference.benchmark_decode(loaded, feats, args.beam, args.max_len, args.runs,
                                      args.seed, args.decode_max_len)
    report = inference.format_report(rows)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)


def cmd_score(args) -> None:
    refs = data.read_transcripts(args.ref)
    hyps = data.read_transcripts(args.hyp)
    print(f"WER {metrics.wer(hyps, refs):.2f}")


# -- parser ---------------------------------------------------------------------
def _model_flags(p) -> None:
    p.add_argument("--arch", choices=models.ARCHS, default="A3")
    p.add_argument("--preset", choices=("small", "full"), default="small")
    for flag in ("--enc-layers", "--dec-layers", "--heads", "--d-model", "--d-ff",
                 "--blstm-cells", "--dec-cells", "--att-dim"):
        p.add_argument(flag, type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--attention-scale", choices=("sqrt-dk", "dk"))
    p.add_argument("--ffn-second-relu", action="store_true")


def _opt_flags(p, lr=2e-3, steps=300) -> None:
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--label-smoothing", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridseq", description="Toy hybrid encoder-decoder speech recognizer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int, help="random seed (default: $HSQ_SEED or 0)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "generate a synthetic paired corpus and text")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alphabet", default="abcdefghijklmnop")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--frames-per-token", type=int, default=4)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--concentration", type=float, default=0.3)
    p.add_argument("--prototype-seed", type=int)
    p.add_argument("--id-prefix", default="utt")
    p.add_argument("--text-count", type=int, default=1000)

    p = command("bpe-train", cmd_bpe_train, "learn a BPE vocabulary")
    p.add_argument("--input", nargs="+", required=True, help="text or id<TAB>text files")
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a model from scratch")
    p.add_argument("--data", required=True, help="corpus prefix (PREFIX.feats, PREFIX.txt)")
    p.add_argument("--dev", help="dev corpus prefix")
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _model_flags(p)
    _opt_flags(p)

    p = command("transfer", cmd_transfer, "transplant source parameters into a new model")
    p.add_argument("--source", required=True)
    p.add_argument("--bpe", required=True, help="target-language tokenizer")
    p.add_argument("--selector", default="encoder",
                   help="encoder, encoder+decoder or bottom-L")
    p.add_argument("--out", required=True)

    p = command("finetune-text", cmd_finetune_text, "two-step text-boosted fine-tuning")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--text", nargs="*")
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--lam", type=float, default=0.7)
    p.add_argument("--b-labeled", type=int, default=30)
    p.add_argument("--b-text", type=int, default=90)
    p.add_argument("--step1", type=int, default=300)
    p.add_argument("--step2", type=int, default=200)
    p.add_argument("--lr1", type=float, default=1e-3)
    p.add_argument("--lr2", type=float, default=5e-4)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--label-smoothing", type=float, default=0.1)

    p = command("lm-train", cmd_lm_train, "train the external RNN language model")
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", type=int, default=128)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)

    p = command("decode", cmd_decode, "decode a feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus prefix or .feats file")
    p.add_argument("--bpe", required=True)
    p.add_argument("--out")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--lm")
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--limit", type=int, default=0, help="decode only the first N utterances")

    p = command("bench", cmd_bench, "decode-speed benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--models", nargs="*", help="checkpoints; default builds fresh models")
    p.add_argument("--archs", default="A1,A2,A3")
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--decode-max-len", type=int)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out")
    _model_flags(p)

    p = command("score", cmd_score, "word error rate of a hypothesis file")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    return parser


def _prescan(argv) -> tuple[str | None, str | None]:
    """Subcommand and ``--config`` value, found before the full parse."""
    command = next((a for a in argv if not a.startswith("-")), None)
    config = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif arg.startswith("--config="):
            config = arg.split("=", 1)[1]
    return command, config


def _apply_config(parser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _prescan(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if config and command in subparsers:
        values = load_config(config)
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            action = actions.get(key)
            if action is None or key in ("config", "help", "func"):
                raise UsageError(f"{config}: unknown key {key!r} for {command}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = to_bool(value)
            elif action.nargs in ("+", "*"):
                defaults[key] = value.split()
            else:
                try:
                    defaults[key] = action.type(value) if action.type else value
                except ValueError:
                    raise UsageError(f"{config}: bad value {value!r} for {key}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{config}: {key} must be one of {sorted(action.choices)}")
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.seed is None:
        env = os.environ.get("HSQ_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            print(f"error: HSQ_SEED must be an integer, got {env!r}", file=sys.stderr)
            return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        args.func(args)
    except (ConfigError, ContractError, FormatError, TransferError, TrainingDivergedError,
            OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
