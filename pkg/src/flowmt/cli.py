"""Command-line entry points: gen-cipher, train, translate, evaluate, inspect-flow.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .corpus import generate_cipher_pair, load_corpus, save_corpus, RawCorpus, build_vocab
from .density import density_report
from .errors import DataError, NumericError, UsageError
from .metrics import bleu_from_strings
from .model import TranslationModel
from .trainer import train as run_training
from .vocab import encode_sentence


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad invocations through our error taxonomy."""

    def error(self, message: str):  # noqa: D401 - argparse API
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="flowmt",
                     description="Unsupervised translation with per-language "
                                 "normalizing flows over sentence latents.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-cipher", help="generate the synthetic cipher language pair")
    p.add_argument("--spec", required=True, help="config file with a cipher section")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model on two monolingual corpora")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory holding train/valid files")
    p.add_argument("--out", required=True, help="output directory for checkpoint + metrics")

    p = sub.add_parser("translate", help="translate a file line by line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--from", dest="src_lang", required=True)
    p.add_argument("--to", dest="tgt_lang", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score translations against references")
    p.add_argument("--ckpt", help="checkpoint to translate with (required "
                                  "unless --hyp is given)")
    p.add_argument("--test", required=True,
                   help="TSV file of source<TAB>reference, or a prefix with "
                        ".<lang> suffixed parallel files")
    p.add_argument("--direction", required=True, help="e.g. l1-l2")
    p.add_argument("--hyp", help="score this pre-translated hypothesis file "
                                 "instead of running the model")
    p.add_argument("--smooth", action="store_true",
                   help="add-one smoothing for higher-order n-grams")

    p = sub.add_parser("inspect-flow", help="latent density diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_cipher(args) -> int:
    cfg = load_config(args.spec)
    spec = cfg.cipher
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_cipher_pair(spec)
    l1, l2 = spec.langs
    save_corpus(data.train_l1, out / f"train.{l1}")
    save_corpus(data.train_l2, out / f"train.{l2}")
    save_corpus(RawCorpus([p[0] for p in data.valid_pairs], l1), out / f"valid.{l1}")
    save_corpus(RawCorpus([p[1] for p in data.valid_pairs], l2), out / f"valid.{l2}")
    save_corpus(RawCorpus([p[0] for p in data.test_pairs], l1), out / f"test.{l1}")
    save_corpus(RawCorpus([p[1] for p in data.test_pairs], l2), out / f"test.{l2}")
    manifest = {
        "spec": {
            "vocab_size": spec.vocab_size,
            "sentence_min": spec.sentence_min,
            "sentence_max": spec.sentence_max,
            "train_size": spec.train_size,
            "valid_size": spec.valid_size,
            "test_size": spec.test_size,
            "seed": spec.seed,
            "langs": list(spec.langs),
        },
        "mapping": data.mapping,
        "split_indices": {l1: data.split_indices[0], l2: data.split_indices[1]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2)
                                       + "\n", encoding="utf-8")
    print(f"wrote cipher pair ({spec.train_size} sentences/language, "
          f"V={spec.vocab_size}) to {out}")
    return 0


def _load_pair(data_dir: Path, stem: str, langs: tuple[str, str]) -> list[tuple[str, str]]:
    a = load_corpus(data_dir / f"{stem}.{langs[0]}", langs[0])
    b = load_corpus(data_dir / f"{stem}.{langs[1]}", langs[1])
    if len(a) != len(b):
        raise DataError(f"{stem} files disagree in length: {len(a)} vs {len(b)}")
    return list(zip(a.sentences, b.sentences))


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    l1, l2 = cfg.cipher.langs
    train_l1 = load_corpus(data_dir / f"train.{l1}", l1)
    train_l2 = load_corpus(data_dir / f"train.{l2}", l2)
    valid_pairs = _load_pair(data_dir, "valid", (l1, l2))

    torch.manual_seed(cfg.training.seed)
    vocab = build_vocab([train_l1, train_l2])
    model = TranslationModel(vocab, cfg.model, cfg.flows)

    log_path = out / "metrics.jsonl"
    result = run_training(model, train_l1, train_l2, valid_pairs, cfg,
                          checkpoint_dir=out, log_path=log_path)
    save_checkpoint(out / "best.ckpt", result.model, cfg, len(result.metrics))
    if result.best_epoch >= 0:
        print(f"best epoch {result.best_epoch}: "
              f"mean validation BLEU {result.best_bleu:.2f}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    print(f"metrics: {log_path}")
    return 0


def _cmd_translate(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.model
    src_path = Path(args.src)
    try:
        lines = src_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {src_path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{src_path}: invalid UTF-8 ({exc})") from exc

    outputs: list[str] = []
    batch: list[int] = []
    seqs = []
    for line in lines:
        text = " ".join(line.split())
        if not text:
            outputs.append("")
            continue
        batch.append(len(outputs))
        outputs.append("")  # placeholder, filled after the batch runs
        seqs.append(encode_sentence(model.vocab, text, args.src_lang,
                                    model.cfg.max_len))
        if len(seqs) == 64:
            for slot, res in zip(batch, model.translate_batch(seqs, args.tgt_lang)):
                outputs[slot] = res.surface(model.vocab)
            batch, seqs = [], []
    if seqs:
        for slot, res in zip(batch, model.translate_batch(seqs, args.tgt_lang)):
            outputs[slot] = res.surface(model.vocab)
    Path(args.out).write_text("".join(o + "\n" for o in outputs), encoding="utf-8")
    print(f"translated {sum(1 for l in lines if l.strip())} sentences "
          f"{args.src_lang}->{args.tgt_lang} into {args.out}")
    return 0


def _parse_direction(direction: str, langs: tuple[str, ...]) -> tuple[str, str]:
    parts = direction.split("-")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"direction must look like 'l1-l2', got {direction!r}")
    src, tgt = parts
    for lang in (src, tgt):
        if lang not in langs:
            raise UsageError(f"direction language {lang!r} not in model languages {langs}")
    if src == tgt:
        raise UsageError("direction must name two different languages")
    return src, tgt


def _read_test_pairs(test_arg: str, src: str, tgt: str) -> list[tuple[str, str]]:
    path = Path(test_arg)
    if path.is_file():
        pairs = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                      start=1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected source<TAB>reference")
            s, r = line.split("\t", 1)
            pairs.append((" ".join(s.split()), " ".join(r.split())))
        if not pairs:
            raise DataError(f"{path}: no test pairs found")
        return pairs
    src_file = Path(f"{test_arg}.{src}")
    tgt_file = Path(f"{test_arg}.{tgt}")
    if src_file.is_file() and tgt_file.is_file():
        a = load_corpus(src_file, src)
        b = load_corpus(tgt_file, tgt)
        if len(a) != len(b):
            raise DataError(f"{src_file} and {tgt_file} disagree in length")
        return list(zip(a.sentences, b.sentences))
    raise DataError(f"test data not found: neither {path} nor "
                    f"{src_file}/{tgt_file} exist")


def _cmd_evaluate(args) -> int:
    if args.hyp is None and args.ckpt is None:
        raise UsageError("evaluate needs --ckpt (to translate) or --hyp "
                         "(to score an existing file)")
    if args.hyp is not None:
        parts = args.direction.split("-")
        if len(parts) != 2 or not all(parts):
            raise UsageError(f"direction must look like 'l1-l2', got {args.direction!r}")
        src, tgt = parts
        pairs = _read_test_pairs(args.test, src, tgt)
        hyp_corpus = load_corpus(args.hyp, tgt)
        if len(hyp_corpus) != len(pairs):
            raise DataError(f"{args.hyp} has {len(hyp_corpus)} sentences but the "
                            f"test set has {len(pairs)}")
        hyps = hyp_corpus.sentences
        refs = [r for _, r in pairs]
    else:
        bundle = load_checkpoint(args.ckpt)
        model = bundle.model
        src, tgt = _parse_direction(args.direction, model.vocab.langs)
        pairs = _read_test_pairs(args.test, src, tgt)
        hyps = []
        refs = [r for _, r in pairs]
        for i in range(0, len(pairs), 64):
            chunk = [encode_sentence(model.vocab, s, src, model.cfg.max_len)
                     for s, _ in pairs[i:i + 64]]
            out = model.translate_batch(chunk, tgt)
            hyps.extend(o.surface(model.vocab) for o in out)
    report = bleu_from_strings(hyps, refs, smooth=args.smooth)
    print(f"direction {src}-{tgt} on {len(pairs)} sentences")
    print(report.format())
    return 0


def _cmd_inspect_flow(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.model
    data_dir = Path(args.data)
    for lang in model.vocab.langs:
        corpus = load_corpus(data_dir / f"train.{lang}", lang)
        print(density_report(model, corpus).format())
    return 0


_COMMANDS = {
    "gen-cipher": _cmd_gen_cipher,
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": _cmd_evaluate,
    "inspect-flow": _cmd_inspect_flow,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:  # includes ConfigurationError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
