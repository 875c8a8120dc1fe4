"""Corpus loading, vocabulary building, splitting and cipher-pair generation.

The synthetic cipher pair is the desk-scale evaluation task: sentences are
drawn from a bigram language model over one surface vocabulary, and the
second language is a token-wise bijective enciphering with a disjoint
surface vocabulary. Training corpora are produced by randomly splitting a
parallel pool so that no sentence pair contributes to both sides, while
held-out validation/test sets keep exact references.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CipherSpec
from .errors import ConfigurationError, DataError, UsageError
from .vocab import Vocabulary, tokenize

RESERVED_COUNT = 3  # pad/eos/unk; per-language bos tokens come on top


@dataclass
class RawCorpus:
    """Whitespace-normalized sentences of a single language."""

    sentences: list[str]
    lang: str

    def __len__(self) -> int:
        return len(self.sentences)


def load_corpus(path: str | Path, lang: str) -> RawCorpus:
    """Read one sentence per line; trims and collapses whitespace.

    CRLF and LF files load identically; empty lines are dropped. Invalid
    UTF-8 is reported with its line number.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    sentences = []
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid UTF-8 ({exc})") from exc
        text = " ".join(text.split())
        if text:
            sentences.append(text)
    return RawCorpus(sentences, lang)


def save_corpus(corpus: RawCorpus, path: str | Path) -> None:
    Path(path).write_text("".join(s + "\n" for s in corpus.sentences), encoding="utf-8")


def build_vocab(corpora: list[RawCorpus], max_size: int | None = None,
                min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked joint vocabulary; ties break lexicographically."""
    if not corpora or all(len(c) == 0 for c in corpora):
        raise UsageError("cannot build a vocabulary from empty corpora")
    langs = tuple(dict.fromkeys(c.lang for c in corpora))
    counts: Counter[str] = Counter()
    members: dict[str, set[str]] = {l: set() for l in langs}
    for corpus in corpora:
        for sentence in corpus.sentences:
            toks = tokenize(sentence)
            counts.update(toks)
            members[corpus.lang].update(toks)
    reserved = RESERVED_COUNT + len(langs)
    if max_size is not None and max_size < reserved:
        raise ConfigurationError(
            f"max_size={max_size} cannot fit the {reserved} reserved tokens"
        )
    ranked = sorted((tok for tok, n in counts.items() if n >= min_freq),
                    key=lambda tok: (-counts[tok], tok))
    if max_size is not None:
        ranked = ranked[: max_size - reserved]
    kept = set(ranked)
    lang_members = {l: sorted(toks & kept) for l, toks in members.items()}
    return Vocabulary(ranked, langs, lang_members)


@dataclass
class MonolingualSplit:
    """Disjoint halves of a parallel pool, plus the index manifest."""

    corpus_l1: RawCorpus
    corpus_l2: RawCorpus
    indices_l1: list[int]
    indices_l2: list[int]


def monolingual_split(pairs: list[tuple[str, str]], seed: int,
                      langs: tuple[str, str] = ("l1", "l2")) -> MonolingualSplit:
    """Partition pair indices in half: first half keeps the l1 side only,
    second half the l2 side, so no pair leaks into both corpora."""
    if len(pairs) < 2:
        raise UsageError("monolingual_split needs at least 2 parallel pairs")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pairs))
    cut = (len(pairs) + 1) // 2
    idx_l1 = sorted(int(i) for i in perm[:cut])
    idx_l2 = sorted(int(i) for i in perm[cut:])
    corpus_l1 = RawCorpus([pairs[i][0] for i in idx_l1], langs[0])
    corpus_l2 = RawCorpus([pairs[i][1] for i in idx_l2], langs[1])
    return MonolingualSplit(corpus_l1, corpus_l2, idx_l1, idx_l2)


# ---------------------------------------------------------------------------
# synthetic cipher pair


@dataclass
class CipherData:
    """Everything gen-cipher produces: corpora, held-out pairs, manifest."""

    train_l1: RawCorpus
    train_l2: RawCorpus
    valid_pairs: list[tuple[str, str]]
    test_pairs: list[tuple[str, str]]
    mapping: dict[str, str]
    split_indices: tuple[list[int], list[int]]


def _l1_surface(i: int) -> str:
    return f"w{i:02d}"


def _l2_surface(i: int) -> str:
    return f"v{i:02d}"


def _bigram_model(spec: CipherSpec, rng: np.random.Generator):
    """A peaked bigram LM with a Zipf-like marginal over l1 tokens."""
    v = spec.vocab_size
    zipf = 1.0 / np.arange(1, v + 1)
    noise = rng.normal(0.0, 1.5, size=(v, v))
    trans = zipf[None, :] * np.exp(noise)
    trans /= trans.sum(axis=1, keepdims=True)
    start = zipf * np.exp(rng.normal(0.0, 1.5, size=v))
    start /= start.sum()
    return start, trans


def _sample_sentences(n: int, spec: CipherSpec, start: np.ndarray,
                      trans: np.ndarray, rng: np.random.Generator,
                      allowed: set[int] | None = None) -> list[list[int]]:
    """Draw n sentences from the bigram model via inverse-CDF sampling.

    With ``allowed`` set, sentences containing other tokens are rejected
    and resampled, which keeps held-out data inside the training-attested
    vocabulary.
    """
    cum_start = np.cumsum(start)
    cum_trans = np.cumsum(trans, axis=1)
    out: list[list[int]] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise DataError("cipher sampling rejected too many sentences; "
                            "training coverage is degenerate")
        length = int(rng.integers(spec.sentence_min, spec.sentence_max + 1))
        u = rng.random(length)
        toks = [int(np.searchsorted(cum_start, u[0], side="right"))]
        for j in range(1, length):
            toks.append(int(np.searchsorted(cum_trans[toks[-1]], u[j], side="right")))
        if allowed is not None and not set(toks) <= allowed:
            continue
        out.append(toks)
    return out


def generate_cipher_pair(spec: CipherSpec) -> CipherData:
    """Build the cipher-pair task described by ``spec``.

    The token map is a seeded random bijection between two disjoint
    surface vocabularies. Training text comes from a parallel pool of
    size 2*train_size put through :func:`monolingual_split`; validation
    and test pairs are freshly sampled exact translations.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(spec.vocab_size)
    mapping = {_l1_surface(i): _l2_surface(int(perm[i])) for i in range(spec.vocab_size)}

    start, trans = _bigram_model(spec, rng)

    def render(toks: list[int]) -> tuple[str, str]:
        src = " ".join(_l1_surface(t) for t in toks)
        tgt = " ".join(mapping[_l1_surface(t)] for t in toks)
        return src, tgt

    pool_tokens = _sample_sentences(2 * spec.train_size, spec, start, trans, rng)
    pool = [render(t) for t in pool_tokens]
    split = monolingual_split(pool, seed=spec.seed + 1, langs=spec.langs)

    # Restrict held-out data to tokens attested in both training corpora so
    # every reference stays reachable for a model trained on them.
    idx_l1, idx_l2 = set(split.indices_l1), set(split.indices_l2)
    seen_l1 = {t for i, toks in enumerate(pool_tokens) if i in idx_l1 for t in toks}
    seen_l2 = {t for i, toks in enumerate(pool_tokens) if i in idx_l2 for t in toks}
    allowed = seen_l1 & seen_l2
    valid = [render(t) for t in
             _sample_sentences(spec.valid_size, spec, start, trans, rng, allowed)]
    test = [render(t) for t in
            _sample_sentences(spec.test_size, spec, start, trans, rng, allowed)]
    return CipherData(split.corpus_l1, split.corpus_l2, valid, test, mapping,
                      (split.indices_l1, split.indices_l2))


# ---------------------------------------------------------------------------
# batching


def bucket_batches(lengths: list[int], batch_size: int, seed: int,
                   epoch: int = 0) -> list[list[int]]:
    """Length-sorted index batches, order shuffled per (seed, epoch)."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be positive")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng = np.random.default_rng([seed, epoch])
    rng.shuffle(batches)
    return batches
