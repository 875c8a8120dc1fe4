"""Joint vocabulary with per-language bos tokens, and token sequences.

One id space covers both languages. Ids 0..2 are pad/eos/unk, followed by
one bos token per language (sentences are language-tagged through their
bos), followed by corpus tokens in frequency order with lexicographic
tie-breaking.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, DataError, UsageError

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization; inverse of :func:`detokenize` on normalized text."""
    return text.split()


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def _bos_token(lang: str) -> str:
    return f"<bos:{lang}>"


class Vocabulary:
    """Token/id maps with reserved specials and per-language sub-vocabularies."""

    def __init__(self, tokens: list[str], langs: tuple[str, ...],
                 lang_members: dict[str, list[str]] | None = None):
        self.langs = tuple(langs)
        self.specials = [PAD, EOS, UNK] + [_bos_token(l) for l in self.langs]
        self.itos: list[str] = list(self.specials)
        seen = set(self.itos)
        for tok in tokens:
            if tok in seen:
                raise ConfigurationError(f"duplicate or reserved token {tok!r} in vocabulary")
            seen.add(tok)
            self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.eos_id = self.stoi[EOS]
        self.unk_id = self.stoi[UNK]
        self._bos_ids = {l: self.stoi[_bos_token(l)] for l in self.langs}
        # ids of ordinary tokens attested in each language's training data
        self._lang_ids: dict[str, set[int]] = {l: set() for l in self.langs}
        if lang_members:
            for lang, toks in lang_members.items():
                if lang not in self._lang_ids:
                    raise ConfigurationError(f"unknown language {lang!r} in vocabulary")
                self._lang_ids[lang] = {self.stoi[t] for t in toks if t in self.stoi}

    def __len__(self) -> int:
        return len(self.itos)

    def bos_id(self, lang: str) -> int:
        try:
            return self._bos_ids[lang]
        except KeyError:
            raise UsageError(f"unknown language tag {lang!r}; have {self.langs}") from None

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise UsageError(f"token id {idx} out of range for vocabulary of {len(self.itos)}")
        return self.itos[idx]

    def lang_token_ids(self, lang: str) -> set[int]:
        if lang not in self._lang_ids:
            raise UsageError(f"unknown language tag {lang!r}; have {self.langs}")
        return set(self._lang_ids[lang])

    # -- serialization (used by checkpoints) --------------------------------

    def state(self) -> dict:
        return {
            "langs": list(self.langs),
            "tokens": self.itos[len(self.specials):],
            "lang_members": {l: sorted(self.itos[i] for i in ids)
                             for l, ids in self._lang_ids.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "Vocabulary":
        try:
            return cls(list(state["tokens"]), tuple(state["langs"]),
                       {l: list(v) for l, v in state.get("lang_members", {}).items()})
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary state: {exc}") from exc


@dataclass(frozen=True)
class TokenSequence:
    """Ids framed as bos .. eos, tagged with the sentence's language."""

    ids: tuple[int, ...]
    lang: str

    def interior(self) -> tuple[int, ...]:
        """The token ids between bos and eos."""
        return self.ids[1:-1]

    def validate(self, vocab: Vocabulary, max_len: int | None = None) -> "TokenSequence":
        if len(self.ids) < 2:
            raise UsageError("token sequence must contain at least bos and eos")
        if self.ids[0] != vocab.bos_id(self.lang):
            raise UsageError(f"sequence does not start with the {self.lang} bos token")
        if self.ids[-1] != vocab.eos_id:
            raise UsageError("sequence does not end with eos")
        if vocab.pad_id in self.ids:
            raise UsageError("pad occurs inside a token sequence")
        if max_len is not None and len(self.ids) > max_len:
            raise UsageError(f"sequence of length {len(self.ids)} exceeds max_len={max_len}")
        return self

    def surface(self, vocab: Vocabulary) -> str:
        return detokenize([vocab.token(i) for i in self.interior()])


def encode_sentence(vocab: Vocabulary, text: str, lang: str,
                    max_len: int | None = None) -> TokenSequence:
    """Tokenize and frame one sentence; unknown surface tokens map to unk."""
    ids = [vocab.bos_id(lang)] + [vocab.lookup(t) for t in tokenize(text)] + [vocab.eos_id]
    if max_len is not None and len(ids) > max_len:
        raise DataError(f"sentence of {len(ids)} tokens exceeds max_len={max_len}")
    return TokenSequence(tuple(ids), lang)
