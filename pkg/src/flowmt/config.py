"""Validated configuration records and the YAML config file loader.

A config file is a YAML document with up to five sections: ``model``,
``flows``, ``noise``, ``training`` and ``cipher``. Every field has a
default, so an empty document is a valid config. Unknown sections or keys
are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError, DataError


@dataclass
class TransformerConfig:
    """Encoder/decoder dimensions and behaviour flags."""

    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 512
    dropout: float = 0.2
    max_len: int = 64
    shared_decoder: bool = True
    # When true, greedy decoding only scores tokens of the target language.
    restrict_output_to_lang: bool = False
    # When false, the decoder is started from the neutral eos symbol
    # instead of the target language's bos, removing the decoder-side
    # language signal: with the adapter attached the transported latent
    # is then the only way to select the output language, and without it
    # the model degenerates to copying the input's language.
    lang_conditioned_bos: bool = True
    # Train-time probability of blanking a decoder input token (the
    # shifted previous-token feed, not the prediction target). Blanked
    # positions keep their positional encoding but lose the token
    # identity, which weakens the decoder's language-model shortcut and
    # forces it onto the encoder memory and the fused latent.
    decoder_word_dropout: float = 0.0

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0 or self.d_ff <= 0:
            raise ConfigurationError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.decoder_word_dropout < 1.0:
            raise ConfigurationError(
                f"decoder_word_dropout must be in [0, 1), got {self.decoder_word_dropout}"
            )
        if self.max_len < 3:
            raise ConfigurationError("max_len must allow at least bos + token + eos")


@dataclass
class FlowConfig:
    """Per-language flow stacks attached to the translation model.

    ``kind`` selects the layer family: ``realnvp`` (affine couplings),
    ``glow`` (actnorm + invertible linear + coupling) or ``none``, which
    disables the whole latent pathway and yields the plain attention
    baseline.
    """

    kind: str = "realnvp"
    num_layers: int = 3
    latent_dim: int = 100
    hidden: int = 64
    scale_bound: float = 2.0
    dropout: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("realnvp", "glow", "none"):
            raise ConfigurationError(f"unknown flow kind {self.kind!r}")
        if self.num_layers < 1:
            raise ConfigurationError("flows need at least one layer")
        if self.latent_dim < 2 or self.latent_dim % 2 != 0:
            raise ConfigurationError(
                f"latent_dim must be even and >= 2 (couplings split the vector in half), "
                f"got {self.latent_dim}"
            )
        if self.hidden < 1:
            raise ConfigurationError("coupling net hidden width must be positive")
        if self.scale_bound <= 0:
            raise ConfigurationError("scale_bound must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"flow dropout must be in [0, 1), got {self.dropout}")


@dataclass
class NoiseConfig:
    """Word drop and bounded local shuffle applied before auto-encoding."""

    word_drop: float = 0.1
    shuffle_window: int = 3

    def validate(self) -> None:
        if not 0.0 <= self.word_drop <= 1.0:
            raise ConfigurationError(f"word_drop must be in [0, 1], got {self.word_drop}")
        if self.shuffle_window < 0:
            raise ConfigurationError("shuffle_window must be >= 0")


@dataclass
class TrainConfig:
    """Optimization schedule and loss weighting."""

    mle_weight: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 15
    warmup_epochs: int = 3
    # When set, overrides warmup_epochs: back-translation starts once this
    # many optimizer steps have run. Useful for corpora with few batches.
    warmup_steps: Optional[int] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 5.0
    seed: int = 1234
    # Detach pooled latents before the flow likelihood, so the encoder
    # receives no gradient from that term (ablation switch).
    mle_stop_grad: bool = False
    bt_enabled: bool = True
    # Cap on validation sentences scored per direction each epoch.
    valid_limit: Optional[int] = None

    def validate(self) -> None:
        if self.mle_weight < 0:
            raise ConfigurationError("mle_weight must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs}]"
            )
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")
        if self.valid_limit is not None and self.valid_limit < 1:
            raise ConfigurationError("valid_limit must be >= 1")


@dataclass
class CipherSpec:
    """Synthetic language pair: a bigram model over l1 plus a seeded token bijection."""

    vocab_size: int = 50
    sentence_min: int = 5
    sentence_max: int = 12
    train_size: int = 2000
    valid_size: int = 200
    test_size: int = 200
    seed: int = 20240
    langs: tuple[str, str] = ("l1", "l2")

    def validate(self) -> None:
        if self.vocab_size < 10:
            raise ConfigurationError(
                f"cipher vocab_size must be >= 10, got {self.vocab_size} (degenerate task)"
            )
        if not 1 <= self.sentence_min <= self.sentence_max:
            raise ConfigurationError("need 1 <= sentence_min <= sentence_max")
        if self.train_size < 2 or self.valid_size < 1 or self.test_size < 1:
            raise ConfigurationError("corpus sizes too small")
        if len(self.langs) != 2 or self.langs[0] == self.langs[1]:
            raise ConfigurationError("cipher needs two distinct language tags")


@dataclass
class Config:
    """All sections of a run config."""

    model: TransformerConfig = field(default_factory=TransformerConfig)
    flows: FlowConfig = field(default_factory=FlowConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    cipher: CipherSpec = field(default_factory=CipherSpec)

    def validate(self) -> None:
        self.model.validate()
        self.flows.validate()
        self.noise.validate()
        self.training.validate()
        self.cipher.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["cipher"]["langs"] = list(self.cipher.langs)
        return out


_SECTIONS = {
    "model": TransformerConfig,
    "flows": FlowConfig,
    "noise": NoiseConfig,
    "training": TrainConfig,
    "cipher": CipherSpec,
}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) in section {name!r}: {', '.join(sorted(unknown))}"
        )
    if name == "cipher" and "langs" in values:
        langs = values["langs"]
        if not isinstance(langs, (list, tuple)):
            raise ConfigurationError("cipher.langs must be a list of two tags")
        values = dict(values, langs=tuple(str(l) for l in langs))
    return cls(**values)


def config_from_dict(data: dict) -> Config:
    """Build and validate a Config from a nested dict (e.g. parsed YAML)."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping of sections")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = data.get(name, {})
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {name!r} must be a mapping")
        sections[name] = _build_section(name, cls, values)
    cfg = Config(**sections)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    """Load a YAML config file, apply defaults and validate."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise DataError(f"config file {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)
