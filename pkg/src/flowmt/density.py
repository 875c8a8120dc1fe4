"""Latent-density diagnostics for a trained model's flows."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import RawCorpus
from .errors import ConfigurationError, NumericError, UsageError
from .model import TranslationModel, collate_sequences
from .vocab import encode_sentence


@dataclass
class DensityReport:
    """Log-likelihood summary of pooled latents under the language's flow,
    plus how well transported latents fit the other language's flow."""

    lang: str
    count: int
    mean_ll: float
    min_ll: float
    max_ll: float
    other_lang: str
    transformed_mean_ll: float

    def format(self) -> str:
        return (
            f"language {self.lang}: {self.count} sentences\n"
            f"  own-flow log-likelihood  mean {self.mean_ll:.4f}  "
            f"min {self.min_ll:.4f}  max {self.max_ll:.4f}\n"
            f"  transported to {self.other_lang}: mean log-likelihood "
            f"{self.transformed_mean_ll:.4f}"
        )


@torch.no_grad()
def density_report(model: TranslationModel, corpus: RawCorpus,
                   batch_size: int = 64) -> DensityReport:
    """Score a corpus's pooled latents under its own and the other flow."""
    if len(corpus) == 0:
        raise UsageError("cannot build a density report from an empty corpus")
    if not model.has_latent:
        raise ConfigurationError("density report needs the flow adapter enabled")
    lang = corpus.lang
    others = [l for l in model.vocab.langs if l != lang]
    if lang not in model.vocab.langs or not others:
        raise UsageError(f"corpus language {lang!r} not covered by the model")
    other = others[0]

    model.eval()
    own: list[torch.Tensor] = []
    crossed: list[torch.Tensor] = []
    for i in range(0, len(corpus), batch_size):
        chunk = [encode_sentence(model.vocab, s, lang, model.cfg.max_len)
                 for s in corpus.sentences[i:i + batch_size]]
        ids, valid = collate_sequences(chunk, model.vocab.pad_id)
        states = model.encode_batch(ids, valid)
        z = model.pool_latent(states, valid)
        own.append(model.flows[lang].log_prob(z))
        z_other = model.latent_for_target(z, lang, other)
        crossed.append(model.flows[other].log_prob(z_other))
    own_ll = torch.cat(own)
    crossed_ll = torch.cat(crossed)
    if not (torch.isfinite(own_ll).all() and torch.isfinite(crossed_ll).all()):
        raise NumericError("non-finite log-likelihood in density report")
    return DensityReport(
        lang=lang,
        count=len(corpus),
        mean_ll=own_ll.mean().item(),
        min_ll=own_ll.min().item(),
        max_ll=own_ll.max().item(),
        other_lang=other,
        transformed_mean_ll=crossed_ll.mean().item(),
    )
