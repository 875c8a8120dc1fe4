"""Unsupervised training loop: denoising, back-translation, schedule.

Each post-warmup iteration performs four optimizer steps: a denoising
reconstruction step per language (with the flow likelihood term folded
in) and a back-translation step per direction. Warmup epochs run only
the denoising steps. Validation BLEU is computed in both directions per
epoch and the best checkpoint (highest mean of the two) is retained.

Noise is drawn from a dedicated numpy stream seeded with
``(seed, epoch, iteration)`` so batches are reproducible regardless of
how much torch RNG the model consumed.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .config import Config
from .corpus import RawCorpus, bucket_batches
from .errors import ConfigurationError, NumericError
from .metrics import bleu_from_strings
from .model import TranslationModel, collate_sequences
from .noise import add_noise
from .vocab import TokenSequence, encode_sentence


@dataclass
class DaeLosses:
    reconstruction: torch.Tensor
    mle: torch.Tensor | None

    def total(self, mle_weight: float) -> torch.Tensor:
        if self.mle is None or mle_weight == 0.0:
            return self.reconstruction
        return self.reconstruction + mle_weight * self.mle


def dae_step(model: TranslationModel, seqs: list[TokenSequence],
             cfg: Config, rng: np.random.Generator) -> DaeLosses:
    """Denoising reconstruction with the integrated flow likelihood.

    The decoder reconstructs the clean sentence from the noised encoding.
    With the adapter active and a positive likelihood weight, the pooled
    latent is passed through the language's own flow and back (a numeric
    identity) so reconstruction gradients also reach the flow, and the
    batch of latents contributes the flow's negative log-likelihood.
    """
    lang = seqs[0].lang
    noised = [add_noise(s, cfg.noise, rng) for s in seqs]
    src_ids, src_valid = collate_sequences(noised, model.vocab.pad_id)
    memory = model.encode_batch(src_ids, src_valid)

    z_dec = None
    mle = None
    if model.has_latent:
        z = model.pool_latent(memory, src_valid)
        if cfg.training.mle_weight > 0.0:
            flow = model.flows[lang]
            mle = flow.mle_loss(z.detach() if cfg.training.mle_stop_grad else z)
            eps, _ = flow(z)
            z_dec, _ = flow.inverse(eps)
        else:
            z_dec = z

    tgt_ids, tgt_valid = collate_sequences(seqs, model.vocab.pad_id)
    states = model.decode_states(tgt_ids[:, :-1], tgt_valid[:, :-1],
                                 memory, src_valid, lang)
    logits = model.fused_logits(states, z_dec)
    recon = F.cross_entropy(logits.reshape(-1, len(model.vocab)),
                            tgt_ids[:, 1:].reshape(-1),
                            ignore_index=model.vocab.pad_id)
    if not torch.isfinite(recon) or (mle is not None and not torch.isfinite(mle)):
        raise NumericError(f"non-finite denoising loss for language {lang!r}")
    return DaeLosses(recon, mle)


def bt_step(model: TranslationModel, seqs: list[TokenSequence],
            src_lang: str, tgt_lang: str,
            max_len: int | None = None) -> tuple[torch.Tensor | None, int]:
    """Back-translation: synthesize a translation without gradients, then
    learn to translate it back. Returns (loss, skipped) where skipped
    counts degenerate empty syntheses dropped from the batch.

    Synthesis is capped at twice the longest source sequence and kept
    inside the target language's surface vocabulary: half-trained models
    otherwise pad batches with over-long off-language output that the
    reverse step then learns from.
    """
    synth_cap = 2 * max(len(s.ids) for s in seqs)
    if max_len is not None:
        synth_cap = min(synth_cap, max_len)
    synth = model.translate_batch(seqs, tgt_lang, synth_cap,
                                  restrict_to_lang=True)
    keep = [(s, x) for s, x in zip(synth, seqs) if len(s.interior()) > 0]
    skipped = len(seqs) - len(keep)
    if not keep:
        return None, skipped
    synth_kept = [s for s, _ in keep]
    orig_kept = [x for _, x in keep]

    src_ids, src_valid = collate_sequences(synth_kept, model.vocab.pad_id)
    memory = model.encode_batch(src_ids, src_valid)
    z = None
    if model.has_latent:
        z = model.pool_latent(memory, src_valid)
        z = model.latent_for_target(z, tgt_lang, src_lang)

    tgt_ids, tgt_valid = collate_sequences(orig_kept, model.vocab.pad_id)
    states = model.decode_states(tgt_ids[:, :-1], tgt_valid[:, :-1],
                                 memory, src_valid, src_lang)
    logits = model.fused_logits(states, z)
    loss = F.cross_entropy(logits.reshape(-1, len(model.vocab)),
                           tgt_ids[:, 1:].reshape(-1),
                           ignore_index=model.vocab.pad_id)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite back-translation loss for {src_lang}->{tgt_lang}")
    return loss, skipped


@dataclass
class TrainResult:
    model: TranslationModel
    metrics: list[str] = field(default_factory=list)
    best_epoch: int = -1
    best_bleu: float = 0.0
    skipped_bt: int = 0


class _Meter:
    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, value: float) -> None:
        self.total += value
        self.count += 1

    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


def _valid_bleu(model: TranslationModel, pairs: list[tuple[str, str]],
                src_lang: str, tgt_lang: str, flip: bool, limit: int | None,
                max_len: int, batch_size: int = 64) -> float:
    if limit is not None:
        pairs = pairs[:limit]
    srcs = [p[1] if flip else p[0] for p in pairs]
    refs = [p[0] if flip else p[1] for p in pairs]
    hyps = []
    for i in range(0, len(srcs), batch_size):
        chunk = [encode_sentence(model.vocab, s, src_lang, max_len)
                 for s in srcs[i:i + batch_size]]
        out = model.translate_batch(chunk, tgt_lang, max_len)
        hyps.extend(o.surface(model.vocab) for o in out)
    return bleu_from_strings(hyps, refs).bleu


def _optim_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor,
                model: TranslationModel, clip: float) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()


def train(model: TranslationModel, train_l1: RawCorpus, train_l2: RawCorpus,
          valid_pairs: list[tuple[str, str]], cfg: Config,
          checkpoint_dir: str | Path | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Run the full schedule and return the best-validation model.

    When ``checkpoint_dir`` is given, ``best.ckpt`` is (re)written each
    time validation improves, so an aborted run still leaves the last
    good checkpoint behind. ``log_path`` appends one JSON metrics line
    per epoch; the same lines come back in the result. The metrics field
    names l1/l2 refer positionally to ``train_l1``/``train_l2``, and
    ``valid_pairs`` holds (l1 text, l2 text) tuples.

    The torch RNG is reseeded from ``cfg.training.seed`` on entry, so a
    run is a pure function of the model state, data and config — two
    calls with identical inputs produce identical metrics.
    """
    tc = cfg.training
    torch.manual_seed(tc.seed)
    l1, l2 = train_l1.lang, train_l2.lang
    vocab = model.vocab
    if l1 == l2 or not {l1, l2} <= set(vocab.langs):
        raise ConfigurationError(
            f"corpora are tagged {l1!r}/{l2!r} but the model covers {vocab.langs}")
    max_len = cfg.model.max_len
    seqs_l1 = [encode_sentence(vocab, s, l1, max_len) for s in train_l1.sentences]
    seqs_l2 = [encode_sentence(vocab, s, l2, max_len) for s in train_l2.sentences]
    if not seqs_l1 or not seqs_l2:
        raise ConfigurationError("both training corpora must be non-empty")

    result = TrainResult(model)
    if tc.epochs == 0:
        return result

    optimizer = torch.optim.Adam(model.parameters(), lr=tc.learning_rate,
                                 betas=(tc.adam_beta1, tc.adam_beta2))
    best_state: dict | None = None
    ckpt_path = Path(checkpoint_dir) / "best.ckpt" if checkpoint_dir else None
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(tc.epochs):
            model.train()
            model.reset_counters()
            meters = {k: _Meter() for k in
                      ("dae_l1", "dae_l2", "mle_l1", "mle_l2", "bt_l1l2", "bt_l2l1")}
            batches_l1 = bucket_batches([len(s.ids) for s in seqs_l1],
                                        tc.batch_size, tc.seed, epoch)
            batches_l2 = bucket_batches([len(s.ids) for s in seqs_l2],
                                        tc.batch_size, tc.seed + 1, epoch)
            n_iter = max(len(batches_l1), len(batches_l2))
            for i in range(n_iter):
                if not tc.bt_enabled:
                    warmup = True
                elif tc.warmup_steps is not None:
                    warmup = step < tc.warmup_steps
                else:
                    warmup = epoch < tc.warmup_epochs
                rng = np.random.default_rng([tc.seed, epoch, i])
                batch_l1 = [seqs_l1[j] for j in batches_l1[i % len(batches_l1)]]
                batch_l2 = [seqs_l2[j] for j in batches_l2[i % len(batches_l2)]]

                for lang, batch in ((l1, batch_l1), (l2, batch_l2)):
                    losses = dae_step(model, batch, cfg, rng)
                    _optim_step(optimizer, losses.total(tc.mle_weight), model,
                                tc.grad_clip)
                    step += 1
                    meters[f"dae_{lang}"].add(losses.reconstruction.item())
                    if losses.mle is not None:
                        meters[f"mle_{lang}"].add(losses.mle.item())

                if not warmup:
                    for src_lang, tgt_lang, batch in (
                            (l1, l2, batch_l1), (l2, l1, batch_l2)):
                        loss, skipped = bt_step(model, batch, src_lang, tgt_lang,
                                                max_len)
                        result.skipped_bt += skipped
                        if loss is not None:
                            _optim_step(optimizer, loss, model, tc.grad_clip)
                            step += 1
                            meters[f"bt_{src_lang}{tgt_lang}"].add(loss.item())

            model.eval()
            bleu_12 = _valid_bleu(model, valid_pairs, l1, l2, False,
                                  tc.valid_limit, max_len)
            bleu_21 = _valid_bleu(model, valid_pairs, l2, l1, True,
                                  tc.valid_limit, max_len)
            record = {
                "epoch": epoch,
                "step": step,
                "dae_loss_l1": meters["dae_l1"].mean(),
                "dae_loss_l2": meters["dae_l2"].mean(),
                "mle_l1": meters["mle_l1"].mean(),
                "mle_l2": meters["mle_l2"].mean(),
                "bt_l1l2": meters["bt_l1l2"].mean(),
                "bt_l2l1": meters["bt_l2l1"].mean(),
                "valid_bleu_l1l2": bleu_12,
                "valid_bleu_l2l1": bleu_21,
            }
            line = json.dumps(record, sort_keys=True)
            result.metrics.append(line)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()

            mean_bleu = 0.5 * (bleu_12 + bleu_21)
            if best_state is None or mean_bleu > result.best_bleu:
                result.best_bleu = mean_bleu
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model, cfg, len(result.metrics))
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
