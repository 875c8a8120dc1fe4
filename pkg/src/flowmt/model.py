"""Encoder-decoder translation model with an optional flow adapter.

A compact transformer pair (pre-norm, sinusoidal positions, one joint
embedding table tied to the output projection) carries the sequence work.
When the flow adapter is enabled, encoder states are pooled into a
sentence latent, transported between languages through the per-language
flow stacks, and fused back into the decoder states through the sigmoid
gate before the output projection.

Instrumentation for tests: ``transform_calls`` counts latent-transform
invocations and ``route_log`` records which decoder served each language.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import FlowConfig, TransformerConfig
from .errors import ConfigurationError, DataError, UsageError
from .flows import FlowStack, transform_latent
from .sentrep import GateFusion, LatentPooler
from .vocab import TokenSequence, Vocabulary


def sinusoidal_positions(max_len: int, d_model: int) -> Tensor:
    pos = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


def collate_sequences(seqs: list[TokenSequence], pad_id: int) -> tuple[Tensor, Tensor]:
    """Right-pad sequences into (ids, valid-mask) batch tensors."""
    if not seqs:
        raise UsageError("cannot collate an empty batch")
    width = max(len(s.ids) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s.ids)] = torch.tensor(s.ids, dtype=torch.long)
    return ids, ids.ne(pad_id)


class _IncrementalDecoder:
    """KV-cached stepping view over an ``nn.TransformerDecoder``.

    Greedy decoding through the stock module recomputes the whole prefix
    for every generated token. This view reuses the decoder's own
    weights but keeps per-layer self-attention keys/values between steps
    and projects the memory keys/values once per sentence, so decoding a
    length-L output costs O(L) layer passes instead of O(L^2). Dropout
    submodules are skipped (inference semantics); outputs match the full
    recompute on an eval-mode model to float precision.
    """

    def __init__(self, decoder: nn.TransformerDecoder, memory: Tensor,
                 mem_valid: Tensor):
        self.layers = list(decoder.layers)
        self.final_norm = decoder.norm
        # additive attention bias: -inf over padded memory positions
        self.mem_bias = torch.zeros(memory.shape[0], 1, 1, memory.shape[1],
                                    dtype=memory.dtype)
        self.mem_bias.masked_fill_(~mem_valid[:, None, None, :], float("-inf"))
        self.self_kv: list[tuple[Tensor, Tensor] | None] = [None] * len(self.layers)
        self.mem_kv: list[tuple[Tensor, Tensor]] = []
        d = memory.shape[-1]
        for layer in self.layers:
            mha = layer.multihead_attn
            w, b = mha.in_proj_weight, mha.in_proj_bias
            k = F.linear(memory, w[d:2 * d], b[d:2 * d])
            v = F.linear(memory, w[2 * d:], b[2 * d:])
            self.mem_kv.append((self._heads(k, mha.num_heads),
                                self._heads(v, mha.num_heads)))

    @staticmethod
    def _heads(x: Tensor, n_heads: int) -> Tensor:
        b, t, d = x.shape
        return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)

    @staticmethod
    def _merge(x: Tensor) -> Tensor:
        b, n_heads, t, d_head = x.shape
        return x.transpose(1, 2).reshape(b, t, n_heads * d_head)

    @staticmethod
    def _attend(q: Tensor, k: Tensor, v: Tensor,
                bias: Tensor | None = None) -> Tensor:
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        if bias is not None:
            scores = scores + bias
        return torch.softmax(scores, dim=-1) @ v

    def step(self, x: Tensor) -> Tensor:
        """Advance one position; ``x`` is the (B, 1, d_model) embedded token."""
        d = x.shape[-1]
        for i, layer in enumerate(self.layers):
            sa = layer.self_attn
            h = layer.norm1(x)
            qkv = F.linear(h, sa.in_proj_weight, sa.in_proj_bias)
            q, k, v = (self._heads(part, sa.num_heads)
                       for part in qkv.split(d, dim=-1))
            if self.self_kv[i] is not None:
                past_k, past_v = self.self_kv[i]
                k = torch.cat((past_k, k), dim=2)
                v = torch.cat((past_v, v), dim=2)
            self.self_kv[i] = (k, v)
            x = x + sa.out_proj(self._merge(self._attend(q, k, v)))

            ca = layer.multihead_attn
            h = layer.norm2(x)
            qc = self._heads(F.linear(h, ca.in_proj_weight[:d],
                                      ca.in_proj_bias[:d]), ca.num_heads)
            mem_k, mem_v = self.mem_kv[i]
            x = x + ca.out_proj(self._merge(
                self._attend(qc, mem_k, mem_v, self.mem_bias)))

            h = layer.norm3(x)
            x = x + layer.linear2(layer.activation(layer.linear1(h)))
        return self.final_norm(x) if self.final_norm is not None else x


class TranslationModel(nn.Module):
    """Shared encoder, shared or per-language decoders, flows, and gate."""

    def __init__(self, vocab: Vocabulary, transformer: TransformerConfig,
                 flow: FlowConfig):
        super().__init__()
        transformer.validate()
        flow.validate()
        self.vocab = vocab
        self.cfg = transformer
        self.flow_cfg = flow
        d = transformer.d_model

        self.embedding = nn.Embedding(len(vocab), d, padding_idx=vocab.pad_id)
        # scaled init keeps the tied output projection near-uniform at the
        # start; the default N(0,1) rows produce saturated initial softmaxes
        nn.init.normal_(self.embedding.weight, mean=0.0, std=d ** -0.5)
        with torch.no_grad():
            self.embedding.weight[vocab.pad_id].zero_()
        self.register_buffer("positions", sinusoidal_positions(transformer.max_len, d))
        self.input_dropout = nn.Dropout(transformer.dropout)

        enc_layer = nn.TransformerEncoderLayer(
            d, transformer.n_heads, transformer.d_ff, transformer.dropout,
            batch_first=True, norm_first=True)
        # nested-tensor fast path off: keeps batched and per-sentence
        # encoding numerically aligned and runs deterministic kernels
        self.encoder = nn.TransformerEncoder(enc_layer, transformer.n_layers,
                                             norm=nn.LayerNorm(d),
                                             enable_nested_tensor=False)

        def make_decoder() -> nn.TransformerDecoder:
            layer = nn.TransformerDecoderLayer(
                d, transformer.n_heads, transformer.d_ff, transformer.dropout,
                batch_first=True, norm_first=True)
            return nn.TransformerDecoder(layer, transformer.n_layers,
                                         norm=nn.LayerNorm(d))

        if transformer.shared_decoder:
            self.decoders = nn.ModuleDict({"shared": make_decoder()})
        else:
            self.decoders = nn.ModuleDict({l: make_decoder() for l in vocab.langs})

        if flow.kind != "none":
            self.pooler = LatentPooler(d, flow.latent_dim)
            self.fusion = GateFusion(d, flow.latent_dim)
            self.flows = nn.ModuleDict({
                l: FlowStack(flow.latent_dim, flow.num_layers, flow.kind, lang=l,
                             hidden=flow.hidden, scale_bound=flow.scale_bound,
                             dropout=flow.dropout)
                for l in vocab.langs})
        else:
            self.pooler = None
            self.fusion = None
            self.flows = None

        self.reset_counters()

    # -- instrumentation ----------------------------------------------------

    def reset_counters(self) -> None:
        self.transform_calls = 0
        self.route_log: list[tuple[str, str]] = []

    @property
    def has_latent(self) -> bool:
        return self.pooler is not None

    # -- core pieces --------------------------------------------------------

    def _embed(self, ids: Tensor) -> Tensor:
        if ids.shape[1] > self.cfg.max_len:
            raise DataError(
                f"sequence length {ids.shape[1]} exceeds max_len={self.cfg.max_len}")
        x = self.embedding(ids) * math.sqrt(self.cfg.d_model)
        return self.input_dropout(x + self.positions[: ids.shape[1]])

    def encode_batch(self, ids: Tensor, valid: Tensor) -> Tensor:
        """States for a padded batch; valid is True at real tokens."""
        return self.encoder(self._embed(ids), src_key_padding_mask=~valid)

    def _decoder_for(self, lang: str) -> nn.TransformerDecoder:
        if lang not in self.vocab.langs:
            raise UsageError(f"unknown language tag {lang!r}; have {self.vocab.langs}")
        key = "shared" if self.cfg.shared_decoder else lang
        self.route_log.append((lang, key))
        return self.decoders[key]

    def decode_states(self, tgt_in: Tensor, tgt_valid: Tensor | None,
                      memory: Tensor, mem_valid: Tensor, lang: str) -> Tensor:
        if not self.cfg.lang_conditioned_bos:
            tgt_in = tgt_in.clone()
            tgt_in[:, 0] = self.vocab.eos_id
        if self.training and self.cfg.decoder_word_dropout > 0:
            # Blank previous-token inputs (never the start column) so the
            # decoder cannot lean purely on its own language model.
            drop = torch.rand(tgt_in.shape) < self.cfg.decoder_word_dropout
            drop[:, 0] = False
            tgt_in = tgt_in.masked_fill(drop, self.vocab.pad_id)
        x = self._embed(tgt_in)
        causal = torch.triu(
            torch.ones(tgt_in.shape[1], tgt_in.shape[1], dtype=torch.bool), diagonal=1)
        decoder = self._decoder_for(lang)
        return decoder(
            x, memory, tgt_mask=causal,
            tgt_key_padding_mask=None if tgt_valid is None else ~tgt_valid,
            memory_key_padding_mask=~mem_valid)

    def output_logits(self, states: Tensor) -> Tensor:
        """Tied projection: logits through the embedding table."""
        return F.linear(states, self.embedding.weight)

    def fused_logits(self, states: Tensor, z: Tensor | None) -> Tensor:
        if z is not None:
            if self.fusion is None:
                raise ConfigurationError("latent provided but the adapter is disabled")
            states = self.fusion(states, z)
        return self.output_logits(states)

    def pool_latent(self, states: Tensor, valid: Tensor | None = None) -> Tensor:
        if self.pooler is None:
            raise ConfigurationError("latent pathway is disabled (flow kind 'none')")
        return self.pooler(states, valid)

    def latent_for_target(self, z: Tensor, src_lang: str, tgt_lang: str,
                          ablate_transform: bool = False) -> Tensor:
        """Transport a pooled latent into the target language's space.

        Same-language requests pass through untouched; the ablation flag
        (test instrumentation) skips the transform while keeping the rest
        of the pipeline identical.
        """
        if src_lang == tgt_lang or ablate_transform or self.flows is None:
            return z
        self.transform_calls += 1
        return transform_latent(self.flows[src_lang], self.flows[tgt_lang], z)

    # -- single-sentence API ------------------------------------------------

    def encode(self, x: TokenSequence) -> Tensor:
        """States for one sentence, shape (len(x.ids), d_model)."""
        ids = torch.tensor(x.ids, dtype=torch.long).unsqueeze(0)
        return self.encode_batch(ids, torch.ones_like(ids, dtype=torch.bool)).squeeze(0)

    # -- greedy decoding ----------------------------------------------------

    def _decode_step_logits(self, ys: Tensor, memory: Tensor, mem_valid: Tensor,
                            z: Tensor | None, lang: str) -> Tensor:
        """Logits for the next token after prefix ``ys``."""
        states = self.decode_states(ys, None, memory, mem_valid, lang)
        return self.fused_logits(states[:, -1], z)

    def _banned_ids(self) -> list[int]:
        return [self.vocab.pad_id] + [self.vocab.bos_id(l) for l in self.vocab.langs]

    def greedy_decode_batch(self, memory: Tensor, mem_valid: Tensor,
                            z: Tensor | None, tgt_lang: str,
                            max_len: int | None = None,
                            restrict_to_lang: bool | None = None) -> list[TokenSequence]:
        """Autoregressive argmax decoding; stops at eos or length budget.

        ``restrict_to_lang`` limits output to the target language's
        surface tokens; ``None`` defers to the model config.
        """
        max_len = max_len or self.cfg.max_len
        if restrict_to_lang is None:
            restrict_to_lang = self.cfg.restrict_output_to_lang
        bos, eos = self.vocab.bos_id(tgt_lang), self.vocab.eos_id
        start = bos if self.cfg.lang_conditioned_bos else eos
        batch = memory.shape[0]
        ys = torch.full((batch, 1), start, dtype=torch.long)
        finished = torch.zeros(batch, dtype=torch.bool)
        restrict = None
        if restrict_to_lang:
            allowed = self.vocab.lang_token_ids(tgt_lang) | {eos, self.vocab.unk_id}
            restrict = torch.full((len(self.vocab),), True)
            restrict[sorted(allowed)] = False
        scale = math.sqrt(self.cfg.d_model)
        inc = _IncrementalDecoder(self._decoder_for(tgt_lang), memory, mem_valid)
        for t in range(max_len - 2):
            x = self.input_dropout(self.embedding(ys[:, -1:]) * scale
                                   + self.positions[t])
            states = inc.step(x)
            logits = self.fused_logits(states[:, -1], z)
            logits[:, self._banned_ids()] = float("-inf")
            if restrict is not None:
                logits[:, restrict] = float("-inf")
            if t == 0:
                logits[:, eos] = float("-inf")  # minimum output length of one
            nxt = logits.argmax(dim=-1)
            nxt[finished] = eos
            ys = torch.cat((ys, nxt.unsqueeze(1)), dim=1)
            finished |= nxt.eq(eos)
            if bool(finished.all()):
                break
        out = []
        for row in ys.tolist():
            interior = []
            for tok in row[1:]:
                if tok == eos:
                    break
                interior.append(tok)
            out.append(TokenSequence((bos, *interior, eos), tgt_lang))
        return out

    def greedy_decode(self, states: Tensor, z: Tensor | None, tgt_lang: str,
                      max_len: int | None = None) -> TokenSequence:
        """Single-sentence convenience wrapper over the batched decoder."""
        memory = states.unsqueeze(0)
        mem_valid = torch.ones(memory.shape[:2], dtype=torch.bool)
        z_b = None if z is None else z.unsqueeze(0)
        return self.greedy_decode_batch(memory, mem_valid, z_b, tgt_lang, max_len)[0]

    # -- translation pipeline ----------------------------------------------

    @torch.no_grad()
    def translate_batch(self, seqs: list[TokenSequence], tgt_lang: str,
                        max_len: int | None = None,
                        ablate_transform: bool = False,
                        restrict_to_lang: bool | None = None) -> list[TokenSequence]:
        """encode -> pool -> transport latent -> greedy decode, batched.

        All sentences in the batch must share one source language.
        """
        langs = {s.lang for s in seqs}
        if len(langs) != 1:
            raise UsageError("translate_batch needs a single source language per call")
        src_lang = langs.pop()
        if src_lang not in self.vocab.langs or tgt_lang not in self.vocab.langs:
            raise UsageError(
                f"language pair ({src_lang!r}, {tgt_lang!r}) not covered by this model")
        was_training = self.training
        self.eval()
        try:
            ids, valid = collate_sequences(seqs, self.vocab.pad_id)
            memory = self.encode_batch(ids, valid)
            z = None
            if self.has_latent:
                z = self.pool_latent(memory, valid)
                z = self.latent_for_target(z, src_lang, tgt_lang, ablate_transform)
            return self.greedy_decode_batch(memory, valid, z, tgt_lang, max_len,
                                            restrict_to_lang)
        finally:
            if was_training:
                self.train()

    def translate(self, x: TokenSequence, tgt_lang: str,
                  max_len: int | None = None,
                  ablate_transform: bool = False) -> TokenSequence:
        return self.translate_batch([x], tgt_lang, max_len, ablate_transform)[0]
