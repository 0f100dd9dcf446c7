"""Transformer encoder-decoder over flattened byte sequences.

The encoder reads the (possibly corrupted) sequence with bidirectional
self-attention; the decoder reconstructs bytes autoregressively with teacher
forcing, conditioned on the encoder memory. A classification head mean-pools
the decoder states of non-padding packets through a two-layer MLP.

Attention masks use additive -inf before the softmax, so blocked positions
have exactly zero weight; decoder causality is exact, not approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab


class OutOfVocab(Exception):
    """A token id is outside [0, vocab_size)."""


class EmptyMaskSet(Exception):
    """Reconstruction loss needs at least one masked position."""


class NoClassifierHead(Exception):
    """classify() called on a model built without n_classes."""


class InvalidLabel(Exception):
    """Class label outside [0, n_classes)."""


@dataclass
class ModelConfig:
    d_model: int = 256
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    d_ff: int = 1024
    max_len: int = 640
    vocab_size: int = vocab.VOCAB_SIZE
    n_classes: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def pad_id(self) -> int:
        return vocab.pad_id(self.vocab_size)

    @property
    def mask_id(self) -> int:
        return vocab.mask_id(self.vocab_size)

    @property
    def bos_id(self) -> int:
        return vocab.bos_id(self.vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    probs: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.probs = F.softmax(self.logits, dim=-1)


@lru_cache(maxsize=8)
def _causal_blocked(t_q: int, t_k: int) -> torch.Tensor:
    return torch.triu(torch.ones(t_q, t_k, dtype=torch.bool), diagonal=1)


class _Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        key_value: torch.Tensor,
        causal: bool = False,
        key_padding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        batch, t_q, _ = query.shape
        t_k = key_value.shape[1]

        def split(x, proj):
            return proj(x).view(batch, -1, self.n_heads, self.d_head).transpose(1, 2)

        q = split(query, self.q_proj)
        k = split(key_value, self.k_proj)
        v = split(key_value, self.v_proj)

        scores = q @ k.transpose(-2, -1) / self.d_head**0.5
        if causal:
            scores = scores.masked_fill(_causal_blocked(t_q, t_k), float("-inf"))
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))

        attn = F.softmax(scores, dim=-1)
        merged = (attn @ v).transpose(1, 2).reshape(batch, t_q, -1)
        return self.out_proj(merged)


class _FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model)
        )

    def forward(self, x):
        return self.net(x)


class _EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = _Attention(cfg.d_model, cfg.n_heads)
        self.ff = _FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding=None):
        x = self.norm1(x + self.dropout(self.attn(x, x, key_padding=key_padding)))
        return self.norm2(x + self.dropout(self.ff(x)))


class _DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = _Attention(cfg.d_model, cfg.n_heads)
        self.cross_attn = _Attention(cfg.d_model, cfg.n_heads)
        self.ff = _FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_key_padding=None, memory_key_padding=None):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, causal=True, key_padding=self_key_padding)))
        x = self.norm2(x + self.dropout(self.cross_attn(x, memory, key_padding=memory_key_padding)))
        return self.norm3(x + self.dropout(self.ff(x)))


class TrafficModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.max_len, config.d_model)
        self.encoder_layers = nn.ModuleList(_EncoderLayer(config) for _ in range(config.n_enc_layers))
        self.decoder_layers = nn.ModuleList(_DecoderLayer(config) for _ in range(config.n_dec_layers))
        self.recon_head = nn.Linear(config.d_model, config.vocab_size)
        if config.n_classes is not None:
            self.classifier = nn.Sequential(
                nn.Linear(config.d_model, config.d_model),
                nn.ReLU(),
                nn.Linear(config.d_model, config.n_classes),
            )
        else:
            self.classifier = None

    # ---- token utilities -------------------------------------------------

    def _as_batch(self, tokens) -> tuple[torch.Tensor, bool]:
        if isinstance(tokens, np.ndarray):
            tokens = torch.from_numpy(np.ascontiguousarray(tokens))
        tokens = tokens.long()
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise OutOfVocab(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens, squeeze

    def shift_right(self, tokens) -> torch.Tensor:
        """Prefix with BOS and drop the last token (teacher forcing input)."""
        tokens, squeeze = self._as_batch(tokens)
        bos = torch.full((tokens.shape[0], 1), self.config.bos_id, dtype=torch.long)
        shifted = torch.cat([bos, tokens[:, :-1]], dim=1)
        return shifted[0] if squeeze else shifted

    # ---- forward pieces --------------------------------------------------

    def embed(self, tokens) -> torch.Tensor:
        """Token embedding plus learned absolute positional embedding."""
        tokens, squeeze = self._as_batch(tokens)
        seq_len = tokens.shape[1]
        if seq_len > self.config.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_len {self.config.max_len}")
        positions = torch.arange(seq_len, device=tokens.device)
        out = self.token_embedding(tokens) + self.position_embedding(positions)[None, :, :]
        return out[0] if squeeze else out

    def encode(self, embedded: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = embedded.dim() == 2
        if squeeze:
            embedded = embedded[None]
        x = embedded
        for layer in self.encoder_layers:
            x = layer(x, key_padding=key_padding)
        return x[0] if squeeze else x

    def decode_hidden(
        self,
        memory: torch.Tensor,
        shifted_tokens,
        key_padding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        shifted_tokens, squeeze = self._as_batch(shifted_tokens)
        if memory.dim() == 2:
            memory = memory[None]
        x = self.embed(shifted_tokens)
        for layer in self.decoder_layers:
            x = layer(x, memory, self_key_padding=key_padding, memory_key_padding=key_padding)
        return x[0] if squeeze else x

    def decode(self, memory: torch.Tensor, shifted_tokens, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        """Logits over the vocabulary at every position; position t may depend
        only on memory and shifted-input positions <= t."""
        return self.recon_head(self.decode_hidden(memory, shifted_tokens, key_padding=key_padding))

    def reconstruct(self, input_tokens, target_tokens) -> torch.Tensor:
        """Encoder on the corrupted sequence, decoder teacher-forced on the
        BOS-shifted clean target. Returns logits aligned with the target."""
        memory = self.encode(self.embed(input_tokens))
        return self.decode(memory, self.shift_right(target_tokens))

    def classify(self, tokens, real_positions) -> ClassifierOutput:
        """Class logits and probabilities for byte sequences.

        real_positions (per sample, or one int) is the number of leading
        non-padding positions, i.e. real_packet_count * packet_len. Padding
        positions are excluded from attention keys and from pooling, so
        padding content cannot influence the output.
        """
        if self.classifier is None:
            raise NoClassifierHead("model was built without n_classes")
        tokens, squeeze = self._as_batch(tokens)
        batch, seq_len = tokens.shape
        counts = torch.as_tensor(real_positions, dtype=torch.long).reshape(-1)
        if counts.numel() == 1 and batch > 1:
            counts = counts.expand(batch)
        real_lens = counts.clamp(min=1, max=seq_len)

        pad = torch.arange(seq_len)[None, :] >= real_lens[:, None]
        memory = self.encode(self.embed(tokens), key_padding=pad)
        hidden = self.decode_hidden(memory, self.shift_right(tokens), key_padding=pad)

        keep = (~pad).unsqueeze(-1).to(hidden.dtype)
        pooled = (hidden * keep).sum(dim=1) / keep.sum(dim=1)
        logits = self.classifier(pooled)
        return ClassifierOutput(logits=logits[0] if squeeze else logits)


# ---- losses ---------------------------------------------------------------


def _as_tensor_mask(masked_positions, shape: torch.Size) -> torch.Tensor:
    if isinstance(masked_positions, torch.Tensor) and masked_positions.dtype == torch.bool:
        mask = masked_positions
    elif isinstance(masked_positions, np.ndarray) and masked_positions.dtype == bool:
        mask = torch.from_numpy(masked_positions)
    else:
        idx = torch.as_tensor(np.asarray(masked_positions), dtype=torch.long)
        mask = torch.zeros(shape[-1], dtype=torch.bool)
        mask[idx] = True
    if mask.dim() < len(shape):
        mask = mask.expand(shape)
    return mask


def reconstruction_loss(logits: torch.Tensor, target_tokens, masked_positions) -> torch.Tensor:
    """Sum over masked positions of -log P(target); other positions contribute
    exactly zero. Accepts an index array or a boolean mask (batched or not)."""
    if isinstance(target_tokens, np.ndarray):
        target_tokens = torch.from_numpy(np.ascontiguousarray(target_tokens))
    target_tokens = target_tokens.long()
    squeeze = logits.dim() == 2
    if squeeze:
        logits = logits[None]
        target_tokens = target_tokens[None]

    mask = _as_tensor_mask(masked_positions, target_tokens.shape)
    if not bool(mask.any()):
        raise EmptyMaskSet("no masked positions to reconstruct")

    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, target_tokens.unsqueeze(-1)).squeeze(-1)
    return (nll * mask.to(nll.dtype)).sum()


def pretrain_loss(model: TrafficModel, sample_byte, sample_protocol, sample_packet) -> tuple[torch.Tensor, dict]:
    """Unweighted sum of the three reconstruction losses, one forward pass
    per corruption kind. Returns (total, per-task dict)."""
    parts = {}
    for name, sample in (("byte", sample_byte), ("protocol", sample_protocol), ("packet", sample_packet)):
        logits = model.reconstruct(sample.input_tokens, sample.target_tokens)
        parts[name] = reconstruction_loss(logits, sample.target_tokens, sample.plan.masked_positions)
    total = parts["byte"] + parts["protocol"] + parts["packet"]
    return total, parts


def kl_divergence(p: ClassifierOutput, q: ClassifierOutput) -> torch.Tensor:
    """KL(p || q) on class distributions, mean over the batch when batched.
    Computed from log-softmax for numerical stability."""
    log_p = F.log_softmax(p.logits, dim=-1)
    log_q = F.log_softmax(q.logits, dim=-1)
    per_sample = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return per_sample.mean()


def finetune_loss(
    out_raw: ClassifierOutput,
    out_protocol: ClassifierOutput,
    out_packet: ClassifierOutput,
    labels,
    consistency_weight: float,
    stop_grad_raw: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Supervised cross-entropy on the raw view plus weighted consistency:
    KL(raw || protocol) + KL(raw || packet). Returns (total, sup, cons)."""
    if consistency_weight < 0:
        raise ValueError("consistency_weight must be >= 0")
    logits = out_raw.logits
    if logits.dim() == 1:
        logits = logits[None]
    labels_t = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n_classes = logits.shape[-1]
    if labels_t.numel() and (labels_t.min() < 0 or labels_t.max() >= n_classes):
        raise InvalidLabel(f"labels must lie in [0, {n_classes})")

    sup = F.cross_entropy(logits, labels_t)
    raw_for_cons = ClassifierOutput(logits=out_raw.logits.detach()) if stop_grad_raw else out_raw
    cons = kl_divergence(raw_for_cons, out_protocol) + kl_divergence(raw_for_cons, out_packet)
    return sup + consistency_weight * cons, sup, cons
