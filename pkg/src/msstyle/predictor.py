"""Multi-scale style predictor: hierarchical context encoder plus three conditioned heads.

The context encoder has two recurrence + attention levels. Within each
sentence a bidirectional GRU runs over subword semantic embeddings and an
attention pool reduces them to a sentence vector; a second bidirectional GRU
then runs across the 2L+1 sentence vectors and another attention pool
reduces those to one global vector.

Styles are generated top-down, each head a linear layer plus tanh::

    S_g = tanh(W_g C_g)
    S_s = tanh(W_s [C_s(current); S_g])
    S_w[i] = tanh(W_w [C_w[i]; S_s])
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from msstyle.config import ModelConfig
from msstyle.errors import ContractError, ExternalDependencyError, MsStyleError
from msstyle.extractor import combine_styles


def embed_subwords(window_texts, embedder) -> list[np.ndarray]:
    """Embed a window's subwords; returns one ``(n_i, D)`` array per sentence.

    The embedder always receives the full window so it can use the
    surrounding text; padding sentences come back as one pad row.
    """
    texts = [tuple(s) for s in window_texts]
    if len(texts) % 2 != 1:
        raise ContractError("a window has an odd number of sentences (2L+1)")
    if len(texts[len(texts) // 2]) == 0:
        raise ContractError("the current sentence has no subwords")
    try:
        out = embedder(texts)
    except MsStyleError:
        raise
    except Exception as e:
        raise ExternalDependencyError(f"semantic embedder failed: {e}") from e
    if len(out) != len(texts):
        raise ExternalDependencyError(f"embedder returned {len(out)} sentences for {len(texts)}")
    for s, e in zip(texts, out):
        if e.shape != (max(1, len(s)), embedder.dim):
            raise ExternalDependencyError(f"embedder returned shape {e.shape} for {len(s)} subwords")
    return [np.asarray(e, dtype=np.float32) for e in out]


class AttentionPool(nn.Module):
    """Scaled dot-product attention with a learned query; reduces a sequence to one vector."""

    def __init__(self, d_in: int, d_attn: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(d_attn) / math.sqrt(d_attn))
        self.key = nn.Linear(d_in, d_attn)
        self.value = nn.Linear(d_in, d_in)
        self.d_attn = d_attn

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        logits = self.key(x) @ self.query / math.sqrt(self.d_attn)
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return torch.einsum("nl,nld->nd", weights, self.value(x)), weights


@dataclass
class ContextEmbeddings:
    C_w: torch.Tensor          # (B, W, H) current sentence subwords
    C_w_mask: torch.Tensor     # (B, W)
    C_s: torch.Tensor          # (B, S, H)
    C_g: torch.Tensor          # (B, H)
    current: int
    word_weights: torch.Tensor  # (B, S, Wmax)
    sentence_weights: torch.Tensor  # (B, S)

    @property
    def C_s_current(self) -> torch.Tensor:
        return self.C_s[:, self.current]


class HierarchicalContextEncoder(nn.Module):
    def __init__(self, d_sem: int, hidden: int, d_attn: int):
        super().__init__()
        width = 2 * hidden
        self.proj = nn.Linear(d_sem, width) if d_sem != width else nn.Identity()
        self.word_rnn = nn.GRU(width, hidden, batch_first=True, bidirectional=True)
        self.word_attn = AttentionPool(width, d_attn)
        self.sent_rnn = nn.GRU(width, hidden, batch_first=True, bidirectional=True)
        self.sent_attn = AttentionPool(width, d_attn)
        self.width = width

    def forward(self, sem: torch.Tensor, sem_len: torch.Tensor) -> ContextEmbeddings:
        """``sem``: ``(B, S, W, d_sem)`` semantic embeddings; ``sem_len``: ``(B, S)``."""
        B, S, W, _ = sem.shape
        x = self.proj(sem.reshape(B * S, W, -1))
        lens = sem_len.reshape(-1)
        packed = pack_padded_sequence(x, lens.cpu(), batch_first=True, enforce_sorted=False)
        words, _ = pad_packed_sequence(self.word_rnn(packed)[0], batch_first=True, total_length=W)
        mask = torch.arange(W)[None, :] < lens[:, None]
        sent_vec, word_w = self.word_attn(words, mask)
        C_s, _ = self.sent_rnn(sent_vec.view(B, S, -1))
        C_g, sent_w = self.sent_attn(C_s, torch.ones(B, S, dtype=torch.bool))
        cur = S // 2
        words = words.view(B, S, W, -1)
        n_cur = int(sem_len[:, cur].max())
        return ContextEmbeddings(
            C_w=words[:, cur, :n_cur],
            C_w_mask=mask.view(B, S, W)[:, cur, :n_cur],
            C_s=C_s, C_g=C_g, current=cur,
            word_weights=word_w.view(B, S, W), sentence_weights=sent_w,
        )


@dataclass
class PredictedStyles:
    S_g: torch.Tensor   # (B, D)
    S_s: torch.Tensor   # (B, D)
    S_w: torch.Tensor   # (B, W, D)
    subword_mask: torch.Tensor


class StyleHeads(nn.Module):
    def __init__(self, d_ctx: int, d_style: int):
        super().__init__()
        self.global_head = nn.Linear(d_ctx, d_style)
        self.sentence_head = nn.Linear(d_ctx + d_style, d_style)
        self.subword_head = nn.Linear(d_ctx + d_style, d_style)

    def forward(self, ctx: ContextEmbeddings) -> PredictedStyles:
        S_g = torch.tanh(self.global_head(ctx.C_g))
        S_s = torch.tanh(self.sentence_head(torch.cat([ctx.C_s_current, S_g], dim=-1)))
        W = ctx.C_w.shape[1]
        cond = S_s[:, None, :].expand(-1, W, -1)
        S_w = torch.tanh(self.subword_head(torch.cat([ctx.C_w, cond], dim=-1)))
        S_w = S_w * ctx.C_w_mask[..., None]
        return PredictedStyles(S_g, S_s, S_w, ctx.C_w_mask)


class MultiScaleStylePredictor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.hce = HierarchicalContextEncoder(config.d_sem, config.hce_hidden, config.hce_attn)
        self.heads = StyleHeads(self.hce.width, config.d_style)

    def forward(self, batch) -> PredictedStyles:
        return self.heads(self.hce(batch.sem, batch.sem_len))


def _sem_tensor(sem: list[np.ndarray]):
    W = max(len(s) for s in sem)
    out = np.zeros((1, len(sem), W, sem[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(sem):
        out[0, i, : len(s)] = s
    return torch.from_numpy(out), torch.tensor([[len(s) for s in sem]], dtype=torch.long)


def hce_forward(sem: list[np.ndarray], hce: HierarchicalContextEncoder) -> ContextEmbeddings:
    """Context embeddings for one window's semantic embedding sequence."""
    return hce(*_sem_tensor(sem))


def predict_styles(ctx: ContextEmbeddings, heads: StyleHeads) -> PredictedStyles:
    return heads(ctx)


def combine_predicted(pred: PredictedStyles) -> torch.Tensor:
    """Per-subword multi-scale embedding ``S_g + S_s + S_w[i]``; padded rows are zero."""
    return combine_styles(pred.S_g, pred.S_s, pred.S_w) * pred.subword_mask[..., None]
