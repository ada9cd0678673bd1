"""Multi-scale style extractor.

Three levels (global, sentence, subword) each own a GST-style reference
encoder and a style-token layer. Reference embeddings are turned into
residuals before token attention so that each level only models what the
level above it has not already captured::

    R_g = E_g,   R_s = E_s - E_g,   R_w[i] = E_w[i] - E_s

The per-subword multi-scale embedding is ``S_g + S_s + S_w[i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from msstyle.config import ModelConfig
from msstyle.errors import ContractError

LEVELS = ("global", "sentence", "subword")


def _time_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class ReferenceEncoder(nn.Module):
    """Conv2d stack (3x3, stride 2) followed by a GRU whose final state is the embedding.

    Positions past each sequence's true length are zeroed after every conv
    layer, so a padded batch matches running each sequence on its own.
    """

    def __init__(self, n_mels: int, channels, d_out: int):
        super().__init__()
        self.convs = nn.ModuleList()
        c_in, freq = 1, n_mels
        for c_out in channels:
            self.convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in, freq = c_out, (freq - 1) // 2 + 1
        self.gru = nn.GRU(c_in * freq, d_out, batch_first=True)
        self.d_out = d_out

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if torch.any(lengths < 1):
            raise ContractError("reference segments need at least one frame")
        x = mels.unsqueeze(1) * _time_mask(lengths, mels.shape[1])[:, None, :, None]
        lens = lengths
        for conv in self.convs:
            x = F.relu(conv(x))
            lens = (lens - 1) // 2 + 1
            x = x * _time_mask(lens, x.shape[2])[:, None, :, None]
        B, C, T, Fq = x.shape
        x = x.permute(0, 2, 1, 3).reshape(B, T, C * Fq)
        packed = pack_padded_sequence(x, lens.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        return h[-1]


class StyleTokenLayer(nn.Module):
    """Multi-head attention of a residual embedding over a bank of learned tokens.

    Tokens pass through tanh before the key/value projections, as in GST.
    There is no output projection, so with one head the output lies in the
    span of the token value projections.
    """

    def __init__(self, d_style: int, n_tokens: int, n_heads: int):
        super().__init__()
        if n_tokens < 1:
            raise ContractError("need at least one style token")
        self.n_heads = n_heads
        self.d_head = d_style // n_heads
        self.tokens = nn.Parameter(torch.randn(n_tokens, d_style // n_heads))
        self.query = nn.Linear(d_style, d_style, bias=False)
        self.key = nn.Linear(d_style // n_heads, d_style, bias=False)
        self.value = nn.Linear(d_style // n_heads, d_style, bias=False)

    def value_projections(self) -> torch.Tensor:
        """``(K, d_style)`` value vectors of the tokens."""
        return self.value(torch.tanh(self.tokens))

    def forward(self, residual: torch.Tensor, return_weights: bool = False):
        N = residual.shape[0]
        K = self.tokens.shape[0]
        q = self.query(residual).view(N, self.n_heads, self.d_head)
        k = self.key(torch.tanh(self.tokens)).view(K, self.n_heads, self.d_head)
        v = self.value_projections().view(K, self.n_heads, self.d_head)
        weights = torch.softmax(torch.einsum("nhd,khd->nhk", q, k) / math.sqrt(self.d_head), dim=-1)
        out = torch.einsum("nhk,khd->nhd", weights, v).reshape(N, -1)
        return (out, weights) if return_weights else out


class ExtractorLevel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoder = ReferenceEncoder(config.n_mels, config.ref_channels, config.d_style)
        self.tokens = StyleTokenLayer(config.d_style, config.n_tokens, config.token_heads)


@dataclass
class ExtractorOutput:
    """Batched extractor results. ``S_w`` is ``(B, W, D)`` padded; ``subword_mask`` marks real subwords."""

    E_g: torch.Tensor
    E_s: torch.Tensor
    E_w: torch.Tensor
    S_g: torch.Tensor
    S_s: torch.Tensor
    S_w: torch.Tensor
    subword_mask: torch.Tensor
    weights: dict

    def combined(self, levels: int = 3) -> torch.Tensor:
        """Per-subword multi-scale embedding using the first ``levels`` levels."""
        zero = torch.zeros_like(self.S_w)
        return combine_styles(
            self.S_g,
            self.S_s if levels >= 2 else torch.zeros_like(self.S_s),
            self.S_w if levels >= 3 else zero,
        ) * self.subword_mask[..., None]


def encode_reference(mel, encoder: ReferenceEncoder, lengths=None) -> torch.Tensor:
    """Reference embedding of one segment ``(T, n_mels)`` or a padded batch ``(B, T, n_mels)``."""
    x = mel if torch.is_tensor(mel) else torch.as_tensor(np.asarray(mel), dtype=torch.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] < 1:
        raise ContractError("reference segment must have at least one frame")
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
    out = encoder(x, torch.as_tensor(lengths, dtype=torch.long))
    return out[0] if single else out


def compute_residuals(E_g, E_s, E_w):
    """Residual embeddings across levels.

    Accepts a single window (``E_g``/``E_s`` of shape ``(D,)``, ``E_w`` of
    shape ``(n, D)``) or a batch with a leading batch axis on all three.
    Works on numpy arrays and torch tensors alike.
    """
    D = E_g.shape[-1]
    if E_s.shape[-1] != D or E_w.shape[-1] != D:
        raise ContractError(f"embedding widths differ: {E_g.shape[-1]}, {E_s.shape[-1]}, {E_w.shape[-1]}")
    if E_w.ndim < 2 or E_w.shape[-2] < 1:
        raise ContractError("need at least one subword embedding")
    R_g = E_g
    R_s = E_s - E_g
    R_w = E_w - E_s[..., None, :]
    return R_g, R_s, R_w


def style_token_attention(residual, bank: StyleTokenLayer, return_weights: bool = False):
    """Style embedding(s) for a residual ``(D,)`` or batch ``(N, D)``."""
    r = residual if torch.is_tensor(residual) else torch.as_tensor(np.asarray(residual), dtype=torch.float32)
    single = r.ndim == 1
    out = bank(r[None] if single else r, return_weights=return_weights)
    if not single:
        return out
    if return_weights:
        return out[0][0], out[1][0]
    return out[0]


def combine_styles(S_g: torch.Tensor, S_s: torch.Tensor, S_w: torch.Tensor) -> torch.Tensor:
    """``S_g + S_s + S_w[i]`` for every subword; shapes ``(..., D)``, ``(..., D)``, ``(..., W, D)``."""
    return (S_g + S_s)[..., None, :] + S_w


def scatter_subwords(flat: torch.Tensor, seg_batch: torch.Tensor, seg_pos: torch.Tensor, batch_size: int, max_w: int):
    out = flat.new_zeros(batch_size, max_w, flat.shape[-1])
    out[seg_batch, seg_pos] = flat
    return out


class MultiScaleExtractor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.levels = nn.ModuleDict({name: ExtractorLevel(config) for name in LEVELS})

    def forward(self, batch, levels: int = 3) -> ExtractorOutput:
        """Run the first ``levels`` levels on a :class:`~msstyle.batch.Batch`.

        Levels that are not run yield zero style embeddings.
        """
        g, s, w = (self.levels[n] for n in LEVELS)
        B = batch.mel.shape[0]
        W = int(batch.n_subwords.max())
        E_g = g.encoder(batch.global_mel, batch.global_len)
        E_s = E_g
        if levels >= 2:
            E_s = s.encoder(batch.mel, batch.mel_len)
        if levels >= 3:
            E_w = scatter_subwords(w.encoder(batch.seg_mel, batch.seg_len), batch.seg_batch, batch.seg_pos, B, W)
        else:
            E_w = E_s[:, None, :].expand(B, W, E_s.shape[-1])
        R_g, R_s, R_w = compute_residuals(E_g, E_s, E_w)

        S_g, wg = g.tokens(R_g, return_weights=True)
        weights = {"global": wg}
        S_s = torch.zeros_like(S_g)
        S_w = S_g.new_zeros(B, W, S_g.shape[-1])
        if levels >= 2:
            S_s, weights["sentence"] = s.tokens(R_s, return_weights=True)
        if levels >= 3:
            S_w_flat, weights["subword"] = w.tokens(R_w[batch.seg_batch, batch.seg_pos], return_weights=True)
            S_w = scatter_subwords(S_w_flat, batch.seg_batch, batch.seg_pos, B, W)
        mask = batch.subword_mask
        return ExtractorOutput(E_g, E_s, E_w, S_g, S_s, S_w, mask, weights)


def extract_multiscale(window, extractor: MultiScaleExtractor, featurizer=None):
    """Single-window extraction returning ``(S_g, S_s, S_w, combined)`` tensors.

    ``S_w`` and ``combined`` have one row per subword of the current sentence.
    """
    from msstyle.batch import Featurizer

    featurizer = featurizer or Featurizer(extractor.config)
    batch = featurizer.collate([featurizer.example(window)])
    out = extractor(batch)
    n = int(batch.n_subwords[0])
    return out.S_g[0], out.S_s[0], out.S_w[0, :n], out.combined()[0, :n]
