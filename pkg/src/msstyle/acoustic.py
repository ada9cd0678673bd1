"""FastSpeech 2-lite acoustic model with per-subword style injection.

Phoneme encoder -> style injection -> variance adaptor (duration, pitch,
energy; length regulation) -> mel decoder. Durations are modelled as
``log(frames + 1)``; pitch and energy are phoneme-level z-scores quantised
into learned bin embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from msstyle.batch import FeatureStats
from msstyle.config import ModelConfig
from msstyle.errors import ContractError


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    i = torch.arange(dim, dtype=torch.float32)[None, :]
    angle = pos / torch.pow(10000.0, 2 * torch.div(i, 2, rounding_mode="floor") / dim)
    return torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))


class FFTBlock(nn.Module):
    """Self-attention followed by a two-layer 1-D conv feed-forward, both post-norm."""

    def __init__(self, d_model, n_heads, ff_hidden, kernel, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.conv1 = nn.Conv1d(d_model, ff_hidden, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(ff_hidden, d_model, 1)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask):
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a)).masked_fill(pad_mask[..., None], 0.0)
        f = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + self.dropout(f)).masked_fill(pad_mask[..., None], 0.0)


class FFTStack(nn.Module):
    def __init__(self, n_layers, d_model, n_heads, ff_hidden, kernel, dropout):
        super().__init__()
        self.layers = nn.ModuleList(
            FFTBlock(d_model, n_heads, ff_hidden, kernel, dropout) for _ in range(n_layers)
        )

    def forward(self, x, mask):
        pad = ~mask
        x = (x + sinusoid_table(x.shape[1], x.shape[2])[None]).masked_fill(pad[..., None], 0.0)
        for layer in self.layers:
            x = layer(x, pad)
        return x


class VariancePredictor(nn.Module):
    def __init__(self, d_model, filters, kernel, dropout):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, filters, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filters)
        self.conv2 = nn.Conv1d(filters, filters, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filters)
        self.out = nn.Linear(filters, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.dropout(self.norm1(F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)))
        h = self.dropout(self.norm2(F.relu(self.conv2(h.transpose(1, 2))).transpose(1, 2)))
        return self.out(h).squeeze(-1).masked_fill(~mask, 0.0)


def length_regulate(hidden: torch.Tensor, durations: torch.Tensor, lengths: torch.Tensor):
    """Repeat each phoneme hidden ``durations[p]`` times; returns padded frames and frame counts."""
    rows = [torch.repeat_interleave(hidden[b, : lengths[b]], durations[b, : lengths[b]], dim=0)
            for b in range(hidden.shape[0])]
    frame_len = torch.tensor([len(r) for r in rows], dtype=torch.long)
    T = max(1, int(frame_len.max()))
    out = hidden.new_zeros(hidden.shape[0], T, hidden.shape[2])
    for b, r in enumerate(rows):
        out[b, : len(r)] = r
    return out, frame_len


def durations_from_log(log_dur: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Invert the ``log(d + 1)`` domain: round to the nearest non-negative integer.

    An utterance whose durations all round to zero gets one frame on its
    longest-predicted phoneme.
    """
    d = torch.clamp(torch.round(torch.exp(log_dur) - 1.0), min=0).long() * mask
    for b in range(d.shape[0]):
        if d[b].sum() == 0 and mask[b].any():
            d[b, int(log_dur[b].masked_fill(~mask[b], float("-inf")).argmax())] = 1
    return d


@dataclass
class VarianceOutput:
    expanded: torch.Tensor
    frame_len: torch.Tensor
    log_dur_pred: torch.Tensor
    pitch_pred: torch.Tensor
    energy_pred: torch.Tensor
    durations: torch.Tensor


class VarianceAdaptor(nn.Module):
    def __init__(self, config: ModelConfig, stats: FeatureStats):
        super().__init__()
        args = (config.d_model, config.variance_filter, config.variance_kernel, config.variance_dropout)
        self.duration_predictor = VariancePredictor(*args)
        self.pitch_predictor = VariancePredictor(*args)
        self.energy_predictor = VariancePredictor(*args)
        self.register_buffer("pitch_bins", torch.linspace(stats.pitch_min, stats.pitch_max, config.n_bins - 1))
        self.register_buffer("energy_bins", torch.linspace(stats.energy_min, stats.energy_max, config.n_bins - 1))
        self.pitch_embedding = nn.Embedding(config.n_bins, config.d_model)
        self.energy_embedding = nn.Embedding(config.n_bins, config.d_model)

    def forward(self, x, mask, durations=None, pitch=None, energy=None) -> VarianceOutput:
        log_dur = self.duration_predictor(x, mask)
        pitch_pred = self.pitch_predictor(x, mask)
        x = x + self.pitch_embedding(torch.bucketize(pitch if pitch is not None else pitch_pred.detach(), self.pitch_bins))
        energy_pred = self.energy_predictor(x, mask)
        x = x + self.energy_embedding(torch.bucketize(energy if energy is not None else energy_pred.detach(), self.energy_bins))
        if durations is None:
            durations = durations_from_log(log_dur.detach(), mask)
        lengths = mask.sum(dim=1)
        expanded, frame_len = length_regulate(x, durations, lengths)
        return VarianceOutput(expanded, frame_len, log_dur, pitch_pred, energy_pred, durations)


@dataclass
class AcousticOutput:
    mel: torch.Tensor
    frame_len: torch.Tensor
    log_dur_pred: torch.Tensor
    pitch_pred: torch.Tensor
    energy_pred: torch.Tensor
    durations: torch.Tensor

    @property
    def frame_mask(self) -> torch.Tensor:
        return torch.arange(self.mel.shape[1])[None, :] < self.frame_len[:, None]


class AcousticModel(nn.Module):
    def __init__(self, config: ModelConfig, n_phonemes: int, stats: FeatureStats):
        super().__init__()
        self.config = config
        self.n_phonemes = n_phonemes
        self.embedding = nn.Embedding(n_phonemes + 1, config.d_model, padding_idx=0)
        blocks = (config.d_model, config.attn_heads, config.ff_hidden, config.ff_kernel, config.dropout)
        self.encoder = FFTStack(config.encoder_layers, *blocks)
        self.style_proj = (
            nn.Linear(config.d_style, config.d_model, bias=False)
            if config.d_style != config.d_model else nn.Identity()
        )
        self.variance = VarianceAdaptor(config, stats)
        self.decoder = FFTStack(config.decoder_layers, *blocks)
        self.mel_out = nn.Linear(config.d_model, config.n_mels)

    def encode(self, phonemes, mask):
        return encode_phonemes(phonemes, self, mask)

    def forward(self, phonemes, mask, subword_of, styles, durations=None, pitch=None, energy=None) -> AcousticOutput:
        """Full synthesis. Pass ground-truth ``durations``/``pitch``/``energy`` to teacher-force."""
        h = self.encode(phonemes, mask)
        h = inject_style(h, styles, subword_of, self.style_proj)
        var = self.variance(h, mask, durations, pitch, energy)
        mel = decode_mel(var.expanded, var.frame_len, self)
        return AcousticOutput(mel, var.frame_len, var.log_dur_pred, var.pitch_pred, var.energy_pred, var.durations)


def encode_phonemes(phonemes: torch.Tensor, model: AcousticModel, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Phoneme ids ``(P,)`` or ``(B, P)`` (1-based, 0 = padding) to hidden vectors."""
    single = phonemes.ndim == 1
    ids = phonemes[None] if single else phonemes
    if mask is None:
        mask = torch.ones_like(ids, dtype=torch.bool)
    valid = ids[mask]
    if torch.any(valid < 1) or torch.any(valid > model.n_phonemes):
        raise ContractError("phoneme id outside the inventory")
    h = model.encoder(model.embedding(ids), mask)
    return h[0] if single else h


def inject_style(hidden: torch.Tensor, styles: torch.Tensor, subword_of: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    """``out[p] = hidden[p] + proj(styles[subword_of[p]])``; batched or single-utterance."""
    single = hidden.ndim == 2
    if single:
        hidden, styles, subword_of = hidden[None], styles[None], subword_of[None]
    if subword_of.shape[:2] != hidden.shape[:2]:
        raise ContractError("subword_of must have one entry per phoneme")
    if subword_of.numel() and int(subword_of.max()) >= styles.shape[1]:
        raise ContractError(f"subword index {int(subword_of.max())} but only {styles.shape[1]} styles")
    per_phone = torch.gather(styles, 1, subword_of[..., None].expand(-1, -1, styles.shape[-1]))
    out = hidden + proj(per_phone)
    return out[0] if single else out


def variance_adapt(hidden, mask, adaptor: VarianceAdaptor, targets=None) -> VarianceOutput:
    """Run the adaptor; ``targets`` is ``(durations, pitch, energy)`` or ``None`` for inference."""
    if targets is None:
        return adaptor(hidden, mask)
    durations, pitch, energy = targets
    return adaptor(hidden, mask, durations, pitch, energy)


def decode_mel(expanded: torch.Tensor, frame_len: torch.Tensor, model: AcousticModel) -> torch.Tensor:
    if int(frame_len.min()) < 1:
        raise ContractError("every utterance needs at least one frame to decode")
    mask = torch.arange(expanded.shape[1])[None, :] < frame_len[:, None]
    return model.mel_out(model.decoder(expanded, mask)) * mask[..., None]


def acoustic_losses(out: AcousticOutput, mel_target, frame_mask, durations, pitch, energy, phone_mask) -> dict:
    """Masked mel L1 plus MSE on log-duration, pitch and energy (unit weights)."""
    fm = frame_mask[..., None].float()
    n_bins = mel_target.shape[-1]
    T = min(out.mel.shape[1], mel_target.shape[1])
    mel_l1 = (torch.abs(out.mel[:, :T] - mel_target[:, :T]) * fm[:, :T]).sum() / (fm.sum() * n_bins)
    pm = phone_mask.float()
    n = pm.sum()
    log_target = torch.log(durations.float() + 1.0)
    dur = (((out.log_dur_pred - log_target) ** 2) * pm).sum() / n
    pit = (((out.pitch_pred - pitch) ** 2) * pm).sum() / n
    ene = (((out.energy_pred - energy) ** 2) * pm).sum() / n
    return {"mel": mel_l1, "duration": dur, "pitch": pit, "energy": ene}


def log_duration(frames: torch.Tensor) -> torch.Tensor:
    return torch.log(frames.float() + 1.0)

