"""Turn context windows into padded tensor batches shared by all model parts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from msstyle.config import ModelConfig
from msstyle.corpus.features import (
    average_by_duration,
    build_context_window,
    concat_window_mels,
    subword_frame_boundaries,
    subword_segments,
)
from msstyle.corpus.types import ContextWindow, Utterance
from msstyle.embedders import HashEmbedder
from msstyle.errors import ContractError


@dataclass(frozen=True)
class PhonemeInventory:
    """Closed phoneme set; id 0 is reserved for padding."""

    symbols: tuple[str, ...]

    def __len__(self):
        return len(self.symbols)

    def ids(self, phonemes: Sequence[str]) -> np.ndarray:
        lookup = {p: i + 1 for i, p in enumerate(self.symbols)}
        try:
            return np.array([lookup[p] for p in phonemes], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"phoneme {e.args[0]!r} not in inventory") from None

    @classmethod
    def from_corpus(cls, corpus: Sequence[Utterance]) -> "PhonemeInventory":
        return cls(tuple(sorted({p for u in corpus for p in u.phonemes})))


@dataclass(frozen=True)
class FeatureStats:
    """Z-score statistics for phoneme-level pitch and energy, plus normalised ranges."""

    pitch_mean: float
    pitch_std: float
    pitch_min: float
    pitch_max: float
    energy_mean: float
    energy_std: float
    energy_min: float
    energy_max: float

    @classmethod
    def from_corpus(cls, corpus: Sequence[Utterance]) -> "FeatureStats":
        pitch = np.concatenate([average_by_duration(u.pitch, u.alignment.phoneme_durations) for u in corpus])
        energy = np.concatenate([average_by_duration(u.energy, u.alignment.phoneme_durations) for u in corpus])
        pm, ps = float(pitch.mean()), float(pitch.std()) or 1.0
        em, es = float(energy.mean()), float(energy.std()) or 1.0
        return cls(
            pm, ps, float((pitch.min() - pm) / ps), float((pitch.max() - pm) / ps),
            em, es, float((energy.min() - em) / es), float((energy.max() - em) / es),
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**d)


@dataclass
class WindowExample:
    id: str
    global_mel: np.ndarray
    mel: np.ndarray
    segments: list
    sem: list
    phoneme_ids: np.ndarray | None = None
    subword_of: np.ndarray | None = None
    durations: np.ndarray | None = None
    pitch: np.ndarray | None = None
    energy: np.ndarray | None = None


@dataclass
class Batch:
    ids: list
    global_mel: torch.Tensor
    global_len: torch.Tensor
    mel: torch.Tensor
    mel_len: torch.Tensor
    seg_mel: torch.Tensor
    seg_len: torch.Tensor
    seg_batch: torch.Tensor
    seg_pos: torch.Tensor
    n_subwords: torch.Tensor
    sem: torch.Tensor
    sem_len: torch.Tensor
    phonemes: torch.Tensor | None = None
    phone_len: torch.Tensor | None = None
    subword_of: torch.Tensor | None = None
    durations: torch.Tensor | None = None
    pitch: torch.Tensor | None = None
    energy: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return self.mel.shape[0]

    @property
    def subword_mask(self) -> torch.Tensor:
        W = int(self.n_subwords.max())
        return torch.arange(W)[None, :] < self.n_subwords[:, None]

    @property
    def phone_mask(self) -> torch.Tensor:
        return torch.arange(self.phonemes.shape[1])[None, :] < self.phone_len[:, None]

    @property
    def frame_mask(self) -> torch.Tensor:
        return torch.arange(self.mel.shape[1])[None, :] < self.mel_len[:, None]


def _pad_stack(arrays, dtype=np.float32, value=0.0):
    lens = [len(a) for a in arrays]
    shape = (len(arrays), max(lens), *arrays[0].shape[1:])
    out = np.full(shape, value, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return torch.from_numpy(out), torch.tensor(lens, dtype=torch.long)


class Featurizer:
    """Converts windows to :class:`WindowExample` and collates them.

    Phoneme-level fields are only produced when an inventory and feature
    statistics are supplied; the extractor and predictor do not need them.
    """

    def __init__(self, config: ModelConfig, inventory: PhonemeInventory | None = None,
                 stats: FeatureStats | None = None, embedder=None):
        self.config = config
        self.inventory = inventory
        self.stats = stats
        self.embedder = embedder or HashEmbedder(config.d_sem)
        if self.embedder.dim != config.d_sem:
            raise ContractError(f"embedder width {self.embedder.dim} != d_sem {config.d_sem}")

    def example(self, window: ContextWindow) -> WindowExample:
        from msstyle.predictor import embed_subwords

        cur = window.current
        ex = WindowExample(
            id=cur.id,
            global_mel=concat_window_mels(window, self.config.max_global_frames),
            mel=cur.mel.frames,
            segments=subword_segments(cur.mel, subword_frame_boundaries(cur.alignment)),
            sem=embed_subwords(window.texts(), self.embedder),
        )
        if self.inventory is not None and self.stats is not None:
            st = self.stats
            durs = cur.alignment.phoneme_durations
            ex.phoneme_ids = self.inventory.ids(cur.phonemes)
            ex.subword_of = cur.alignment.subword_of()
            ex.durations = np.asarray(durs, dtype=np.int64)
            ex.pitch = ((average_by_duration(cur.pitch, durs) - st.pitch_mean) / st.pitch_std).astype(np.float32)
            ex.energy = ((average_by_duration(cur.energy, durs) - st.energy_mean) / st.energy_std).astype(np.float32)
        return ex

    def collate(self, examples: Sequence[WindowExample]) -> Batch:
        global_mel, global_len = _pad_stack([e.global_mel for e in examples])
        mel, mel_len = _pad_stack([e.mel for e in examples])
        segs, seg_batch, seg_pos = [], [], []
        for b, e in enumerate(examples):
            for i, s in enumerate(e.segments):
                segs.append(s)
                seg_batch.append(b)
                seg_pos.append(i)
        seg_mel, seg_len = _pad_stack(segs)
        n_sent = len(examples[0].sem)
        sem_rows = [s for e in examples for s in e.sem]
        sem_flat, sem_len = _pad_stack(sem_rows)
        batch = Batch(
            ids=[e.id for e in examples],
            global_mel=global_mel, global_len=global_len, mel=mel, mel_len=mel_len,
            seg_mel=seg_mel, seg_len=seg_len,
            seg_batch=torch.tensor(seg_batch, dtype=torch.long),
            seg_pos=torch.tensor(seg_pos, dtype=torch.long),
            n_subwords=torch.tensor([len(e.segments) for e in examples], dtype=torch.long),
            sem=sem_flat.view(len(examples), n_sent, *sem_flat.shape[1:]),
            sem_len=sem_len.view(len(examples), n_sent),
        )
        if examples[0].phoneme_ids is not None:
            batch.phonemes, batch.phone_len = _pad_stack([e.phoneme_ids for e in examples], dtype=np.int64)
            batch.subword_of, _ = _pad_stack([e.subword_of for e in examples], dtype=np.int64)
            batch.durations, _ = _pad_stack([e.durations for e in examples], dtype=np.int64)
            batch.pitch, _ = _pad_stack([e.pitch for e in examples])
            batch.energy, _ = _pad_stack([e.energy for e in examples])
        return batch


class WindowDataset:
    """Context windows over an ordered corpus, featurised lazily and cached."""

    def __init__(self, corpus: Sequence[Utterance], featurizer: Featurizer):
        if not corpus:
            raise ContractError("corpus is empty")
        self.corpus = list(corpus)
        self.featurizer = featurizer
        radius = featurizer.config.context_radius
        pad = Utterance.padding(self.corpus[0].mel.config)
        self.windows = [build_context_window(self.corpus, i, radius, pad) for i in range(len(self.corpus))]
        self._examples: dict[int, WindowExample] = {}

    def __len__(self):
        return len(self.windows)

    def example(self, i: int) -> WindowExample:
        ex = self._examples.get(i)
        if ex is None:
            ex = self._examples[i] = self.featurizer.example(self.windows[i])
        return ex

    def batch(self, indices: Sequence[int]) -> Batch:
        return self.featurizer.collate([self.example(int(i)) for i in indices])
