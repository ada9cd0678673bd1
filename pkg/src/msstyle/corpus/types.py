"""Data model for utterances, alignments and context windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from msstyle.errors import ContractError, InvariantError

PAD_ID = "<pad>"


@dataclass(frozen=True)
class MelConfig:
    """Feature extraction settings. Defaults: 24 kHz, 1200/240 framing, 80 mels."""

    sample_rate: int = 24000
    frame_size: int = 1200
    hop_size: int = 240
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = math.log(1e-5)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.hop_size <= self.frame_size:
            raise ContractError(
                f"need 0 < hop_size <= frame_size, got hop={self.hop_size} frame={self.frame_size}"
            )
        if self.n_mels < 1:
            raise ContractError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ContractError(f"bad mel band [{self.fmin}, {self.fmax}] for sr={self.sample_rate}")
        if not math.isfinite(self.log_floor):
            raise ContractError("log_floor must be finite")

    def to_dict(self) -> dict:
        return dict(
            sample_rate=self.sample_rate, frame_size=self.frame_size, hop_size=self.hop_size,
            n_mels=self.n_mels, fmin=self.fmin, fmax=self.fmax, log_floor=self.log_floor,
        )


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-amplitude mel frames, shape ``(T, n_mels)``, stored as float32."""

    frames: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != self.config.n_mels:
            raise InvariantError(f"mel frames must be (T, {self.config.n_mels}), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InvariantError("mel frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def segment(self, start: int, stop: int) -> "MelSpectrogram":
        return MelSpectrogram(self.frames[start:stop], self.config)


class FrameRange(NamedTuple):
    """Half-open frame interval ``[start, stop)``."""

    start: int
    stop: int

    @property
    def empty(self) -> bool:
        return self.stop <= self.start

    def __len__(self) -> int:  # type: ignore[override]
        return max(0, self.stop - self.start)


@dataclass(frozen=True)
class AlignmentMap:
    """Phoneme durations (frames) and subword spans over phoneme indices.

    ``subword_spans[i] = (first, last)`` with an *inclusive* last index, the
    same convention used by the alignment file format.
    """

    phoneme_durations: tuple[int, ...]
    subword_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "phoneme_durations", tuple(int(d) for d in self.phoneme_durations))
        object.__setattr__(
            self, "subword_spans", tuple((int(a), int(b)) for a, b in self.subword_spans)
        )
        self.validate()

    def validate(self) -> None:
        durs = self.phoneme_durations
        if any(d < 0 for d in durs):
            raise InvariantError(f"negative phoneme duration in {durs}")
        n = len(durs)
        expected = 0
        for first, last in self.subword_spans:
            if first != expected or last < first:
                raise InvariantError(
                    f"subword spans must be contiguous and non-empty: {self.subword_spans}"
                )
            expected = last + 1
        if expected != n:
            raise InvariantError(f"subword spans cover {expected} of {n} phonemes")

    @property
    def n_frames(self) -> int:
        return sum(self.phoneme_durations)

    @property
    def n_phonemes(self) -> int:
        return len(self.phoneme_durations)

    @property
    def n_subwords(self) -> int:
        return len(self.subword_spans)

    def subword_of(self) -> np.ndarray:
        """Per-phoneme subword index."""
        out = np.empty(self.n_phonemes, dtype=np.int64)
        for i, (first, last) in enumerate(self.subword_spans):
            out[first:last + 1] = i
        return out


@dataclass(frozen=True)
class Utterance:
    id: str
    text: str
    subwords: tuple[str, ...]
    phonemes: tuple[str, ...]
    mel: MelSpectrogram
    alignment: AlignmentMap
    pitch: np.ndarray
    energy: np.ndarray
    is_padding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "subwords", tuple(self.subwords))
        object.__setattr__(self, "phonemes", tuple(self.phonemes))
        object.__setattr__(self, "pitch", np.asarray(self.pitch, dtype=np.float32))
        object.__setattr__(self, "energy", np.asarray(self.energy, dtype=np.float32))

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames

    def validate(self) -> None:
        """Raise :class:`InvariantError` if any cross-field invariant fails."""
        if self.is_padding:
            return
        T = self.n_frames
        if len(self.pitch) != T or len(self.energy) != T:
            raise InvariantError(
                f"{self.id}: pitch/energy lengths {len(self.pitch)}/{len(self.energy)} != {T} frames"
            )
        if self.alignment.n_frames != T:
            raise InvariantError(
                f"{self.id}: durations sum to {self.alignment.n_frames}, mel has {T} frames"
            )
        if self.alignment.n_phonemes != len(self.phonemes):
            raise InvariantError(
                f"{self.id}: {len(self.phonemes)} phonemes but {self.alignment.n_phonemes} durations"
            )
        if self.alignment.n_subwords != len(self.subwords):
            raise InvariantError(
                f"{self.id}: {len(self.subwords)} subwords but {self.alignment.n_subwords} spans"
            )
        if not np.all(np.isfinite(self.pitch)) or not np.all(np.isfinite(self.energy)):
            raise InvariantError(f"{self.id}: non-finite pitch or energy")

    @classmethod
    def padding(cls, config: MelConfig) -> "Utterance":
        """The canonical empty utterance used beyond corpus edges."""
        frames = np.full((1, config.n_mels), config.log_floor, dtype=np.float32)
        floor_energy = math.sqrt(config.n_mels) * math.exp(config.log_floor)
        return cls(
            id=PAD_ID, text="", subwords=(), phonemes=(),
            mel=MelSpectrogram(frames, config),
            alignment=AlignmentMap((), ()),
            pitch=np.zeros(1), energy=np.full(1, floor_energy),
            is_padding=True,
        )


@dataclass(frozen=True)
class ContextWindow:
    past: tuple[Utterance, ...]
    current: Utterance
    future: tuple[Utterance, ...]
    radius: int

    def __post_init__(self):
        if len(self.past) != self.radius or len(self.future) != self.radius:
            raise InvariantError(
                f"window needs {self.radius} past and future utterances, "
                f"got {len(self.past)}/{len(self.future)}"
            )

    @property
    def utterances(self) -> list[Utterance]:
        return [*self.past, self.current, *self.future]

    def __len__(self) -> int:
        return 2 * self.radius + 1

    def texts(self) -> list[tuple[str, ...]]:
        """Subword token sequences of all 2L+1 sentences, in order."""
        return [u.subwords for u in self.utterances]


def check_corpus(corpus: Sequence[Utterance]) -> None:
    for utt in corpus:
        utt.validate()
