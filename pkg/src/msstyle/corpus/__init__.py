"""Corpus data model, feature extraction and the synthetic toy corpus."""

from msstyle.corpus.features import (
    average_by_duration,
    build_context_window,
    compute_mel,
    concat_window_mels,
    estimate_pitch,
    expand_by_duration,
    frame_energy,
    mel_center_frequencies,
    mel_filterbank,
    subword_frame_boundaries,
    subword_segments,
)
from msstyle.corpus.toy import PHONEME_INVENTORY, ToyCorpusSpec, generate_toy_corpus
from msstyle.corpus.types import (
    AlignmentMap,
    ContextWindow,
    FrameRange,
    MelConfig,
    MelSpectrogram,
    Utterance,
)

__all__ = [
    "AlignmentMap", "ContextWindow", "FrameRange", "MelConfig", "MelSpectrogram", "Utterance",
    "PHONEME_INVENTORY", "ToyCorpusSpec", "average_by_duration", "build_context_window",
    "compute_mel", "concat_window_mels", "estimate_pitch", "expand_by_duration", "frame_energy",
    "generate_toy_corpus", "mel_center_frequencies", "mel_filterbank",
    "subword_frame_boundaries", "subword_segments",
]
