"""Deterministic synthetic corpus.

Every sentence is a string of syllables from a small fixed vocabulary. Audio
is rendered as a harmonic source shaped by per-phoneme formants (voiced) or
band-limited noise (unvoiced). Prosody is layered the same way the style
model sees it:

* chapter mood (calm / excited) shifts pitch, loudness and tempo for a run of
  ``chapter_size`` consecutive sentences, and biases word choice;
* sentence type (statement / question / exclamation), signalled by a final
  particle, shifts the sentence contour;
* stressed syllables get a local pitch and energy accent.

Ground-truth pitch is written directly rather than estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfilt

from msstyle.corpus.features import compute_mel, frame_energy
from msstyle.corpus.types import AlignmentMap, MelConfig, Utterance
from msstyle.errors import ContractError

# name -> (kind, formants or noise band in Hz, base duration in frames)
PHONEMES: dict[str, tuple[str, tuple[float, float], int]] = {
    "a": ("vowel", (800.0, 1300.0), 7),
    "e": ("vowel", (500.0, 1900.0), 6),
    "i": ("vowel", (300.0, 2300.0), 6),
    "o": ("vowel", (500.0, 900.0), 7),
    "u": ("vowel", (350.0, 800.0), 6),
    "m": ("voiced", (250.0, 1200.0), 4),
    "n": ("voiced", (250.0, 1600.0), 4),
    "l": ("voiced", (400.0, 1200.0), 4),
    "s": ("unvoiced", (4000.0, 7000.0), 5),
    "sh": ("unvoiced", (2500.0, 5000.0), 5),
    "f": ("unvoiced", (1000.0, 4000.0), 4),
    "k": ("unvoiced", (1500.0, 3500.0), 3),
    "t": ("unvoiced", (3000.0, 6000.0), 3),
}
PHONEME_INVENTORY: tuple[str, ...] = tuple(sorted(PHONEMES))

SYLLABLES: dict[str, tuple[str, ...]] = {
    "ma": ("m", "a"), "ni": ("n", "i"), "shu": ("sh", "u"), "ko": ("k", "o"),
    "ta": ("t", "a"), "fe": ("f", "e"), "lo": ("l", "o"), "san": ("s", "a", "n"),
    "min": ("m", "i", "n"), "ku": ("k", "u"), "se": ("s", "e"), "li": ("l", "i"),
    "na": ("n", "a"), "to": ("t", "o"), "e": ("e",), "o": ("o",),
    # sentence-final particles
    "la": ("l", "a"), "ne": ("n", "e"),
}
CONTENT_WORDS = tuple(w for w in SYLLABLES if w not in ("la", "ne"))
EXCITED_WORDS = ("ta", "ku", "to", "ko", "shu")
STRESSED = frozenset({"ta", "ko", "san", "min", "shu"})

SENTENCE_TYPES = ("statement", "question", "exclamation")


@dataclass(frozen=True)
class ToyCorpusSpec:
    min_subwords: int = 3
    max_subwords: int = 6
    chapter_size: int = 8
    base_f0: float = 120.0
    amplitude: float = 0.1
    mel_config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        if not 1 <= self.min_subwords <= self.max_subwords:
            raise ContractError("need 1 <= min_subwords <= max_subwords")
        if self.chapter_size < 1:
            raise ContractError("chapter_size must be >= 1")


def _semitones(x):
    return 2.0 ** (np.asarray(x) / 12.0)


def _chapter_mood(seed: int, chapter: int) -> str:
    rng = np.random.default_rng([seed, 1_000_003, chapter])
    return "excited" if rng.random() < 0.5 else "calm"


def _sample_sentence(rng: np.random.Generator, spec: ToyCorpusSpec, mood: str):
    n = int(rng.integers(spec.min_subwords, spec.max_subwords + 1))
    kind = SENTENCE_TYPES[int(rng.choice(3, p=[0.6, 0.2, 0.2]))]
    weights = np.array([3.0 if (w in EXCITED_WORDS) == (mood == "excited") else 1.0 for w in CONTENT_WORDS])
    n_content = n - 1 if kind != "statement" and n > 1 else n
    words = [CONTENT_WORDS[int(i)] for i in rng.choice(len(CONTENT_WORDS), size=n_content, p=weights / weights.sum())]
    if n_content < n:
        words.append("ne" if kind == "question" else "la")
    return words, kind


def _render(
    rng: np.random.Generator,
    words: list[str],
    kind: str,
    mood: str,
    spec: ToyCorpusSpec,
):
    cfg = spec.mel_config
    tempo = 0.8 if mood == "excited" else 1.0
    mood_st = 3.0 if mood == "excited" else -2.0
    mood_gain = 1.3 if mood == "excited" else 0.8
    sent_st = mood_st + rng.normal(0.0, 1.0) + (2.0 if kind == "exclamation" else 0.0)
    sent_gain = mood_gain * (1.2 if kind == "exclamation" else 1.0)

    phonemes, durations, spans, ph_st, ph_gain = [], [], [], [], []
    for wi, w in enumerate(words):
        first = len(phonemes)
        stressed = w in STRESSED
        accent = (2.0 if stressed else 0.0) + rng.normal(0.0, 0.5)
        for p in SYLLABLES[w]:
            base = PHONEMES[p][2] * tempo * (1.2 if stressed else 1.0)
            d = max(2, int(round(base + rng.integers(-1, 2))))
            phonemes.append(p)
            durations.append(d)
            ph_st.append(sent_st + accent)
            ph_gain.append(sent_gain * (1.3 if stressed else 1.0))
        spans.append((first, len(phonemes) - 1))

    T = int(sum(durations))
    frame_ph = np.repeat(np.arange(len(phonemes)), durations)
    # declination across the sentence, rising tail for questions
    pos = np.linspace(0.0, 1.0, T)
    contour = -2.0 * pos
    if kind == "question":
        last_first = int(np.sum(durations[: spans[-1][0]]))
        tail = np.clip((np.arange(T) - last_first) / max(1, T - last_first), 0.0, 1.0)
        contour = contour + 5.0 * tail
    frame_f0 = spec.base_f0 * _semitones(np.asarray(ph_st)[frame_ph] + contour)
    voiced_ph = np.array([PHONEMES[p][0] != "unvoiced" for p in phonemes])
    frame_voiced = voiced_ph[frame_ph]
    pitch = np.where(frame_voiced, frame_f0, 0.0)

    hop = cfg.hop_size
    n_samples = (T - 1) * hop + hop // 2 + 1
    sample_frame = np.minimum(T - 1, (np.arange(n_samples) + hop // 2) // hop)
    sample_ph = frame_ph[sample_frame]
    f0_s = np.interp(np.arange(n_samples) / hop, np.arange(T), frame_f0)
    phase = 2 * np.pi * np.cumsum(f0_s) / cfg.sample_rate
    gain_s = np.convolve(np.asarray(ph_gain)[sample_ph], np.ones(hop // 2) / (hop // 2), mode="same")

    ph_kind = np.array([PHONEMES[p][0] for p in phonemes])
    f1 = np.array([PHONEMES[p][1][0] for p in phonemes])[sample_ph]
    f2 = np.array([PHONEMES[p][1][1] for p in phonemes])[sample_ph]
    n_harm = int(cfg.sample_rate / 2 // (spec.base_f0 * 2))
    wave = np.zeros(n_samples)
    for h in range(1, n_harm + 1):
        fh = h * f0_s
        env = np.exp(-0.5 * ((fh - f1) / 150.0) ** 2) + 0.7 * np.exp(-0.5 * ((fh - f2) / 200.0) ** 2)
        env += 0.05 * np.exp(-fh / 1500.0)
        env[fh >= cfg.sample_rate / 2] = 0.0
        wave += env * np.sin(h * phase)
    voiced_scale = np.where(ph_kind == "vowel", 1.0, np.where(ph_kind == "voiced", 0.5, 0.0))[sample_ph]
    wave *= voiced_scale

    noise = rng.normal(0.0, 1.0, n_samples)
    for p in {p for p in phonemes if PHONEMES[p][0] == "unvoiced"}:
        lo, hi = PHONEMES[p][1]
        sos = butter(4, [lo, min(hi, cfg.sample_rate / 2 - 1)], btype="band", fs=cfg.sample_rate, output="sos")
        mask = np.array([q == p for q in phonemes])[sample_ph]
        wave += 0.8 * sosfilt(sos, noise) * mask

    wave = spec.amplitude * gain_s * wave
    return wave, phonemes, durations, spans, pitch


def generate_toy_corpus(
    seed: int,
    n_utterances: int,
    spec: ToyCorpusSpec | None = None,
    with_audio: bool = False,
):
    """Build ``n_utterances`` synthetic utterances in narrative order.

    The same ``seed`` always produces a bit-identical corpus, and utterance
    ``i`` does not depend on ``n_utterances``.

    Returns:
        A list of :class:`Utterance`, or ``(utterances, waveforms)`` when
        ``with_audio`` is set.
    """
    spec = spec or ToyCorpusSpec()
    if n_utterances < 1:
        raise ContractError("n_utterances must be >= 1")
    utterances, waves = [], []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        mood = _chapter_mood(seed, i // spec.chapter_size)
        words, kind = _sample_sentence(rng, spec, mood)
        wave, phonemes, durations, spans, pitch = _render(rng, words, kind, mood, spec)
        mel = compute_mel(wave, spec.mel_config)
        utt = Utterance(
            id=f"toy-{i:04d}",
            text=" ".join(words),
            subwords=tuple(words),
            phonemes=tuple(phonemes),
            mel=mel,
            alignment=AlignmentMap(tuple(durations), tuple(spans)),
            pitch=pitch,
            energy=frame_energy(mel),
        )
        utt.validate()
        utterances.append(utt)
        waves.append(wave.astype(np.float32))
    return (utterances, waves) if with_audio else utterances
