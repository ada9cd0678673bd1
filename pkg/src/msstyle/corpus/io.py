"""On-disk formats: JSON-lines manifest, alignment JSON, TextGrid import, feature blobs."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile

from msstyle.corpus.features import compute_mel, estimate_pitch, frame_energy
from msstyle.corpus.types import AlignmentMap, MelConfig, MelSpectrogram, Utterance
from msstyle.errors import InvalidInputError, InvariantError, MissingInputError, MsStyleError

FEATURE_MAGIC = b"MSSTFEAT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    text: str
    audio_path: str
    alignment_path: str
    order_index: int

    def to_json(self) -> str:
        return json.dumps(
            dict(id=self.id, text=self.text, audio_path=self.audio_path,
                 alignment_path=self.alignment_path, order_index=self.order_index),
            ensure_ascii=False,
        )


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest and return records sorted by ``order_index``."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "manifest")
    records = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ManifestRecord(
                    id=str(obj["id"]), text=str(obj["text"]),
                    audio_path=str(obj["audio_path"]), alignment_path=str(obj["alignment_path"]),
                    order_index=int(obj["order_index"]),
                ))
            except (KeyError, ValueError, TypeError) as e:
                raise InvalidInputError(f"{path}:{lineno}: bad manifest record ({e})") from e
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"{path}: duplicate utterance ids")
    return sorted(records, key=lambda r: r.order_index)


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def write_alignment(path, phonemes, alignment: AlignmentMap) -> None:
    obj = {
        "phonemes": list(phonemes),
        "durations_frames": list(alignment.phoneme_durations),
        "subword_spans": [list(s) for s in alignment.subword_spans],
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def read_alignment(path) -> tuple[tuple[str, ...], AlignmentMap]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "alignment")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
        phonemes = tuple(str(p) for p in obj["phonemes"])
        alignment = AlignmentMap(tuple(obj["durations_frames"]), tuple(tuple(s) for s in obj["subword_spans"]))
    except (KeyError, ValueError, TypeError) as e:
        raise InvalidInputError(f"{path}: bad alignment file ({e})") from e
    if len(phonemes) != alignment.n_phonemes:
        raise InvariantError(f"{path}: {len(phonemes)} phonemes vs {alignment.n_phonemes} durations")
    return phonemes, alignment


# --- TextGrid import -------------------------------------------------------

_INTERVAL_RE = re.compile(
    r"xmin\s*=\s*([-\d.eE+]+)\s*xmax\s*=\s*([-\d.eE+]+)\s*text\s*=\s*\"(.*?)\"", re.S
)
_TIER_RE = re.compile(r"name\s*=\s*\"(.*?)\"(.*?)(?=item\s*\[\d+\]:|\Z)", re.S)


def parse_textgrid(text: str) -> dict[str, list[tuple[float, float, str]]]:
    """Interval tiers of a long-format Praat TextGrid, keyed by tier name."""
    tiers = {}
    for name, body in _TIER_RE.findall(text):
        tiers[name] = [(float(a), float(b), lab) for a, b, lab in _INTERVAL_RE.findall(body)]
    return tiers


def textgrid_to_alignment(
    text: str,
    config: MelConfig,
    n_frames: int,
    phone_tier: str = "phones",
    word_tier: str = "words",
    silence: frozenset[str] = frozenset({"", "sil", "sp", "spn"}),
) -> tuple[tuple[str, ...], tuple[str, ...], AlignmentMap]:
    """Convert aligner output to ``(subwords, phonemes, AlignmentMap)``.

    Phone boundaries are snapped to the frame grid; silent phones are kept
    (as ``"sil"``) and attached to the preceding subword, or the following
    one at utterance start, so the spans always cover every phoneme. The last
    duration absorbs any rounding difference so durations sum to ``n_frames``.
    """
    tiers = parse_textgrid(text)
    if phone_tier not in tiers or word_tier not in tiers:
        raise InvalidInputError(f"TextGrid needs tiers {phone_tier!r} and {word_tier!r}")
    phones = tiers[phone_tier]
    words = [w for w in tiers[word_tier] if w[2] not in silence]
    if not phones or not words:
        raise InvalidInputError("TextGrid has no phones or no words")
    frames_per_sec = config.sample_rate / config.hop_size
    bounds = [int(round(p[0] * frames_per_sec)) for p in phones] + [n_frames]
    bounds[0] = 0
    durations = [max(0, b - a) for a, b in zip(bounds[:-1], bounds[1:])]
    durations[-1] += n_frames - sum(durations)
    if durations[-1] < 0:
        raise InvariantError("TextGrid phones extend past the mel frame count")
    labels = tuple("sil" if p[2] in silence else p[2] for p in phones)

    owner = []
    for start, end, _ in phones:
        mid = 0.5 * (start + end)
        idx = next((k for k, w in enumerate(words) if w[0] <= mid < w[1]), None)
        owner.append(idx)
    # carry silent phones into the neighbouring subword
    last = None
    for i, o in enumerate(owner):
        if o is None:
            owner[i] = last
        else:
            last = o
    first_owner = next(o for o in owner if o is not None)
    owner = [first_owner if o is None else o for o in owner]

    spans, start = [], 0
    for i in range(1, len(owner) + 1):
        if i == len(owner) or owner[i] != owner[start]:
            spans.append((start, i - 1))
            start = i
    subwords = tuple(words[owner[s]][2] for s, _ in spans)
    return subwords, labels, AlignmentMap(tuple(durations), tuple(spans))


# --- feature blobs ---------------------------------------------------------

def write_feature(path, array: np.ndarray) -> None:
    """8-byte magic, version byte, ndim byte, little-endian uint32 dims, float32 data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<BB", FEATURE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_feature(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "feature cache")
    data = path.read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise InvalidInputError(f"{path}: not a feature blob")
    version, ndim = struct.unpack_from("<BB", data, 8)
    if version != FEATURE_VERSION:
        raise InvalidInputError(f"{path}: unsupported feature blob version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    offset = 10 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(data) - offset != 4 * count:
        raise InvalidInputError(f"{path}: truncated feature blob")
    return np.frombuffer(data, dtype="<f4", offset=offset, count=count).reshape(dims).astype(np.float32)


def cache_paths(cache_dir, utt_id: str) -> dict[str, Path]:
    cache_dir = Path(cache_dir)
    return {k: cache_dir / f"{utt_id}.{k}.bin" for k in ("mel", "pitch", "energy")}


def write_utterance_cache(cache_dir, utt: Utterance) -> None:
    paths = cache_paths(cache_dir, utt.id)
    write_feature(paths["mel"], utt.mel.frames)
    write_feature(paths["pitch"], utt.pitch)
    write_feature(paths["energy"], utt.energy)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def read_wav(path) -> tuple[int, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "audio")
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return sr, data.astype(np.float64)


def load_utterance(record: ManifestRecord, base_dir, config: MelConfig, cache_dir=None) -> Utterance:
    """Load one manifest entry, preferring cached features when present."""
    base_dir = Path(base_dir)
    phonemes, alignment = read_alignment(_resolve(base_dir, record.alignment_path))
    paths = cache_paths(cache_dir, record.id) if cache_dir is not None else None
    if paths is not None and all(p.exists() for p in paths.values()):
        mel = MelSpectrogram(read_feature(paths["mel"]), config)
        pitch, energy = read_feature(paths["pitch"]), read_feature(paths["energy"])
    else:
        sr, wave = read_wav(_resolve(base_dir, record.audio_path))
        if sr != config.sample_rate:
            raise InvalidInputError(f"{record.id}: sample rate {sr} != {config.sample_rate}")
        mel = compute_mel(wave, config)
        pitch, energy = estimate_pitch(wave, config), frame_energy(mel)
    subwords = tuple(record.text.split())
    utt = Utterance(record.id, record.text, subwords, phonemes, mel, alignment, pitch, energy)
    utt.validate()
    return utt


@dataclass
class LoadReport:
    utterances: list[Utterance]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def load_corpus(manifest_path, config: MelConfig | None = None, cache_dir=None) -> LoadReport:
    """Load every manifest entry; bad entries are reported, not fatal."""
    config = config or MelConfig()
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    utterances, failures = [], {}
    for rec in records:
        try:
            utterances.append(load_utterance(rec, manifest_path.parent, config, cache_dir))
        except MsStyleError as e:
            failures[rec.id] = f"{type(e).__name__}: {e}"
    return LoadReport(utterances, failures)


def split_by_chapters(corpus, chapter_size: int, eval_chapters: int = 1):
    """Split into (train, eval) on contiguous chapters so windows never leak across."""
    n_chapters = -(-len(corpus) // chapter_size)
    if eval_chapters <= 0 or n_chapters <= eval_chapters:
        return list(corpus), []
    cut = (n_chapters - eval_chapters) * chapter_size
    return list(corpus[:cut]), list(corpus[cut:])
