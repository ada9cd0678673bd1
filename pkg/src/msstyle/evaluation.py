"""Objective evaluation: DTW-aligned F0 and energy RMSE, duration MSE.

Predicted and reference mels are aligned once with DTW and the same path
is reused for F0 and energy. In toy mode the predicted F0 track is the
model's own phoneme-level pitch prediction expanded by its predicted
durations, which keeps evaluation free of a vocoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from msstyle.batch import Featurizer, WindowDataset
from msstyle.corpus.features import expand_by_duration, frame_energy
from msstyle.corpus.types import MelSpectrogram, Utterance
from msstyle.errors import ContractError, InvalidInputError, MsStyleError

# Below this a predicted F0 value counts as unvoiced; matches the lower end
# of the pitch estimator's search range.
VOICING_THRESHOLD_HZ = 60.0

# Published full-scale numbers on a proprietary corpus; context
# only, never a test target.
REFERENCE_RESULTS = {"f0_rmse": 62.544, "energy_rmse": 4.926, "duration_mse": 0.2014}


@dataclass(frozen=True)
class DtwPath:
    pairs: np.ndarray   # (L, 2) int, (pred index, ref index)
    cost: float

    def __len__(self):
        return len(self.pairs)

    def validate(self, n_pred: int, n_ref: int) -> None:
        p = self.pairs
        if tuple(p[0]) != (0, 0) or tuple(p[-1]) != (n_pred - 1, n_ref - 1):
            raise ContractError("DTW path must run corner to corner")
        steps = np.diff(p, axis=0)
        ok = {(1, 0), (0, 1), (1, 1)}
        if not all(tuple(s) in ok for s in steps):
            raise ContractError("DTW path has an illegal step")


def _frames(x) -> np.ndarray:
    a = x.frames if isinstance(x, MelSpectrogram) else np.asarray(x)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 1:
        raise InvalidInputError("DTW needs non-empty sequences")
    return a


def local_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances; exactly symmetric under swapping arguments."""
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def dtw_align(pred_mel, ref_mel) -> DtwPath:
    """Minimal-cost monotone alignment under per-frame Euclidean distance.

    Steps are (1,1), (0,1) and (1,0). Ties resolve to the diagonal first, then
    to advancing the reference only.
    """
    a, b = _frames(pred_mel), _frames(ref_mel)
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    c = local_costs(a, b)
    n, m = c.shape
    D = np.full((n, m), np.inf)
    D[0, 0] = c[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = math.inf
            if i and j:
                best = D[i - 1, j - 1]
            if j and D[i, j - 1] < best:
                best = D[i, j - 1]
            if i and D[i - 1, j] < best:
                best = D[i - 1, j]
            D[i, j] = c[i, j] + best
    i, j = n - 1, m - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        cands = []
        if i and j:
            cands.append((D[i - 1, j - 1], i - 1, j - 1))
        if j:
            cands.append((D[i, j - 1], i, j - 1))
        if i:
            cands.append((D[i - 1, j], i - 1, j))
        # min() keeps the first of equal keys, which encodes the tie order
        _, i, j = min(cands, key=lambda t: t[0])
        path.append((i, j))
    return DtwPath(np.array(path[::-1], dtype=np.int64), float(D[n - 1, m - 1]))


def warped_rmse(pred_seq, ref_seq, path: DtwPath, skip_unvoiced: bool = False) -> float | None:
    """RMSE over DTW-paired frames; ``None`` when every pair was skipped.

    With ``skip_unvoiced`` only pairs where both frames are voiced (non-zero)
    are compared.
    """
    p = np.asarray(pred_seq, dtype=np.float64)
    r = np.asarray(ref_seq, dtype=np.float64)
    ii, jj = path.pairs[:, 0], path.pairs[:, 1]
    if ii.max() >= len(p) or jj.max() >= len(r):
        raise ContractError("sequence shorter than the DTW path")
    x, y = p[ii], r[jj]
    if skip_unvoiced:
        keep = (x > 0) & (y > 0)
        x, y = x[keep], y[keep]
    if len(x) == 0:
        return None
    return float(np.sqrt(np.mean((x - y) ** 2)))


def duration_mse(pred_durations, ref_durations) -> float:
    p = np.asarray(pred_durations, dtype=np.float64)
    r = np.asarray(ref_durations, dtype=np.float64)
    if p.shape != r.shape:
        raise ContractError(f"duration sequences differ in length: {p.shape} vs {r.shape}")
    return float(np.mean((p - r) ** 2))


@dataclass
class UtteranceMetrics:
    id: str
    f0_rmse: float | None
    energy_rmse: float
    duration_mse: float
    n_pred_frames: int
    n_ref_frames: int


@dataclass
class EvalReport:
    mode: str
    utterances: list[UtteranceMetrics] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def _mean(self, key):
        vals = [getattr(u, key) for u in self.utterances if getattr(u, key) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def f0_rmse(self):
        return self._mean("f0_rmse")

    @property
    def energy_rmse(self):
        return self._mean("energy_rmse")

    @property
    def duration_mse(self):
        return self._mean("duration_mse")

    def to_dict(self) -> dict:
        return {
            "schema": "msstyle.eval/1",
            "mode": self.mode,
            "n_utterances": len(self.utterances),
            "partial": self.partial,
            "f0_rmse": self.f0_rmse,
            "energy_rmse": self.energy_rmse,
            "duration_mse": self.duration_mse,
            "utterances": [asdict(u) for u in self.utterances],
            "failures": dict(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        rows = [("utterance", "F0 RMSE (Hz)", "energy RMSE", "duration MSE")]
        rows += [(u.id, fmt(u.f0_rmse), fmt(u.energy_rmse), fmt(u.duration_mse)) for u in self.utterances]
        rows.append(("mean", fmt(self.f0_rmse), fmt(self.energy_rmse), fmt(self.duration_mse)))
        widths = [max(len(r[k]) for r in rows) for k in range(4)]
        lines = ["  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        for uid, err in self.failures.items():
            lines.append(f"FAILED {uid}: {err}")
        return "\n".join(lines)


REPORT_KEYS = {"schema", "mode", "n_utterances", "partial", "f0_rmse", "energy_rmse", "duration_mse",
               "utterances", "failures"}


def validate_report(obj: dict) -> None:
    """Check a parsed report against the documented schema."""
    if set(obj) != REPORT_KEYS or obj["schema"] != "msstyle.eval/1":
        raise ContractError("report keys do not match the msstyle.eval/1 schema")
    if obj["n_utterances"] != len(obj["utterances"]):
        raise ContractError("n_utterances disagrees with the per-utterance list")
    for key in ("f0_rmse", "energy_rmse", "duration_mse"):
        v = obj[key]
        if v is not None and not (math.isfinite(v) and v >= 0):
            raise ContractError(f"{key} must be finite and >= 0")


def _utterance_metrics(utt: Utterance, pred_mel: np.ndarray, pred_f0: np.ndarray, pred_dur) -> UtteranceMetrics:
    ref_mel = utt.mel.frames
    path = dtw_align(pred_mel, ref_mel)
    f0 = warped_rmse(pred_f0, utt.pitch, path, skip_unvoiced=True)
    energy = warped_rmse(frame_energy(pred_mel), frame_energy(ref_mel), path)
    dur = duration_mse(pred_dur, utt.alignment.phoneme_durations)
    return UtteranceMetrics(utt.id, f0, energy, dur, len(pred_mel), len(ref_mel))


def evaluate_corpus(model, corpus: Sequence[Utterance], mode: str = "predicted",
                    featurizer: Featurizer | None = None) -> EvalReport:
    """Evaluate every utterance of a split.

    ``mode="predicted"`` synthesises with predictor styles and free-running
    variance predictions; ``mode="ground_truth"`` scores the references
    against themselves (a plumbing check that must give exact zeros).
    Per-utterance failures are recorded and excluded from the means.
    """
    if not corpus:
        raise InvalidInputError("evaluation split is empty")
    if mode not in ("predicted", "ground_truth"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    report = EvalReport(mode)
    dataset = None
    if mode == "predicted":
        featurizer = featurizer or Featurizer(model.config, model.inventory, model.stats)
        dataset = WindowDataset(corpus, featurizer)
        model.eval()
    for i, utt in enumerate(corpus):
        try:
            if mode == "ground_truth":
                m = _utterance_metrics(utt, utt.mel.frames, utt.pitch, utt.alignment.phoneme_durations)
            else:
                m = _predicted_metrics(model, dataset, i, utt)
        except (MsStyleError, ValueError, RuntimeError) as e:
            report.failures[utt.id] = f"{type(e).__name__}: {e}"
            continue
        report.utterances.append(m)
    return report


def _predicted_metrics(model, dataset: WindowDataset, i: int, utt: Utterance) -> UtteranceMetrics:
    batch = dataset.batch([i])
    with torch.no_grad():
        out = model.synthesize(batch, "predictor")
    n = int(out.frame_len[0])
    mel = out.mel[0, :n].numpy()
    if not np.all(np.isfinite(mel)):
        raise ContractError("synthesised mel is not finite")
    dur = out.durations[0, : int(batch.phone_len[0])].numpy()
    st = model.stats
    phone_f0 = out.pitch_pred[0, : len(dur)].numpy() * st.pitch_std + st.pitch_mean
    f0 = expand_by_duration(phone_f0, dur)
    f0 = np.where(f0 >= VOICING_THRESHOLD_HZ, f0, 0.0)
    return _utterance_metrics(utt, mel, f0, dur)
