"""Three-stage training loop with freezing, distillation, checkpoints and metrics.

Stage 1 trains the extractor levels one after another (global, sentence,
subword) jointly with the acoustic model, synthesising from extractor styles.
Stage 2 freezes everything but the predictor and regresses it onto the
extractor's styles. Stage 3 fine-tunes acoustic model and predictor together
at a reduced learning rate, with the mel loss conditioned on predicted styles.

A single global step counter drives the learning rate across all stages.
Batch order is a pure function of ``(seed, stage, level, epoch)``, so a
resumed run sees exactly the batches the uninterrupted run would have.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from msstyle.acoustic import acoustic_losses
from msstyle.batch import FeatureStats, PhonemeInventory, WindowDataset
from msstyle.config import ModelConfig, TrainingSchedule, component_seed
from msstyle.errors import InvariantError, NumericFailure
from msstyle.model import MultiScaleTTS, build_model
from msstyle.predictor import combine_predicted
from msstyle.training.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from msstyle.training.schedule import GROUPS, FreezeMask, distillation_loss, group_of, lr_at

log = logging.getLogger(__name__)


@dataclass
class TrainerState:
    stage: int = 1
    level: int = 1          # extractor level within stage 1, 0 otherwise
    step: int = 0           # global optimisation steps completed
    stage_step: int = 0     # steps completed in the current phase
    records: int = 0        # metrics lines written so far

    @property
    def finished(self) -> bool:
        return self.stage > 3


def phase_plan(schedule: TrainingSchedule) -> list[tuple[int, int, int]]:
    """``(stage, level, n_steps)`` for every phase in order."""
    n1 = schedule.stage1_steps_per_level
    return [(1, 1, n1), (1, 2, n1), (1, 3, n1), (2, 0, schedule.stage2_steps), (3, 0, schedule.stage3_steps)]


def batch_indices(n_items: int, batch_size: int, seed: int, stage: int, level: int, stage_step: int) -> np.ndarray:
    """Stateless batch sampler: epoch-wise permutations, last partial batch dropped."""
    B = min(batch_size, n_items)
    per_epoch = n_items // B
    epoch, k = divmod(stage_step, per_epoch)
    perm = np.random.default_rng([seed, stage, level, epoch]).permutation(n_items)
    return perm[k * B:(k + 1) * B]


class TargetCache:
    """Frozen-extractor style targets, computed one window at a time.

    Each window is always encoded on its own, so a target is the same whether
    it comes from the cache or is recomputed, and batch composition cannot
    perturb it.
    """

    def __init__(self, extractor, dataset: WindowDataset, enabled: bool = True):
        self.extractor = extractor
        self.dataset = dataset
        self.enabled = enabled
        self._store: dict[int, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    def _compute(self, i: int):
        with torch.no_grad():
            out = self.extractor(self.dataset.batch([i]))
        n = int(out.subword_mask[0].sum())
        return out.S_g[0], out.S_s[0], out.S_w[0, :n]

    def window(self, i: int):
        if not self.enabled:
            return self._compute(i)
        hit = self._store.get(i)
        if hit is None:
            hit = self._store[i] = self._compute(i)
        return hit

    def targets(self, indices):
        rows = [self.window(int(i)) for i in indices]
        W = max(r[2].shape[0] for r in rows)
        S_w = rows[0][2].new_zeros(len(rows), W, rows[0][2].shape[1])
        for b, r in enumerate(rows):
            S_w[b, : r[2].shape[0]] = r[2]
        return torch.stack([r[0] for r in rows]), torch.stack([r[1] for r in rows]), S_w

    def clear(self):
        self._store.clear()


def _param_norms(model) -> dict[str, float]:
    sq = {g: 0.0 for g in GROUPS}
    for name, p in model.named_parameters():
        sq[group_of(name)] += float(p.detach().double().pow(2).sum())
    return {g: math.sqrt(v) for g, v in sq.items()}


class Trainer:
    """Owns the model, optimiser and step counters for one training run.

    Args:
        model: the full system.
        dataset: training windows (phoneme-level fields required).
        schedule: step counts and optimiser settings.
        work_dir: where stage checkpoints and the metrics log go; ``None``
            keeps everything in memory.
        cache_targets: cache frozen-extractor targets in stages 2 and 3.
        checkpoint_every: also write ``last.ckpt`` every this many steps.
    """

    def __init__(self, model: MultiScaleTTS, dataset: WindowDataset, schedule: TrainingSchedule,
                 work_dir=None, cache_targets: bool = True, checkpoint_every: int | None = None):
        self.model = model
        self.dataset = dataset
        self.schedule = schedule
        self.work_dir = Path(work_dir) if work_dir is not None else None
        self.checkpoint_every = checkpoint_every
        self.state = TrainerState()
        self.optimizer: torch.optim.Adam | None = None
        self._opt_phase = None
        self._trainable: list = []
        self.targets = TargetCache(model.extractor, dataset, enabled=cache_targets)
        self.history: list[dict] = []
        torch.manual_seed(component_seed(schedule.seed, "train"))

    # ------------------------------------------------------------------ io
    @property
    def metrics_path(self) -> Path | None:
        return self.work_dir / "metrics.jsonl" if self.work_dir else None

    def _emit(self, record: dict):
        self.history.append(record)
        self.state.records += 1
        if self.metrics_path:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def _truncate_metrics(self):
        """Drop log lines written after the checkpoint we resumed from."""
        path = self.metrics_path
        if not path or not path.exists():
            return
        keep = path.read_text(encoding="utf-8").splitlines()[: self.state.records]
        path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")

    # ---------------------------------------------------------- optimiser
    def _prepare_phase(self):
        st = self.state
        mask = FreezeMask.for_phase(st.stage, st.level)
        self._trainable = mask.apply(self.model)
        if self._opt_phase != (st.stage, st.level):
            s = self.schedule
            self.optimizer = torch.optim.Adam(
                [p for _, p in self._trainable], lr=0.0,
                betas=(s.adam_beta1, s.adam_beta2), eps=s.adam_epsilon,
            )
            self._opt_phase = (st.stage, st.level)
        return mask

    # --------------------------------------------------------------- steps
    def _losses(self, batch, indices) -> dict[str, torch.Tensor]:
        st, m = self.state, self.model
        if st.stage == 1:
            out = m.synthesize(batch, "extractor", teacher_force=True, levels=st.level)
            return acoustic_losses(out, batch.mel, batch.frame_mask, batch.durations, batch.pitch,
                                   batch.energy, batch.phone_mask)
        pred = m.predictor(batch)
        distill = distillation_loss(self.targets.targets(indices), pred, batch.subword_mask)
        if st.stage == 2:
            return {"distill": distill}
        out = m.acoustic(batch.phonemes, batch.phone_mask, batch.subword_of, combine_predicted(pred),
                         batch.durations, batch.pitch, batch.energy)
        losses = acoustic_losses(out, batch.mel, batch.frame_mask, batch.durations, batch.pitch,
                                 batch.energy, batch.phone_mask)
        losses["distill"] = distill
        return losses

    def train_step(self) -> dict:
        st, s = self.state, self.schedule
        idx = batch_indices(len(self.dataset), s.batch_size, s.seed, st.stage, st.level, st.stage_step)
        batch = self.dataset.batch(idx)
        lr = lr_at(st.step + 1, s, self.model.config.d_model, st.stage)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        losses = self._losses(batch, idx)
        total = sum(losses.values())
        if not torch.isfinite(total):
            self._numeric_failure(batch, losses)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_([p for _, p in self._trainable], s.grad_clip)
        self.optimizer.step()
        st.step += 1
        st.stage_step += 1
        rec = {"step": st.step, "stage": st.stage, "level": st.level, "lr": lr,
               "loss": {k: float(v.detach()) for k, v in losses.items()}, "total": float(total.detach())}
        self._emit(rec)
        return rec

    def _numeric_failure(self, batch, losses):
        diag = {
            "step": self.state.step + 1, "stage": self.state.stage, "level": self.state.level,
            "batch_ids": list(batch.ids), "losses": {k: float(v.detach()) for k, v in losses.items()},
            "param_norms": _param_norms(self.model),
        }
        if self.work_dir:
            self.work_dir.mkdir(parents=True, exist_ok=True)
            (self.work_dir / "numeric_failure.json").write_text(json.dumps(diag, indent=2), encoding="utf-8")
        raise NumericFailure(f"non-finite loss at step {diag['step']} (stage {diag['stage']})", diag)

    # -------------------------------------------------------------- probes
    def probe(self) -> float:
        """Loss of the current phase over the whole training set, no dropout, no update.

        Stage 1 level k: teacher-forced mel L1 with extractor styles of levels 1..k.
        Stage 2: distillation loss. Stage 3: mel L1 with predicted styles.
        """
        st, m = self.state, self.model
        m.eval()
        B = self.schedule.batch_size
        total, weight = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(self.dataset), B):
                idx = np.arange(start, min(start + B, len(self.dataset)))
                batch = self.dataset.batch(idx)
                if st.stage == 2:
                    pred = m.predictor(batch)
                    value = distillation_loss(self.targets.targets(idx), pred, batch.subword_mask)
                else:
                    source = "extractor" if st.stage == 1 else "predictor"
                    out = m.synthesize(batch, source, teacher_force=True, levels=st.level or 3)
                    value = acoustic_losses(out, batch.mel, batch.frame_mask, batch.durations, batch.pitch,
                                            batch.energy, batch.phone_mask)["mel"]
                total += float(value) * len(idx)
                weight += len(idx)
        return total / weight

    # ---------------------------------------------------------------- runs
    def run(self, stages=(1, 2, 3), max_steps: int | None = None) -> TrainerState:
        """Train through the requested stages from the current state.

        ``max_steps`` stops once the global step counter reaches that value
        (writing ``last.ckpt`` when a work dir is set), which is how an
        interrupted run is simulated.
        """
        plan = phase_plan(self.schedule)
        st = self.state
        while not st.finished and st.stage in stages:
            n_steps = next(n for s, l, n in plan if (s, l) == (st.stage, st.level))
            self._prepare_phase()
            if st.stage_step == 0:
                if self._stop(max_steps):
                    return st
                self._emit({"step": st.step, "stage": st.stage, "level": st.level, "probe": "start",
                            "value": self.probe()})
            while st.stage_step < n_steps:
                if self._stop(max_steps):
                    return st
                self.train_step()
                if self.checkpoint_every and self.work_dir and st.step % self.checkpoint_every == 0:
                    self.save(self.work_dir / "last.ckpt")
            self._emit({"step": st.step, "stage": st.stage, "level": st.level, "probe": "end",
                        "value": self.probe()})
            self._advance()
        return st

    def _stop(self, max_steps) -> bool:
        if max_steps is None or self.state.step < max_steps:
            return False
        if self.work_dir:
            self.save(self.work_dir / "last.ckpt")
        return True

    def _advance(self):
        st = self.state
        done_stage = st.stage
        if st.stage == 1 and st.level < 3:
            st.level += 1
        else:
            st.stage, st.level = st.stage + 1, 0
        st.stage_step = 0
        self.optimizer, self._opt_phase = None, None
        if st.stage != done_stage:
            log.info("stage %d finished at step %d", done_stage, st.step)
            if self.work_dir:
                self.save(self.work_dir / f"stage{done_stage}.ckpt")

    # --------------------------------------------------------- checkpoints
    def save(self, path) -> None:
        m = self.model
        ckpt = Checkpoint()
        for name, t in m.state_dict().items():
            ckpt.arrays[f"model.{name}"] = t.detach().cpu().numpy()
        if self.optimizer is not None:
            params = dict(self._trainable)
            names = {id(p): n for n, p in params.items()}
            for p, state in self.optimizer.state.items():
                for k, v in state.items():
                    ckpt.arrays[f"optim.{names[id(p)]}.{k}"] = v.detach().cpu().numpy()
        ckpt.arrays["rng.torch"] = torch.get_rng_state().numpy()
        ckpt.meta["model_config"] = m.config.to_dict()
        ckpt.meta["inventory"] = {"symbols": list(m.inventory.symbols)}
        ckpt.meta["feature_stats"] = m.stats.to_dict()
        ckpt.meta["schedule"] = self.schedule.to_dict()
        ckpt.meta["trainer"] = {**asdict(self.state), "optimizer_phase": list(self._opt_phase or [])}
        ckpt.meta["model_seed"] = {"seed": m.seed}
        write_checkpoint(path, ckpt)

    @classmethod
    def resume(cls, path, dataset: WindowDataset, schedule: TrainingSchedule | None = None, **kwargs) -> "Trainer":
        """Rebuild model, optimiser, counters and RNG from a checkpoint."""
        ckpt = read_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        schedule = schedule or TrainingSchedule.from_dict(ckpt.meta["schedule"])
        trainer = cls(model, dataset, schedule, **kwargs)
        tstate = dict(ckpt.meta["trainer"])
        opt_phase = tuple(tstate.pop("optimizer_phase"))
        trainer.state = TrainerState(**tstate)
        if opt_phase:
            if opt_phase != (trainer.state.stage, trainer.state.level):
                raise InvariantError("checkpoint optimiser state belongs to a different phase")
            trainer._prepare_phase()
            for name, p in trainer._trainable:
                keys = [k for k in ("step", "exp_avg", "exp_avg_sq") if f"optim.{name}.{k}" in ckpt.arrays]
                if keys:
                    trainer.optimizer.state[p] = {k: torch.from_numpy(ckpt.arrays[f"optim.{name}.{k}"]) for k in keys}
        torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng.torch"]))
        trainer._truncate_metrics()
        return trainer


def model_from_checkpoint(ckpt) -> MultiScaleTTS:
    """Rebuild a :class:`MultiScaleTTS` from a checkpoint (path or loaded container)."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = read_checkpoint(ckpt)
    config = ModelConfig.from_dict(ckpt.meta["model_config"])
    inventory = PhonemeInventory(tuple(ckpt.meta["inventory"]["symbols"]))
    stats = FeatureStats.from_dict(ckpt.meta["feature_stats"])
    model = build_model(config, inventory, stats, seed=ckpt.meta.get("model_seed", {}).get("seed") or 0)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in ckpt.arrays.items() if k.startswith("model.")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise InvariantError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=False)
    return model

