"""Learning-rate schedule, freeze masks and the distillation objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from msstyle.config import TrainingSchedule
from msstyle.errors import ContractError
from msstyle.extractor import LEVELS

GROUPS = ("extractor.global", "extractor.sentence", "extractor.subword", "predictor", "acoustic")


def lr_at(step: int, schedule: TrainingSchedule, d_model: int = 256, stage: int = 1) -> float:
    """Transformer warm-up schedule; stage 3 is scaled by ``stage3_lr_scale``.

    ``lr = scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``
    """
    if step < 1:
        raise ContractError("learning-rate steps start at 1")
    w = schedule.warmup_steps
    lr = schedule.lr_scale * d_model ** -0.5 * min(step ** -0.5, step * w ** -1.5)
    return lr * schedule.stage3_lr_scale if stage == 3 else lr


def group_of(param_name: str) -> str:
    """Map a parameter name of :class:`~msstyle.model.MultiScaleTTS` to its freeze group."""
    if param_name.startswith("extractor.levels."):
        return "extractor." + param_name.split(".")[2]
    top = param_name.split(".", 1)[0]
    if top in ("predictor", "acoustic"):
        return top
    raise ContractError(f"parameter {param_name!r} belongs to no freeze group")


@dataclass(frozen=True)
class FreezeMask:
    """Which parameter groups are frozen; everything not listed as trainable is frozen."""

    trainable: frozenset

    @classmethod
    def for_phase(cls, stage: int, level: int = 0) -> "FreezeMask":
        if stage == 1:
            if not 1 <= level <= 3:
                raise ContractError("stage-1 level must be 1, 2 or 3")
            return cls(frozenset({f"extractor.{LEVELS[level - 1]}", "acoustic"}))
        if stage == 2:
            return cls(frozenset({"predictor"}))
        if stage == 3:
            return cls(frozenset({"predictor", "acoustic"}))
        raise ContractError(f"unknown stage {stage}")

    def frozen(self, group: str) -> bool:
        return group not in self.trainable

    def as_dict(self) -> dict[str, bool]:
        return {g: self.frozen(g) for g in GROUPS}

    def apply(self, model: nn.Module) -> list[tuple[str, nn.Parameter]]:
        """Set ``requires_grad`` accordingly and return the trainable ``(name, param)`` list."""
        out = []
        for name, p in model.named_parameters():
            p.requires_grad_(not self.frozen(group_of(name)))
            if p.requires_grad:
                out.append((name, p))
        return out


def _mse(a, b):
    return ((a - b) ** 2).mean(dim=-1)


def distillation_loss(extracted, predicted, subword_mask=None) -> torch.Tensor:
    """``MSE(S_g) + MSE(S_s) + mean_i MSE(S_w[i])``, averaged over the batch.

    Both arguments are ``(S_g, S_s, S_w)`` triples (or objects with those
    attributes) for one window (``(D,)``, ``(D,)``, ``(n, D)``) or a batch
    with a leading axis. ``subword_mask`` excludes padded subwords.
    """
    def triple(x):
        return (x.S_g, x.S_s, x.S_w) if hasattr(x, "S_g") else tuple(x)

    eg, es, ew = triple(extracted)
    pg, ps, pw = triple(predicted)
    if eg.shape != pg.shape or es.shape != ps.shape or ew.shape != pw.shape:
        raise ContractError(
            f"distillation shapes differ: {tuple(eg.shape)}/{tuple(es.shape)}/{tuple(ew.shape)} vs "
            f"{tuple(pg.shape)}/{tuple(ps.shape)}/{tuple(pw.shape)}"
        )
    if ew.shape[-2] < 1:
        raise ContractError("distillation needs at least one subword")
    if subword_mask is None:
        subword_mask = torch.ones(ew.shape[:-1], dtype=torch.bool)
    m = subword_mask.to(ew.dtype)
    word = (_mse(pw, ew) * m).sum(dim=-1) / m.sum(dim=-1)
    return (_mse(pg, eg) + _mse(ps, es) + word).mean()
