"""The full system: extractor (audio side), predictor (text side) and acoustic backbone."""

from __future__ import annotations

import torch
import torch.nn as nn

from msstyle.acoustic import AcousticModel, AcousticOutput
from msstyle.batch import Batch, FeatureStats, PhonemeInventory
from msstyle.config import ModelConfig, component_seed
from msstyle.extractor import MultiScaleExtractor
from msstyle.predictor import MultiScaleStylePredictor, combine_predicted


class MultiScaleTTS(nn.Module):
    """Container whose parameter names carry the ``extractor.``, ``predictor.`` and ``acoustic.`` prefixes."""

    def __init__(self, config: ModelConfig, inventory: PhonemeInventory, stats: FeatureStats, seed: int | None = None):
        super().__init__()
        self.config = config
        self.inventory = inventory
        self.stats = stats
        self.seed = seed
        if seed is None:
            self.extractor = MultiScaleExtractor(config)
            self.predictor = MultiScaleStylePredictor(config)
            self.acoustic = AcousticModel(config, len(inventory), stats)
            return
        # each component draws its initial weights from its own stream, so
        # changing one component's size leaves the others' initialisation alone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(component_seed(seed, "extractor"))
            self.extractor = MultiScaleExtractor(config)
            torch.manual_seed(component_seed(seed, "predictor"))
            self.predictor = MultiScaleStylePredictor(config)
            torch.manual_seed(component_seed(seed, "acoustic"))
            self.acoustic = AcousticModel(config, len(inventory), stats)

    def synthesize(self, batch: Batch, source: str = "predictor", teacher_force: bool = False,
                   levels: int = 3) -> AcousticOutput:
        """Generate mels conditioned on extractor or predictor styles.

        With ``teacher_force`` the ground-truth durations, pitch and energy
        drive the variance adaptor, so output frame counts match the targets.
        """
        if source == "extractor":
            styles = self.extractor(batch, levels=levels).combined(levels)
        elif source == "predictor":
            styles = combine_predicted(self.predictor(batch))
        else:
            raise ValueError(f"unknown style source {source!r}")
        targets = (batch.durations, batch.pitch, batch.energy) if teacher_force else (None, None, None)
        return self.acoustic(batch.phonemes, batch.phone_mask, batch.subword_of, styles, *targets)


def build_model(config: ModelConfig, inventory: PhonemeInventory, stats: FeatureStats, seed: int) -> MultiScaleTTS:
    return MultiScaleTTS(config, inventory, stats, seed=seed)
