"""Layer transfer from a cloud guide model to a local agent.

The guide is copied, its front feature-extraction layers are frozen, and the
remaining head is fine-tuned on local demonstrations. compare_training runs
the transferred arm against a from-scratch arm under identical data order so
the curves differ only in initialization and frozen mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imitation import DemonstrationSet, EpochStats, fit_model
from .nn import PolicyModel, TrainConfig, init_model


@dataclass(frozen=True)
class TransferPlan:
    """How to split a guide: layers [0, split_index) freeze, the rest train."""

    split_index: int
    head_init: str = "keep_guide"  # or "reinitialize"
    lr_scale: float = 1.0
    head_seed: int = 0

    def __post_init__(self):
        if self.head_init not in ("keep_guide", "reinitialize"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")


def transfer_init(guide: PolicyModel, plan: TransferPlan) -> PolicyModel:
    """Copy the guide with its feature extractor frozen.

    Head layers are kept or freshly re-initialized per the plan. The copy
    starts at version 0 with the guide's version recorded as lineage.
    """
    if not 0 < plan.split_index < guide.n_layers:
        raise ValueError(f"split_index must be in (0, {guide.n_layers}), "
                         f"got {plan.split_index}")
    model = guide.copy()
    model.frozen = [k < plan.split_index for k in range(model.n_layers)]
    if plan.head_init == "reinitialize":
        fresh = init_model(model.spec, plan.head_seed)
        for k in range(plan.split_index, model.n_layers):
            model.weights[k] = fresh.weights[k]
            model.biases[k] = fresh.biases[k]
    model.version = 0
    model.source_version = guide.version
    return model


def fine_tune(model: PolicyModel, data: DemonstrationSet, cfg: TrainConfig,
              lr_scale: float = 1.0) -> tuple[PolicyModel, list[EpochStats]]:
    """Train only the unfrozen head on local demonstrations.

    Frozen layers are bit-identical before and after; requires at least one
    frozen and one trainable layer.
    """
    if not any(model.frozen):
        raise ValueError("model has no frozen layers; use train_bc instead")
    if all(model.frozen):
        raise ValueError("model is fully frozen; nothing to fine-tune")
    if model.modality is not None and model.modality != data.modality:
        raise ValueError(f"model is {model.modality.name.lower()}, dataset is "
                         f"{data.modality.name.lower()}")
    model, curve, _ = fit_model(model.copy(), data, cfg, lr_scale=lr_scale)
    return model, curve


@dataclass
class CurvePoint:
    seed: int
    arm: str  # "scratch" | "transferred"
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class ComparisonResult:
    """Paired learning curves plus per-seed and aggregate endpoints."""

    curves: list[CurvePoint]
    batch_digests: dict            # (seed, arm) -> batch-sequence digest
    epoch0_val: dict               # seed -> {"scratch": v, "transferred": v}
    final_val: dict                # seed -> {"scratch": v, "transferred": v}

    @property
    def mean_final(self) -> dict:
        out = {}
        for arm in ("scratch", "transferred"):
            out[arm] = float(np.mean([v[arm] for v in self.final_val.values()]))
        return out

    def head_start_wins(self) -> int:
        return sum(1 for v in self.epoch0_val.values()
                   if v["transferred"] < v["scratch"])


def compare_training(guide: PolicyModel, data: DemonstrationSet,
                     plan: TransferPlan, cfg: TrainConfig, seeds,
                     ) -> ComparisonResult:
    """Train scratch and transferred arms per seed under identical batches.

    Each seed controls both the scratch initialization and the shared batch
    shuffling, so the two arms of one seed consume identical batch sequences
    (asserted via the recorded digests).
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds for a comparison")
    curves: list[CurvePoint] = []
    digests, epoch0, final = {}, {}, {}
    for seed in seeds:
        run_cfg = TrainConfig(learning_rate=cfg.learning_rate,
                              weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                              batch_size=cfg.batch_size, seed=seed)
        scratch = init_model(guide.spec, seed)
        scratch, curve_s, dig_s = fit_model(scratch, data, run_cfg)
        transferred = transfer_init(guide, plan)
        transferred, curve_t, dig_t = fit_model(transferred, data, run_cfg,
                                                lr_scale=plan.lr_scale)
        if dig_s != dig_t:
            raise AssertionError("arms consumed different batch sequences")
        digests[(seed, "scratch")] = dig_s
        digests[(seed, "transferred")] = dig_t
        for arm, curve in (("scratch", curve_s), ("transferred", curve_t)):
            curves.extend(CurvePoint(seed, arm, c.epoch, c.train_mse, c.val_mse)
                          for c in curve)
        epoch0[seed] = {"scratch": curve_s[0].val_mse,
                        "transferred": curve_t[0].val_mse}
        final[seed] = {"scratch": curve_s[-1].val_mse,
                       "transferred": curve_t[-1].val_mse}
    return ComparisonResult(curves=curves, batch_digests=digests,
                            epoch0_val=epoch0, final_val=final)
