"""Cloud-side knowledge fusion.

The cloud holds an unlabeled bank of scenes, each captured simultaneously in
all three sensor modalities. Every fusion round it asks each registered
private model to label every scene through its own modality and takes the
median of the suggestions as the scene's pseudo-label, then per-modality
guide models are trained on those labels with L2 regularization.

The cloud never sees demonstrations: fusion consumes only uploaded
parameters and the cloud's own scene bank.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import world as sim
from .imitation import DemonstrationSet, EpochStats, fit_model
from .nn import (
    FormatError,
    PolicyModel,
    TrainConfig,
    forward,
    init_model,
)
from .obs import GRID_CELLS, GRID_SIZE, ModalityId, Observation

BANK_MAGIC = b"FILS"
BANK_FORMAT_VERSION = 1


class DataError(ValueError):
    """Scene/label/model bookkeeping mismatch."""


class StateError(RuntimeError):
    """Operation requires cloud state that is not present yet."""


@dataclass(frozen=True, eq=False)
class SceneRecord:
    """One scene rendered in every modality from the identical world state."""

    scene_id: int
    views: dict
    seed: int | None = None

    def __post_init__(self):
        missing = [m.name.lower() for m in ModalityId if m not in self.views]
        if missing:
            raise DataError(f"scene {self.scene_id} missing views: {missing}")


@dataclass
class SceneBank:
    records: list

    @property
    def M(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return self.M

    def __post_init__(self):
        ids = [r.scene_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("scene ids must be unique")

    def views_matrix(self, modality: ModalityId) -> np.ndarray:
        """(M, 256) float32 matrix of one modality across the bank."""
        return np.stack([r.views[modality].flat() for r in self.records])


@dataclass(frozen=True)
class PseudoLabel:
    scene_id: int
    label: float
    contributors: tuple  # ((robot_id, model version), ...)
    round: int = 0


@dataclass(frozen=True)
class RegisteredModel:
    robot_id: str
    model: PolicyModel
    modality: ModalityId
    version: int
    round: int


class ModelRegistry:
    """At most one model per robot; versions must be monotone per robot."""

    def __init__(self):
        self._entries: dict[str, RegisteredModel] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, robot_id: str) -> bool:
        return robot_id in self._entries

    def get(self, robot_id: str) -> RegisteredModel | None:
        return self._entries.get(robot_id)

    def register(self, robot_id: str, model: PolicyModel, round: int = 0
                 ) -> RegisteredModel:
        if model.modality is None:
            raise DataError(f"model from {robot_id!r} carries no modality tag")
        prev = self._entries.get(robot_id)
        if prev is not None and model.version < prev.version:
            raise DataError(
                f"robot {robot_id!r} version must be monotone: "
                f"{model.version} < {prev.version}")
        entry = RegisteredModel(robot_id=robot_id, model=model,
                                modality=model.modality,
                                version=model.version, round=round)
        self._entries[robot_id] = entry
        return entry

    def snapshot(self) -> list[RegisteredModel]:
        """Entries ordered by robot id, for deterministic iteration."""
        return [self._entries[k] for k in sorted(self._entries)]


def median(values) -> float:
    """Middle element for odd counts; mean of the two middle for even."""
    ordered = sorted(float(v) for v in values)
    if not ordered:
        raise ValueError("median of empty sequence")
    n = len(ordered)
    mid = n // 2
    if n % 2 == 1:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


def mean(values) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("mean of empty sequence")
    return sum(vals) / len(vals)


AGGREGATORS = {"median": median, "mean": mean}


def build_scene_bank(seeds, scenes_per_seed: int, stride: int = 4,
                     n_turns: int = 4, n_obstacles: int = 3) -> SceneBank:
    """Sample world states along expert rollouts and render all modalities.

    Every ``stride`` expert steps one SceneRecord captures the three views of
    the identical world state. Deterministic per seeds.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    if scenes_per_seed < 1 or stride < 1:
        raise ValueError("scenes_per_seed and stride must be >= 1")
    records = []
    scene_id = 0
    for seed in seeds:
        w = sim.generate_track(seed, n_turns=n_turns, n_obstacles=n_obstacles)
        for _ in range(scenes_per_seed):
            views = {m: sim.render(w, m) for m in ModalityId}
            records.append(SceneRecord(scene_id=scene_id, views=views,
                                       seed=seed))
            scene_id += 1
            for _ in range(stride):
                w = sim.step(w, sim.expert_policy(w))
    return SceneBank(records=records)


def check_scene_consistency(record: SceneRecord) -> bool:
    """True when all three views agree on the undrivable-cell mask."""
    masks = [sim.blocked_mask(record.views[m]) for m in ModalityId]
    return bool(np.array_equal(masks[0], masks[1])
                and np.array_equal(masks[0], masks[2]))


def label_scene(registry: ModelRegistry, scene: SceneRecord,
                aggregator="median", round: int = 0) -> PseudoLabel:
    """Aggregate every registered model's suggestion for one scene."""
    if len(registry) == 0:
        raise StateError("no private models registered")
    agg = AGGREGATORS[aggregator] if isinstance(aggregator, str) else aggregator
    outputs, contributors = [], []
    for entry in registry.snapshot():
        if entry.modality not in scene.views:
            raise DataError(f"scene {scene.scene_id} has no "
                            f"{entry.modality.name.lower()} view required by "
                            f"robot {entry.robot_id!r}")
        outputs.append(forward(entry.model, scene.views[entry.modality]))
        contributors.append((entry.robot_id, entry.version))
    return PseudoLabel(scene_id=scene.scene_id, label=agg(outputs),
                       contributors=tuple(contributors), round=round)


def fuse_round(registry: ModelRegistry, bank: SceneBank, t: int = 0,
               aggregator="median") -> list[PseudoLabel]:
    """One fusion pass: a fresh pseudo-label for every scene in the bank.

    Labels from prior rounds are superseded wholesale; the result is
    deterministic and independent of registry insertion order.
    """
    if len(registry) == 0:
        raise StateError("no private models registered")
    if bank.M == 0:
        raise StateError("scene bank is empty")
    agg = AGGREGATORS[aggregator] if isinstance(aggregator, str) else aggregator
    entries = registry.snapshot()
    # Batch each model over the whole bank; far faster than per-scene calls.
    from .nn import forward_batch
    suggestion_rows = []
    for entry in entries:
        x = bank.views_matrix(entry.modality).astype(np.float64)
        suggestion_rows.append(forward_batch(entry.model, x))
    suggestions = np.stack(suggestion_rows, axis=1)  # (M, n_models)
    contributors = tuple((e.robot_id, e.version) for e in entries)
    return [PseudoLabel(scene_id=rec.scene_id,
                        label=agg(suggestions[i]),
                        contributors=contributors, round=t)
            for i, rec in enumerate(bank.records)]


def _guide_seed(base_seed: int, modality: ModalityId, t: int) -> int:
    mix = np.random.SeedSequence([base_seed & 0x7FFFFFFF, int(modality), t])
    return int(mix.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def pseudo_labeled_dataset(modality: ModalityId, bank: SceneBank,
                           labels) -> DemonstrationSet:
    """Bank views of one modality paired with pseudo-labels, as a dataset."""
    by_id = {lab.scene_id: lab.label for lab in labels}
    missing = [r.scene_id for r in bank.records if r.scene_id not in by_id]
    if missing:
        raise DataError(f"labels missing for scenes {missing[:5]}"
                        f"{'...' if len(missing) > 5 else ''}")
    y = np.array([by_id[r.scene_id] for r in bank.records], dtype=np.float32)
    return DemonstrationSet(modality=modality,
                            observations=bank.views_matrix(modality),
                            labels=y)


def train_guide(modality: ModalityId, bank: SceneBank, labels, spec,
                cfg: TrainConfig) -> tuple[PolicyModel, list[EpochStats]]:
    """Train the per-modality guide model on pseudo-labels, fresh init.

    Requires L2 regularization (cfg.weight_decay > 0) and a label for every
    scene. The initialization seed is derived from (cfg.seed, modality,
    fusion round) so rounds are independent and reproducible.
    """
    if cfg.weight_decay <= 0:
        raise ValueError("guide training requires weight_decay > 0")
    labels = list(labels)
    if not labels:
        raise DataError("no pseudo-labels supplied")
    t = labels[0].round
    data = pseudo_labeled_dataset(modality, bank, labels)
    model = init_model(spec, _guide_seed(cfg.seed, modality, t))
    model, curve, _ = fit_model(model, data, cfg)
    model.modality = modality
    return model, curve


def save_scene_bank(path, bank: SceneBank) -> None:
    """Write the bank format (magic ``FILS``): per record the scene id and
    the three 256-float grids in modality order occupancy, distance, semantic."""
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<HI", BANK_FORMAT_VERSION, bank.M))
        for rec in bank.records:
            fh.write(struct.pack("<I", rec.scene_id))
            for m in ModalityId:
                fh.write(np.ascontiguousarray(rec.views[m].grid,
                                              dtype="<f4").tobytes())


def load_scene_bank(path) -> SceneBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise FormatError("bank file too short", len(blob))
    if blob[:4] != BANK_MAGIC:
        raise FormatError(f"bad bank magic {blob[:4]!r}", 0)
    version, count = struct.unpack("<HI", blob[4:10])
    if version != BANK_FORMAT_VERSION:
        raise FormatError(f"unsupported bank version {version}", 4)
    rec_size = 4 + 3 * GRID_CELLS * 4
    expected = 10 + count * rec_size
    if len(blob) != expected:
        raise FormatError(f"bank length {len(blob)} != expected {expected}",
                          min(len(blob), expected))
    records = []
    off = 10
    for _ in range(count):
        (scene_id,) = struct.unpack_from("<I", blob, off)
        off += 4
        views = {}
        for m in ModalityId:
            grid = np.frombuffer(blob, dtype="<f4", count=GRID_CELLS,
                                 offset=off).reshape(GRID_SIZE, GRID_SIZE)
            views[m] = Observation(modality=m, grid=grid.copy())
            off += GRID_CELLS * 4
        records.append(SceneRecord(scene_id=scene_id, views=views))
    return SceneBank(records=records)
